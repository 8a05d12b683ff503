//! Two-stage serving. Stage 1 runs the S-side once per request and caches
//! per-layer keys, values and outputs per user; stage 2 scores each
//! candidate's NS-tokens against that cache. A later request from the same
//! user reuses every cached row whose inputs are unchanged.

use std::hash::Hasher;
use std::num::NonZeroUsize;

use fnv::FnvHasher;
use lru::LruCache;
use serde::Serialize;

use crate::config::{AttentionKind, Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{CandidateRecord, Request};
use crate::numerics::{Matrix, Real};
use crate::stack::{schedule_for, OneTrans};

/// Cached S-side state of one layer. Positions are absolute S indices.
#[derive(Debug, Clone)]
pub struct CachedLayer<T: Real> {
    /// First S position among this layer's inputs.
    pub key_start: usize,
    /// Keys/values of input positions `[key_start, l_cached)`.
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    /// First S position this layer keeps.
    pub out_start: usize,
    /// Outputs for positions `[out_start, l_cached)`.
    pub outputs: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct UserEntry<T: Real> {
    pub request_id: String,
    pub l_cached: usize,
    pub x0_s: Matrix<T>,
    pub layers: Vec<CachedLayer<T>>,
    pub schedule_fingerprint: u64,
    pub params_fingerprint: u64,
}

/// Per-user S-side cache bounded by an LRU policy; eviction is a cold start.
#[derive(Debug)]
pub struct KVCacheStore<T: Real = f32> {
    entries: LruCache<String, UserEntry<T>>,
}

impl<T: Real> KVCacheStore<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        let cap = NonZeroUsize::new(capacity).ok_or_else(|| Error::config("cache capacity must be positive"))?;
        Ok(Self {
            entries: LruCache::new(cap),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, user_id: &str) -> Option<&UserEntry<T>> {
        self.entries.peek(user_id)
    }

    pub fn entry_mut(&mut self, user_id: &str) -> Option<&mut UserEntry<T>> {
        self.entries.peek_mut(user_id)
    }

    pub fn invalidate(&mut self, user_id: &str) {
        self.entries.pop(user_id);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// What stage 1 did for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage1Report {
    pub user_id: String,
    pub request_id: String,
    pub l_s: usize,
    /// New S-tokens relative to the cached prefix; `None` on a cold start.
    pub delta_l: Option<usize>,
    pub full_recompute: bool,
    pub reason: Option<String>,
    /// Per layer: rows whose keys/values were computed.
    pub kv_rows: Vec<usize>,
    /// Per layer: rows whose outputs were computed.
    pub output_rows: Vec<usize>,
}

/// Stage-1 work of a request and the per-candidate stage-2 work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionPlan {
    pub request_id: String,
    pub s_tokens: usize,
    pub delta_l: Option<usize>,
    pub candidates: usize,
}

fn fingerprint(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write_usize(p.len());
        h.write(p);
    }
    h.finish()
}

fn schedule_fingerprint(config: &ModelConfig) -> u64 {
    let rule = serde_json::to_vec(&config.schedule).expect("schedule serializes");
    fingerprint(&[&rule, &config.layers.to_le_bytes(), &config.l_ns().to_le_bytes()])
}

fn params_fingerprint<T: Real>(model: &OneTrans<T>) -> u64 {
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    fingerprint(&[&model.params_fingerprint().to_le_bytes(), &config])
}

fn check_servable(config: &ModelConfig) -> Result<()> {
    if config.attention == AttentionKind::Full {
        return Err(Error::config(
            "full attention lets S-tokens see NS-tokens, so S-side caching is unavailable",
        ));
    }
    if config.backbone != Backbone::OneTrans {
        return Err(Error::config("cached serving requires the OneTrans backbone"));
    }
    Ok(())
}

fn common_prefix<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> usize {
    (0..a.rows().min(b.rows()))
        .take_while(|&i| a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.bits() == y.bits()))
        .count()
}

/// Runs (or incrementally updates) the S-side of `request` and stores it.
pub fn stage1_s_side<T: Real>(model: &OneTrans<T>, store: &mut KVCacheStore<T>, request: &Request) -> Result<Stage1Report> {
    check_servable(&model.config)?;
    let (s_block, _) = model
        .tokenizer
        .build_s_block(&model.dense.tokenizer, &model.embeddings, request)?;
    let x0_s = s_block.tokens;
    let l_s = x0_s.rows();
    let schedule = schedule_for(&model.config, l_s)?;
    let schedule_fp = schedule_fingerprint(&model.config);
    let params_fp = params_fingerprint(model);

    let old = store.entries.pop(&request.user_id);
    let (old, reason) = match old {
        None => (None, Some("cold start".to_owned())),
        Some(e) if e.params_fingerprint != params_fp => (None, Some("parameters changed".to_owned())),
        Some(e) if e.schedule_fingerprint != schedule_fp => (None, Some("schedule changed".to_owned())),
        Some(e) if l_s < e.l_cached => (None, Some("history shrank".to_owned())),
        Some(e) => (Some(e), None),
    };
    if let Some(r) = &reason {
        log::debug!("stage 1 for user {}: full recompute ({r})", request.user_id);
    }
    let delta_l = old.as_ref().map(|e| l_s - e.l_cached);
    let old_l = old.as_ref().map_or(0, |e| e.l_cached);

    // S positions below `valid` have bit-identical inputs at the current layer.
    let mut valid = old.as_ref().map_or(0, |e| common_prefix(&e.x0_s, &x0_s));
    let mut x_in = x0_s.clone();
    let mut layers = Vec::with_capacity(model.dense.blocks.len());
    let mut kv_rows = Vec::new();
    let mut output_rows = Vec::new();
    for (n, block) in model.dense.blocks.iter().enumerate() {
        let key_start = l_s - schedule.s_rows(n);
        let out_start = l_s - schedule.s_rows(n + 1);
        let prev = old.as_ref().map(|e| &e.layers[n]);

        let kv_reuse_end = match prev {
            Some(p) if p.key_start <= key_start => valid.min(old_l).max(key_start),
            _ => key_start,
        };
        let (mut keys, mut values) = match prev {
            Some(p) if kv_reuse_end > key_start => (
                p.keys.slice_rows(key_start - p.key_start, kv_reuse_end - p.key_start),
                p.values.slice_rows(key_start - p.key_start, kv_reuse_end - p.key_start),
            ),
            _ => (Matrix::zeros(0, x_in.cols()), Matrix::zeros(0, x_in.cols())),
        };
        if kv_reuse_end < l_s {
            let fresh = x_in.slice_rows(kv_reuse_end - key_start, l_s - key_start);
            let (k, v) = block.keys_values(&fresh, fresh.rows())?;
            keys = Matrix::vstack(&[&keys, &k])?;
            values = Matrix::vstack(&[&values, &v])?;
        }
        kv_rows.push(l_s - kv_reuse_end);

        let same_window = prev.is_some_and(|p| p.key_start == key_start && p.out_start <= out_start);
        let out_reuse_end = if same_window { valid.min(old_l).max(out_start) } else { out_start };
        let mut outputs = match prev {
            Some(p) if out_reuse_end > out_start => p.outputs.slice_rows(out_start - p.out_start, out_reuse_end - p.out_start),
            _ => Matrix::zeros(0, x_in.cols()),
        };
        if out_reuse_end < l_s {
            let x_q = x_in.slice_rows(out_reuse_end - key_start, l_s - key_start);
            let limits: Vec<usize> = (out_reuse_end..l_s).map(|p| p - key_start + 1).collect();
            let y = block.forward_queries(&x_q, x_q.rows(), &keys, &values, &limits)?;
            outputs = Matrix::vstack(&[&outputs, &y])?;
        }
        output_rows.push(l_s - out_reuse_end);
        valid = if same_window { valid.min(old_l) } else { 0 };

        x_in = outputs.clone();
        layers.push(CachedLayer {
            key_start,
            keys,
            values,
            out_start,
            outputs,
        });
    }

    store.entries.put(
        request.user_id.clone(),
        UserEntry {
            request_id: request.request_id.clone(),
            l_cached: l_s,
            x0_s,
            layers,
            schedule_fingerprint: schedule_fp,
            params_fingerprint: params_fp,
        },
    );
    Ok(Stage1Report {
        user_id: request.user_id.clone(),
        request_id: request.request_id.clone(),
        l_s,
        delta_l,
        full_recompute: reason.is_some(),
        reason,
        kv_rows,
        output_rows,
    })
}

/// Scores one candidate against the stage-1 state of its request.
pub fn stage2_candidate<T: Real>(
    model: &OneTrans<T>,
    store: &KVCacheStore<T>,
    request: &Request,
    candidate: &CandidateRecord,
) -> Result<Vec<T>> {
    check_servable(&model.config)?;
    let entry = store
        .entries
        .peek(&request.user_id)
        .filter(|e| e.request_id == request.request_id && e.params_fingerprint == params_fingerprint(model))
        .ok_or_else(|| Error::MissingStageOne {
            user: request.user_id.clone(),
            request: request.request_id.clone(),
        })?;
    let (mut x, _) = model
        .tokenizer
        .build_ns_block(&model.dense.tokenizer, &model.embeddings, request, candidate)?;
    for (block, layer) in model.dense.blocks.iter().zip(&entry.layers) {
        let (k, v) = block.keys_values(&x, 0)?;
        let keys = Matrix::vstack(&[&layer.keys, &k])?;
        let values = Matrix::vstack(&[&layer.values, &v])?;
        let s = layer.keys.rows();
        let limits: Vec<usize> = (0..x.rows()).map(|i| s + i + 1).collect();
        x = block.forward_queries(&x, 0, &keys, &values, &limits)?;
    }
    model.logits_from_final(&x)
}

pub fn plan<T: Real>(store: &KVCacheStore<T>, request: &Request, s_tokens: usize) -> SessionPlan {
    SessionPlan {
        request_id: request.request_id.clone(),
        s_tokens,
        delta_l: store
            .entry(&request.user_id)
            .and_then(|e| s_tokens.checked_sub(e.l_cached)),
        candidates: request.candidates.len(),
    }
}

/// Stage 1 once, then stage 2 per candidate.
pub fn serve_request<T: Real>(
    model: &OneTrans<T>,
    store: &mut KVCacheStore<T>,
    request: &Request,
) -> Result<(Stage1Report, Vec<Vec<T>>)> {
    let report = stage1_s_side(model, store, request)?;
    let logits = request
        .candidates
        .iter()
        .map(|c| stage2_candidate(model, store, request, c))
        .collect::<Result<Vec<_>>>()?;
    Ok((report, logits))
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub request_id: String,
    pub tolerance: f64,
    /// Max |cached − monolithic| over tasks, per candidate.
    pub max_abs_diff: Vec<f64>,
    pub stage1: Stage1Report,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares two-stage cached logits with monolithic logits for every
/// candidate of `request`.
pub fn verify_equivalence<T: Real>(
    model: &OneTrans<T>,
    store: &mut KVCacheStore<T>,
    request: &Request,
    tolerance: f64,
) -> Result<EquivalenceReport> {
    let (stage1, cached) = serve_request(model, store, request)?;
    let mut diffs = Vec::with_capacity(cached.len());
    for (c, got) in request.candidates.iter().zip(&cached) {
        let want = model.forward(request, c)?;
        let diff = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN)).abs())
            .fold(0.0, |m: f64, d| if d.is_nan() { f64::INFINITY } else { m.max(d) });
        diffs.push(diff);
    }
    let pass = diffs.iter().all(|&d| d <= tolerance);
    Ok(EquivalenceReport {
        request_id: request.request_id.clone(),
        tolerance,
        max_abs_diff: diffs,
        stage1,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Fusion, ScheduleRule};
    use crate::features::{generate_synthetic, BehaviorType, Event, SynthConfig};
    use crate::numerics::FlopCounter;

    fn request(seed: u64) -> Request {
        let mut cfg = SynthConfig::small();
        cfg.sim_prob = 0.5;
        generate_synthetic(&cfg, seed).unwrap().next().unwrap()
    }

    fn with_new_events(r: &Request, n: usize, id: &str) -> Request {
        let mut next = r.clone();
        next.request_id = id.into();
        let click = next
            .sequences
            .iter_mut()
            .find(|s| s.type_tag == BehaviorType::Click)
            .unwrap();
        let last = click.events.last().and_then(|e| e.timestamp).unwrap_or(0);
        for i in 0..n {
            click.events.push(Event {
                item: format!("new_{i}"),
                category: "cat_1".into(),
                price_bucket: i as u32,
                timestamp: Some(last.max(r.ts) + 1 + i as i64),
            });
        }
        next.ts += n as i64 + 1;
        next
    }

    fn model(edit: impl FnOnce(&mut ModelConfig)) -> OneTrans<f32> {
        let mut c = ModelConfig::tiny();
        c.embedding.buckets = 256;
        edit(&mut c);
        OneTrans::new(c, 9).unwrap()
    }

    fn assert_matches_monolithic(m: &OneTrans<f32>, store: &KVCacheStore<f32>, r: &Request) {
        let entry = store.entry(&r.user_id).unwrap();
        let trace = m.forward_trace(r, &r.candidates[0]).unwrap();
        assert!(entry.x0_s.bit_eq(&trace.x0.s_tokens()));
        for (layer, t) in entry.layers.iter().zip(&trace.layers) {
            let s_out = t.output.rows() - m.config.l_ns();
            assert!(layer.keys.max_abs_diff(&t.keys.slice_rows(0, t.n_shared)) <= 1e-5);
            assert!(layer.values.max_abs_diff(&t.values.slice_rows(0, t.n_shared)) <= 1e-5);
            assert!(layer.outputs.max_abs_diff(&t.output.slice_rows(0, s_out)) <= 1e-5);
        }
    }

    #[test]
    fn cold_start_caches_every_s_position() {
        let m = model(|_| {});
        let mut store = KVCacheStore::new(4).unwrap();
        let r = request(1);
        let rep = stage1_s_side(&m, &mut store, &r).unwrap();
        assert!(rep.full_recompute);
        assert_eq!(store.entry(&r.user_id).unwrap().l_cached, rep.l_s);
        assert_matches_monolithic(&m, &store, &r);
    }

    #[test]
    fn repeated_history_computes_nothing_new() {
        let m = model(|_| {});
        let mut store = KVCacheStore::new(4).unwrap();
        let r = request(2);
        stage1_s_side(&m, &mut store, &r).unwrap();
        let again = with_new_events(&r, 0, "r2");
        let counter = FlopCounter::new();
        let rep = counter.measure(|| stage1_s_side(&m, &mut store, &again)).unwrap();
        assert_eq!(rep.delta_l, Some(0));
        assert!(rep.kv_rows.iter().chain(&rep.output_rows).all(|&n| n == 0));
        let f = counter.report();
        assert_eq!(f.attention + f.ffn, 0);
    }

    #[test]
    fn appended_events_match_full_recompute() {
        for schedule in [ScheduleRule::Linear, ScheduleRule::Off] {
            let m = model(|c| c.schedule = schedule.clone());
            let mut store = KVCacheStore::new(4).unwrap();
            let r = request(3);
            stage1_s_side(&m, &mut store, &r).unwrap();
            let next = with_new_events(&r, 3, "r2");
            let rep = stage1_s_side(&m, &mut store, &next).unwrap();
            assert_eq!(rep.delta_l, Some(3));
            assert!(!rep.full_recompute);
            assert_eq!(rep.kv_rows[0], 3);
            assert_matches_monolithic(&m, &store, &next);
        }
    }

    #[test]
    fn agnostic_fusion_reuses_the_unchanged_prefix() {
        let m = model(|c| c.tokenizer.fusion = Fusion::TsAgnostic);
        let mut store = KVCacheStore::new(4).unwrap();
        let r = request(4);
        stage1_s_side(&m, &mut store, &r).unwrap();
        let next = with_new_events(&r, 2, "r2");
        let rep = stage1_s_side(&m, &mut store, &next).unwrap();
        assert!(!rep.full_recompute);
        assert!(rep.kv_rows[0] < rep.l_s);
        assert_matches_monolithic(&m, &store, &next);
    }

    #[test]
    fn stage2_needs_stage1_for_the_same_request() {
        let m = model(|_| {});
        let mut store = KVCacheStore::new(4).unwrap();
        let r = request(5);
        assert!(matches!(
            stage2_candidate(&m, &store, &r, &r.candidates[0]),
            Err(Error::MissingStageOne { .. })
        ));
        stage1_s_side(&m, &mut store, &r).unwrap();
        let other = with_new_events(&r, 1, "r9");
        assert!(stage2_candidate(&m, &store, &other, &other.candidates[0]).is_err());
    }

    #[test]
    fn cached_logits_match_monolithic() {
        for fusion in [Fusion::TsAware, Fusion::TsAgnostic] {
            let m = model(|c| {
                c.tokenizer.fusion = fusion;
                c.tokenizer.sim_pooling = true;
            });
            let mut store = KVCacheStore::new(4).unwrap();
            for seed in 0..5 {
                let rep = verify_equivalence(&m, &mut store, &request(10 + seed), 1e-5).unwrap();
                assert!(rep.pass, "worst diff {}", rep.worst());
            }
        }
    }

    #[test]
    fn stale_params_force_full_recompute() {
        let mut m = model(|_| {});
        let mut store = KVCacheStore::new(4).unwrap();
        let r = request(6);
        stage1_s_side(&m, &mut store, &r).unwrap();
        m.bump_revision();
        let rep = verify_equivalence(&m, &mut store, &with_new_events(&r, 1, "r2"), 1e-5).unwrap();
        assert!(rep.stage1.full_recompute);
        assert_eq!(rep.stage1.reason.as_deref(), Some("parameters changed"));
        assert!(rep.pass);
    }

    #[test]
    fn full_attention_cannot_be_cached() {
        let m = model(|c| c.attention = AttentionKind::Full);
        let mut store = KVCacheStore::new(4).unwrap();
        assert!(matches!(stage1_s_side(&m, &mut store, &request(7)), Err(Error::Config(_))));
    }

    #[test]
    fn stage1_cost_is_independent_of_candidate_count() {
        let m = model(|_| {});
        let r = request(8);
        let mut one = r.clone();
        one.candidates.truncate(1);
        let measure = |req: &Request| {
            let mut store = KVCacheStore::new(4).unwrap();
            let s1 = FlopCounter::new();
            s1.measure(|| stage1_s_side(&m, &mut store, req)).unwrap();
            let s2 = FlopCounter::new();
            s2.measure(|| serve_request(&m, &mut KVCacheStore::new(4).unwrap(), req)).unwrap();
            (s1.report(), s2.report())
        };
        let (s1_one, total_one) = measure(&one);
        let (s1_all, total_all) = measure(&r);
        assert_eq!(s1_one, s1_all);
        let per_candidate = total_one.total() - s1_one.total();
        assert_eq!(total_all.total(), s1_all.total() + r.candidates.len() as u64 * per_candidate);
    }

    #[test]
    fn lru_eviction_is_a_cold_start() {
        let m = model(|_| {});
        let mut store = KVCacheStore::new(1).unwrap();
        let mut a = request(20);
        a.user_id = "a".into();
        let mut b = a.clone();
        b.user_id = "b".into();
        stage1_s_side(&m, &mut store, &a).unwrap();
        stage1_s_side(&m, &mut store, &b).unwrap();
        assert!(store.entry("a").is_none());
        let rep = stage1_s_side(&m, &mut store, &with_new_events(&a, 1, "r2")).unwrap();
        assert_eq!(rep.reason.as_deref(), Some("cold start"));
    }
}

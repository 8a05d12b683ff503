//! Unified tokenizer: behavior sequences become S-tokens, user/item/context
//! features become NS-tokens, and `X0 = [S-tokens ; NS-tokens]`.

use rand::Rng;

use crate::config::{Fusion, NsTokenizerKind, Projection, TokenizerConfig};
use crate::error::{Error, Result};
use crate::features::{BehaviorSequence, BehaviorType, CandidateRecord, Embeddings, Event, FeatureRef, Request};
use crate::nn::{Mlp, MlpCache};
use crate::numerics::flops::{self, Phase};
use crate::numerics::{Matrix, Real};
use crate::params::{impl_visit, SparseGrads};

/// Boundaries between behavior types; extra boundaries reuse the last row.
const SEP_ROWS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams<T: Real = f32> {
    /// One projection per behavior type, indexed by [`BehaviorType::index`].
    pub seq_proj: Vec<Mlp<T>>,
    /// One per group (group-wise) or a single projection (auto-split).
    pub ns_proj: Vec<Mlp<T>>,
    pub sep: Matrix<T>,
    pub type_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub sim_proj: Option<Mlp<T>>,
    pub null_token: Matrix<T>,
}

impl_visit!(TokenizerParams {
    seq_proj,
    ns_proj,
    sep,
    type_emb,
    pos_emb,
    sim_proj,
    null_token
});

/// Where an S-token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourcePos {
    /// `seq` indexes `Request::sequences`, `event` the kept (truncated) events.
    Event { seq: usize, event: usize },
    /// The k-th separator.
    Sep(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T: Real = f32> {
    /// `(L_S + L_NS) × d`; S-tokens first.
    pub tokens: Matrix<T>,
    pub l_s: usize,
    pub l_ns: usize,
    /// Behavior type of each S-token (`None` for separators).
    pub seq_type_ids: Vec<Option<BehaviorType>>,
    pub positions: Vec<SourcePos>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.l_s + self.l_ns
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn s_tokens(&self) -> Matrix<T> {
        self.tokens.slice_rows(0, self.l_s)
    }

    pub fn ns_tokens(&self) -> Matrix<T> {
        self.tokens.slice_rows(self.l_s, self.len())
    }
}

/// The candidate-independent S-token block of a request.
#[derive(Debug, Clone, PartialEq)]
pub struct SBlock<T: Real> {
    pub tokens: Matrix<T>,
    pub seq_type_ids: Vec<Option<BehaviorType>>,
    pub positions: Vec<SourcePos>,
}

/// A behavior sequence after its type-specific projection.
#[derive(Debug, Clone)]
pub struct ProjectedSeq<T: Real> {
    pub type_tag: BehaviorType,
    pub timestamps: Vec<Option<i64>>,
    pub tokens: Matrix<T>,
}

#[derive(Debug, Clone)]
struct EventsCache<T: Real> {
    mlp: Option<MlpCache<T>>,
    buckets: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct SBlockCache<T: Real> {
    seqs: Vec<(BehaviorType, EventsCache<T>)>,
    block: SBlock<T>,
}

#[derive(Debug, Clone)]
pub struct NsCache<T: Real> {
    projections: Vec<(MlpCache<T>, Vec<usize>)>,
    sim: Option<(EventsCache<T>, usize)>,
}

/// Tokenizer configuration resolved against the embedding tables.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    d: usize,
    emb_dim: usize,
    features: Vec<FeatureRef>,
    feature_tables: Vec<usize>,
    /// Indices into `features`, per group.
    groups: Vec<Vec<usize>>,
    event_tables: [usize; 3],
}

impl Tokenizer {
    pub fn new<T: Real>(cfg: &TokenizerConfig, d_model: usize, embeddings: &Embeddings<T>) -> Result<Self> {
        cfg.validate()?;
        let features = cfg.sorted_features()?;
        let feature_tables = features
            .iter()
            .map(|f| embeddings.id(f.table()))
            .collect::<Result<Vec<_>>>()?;
        let groups = match cfg.ns {
            NsTokenizerKind::Groupwise => cfg
                .groups
                .iter()
                .map(|g| {
                    g.iter()
                        .map(|name| {
                            features
                                .iter()
                                .position(|f| &f.qualified == name)
                                .ok_or_else(|| Error::config(format!("unknown feature `{name}`")))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
            NsTokenizerKind::Autosplit => vec![(0..features.len()).collect()],
        };
        let emb_dim = embeddings
            .tables()
            .first()
            .map(|t| t.dim())
            .ok_or_else(|| Error::config("no embedding tables"))?;
        Ok(Self {
            cfg: cfg.clone(),
            d: d_model,
            emb_dim,
            features,
            feature_tables,
            groups,
            event_tables: [
                embeddings.id("item")?,
                embeddings.id("cat")?,
                embeddings.id("price_bucket")?,
            ],
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn features(&self) -> &[FeatureRef] {
        &self.features
    }

    /// Width of one event embedding (item ⊕ category ⊕ price bucket).
    pub fn event_dim(&self) -> usize {
        3 * self.emb_dim
    }

    fn projection<T: Real>(&self, input: usize, output: usize, rng: &mut impl Rng) -> Mlp<T> {
        match self.cfg.projection {
            Projection::Mlp => Mlp::new(input, 2 * self.d, output, rng),
            Projection::Linear => Mlp::linear(input, output, rng),
        }
    }

    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> TokenizerParams<T> {
        let d = self.d;
        let seq_proj = BehaviorType::ALL
            .iter()
            .map(|_| self.projection(self.event_dim(), d, rng))
            .collect();
        let ns_proj = match self.cfg.ns {
            NsTokenizerKind::Groupwise => self
                .groups
                .iter()
                .map(|g| self.projection(g.len() * self.emb_dim, d, rng))
                .collect(),
            NsTokenizerKind::Autosplit => vec![self.projection(
                self.features.len() * self.emb_dim,
                self.cfg.feature_tokens() * d,
                rng,
            )],
        };
        let small = |rows: usize, rng: &mut dyn rand::RngCore| {
            Matrix::from_fn(rows, d, |_, _| T::from_f64_lossy(rng.gen_range(-0.1..0.1)))
        };
        let sep = small(SEP_ROWS, rng);
        let type_emb = small(BehaviorType::ALL.len(), rng);
        let pos_emb = if self.cfg.positional {
            small(self.cfg.max_positions, rng)
        } else {
            Matrix::zeros(0, d)
        };
        let (sim_proj, null_token) = if self.cfg.sim_pooling {
            (Some(self.projection(self.event_dim(), d, rng)), small(1, rng))
        } else {
            (None, Matrix::zeros(0, d))
        };
        TokenizerParams {
            seq_proj,
            ns_proj,
            sep,
            type_emb,
            pos_emb,
            sim_proj,
            null_token,
        }
    }

    fn event_embedding<T: Real>(&self, emb: &Embeddings<T>, e: &Event, out: &mut Vec<T>) -> [usize; 3] {
        let price = e.price_bucket.to_string();
        let keys = [e.item.as_str(), e.category.as_str(), price.as_str()];
        let mut buckets = [0; 3];
        for (k, (&tid, key)) in self.event_tables.iter().zip(keys).enumerate() {
            let t = emb.table(tid);
            buckets[k] = t.bucket(key);
            out.extend_from_slice(t.rows.row(buckets[k]));
        }
        buckets
    }

    fn project_events<T: Real>(
        &self,
        proj: &Mlp<T>,
        emb: &Embeddings<T>,
        events: &[Event],
    ) -> Result<(Matrix<T>, EventsCache<T>)> {
        if events.is_empty() {
            return Ok((
                Matrix::zeros(0, self.d),
                EventsCache {
                    mlp: None,
                    buckets: Vec::new(),
                },
            ));
        }
        let mut data = Vec::with_capacity(events.len() * self.event_dim());
        let buckets = events
            .iter()
            .map(|e| self.event_embedding(emb, e, &mut data))
            .collect();
        let x = Matrix::new(events.len(), self.event_dim(), data)?;
        let (y, cache) = proj.forward(&x)?;
        Ok((
            y,
            EventsCache {
                mlp: Some(cache),
                buckets,
            },
        ))
    }

    fn backward_events<T: Real>(
        &self,
        proj: &Mlp<T>,
        cache: &EventsCache<T>,
        dy: &Matrix<T>,
        grads: &mut Mlp<T>,
        sparse: &mut SparseGrads<T>,
    ) -> Result<()> {
        let Some(mlp_cache) = &cache.mlp else {
            return Ok(());
        };
        let dx = proj.backward(mlp_cache, dy, grads)?;
        let e = self.emb_dim;
        for (i, b) in cache.buckets.iter().enumerate() {
            let row = dx.row(i);
            for (k, &tid) in self.event_tables.iter().enumerate() {
                sparse.add(tid, b[k], &row[k * e..(k + 1) * e]);
            }
        }
        Ok(())
    }

    /// Projects the most recent `max_seq_len` events of one sequence to `d`.
    pub fn project_sequence<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        seq: &BehaviorSequence,
    ) -> Result<ProjectedSeq<T>> {
        let _p = flops::phase(Phase::Tokenizer);
        let events = seq.recent(self.cfg.max_seq_len);
        let (tokens, _) = self.project_events(&params.seq_proj[seq.type_tag.index()], emb, events)?;
        Ok(ProjectedSeq {
            type_tag: seq.type_tag,
            timestamps: events.iter().map(|e| e.timestamp).collect(),
            tokens,
        })
    }

    fn intent_position(&self, t: BehaviorType) -> usize {
        self.cfg
            .intent_order
            .iter()
            .position(|&x| x == t)
            .expect("intent_order validated as a permutation")
    }

    /// Interleaves every event by timestamp and adds its sequence-type
    /// embedding. Ties go to the higher-intent type, then input order.
    pub fn merge_timestamp_aware<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        seqs: &[ProjectedSeq<T>],
    ) -> Result<SBlock<T>> {
        let mut order = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            for (ei, ts) in s.timestamps.iter().enumerate() {
                let ts = ts.ok_or_else(|| {
                    Error::tokenizer(format!(
                        "{} event {ei} has no timestamp; use timestamp-agnostic fusion",
                        s.type_tag
                    ))
                })?;
                order.push((ts, self.intent_position(s.type_tag), si, ei));
            }
        }
        order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        let mut tokens = Matrix::zeros(0, self.d);
        let mut types = Vec::with_capacity(order.len());
        let mut positions = Vec::with_capacity(order.len());
        let mut row = vec![T::zero(); self.d];
        for &(_, _, si, ei) in &order {
            let t = seqs[si].type_tag;
            for ((r, &a), &b) in row.iter_mut().zip(seqs[si].tokens.row(ei)).zip(params.type_emb.row(t.index())) {
                *r = a + b;
            }
            tokens.push_row(&row);
            types.push(Some(t));
            positions.push(SourcePos::Event { seq: si, event: ei });
        }
        Ok(SBlock {
            tokens,
            seq_type_ids: types,
            positions,
        })
    }

    /// Concatenates sequences highest-intent first, optionally separated by
    /// learnable SEP tokens.
    pub fn merge_timestamp_agnostic<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        seqs: &[ProjectedSeq<T>],
        use_sep: bool,
    ) -> Result<SBlock<T>> {
        let mut idx: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].tokens.rows() > 0).collect();
        idx.sort_by_key(|&i| (self.intent_position(seqs[i].type_tag), i));
        let mut tokens = Matrix::zeros(0, self.d);
        let mut types = Vec::new();
        let mut positions = Vec::new();
        for (n, &si) in idx.iter().enumerate() {
            if use_sep && n > 0 {
                let k = n - 1;
                tokens.push_row(params.sep.row(k.min(params.sep.rows() - 1)));
                types.push(None);
                positions.push(SourcePos::Sep(k));
            }
            for ei in 0..seqs[si].tokens.rows() {
                tokens.push_row(seqs[si].tokens.row(ei));
                types.push(Some(seqs[si].type_tag));
                positions.push(SourcePos::Event { seq: si, event: ei });
            }
        }
        Ok(SBlock {
            tokens,
            seq_type_ids: types,
            positions,
        })
    }

    /// S-token block of a request; identical for every candidate.
    pub fn build_s_block<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
    ) -> Result<(SBlock<T>, SBlockCache<T>)> {
        let _p = flops::phase(Phase::Tokenizer);
        let mut projected = Vec::with_capacity(request.sequences.len());
        let mut caches = Vec::with_capacity(request.sequences.len());
        for seq in &request.sequences {
            let events = seq.recent(self.cfg.max_seq_len);
            let (tokens, cache) = self.project_events(&params.seq_proj[seq.type_tag.index()], emb, events)?;
            projected.push(ProjectedSeq {
                type_tag: seq.type_tag,
                timestamps: events.iter().map(|e| e.timestamp).collect(),
                tokens,
            });
            caches.push((seq.type_tag, cache));
        }
        let mut block = match self.cfg.fusion {
            Fusion::TsAware => self.merge_timestamp_aware(params, &projected)?,
            Fusion::TsAgnostic => self.merge_timestamp_agnostic(params, &projected, self.cfg.use_sep)?,
        };
        if self.cfg.positional {
            if block.tokens.rows() > params.pos_emb.rows() {
                return Err(Error::tokenizer(format!(
                    "{} S-tokens exceed max_positions {}",
                    block.tokens.rows(),
                    params.pos_emb.rows()
                )));
            }
            for i in 0..block.tokens.rows() {
                for (a, &p) in block.tokens.row_mut(i).iter_mut().zip(params.pos_emb.row(i)) {
                    *a += p;
                }
            }
        }
        let cache = SBlockCache {
            seqs: caches,
            block: block.clone(),
        };
        Ok((block, cache))
    }

    pub fn backward_s_block<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        cache: &SBlockCache<T>,
        d_tokens: &Matrix<T>,
        grads: &mut TokenizerParams<T>,
        sparse: &mut SparseGrads<T>,
    ) -> Result<()> {
        let _p = flops::phase(Phase::Tokenizer);
        let mut d_seq: Vec<Matrix<T>> = cache
            .seqs
            .iter()
            .map(|(_, c)| Matrix::zeros(c.buckets.len(), self.d))
            .collect();
        for (i, pos) in cache.block.positions.iter().enumerate() {
            let g = d_tokens.row(i);
            if self.cfg.positional {
                add_row(grads.pos_emb.row_mut(i), g);
            }
            match *pos {
                SourcePos::Sep(k) => {
                    let r = k.min(grads.sep.rows() - 1);
                    add_row(grads.sep.row_mut(r), g);
                }
                SourcePos::Event { seq, event } => {
                    add_row(d_seq[seq].row_mut(event), g);
                    if self.cfg.fusion == Fusion::TsAware {
                        let t = cache.seqs[seq].0.index();
                        add_row(grads.type_emb.row_mut(t), g);
                    }
                }
            }
        }
        for ((t, c), dy) in cache.seqs.iter().zip(&d_seq) {
            self.backward_events(&params.seq_proj[t.index()], c, dy, &mut grads.seq_proj[t.index()], sparse)?;
        }
        Ok(())
    }

    fn feature_embedding<T: Real>(
        &self,
        emb: &Embeddings<T>,
        feats: &[usize],
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<(Matrix<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(feats.len() * self.emb_dim);
        let mut buckets = Vec::with_capacity(feats.len());
        for &f in feats {
            let t = emb.table(self.feature_tables[f]);
            let b = t.bucket(&self.features[f].key(request, candidate));
            data.extend_from_slice(t.rows.row(b));
            buckets.push(b);
        }
        Ok((Matrix::new(1, data.len(), data)?, buckets))
    }

    /// `token_g = MLP_g(concat(embeddings of group g))`.
    pub fn tokenize_ns_groupwise<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<Matrix<T>> {
        if self.cfg.ns != NsTokenizerKind::Groupwise {
            return Err(Error::tokenizer("tokenizer is not configured group-wise"));
        }
        Ok(self.ns_features(params, emb, request, candidate)?.0)
    }

    /// `split(MLP(concat(all NS embeddings)), L_NS)` with features in
    /// lexicographic order.
    pub fn tokenize_ns_autosplit<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<Matrix<T>> {
        if self.cfg.ns != NsTokenizerKind::Autosplit {
            return Err(Error::tokenizer("tokenizer is not configured auto-split"));
        }
        Ok(self.ns_features(params, emb, request, candidate)?.0)
    }

    fn ns_features<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<(Matrix<T>, Vec<(MlpCache<T>, Vec<usize>)>)> {
        let mut tokens = Matrix::zeros(0, self.d);
        let mut caches = Vec::with_capacity(self.groups.len());
        for (g, feats) in self.groups.iter().enumerate() {
            let (x, buckets) = self.feature_embedding(emb, feats, request, candidate)?;
            let (y, cache) = params.ns_proj[g].forward(&x)?;
            if y.cols() % self.d != 0 {
                return Err(Error::config(format!(
                    "NS projection width {} is not a multiple of d = {}",
                    y.cols(),
                    self.d
                )));
            }
            let rows = y.len() / self.d;
            let split = y.reshape(rows, self.d)?;
            for r in 0..split.rows() {
                tokens.push_row(split.row(r));
            }
            caches.push((cache, buckets));
        }
        Ok((tokens, caches))
    }

    /// Mean of the projected candidate-specific events, or the learnable null
    /// token when the candidate has none.
    pub fn pool_candidate_sequence<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        seq: Option<&BehaviorSequence>,
    ) -> Result<Matrix<T>> {
        Ok(self.pool(params, emb, seq)?.0)
    }

    fn pool<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        seq: Option<&BehaviorSequence>,
    ) -> Result<(Matrix<T>, Option<(EventsCache<T>, usize)>)> {
        let proj = params
            .sim_proj
            .as_ref()
            .ok_or_else(|| Error::tokenizer("sim_pooling is disabled"))?;
        let events = seq.map_or(&[][..], |s| s.recent(self.cfg.max_seq_len));
        if events.is_empty() {
            return Ok((params.null_token.clone(), None));
        }
        let (tokens, cache) = self.project_events(proj, emb, events)?;
        let n = T::from_usize(tokens.rows()).expect("row count fits");
        let mut mean = Matrix::zeros(1, self.d);
        for i in 0..tokens.rows() {
            add_row(mean.row_mut(0), tokens.row(i));
        }
        mean.scale(T::one() / n);
        Ok((mean, Some((cache, tokens.rows()))))
    }

    /// NS-token block for one candidate.
    pub fn build_ns_block<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<(Matrix<T>, NsCache<T>)> {
        let _p = flops::phase(Phase::Tokenizer);
        let (mut tokens, projections) = self.ns_features(params, emb, request, candidate)?;
        let sim = if self.cfg.sim_pooling {
            let (pooled, cache) = self.pool(params, emb, candidate.sim_seq.as_ref())?;
            tokens.push_row(pooled.row(0));
            cache
        } else {
            None
        };
        debug_assert_eq!(tokens.rows(), self.cfg.l_ns);
        Ok((tokens, NsCache { projections, sim }))
    }

    pub fn backward_ns_block<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        cache: &NsCache<T>,
        d_tokens: &Matrix<T>,
        grads: &mut TokenizerParams<T>,
        sparse: &mut SparseGrads<T>,
    ) -> Result<()> {
        let _p = flops::phase(Phase::Tokenizer);
        let e = self.emb_dim;
        let mut row = 0;
        for (g, (mlp_cache, buckets)) in cache.projections.iter().enumerate() {
            let width = params.ns_proj[g].output_dim();
            let n = width / self.d;
            let dy = d_tokens.slice_rows(row, row + n).reshape(1, width)?;
            row += n;
            let dx = params.ns_proj[g].backward(mlp_cache, &dy, &mut grads.ns_proj[g])?;
            for (k, (&f, &b)) in self.groups[g].iter().zip(buckets).enumerate() {
                sparse.add(self.feature_tables[f], b, &dx.data()[k * e..(k + 1) * e]);
            }
        }
        if self.cfg.sim_pooling {
            let g = d_tokens.row(row);
            match &cache.sim {
                None => add_row(grads.null_token.row_mut(0), g),
                Some((events, n)) => {
                    let scale = T::one() / T::from_usize(*n).expect("row count fits");
                    let dy = Matrix::from_fn(*n, self.d, |_, j| g[j] * scale);
                    let proj = params.sim_proj.as_ref().expect("sim_pooling has a projection");
                    let gproj = grads.sim_proj.as_mut().expect("sim_pooling has a projection");
                    self.backward_events(proj, events, &dy, gproj, sparse)?;
                }
            }
        }
        Ok(())
    }

    /// `X0 = [S-tokens ; NS-tokens]`.
    pub fn build_x0<T: Real>(
        &self,
        params: &TokenizerParams<T>,
        emb: &Embeddings<T>,
        request: &Request,
        candidate: &CandidateRecord,
    ) -> Result<TokenSequence<T>> {
        let (s, _) = self.build_s_block(params, emb, request)?;
        let (ns, _) = self.build_ns_block(params, emb, request, candidate)?;
        Ok(TokenSequence {
            l_s: s.tokens.rows(),
            l_ns: ns.rows(),
            tokens: Matrix::vstack(&[&s.tokens, &ns])?,
            seq_type_ids: s.seq_type_ids,
            positions: s.positions,
        })
    }

    /// Multiply-adds the tokenizer spends on `events` sequence events, `sim`
    /// candidate-sequence events, and one NS projection pass.
    pub fn flops<T: Real>(&self, params: &TokenizerParams<T>, events: usize, sim: usize) -> u64 {
        let seq = params.seq_proj[0].flops(events);
        let ns: u64 = params.ns_proj.iter().map(|p| p.flops(1)).sum();
        let pooled = params.sim_proj.as_ref().map_or(0, |p| p.flops(sim));
        seq + ns + pooled
    }
}

fn add_row<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

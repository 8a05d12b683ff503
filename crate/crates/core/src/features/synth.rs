//! Synthetic impression logs with a planted sequence-feature interaction.
//!
//! Every user has a favorite category that dominates their purchase history.
//! A candidate is "matched" when its category equals the most frequent
//! category among the user's purchases, and
//!
//! ```text
//! P(click) = sigmoid(base_logit + signal_weight · matched + noise_std · N(0, 1))
//! P(conv | click) = sigmoid(conv_base_logit + conv_weight · matched)
//! ```
//!
//! so ranking well requires relating the candidate to the behavior history.
//! With `deep_signal` the favorite category is concentrated in the oldest
//! purchases, out of reach of short history windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BehaviorSequence, BehaviorType, CandidateRecord, Event, FeatureMap, FeatureValue, Request, MS_PER_DAY};
use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub categories: usize,
    pub items_per_category: usize,
    pub requests: usize,
    pub candidates_per_request: usize,
    pub days: usize,
    /// Initial history length range `[min, max]` per behavior type.
    pub purchase_len: [usize; 2],
    pub add_to_cart_len: [usize; 2],
    pub click_len: [usize; 2],
    pub impression_len: [usize; 2],
    /// Up to this many events of each type are appended before every request.
    pub new_events_max: usize,
    /// Oldest events are dropped beyond this many per type.
    pub history_cap: usize,
    /// Probability that a purchase is in the user's favorite category.
    pub favorite_prob: f64,
    /// Same for clicks, add-to-carts and impressions.
    pub browse_favorite_prob: f64,
    pub signal_weight: f64,
    pub base_logit: f64,
    pub noise_std: f64,
    /// Probability that a candidate is drawn from the user's top category.
    pub match_prob: f64,
    pub conv_base_logit: f64,
    pub conv_weight: f64,
    /// Probability that a candidate carries a retrieved candidate-specific sequence.
    pub sim_prob: f64,
    pub deep_signal: bool,
    /// Purchase history length in deep-signal mode.
    pub deep_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            categories: 10,
            items_per_category: 40,
            requests: 2000,
            candidates_per_request: 8,
            days: 4,
            purchase_len: [4, 10],
            add_to_cart_len: [4, 10],
            click_len: [4, 10],
            impression_len: [4, 10],
            new_events_max: 2,
            history_cap: 32,
            favorite_prob: 0.7,
            browse_favorite_prob: 0.1,
            signal_weight: 4.0,
            base_logit: -2.0,
            noise_std: 0.5,
            match_prob: 0.5,
            conv_base_logit: -1.0,
            conv_weight: 1.0,
            sim_prob: 0.0,
            deep_signal: false,
            deep_len: 64,
        }
    }
}

impl SynthConfig {
    /// A handful of short requests; for tests and smoke runs.
    pub fn small() -> Self {
        Self {
            users: 20,
            categories: 6,
            items_per_category: 5,
            requests: 12,
            candidates_per_request: 4,
            days: 2,
            purchase_len: [1, 3],
            add_to_cart_len: [1, 3],
            click_len: [2, 5],
            impression_len: [2, 5],
            history_cap: 8,
            sim_prob: 0.5,
            ..Self::default()
        }
    }

    /// Favorite category only among the oldest purchases.
    pub fn deep() -> Self {
        Self {
            requests: 2000,
            favorite_prob: 1.0,
            deep_signal: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synth: {m}")));
        if self.users == 0 || self.requests == 0 || self.days == 0 {
            return bad("users, requests and days must be positive");
        }
        if self.categories < 2 || self.items_per_category == 0 {
            return bad("need at least two categories and one item per category");
        }
        if self.candidates_per_request == 0 {
            return bad("candidates_per_request must be positive");
        }
        for (name, [lo, hi]) in [
            ("purchase_len", self.purchase_len),
            ("add_to_cart_len", self.add_to_cart_len),
            ("click_len", self.click_len),
            ("impression_len", self.impression_len),
        ] {
            if lo > hi {
                return bad(&format!("{name} has min > max"));
            }
        }
        for (name, p) in [
            ("favorite_prob", self.favorite_prob),
            ("browse_favorite_prob", self.browse_favorite_prob),
            ("match_prob", self.match_prob),
            ("sim_prob", self.sim_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if self.history_cap == 0 || (self.deep_signal && self.deep_len < 2) {
            return bad("history_cap must be positive and deep_len at least 2");
        }
        Ok(())
    }

    pub fn impressions(&self) -> usize {
        self.requests * self.candidates_per_request
    }
}

struct UserState {
    id: String,
    favorite: usize,
    age: i64,
    gender: i64,
    history: [Vec<Event>; 4],
}

/// Deterministic request stream; byte-identical output for a fixed seed.
pub struct SynthStream {
    config: SynthConfig,
    rng: ChaCha8Rng,
    users: Vec<UserState>,
    next: usize,
}

/// Requests begin after this much synthetic pre-history.
const HISTORY_SPAN_MS: i64 = 30 * MS_PER_DAY;

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthStream> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..config.users)
        .map(|u| init_user(config, u, &mut rng))
        .collect();
    Ok(SynthStream {
        config: config.clone(),
        rng,
        users,
        next: 0,
    })
}

fn category_key(c: usize) -> String {
    format!("cat_{c}")
}

fn make_event(config: &SynthConfig, cat: usize, ts: i64, rng: &mut ChaCha8Rng) -> Event {
    let k = rng.gen_range(0..config.items_per_category);
    Event {
        item: format!("item_{cat}_{k}"),
        category: category_key(cat),
        price_bucket: price_bucket(cat, k),
        timestamp: Some(ts),
    }
}

fn price_bucket(cat: usize, k: usize) -> u32 {
    ((cat * 7 + k) % 10) as u32
}

fn pick_category(config: &SynthConfig, favorite: usize, p_fav: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.gen_bool(p_fav) {
        favorite
    } else {
        rng.gen_range(0..config.categories)
    }
}

fn len_range(config: &SynthConfig, t: BehaviorType) -> [usize; 2] {
    match t {
        BehaviorType::Purchase => config.purchase_len,
        BehaviorType::AddToCart => config.add_to_cart_len,
        BehaviorType::Click => config.click_len,
        BehaviorType::Impression => config.impression_len,
    }
}

fn init_user(config: &SynthConfig, u: usize, rng: &mut ChaCha8Rng) -> UserState {
    let favorite = rng.gen_range(0..config.categories);
    let age = rng.gen_range(0..8);
    let gender = rng.gen_range(0..2);
    let mut history: [Vec<Event>; 4] = Default::default();
    for t in BehaviorType::ALL {
        let n = if t == BehaviorType::Purchase && config.deep_signal {
            config.deep_len
        } else {
            let [lo, hi] = len_range(config, t);
            rng.gen_range(lo..=hi)
        };
        let mut stamps: Vec<i64> = (0..n).map(|_| rng.gen_range(0..HISTORY_SPAN_MS)).collect();
        stamps.sort_unstable();
        history[t.index()] = stamps
            .into_iter()
            .enumerate()
            .map(|(j, ts)| {
                let p = match t {
                    // Oldest purchase gets `favorite_prob`, newest gets zero.
                    BehaviorType::Purchase if config.deep_signal => {
                        config.favorite_prob * (n - 1 - j) as f64 / (n - 1) as f64
                    }
                    BehaviorType::Purchase => config.favorite_prob,
                    _ => config.browse_favorite_prob,
                };
                let cat = pick_category(config, favorite, p, rng);
                make_event(config, cat, ts, rng)
            })
            .collect();
    }
    UserState {
        id: format!("u{u}"),
        favorite,
        age,
        gender,
        history,
    }
}

/// Most frequent category among `events`; ties go to the smallest index.
fn top_category(events: &[Event], categories: usize) -> Option<usize> {
    let mut counts = vec![0usize; categories];
    for e in events {
        if let Some(c) = e.category.strip_prefix("cat_").and_then(|s| s.parse::<usize>().ok()) {
            if c < categories {
                counts[c] += 1;
            }
        }
    }
    let (best, &n) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then_some(best)
}

impl SynthStream {
    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    /// Category the planted signal keys on for a user right now.
    fn signal_category(&self, u: usize) -> usize {
        let user = &self.users[u];
        top_category(&user.history[BehaviorType::Purchase.index()], self.config.categories)
            .unwrap_or(user.favorite)
    }

    fn make_request(&mut self, k: usize) -> Request {
        let cfg = self.config.clone();
        let per_day = cfg.requests.div_ceil(cfg.days);
        let day = (k / per_day) as i64;
        let slot = (k % per_day) as i64;
        let ts = HISTORY_SPAN_MS + day * MS_PER_DAY + (slot + 1) * (MS_PER_DAY / (per_day as i64 + 1));
        let u = self.rng.gen_range(0..cfg.users);

        // Append fresh behavior just before the request.
        for t in BehaviorType::ALL {
            let adds = if t == BehaviorType::Purchase && cfg.deep_signal {
                0
            } else {
                self.rng.gen_range(0..=cfg.new_events_max)
            };
            for j in 0..adds {
                let p = if t == BehaviorType::Purchase {
                    cfg.favorite_prob
                } else {
                    cfg.browse_favorite_prob
                };
                let fav = self.users[u].favorite;
                let cat = pick_category(&cfg, fav, p, &mut self.rng);
                let ev_ts = ts - 1000 * (adds - j) as i64;
                let ev = make_event(&cfg, cat, ev_ts, &mut self.rng);
                let hist = &mut self.users[u].history[t.index()];
                hist.push(ev);
                let cap = if t == BehaviorType::Purchase && cfg.deep_signal {
                    cfg.deep_len
                } else {
                    cfg.history_cap
                };
                if hist.len() > cap {
                    let excess = hist.len() - cap;
                    hist.drain(..excess);
                }
            }
        }

        let signal = self.signal_category(u);
        let mut candidates = Vec::with_capacity(cfg.candidates_per_request);
        for _ in 0..cfg.candidates_per_request {
            let matched = self.rng.gen_bool(cfg.match_prob);
            let cat = if matched {
                signal
            } else {
                let c = self.rng.gen_range(0..cfg.categories - 1);
                if c >= signal {
                    c + 1
                } else {
                    c
                }
            };
            let item_k = self.rng.gen_range(0..cfg.items_per_category);
            let m = if matched { 1.0 } else { 0.0 };
            let noise: f64 = self.rng.sample(StandardNormal);
            let p_click = sigmoid(cfg.base_logit + cfg.signal_weight * m + cfg.noise_std * noise);
            let click = self.rng.gen_bool(p_click);
            let p_conv = sigmoid(cfg.conv_base_logit + cfg.conv_weight * m);
            let conv = click && self.rng.gen_bool(p_conv);
            let sim_seq = if cfg.sim_prob > 0.0 && self.rng.gen_bool(cfg.sim_prob) {
                let key = category_key(cat);
                let user = &self.users[u];
                let mut hits: Vec<Event> = user.history[BehaviorType::Purchase.index()]
                    .iter()
                    .chain(&user.history[BehaviorType::Click.index()])
                    .filter(|e| e.category == key)
                    .cloned()
                    .collect();
                hits.sort_by_key(|e| e.timestamp);
                let start = hits.len().saturating_sub(8);
                (!hits.is_empty())
                    .then(|| BehaviorSequence::new(BehaviorType::Purchase, hits[start..].to_vec()))
            } else {
                None
            };
            let mut features = FeatureMap::new();
            features.insert("item".into(), format!("item_{cat}_{item_k}").into());
            features.insert("cat".into(), category_key(cat).into());
            features.insert("price_bucket".into(), FeatureValue::Int(price_bucket(cat, item_k) as i64));
            candidates.push(CandidateRecord {
                features,
                sim_seq,
                click: click as u8,
                conv: conv as u8,
            });
        }

        let user = &self.users[u];
        let mut user_features = FeatureMap::new();
        user_features.insert("user_id".into(), user.id.clone().into());
        user_features.insert("age".into(), FeatureValue::Int(user.age));
        user_features.insert("gender".into(), FeatureValue::Int(user.gender));
        let mut context = FeatureMap::new();
        context.insert("hour".into(), FeatureValue::Int((ts / 3_600_000) % 24));
        context.insert("device".into(), FeatureValue::Int(self.rng.gen_range(0..3)));

        let sequences = [
            BehaviorType::Purchase,
            BehaviorType::AddToCart,
            BehaviorType::Click,
            BehaviorType::Impression,
        ]
        .into_iter()
        .filter(|t| !user.history[t.index()].is_empty())
        .map(|t| BehaviorSequence::new(t, user.history[t.index()].clone()))
        .collect();

        Request {
            request_id: format!("r{k}"),
            user_id: user.id.clone(),
            ts,
            day: Some(day as u32),
            user_profile_features: user_features,
            context_features: context,
            sequences,
            candidates,
        }
    }
}

impl Iterator for SynthStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.next >= self.config.requests {
            return None;
        }
        let k = self.next;
        self.next += 1;
        Some(self.make_request(k))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.requests - self.next;
        (left, Some(left))
    }
}

/// Whether a candidate's category equals the user's top purchased category.
pub fn is_matched(request: &Request, candidate: &CandidateRecord, categories: usize) -> bool {
    let top = request
        .sequence(BehaviorType::Purchase)
        .and_then(|s| top_category(&s.events, categories));
    match (top, candidate.features.get("cat")) {
        (Some(t), Some(FeatureValue::Str(c))) => *c == category_key(t),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            users: 50,
            requests: 100,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Vec<Request> = generate_synthetic(&small(), 9).unwrap().collect();
        let b: Vec<Request> = generate_synthetic(&small(), 9).unwrap().collect();
        let c: Vec<Request> = generate_synthetic(&small(), 10).unwrap().collect();
        let bytes = |v: &[Request]| serde_json::to_vec(v).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn records_are_valid_and_chronological() {
        let reqs: Vec<Request> = generate_synthetic(&small(), 1).unwrap().collect();
        assert_eq!(reqs.len(), 100);
        let mut last = i64::MIN;
        for r in &reqs {
            r.validate().unwrap();
            assert!(r.ts >= last);
            last = r.ts;
            for s in &r.sequences {
                assert!(s.events.iter().all(|e| e.timestamp.unwrap() < r.ts));
            }
        }
        assert_eq!(reqs.last().unwrap().day, Some(3));
    }

    #[test]
    fn matched_candidates_use_top_category() {
        let cfg = SynthConfig {
            match_prob: 1.0,
            ..small()
        };
        for r in generate_synthetic(&cfg, 2).unwrap() {
            for c in &r.candidates {
                assert!(is_matched(&r, c, cfg.categories));
            }
        }
    }

    #[test]
    fn top_category_ties_break_low() {
        let ev = |c: usize| Event {
            item: "x".into(),
            category: category_key(c),
            price_bucket: 0,
            timestamp: Some(0),
        };
        assert_eq!(top_category(&[ev(3), ev(1), ev(3), ev(1)], 5), Some(1));
        assert_eq!(top_category(&[], 5), None);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            categories: 1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SynthConfig {
            match_prob: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn deep_signal_concentrates_favorite_in_old_purchases() {
        let cfg = SynthConfig {
            deep_signal: true,
            favorite_prob: 0.9,
            ..small()
        };
        let mut old_hits = 0;
        let mut new_hits = 0;
        for r in generate_synthetic(&cfg, 3).unwrap() {
            let p = r.sequence(BehaviorType::Purchase).unwrap();
            assert_eq!(p.events.len(), cfg.deep_len);
            let top = top_category(&p.events, cfg.categories).unwrap();
            let key = category_key(top);
            old_hits += p.events[..16].iter().filter(|e| e.category == key).count();
            new_hits += p.events[cfg.deep_len - 16..].iter().filter(|e| e.category == key).count();
        }
        assert!(old_hits > 3 * new_hits, "old {old_hits} new {new_hits}");
    }
}

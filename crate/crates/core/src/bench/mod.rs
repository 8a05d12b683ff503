//! Closed-form FLOP accounting, ablation and scaling sweeps, and runtime and
//! memory measurement.

mod ablation;
mod perf;
mod scaling;

pub use ablation::{ablation_csv, run_ablation, AblationRow, Variant};
pub use perf::{cached_flops, measure_runtime_memory, peak_rss_kb, perf_csv, PerfRow, Toggle, Workload};
pub use scaling::{run_scaling, scaling_csv, Axis, ScalingRow, ScalingSpec};

use serde::{Deserialize, Serialize};

use crate::config::{Backbone, Fusion, ModelConfig, NsTokenizerKind, Projection};
use crate::error::Result;
use crate::features::{generate_synthetic, CandidateRecord, Request, SynthConfig};
use crate::numerics::{FlopCounter, FlopReport};
use crate::stack::{schedule_for, OneTrans};
use crate::train::{next_batch_loop, EvalLedger, OptimizerState, TrainConfig, TrainingReport};

/// Token counts of one impression, as seen by the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenShape {
    /// Behavior events kept after per-sequence truncation.
    pub events: usize,
    pub seps: usize,
    /// Events of the candidate-specific sequence that get pooled.
    pub sim_events: usize,
}

impl TokenShape {
    pub fn of(config: &ModelConfig, request: &Request, candidate: &CandidateRecord) -> Self {
        let tok = &config.tokenizer;
        let lens: Vec<usize> = request
            .sequences
            .iter()
            .map(|s| s.recent(tok.max_seq_len).len())
            .collect();
        let non_empty = lens.iter().filter(|&&n| n > 0).count();
        let seps = if tok.fusion == Fusion::TsAgnostic && tok.use_sep {
            non_empty.saturating_sub(1)
        } else {
            0
        };
        let sim_events = if tok.sim_pooling {
            candidate
                .sim_seq
                .as_ref()
                .map_or(0, |s| s.recent(tok.max_seq_len).len())
        } else {
            0
        };
        Self {
            events: lens.iter().sum(),
            seps,
            sim_events,
        }
    }

    pub fn l_s(&self) -> usize {
        self.events + self.seps
    }
}

/// Per-row multiply-adds of a tokenizer projection.
fn projection_flops(config: &ModelConfig, input: usize, output: usize) -> u64 {
    let d = config.d_model;
    (match config.tokenizer.projection {
        Projection::Mlp => input * 2 * d + 2 * d * output,
        Projection::Linear => input * output,
    }) as u64
}

/// Multiply-adds of one monolithic forward pass, per phase.
///
/// Per layer with `L` input rows and `L'` retained rows: K/V projections
/// `2·L·d²`, Q/O projections `2·L'·d²`, scores and mixing `2·L·L'·d`, FFN
/// `2·L'·d·h`.
pub fn flop_formula(config: &ModelConfig, shape: &TokenShape) -> Result<FlopReport> {
    config.validate()?;
    let d = config.d_model as u64;
    let e = config.embedding.dim;
    let tok = &config.tokenizer;
    let event_dim = 3 * e;
    let mut report = FlopReport::default();

    let ns = match tok.ns {
        NsTokenizerKind::Groupwise => tok
            .groups
            .iter()
            .map(|g| projection_flops(config, g.len() * e, config.d_model))
            .sum(),
        NsTokenizerKind::Autosplit => projection_flops(
            config,
            tok.features.len() * e,
            tok.feature_tokens() * config.d_model,
        ),
    };
    let per_event = projection_flops(config, event_dim, config.d_model);
    report.tokenizer = (shape.events + shape.sim_events) as u64 * per_event + ns;

    let schedule = schedule_for(config, shape.l_s())?;
    let h = config.ffn_hidden() as u64;
    for n in 0..config.blocks() {
        let (l, lq) = (schedule.counts[n] as u64, schedule.counts[n + 1] as u64);
        report.attention += 2 * l * d * d + 2 * lq * d * d + 2 * l * lq * d;
        report.ffn += 2 * lq * d * h;
    }

    let head_in = match config.backbone {
        Backbone::OneTrans => config.l_ns() as u64 * d,
        Backbone::MeanPool => (config.l_ns() as u64 + 1) * d,
    };
    report.heads = config.tasks.len() as u64 * (head_in * d + d);
    Ok(report)
}

/// Model, data and optimizer of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            data: SynthConfig {
                requests: 1000,
                ..SynthConfig::default()
            },
            train: TrainConfig::desk_scale(),
        }
    }
}

/// Outcome of one next-batch training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: TrainingReport,
    pub params: usize,
    /// Formula forward multiply-adds summed over every scored impression.
    pub forward_flops: u64,
    /// Measured multiply-adds of the whole run, forward and backward.
    pub training_flops: u64,
}

/// Trains `model` from `seed` on `data` under the next-batch protocol.
pub fn train_once(
    model: &ModelConfig,
    data: &SynthConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let mut net = OneTrans::<f32>::new(model.clone(), seed)?;
    let mut state = OptimizerState::new(&net, train.optimizer.clone())?;
    let mut ledger = EvalLedger::default();
    let counter = FlopCounter::new();
    let report = counter.measure(|| {
        next_batch_loop(
            generate_synthetic(data, seed)?.map(Ok),
            &mut net,
            &mut state,
            &mut ledger,
            train,
        )
    })?;
    let training_flops = counter.total();
    let scored = ledger.losses.len();
    let mut forward_flops = 0u64;
    let impressions = generate_synthetic(data, seed)?
        .flat_map(|r| (0..r.candidates.len()).map(move |i| (r.clone(), i)))
        .take(scored);
    for (r, i) in impressions {
        forward_flops += flop_formula(model, &TokenShape::of(model, &r, &r.candidates[i]))?.total();
    }
    Ok(RunOutcome {
        report,
        params: net.param_count(),
        forward_flops,
        training_flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{round_robin_groups, AttentionKind, ParamSharing, ScheduleRule};
    use crate::features::generate_synthetic;

    fn measured(config: &ModelConfig, r: &Request, c: &CandidateRecord) -> FlopReport {
        let model = OneTrans::<f32>::new(config.clone(), 3).unwrap();
        let counter = FlopCounter::new();
        counter.measure(|| model.forward(r, c).unwrap());
        counter.report()
    }

    fn sample() -> Vec<Request> {
        generate_synthetic(&SynthConfig::small(), 5).unwrap().collect()
    }

    #[test]
    fn formula_matches_counter_across_variants() {
        let mut configs = vec![ModelConfig::tiny(), ModelConfig::micro()];
        let mut c = ModelConfig::tiny();
        c.schedule = ScheduleRule::Off;
        configs.push(c);
        let mut c = ModelConfig::tiny();
        c.tokenizer.fusion = Fusion::TsAgnostic;
        c.tokenizer.sim_pooling = true;
        c.tokenizer.projection = Projection::Linear;
        configs.push(c);
        let mut c = ModelConfig::tiny();
        c.tokenizer.ns = NsTokenizerKind::Groupwise;
        c.tokenizer.groups = round_robin_groups(&c.tokenizer.features, c.tokenizer.l_ns);
        c.params = ParamSharing::Shared;
        c.attention = AttentionKind::Full;
        configs.push(c);
        let mut c = ModelConfig::tiny();
        c.backbone = Backbone::MeanPool;
        configs.push(c);
        for config in &configs {
            for r in sample().iter().take(4) {
                for c in &r.candidates {
                    let want = measured(config, r, c);
                    let got = flop_formula(config, &TokenShape::of(config, r, c)).unwrap();
                    assert_eq!(got, want, "{config:?}");
                }
            }
        }
    }

    #[test]
    fn single_unpruned_layer_is_the_standard_count() {
        let mut config = ModelConfig::tiny();
        config.layers = 1;
        config.schedule = ScheduleRule::Off;
        let shape = TokenShape {
            events: 10,
            seps: 0,
            sim_events: 0,
        };
        let r = flop_formula(&config, &shape).unwrap();
        let (l, d, h) = (18u64, 32u64, 64u64);
        assert_eq!(r.attention, 4 * l * d * d + 2 * l * l * d);
        assert_eq!(r.ffn, 2 * l * d * h);
    }

    #[test]
    fn pyramid_reduces_block_flops() {
        let shape = TokenShape {
            events: 40,
            seps: 0,
            sim_events: 0,
        };
        let on = ModelConfig::tiny();
        let mut off = on.clone();
        off.schedule = ScheduleRule::Off;
        let (a, b) = (
            flop_formula(&on, &shape).unwrap(),
            flop_formula(&off, &shape).unwrap(),
        );
        assert!(b.attention > a.attention && b.ffn > a.ffn);
        assert_eq!(a.tokenizer, b.tokenizer);
    }
}

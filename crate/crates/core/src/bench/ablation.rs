use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{train_once, Experiment};
use crate::config::{
    round_robin_groups, AttentionKind, Backbone, Fusion, ModelConfig, NsTokenizerKind, ParamSharing, ScheduleRule, Task,
};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Reference,
    Groupwise,
    TsAgnostic,
    NoSep,
    SharedParams,
    FullAttention,
    NoPyramid,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Reference,
        Variant::Groupwise,
        Variant::TsAgnostic,
        Variant::NoSep,
        Variant::SharedParams,
        Variant::FullAttention,
        Variant::NoPyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Reference => "reference",
            Variant::Groupwise => "groupwise_tokenizer",
            Variant::TsAgnostic => "ts_agnostic_fusion",
            Variant::NoSep => "ts_agnostic_no_sep",
            Variant::SharedParams => "shared_params",
            Variant::FullAttention => "full_attention",
            Variant::NoPyramid => "no_pyramid",
        }
    }

    pub fn axis(self) -> &'static str {
        match self {
            Variant::Reference => "none",
            Variant::Groupwise => "ns_tokenizer",
            Variant::TsAgnostic => "fusion",
            Variant::NoSep => "sep",
            Variant::SharedParams => "params",
            Variant::FullAttention => "attention",
            Variant::NoPyramid => "pyramid",
        }
    }

    /// `base` with this variant's axis changed.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let tok = &mut c.tokenizer;
        match self {
            Variant::Reference => {}
            Variant::Groupwise => {
                tok.ns = NsTokenizerKind::Groupwise;
                tok.groups = round_robin_groups(&tok.features, tok.feature_tokens());
            }
            Variant::TsAgnostic => {
                tok.fusion = Fusion::TsAgnostic;
                tok.use_sep = true;
            }
            Variant::NoSep => {
                tok.fusion = Fusion::TsAgnostic;
                tok.use_sep = false;
            }
            Variant::SharedParams => c.params = ParamSharing::Shared,
            Variant::FullAttention => c.attention = AttentionKind::Full,
            Variant::NoPyramid => c.schedule = ScheduleRule::Off,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub delta_auc: Option<f64>,
    pub delta_uauc: Option<f64>,
    pub params: usize,
    pub flops: u64,
    pub cache_compatible: bool,
    pub partial: bool,
}

impl AblationRow {
    pub const HEADER: &'static str =
        "variant,axis,auc,uauc,delta_auc,delta_uauc,params,flops,cache_compatible,partial";

    pub fn to_csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.variant.name(),
            self.variant.axis(),
            f(self.auc),
            f(self.uauc),
            f(self.delta_auc),
            f(self.delta_uauc),
            self.params,
            self.flops,
            self.cache_compatible,
            self.partial
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(AblationRow::HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv_line()).expect("writing to a String");
    }
    out
}

/// Trains the reference and each variant on identical data and seed; CTR
/// metrics, deltas against the reference. `budget_steps` caps every run.
pub fn run_ablation(
    experiment: &Experiment,
    variants: &[Variant],
    seed: u64,
    budget_steps: Option<u64>,
) -> Result<Vec<AblationRow>> {
    let mut train = experiment.train.clone();
    if budget_steps.is_some() {
        train.max_steps = budget_steps;
    }
    let run = |v: Variant| -> Result<AblationRow> {
        let model = v.apply(&experiment.model);
        let out = train_once(&model, &experiment.data, &train, seed)?;
        let ctr = out.report.summary_for(Task::Ctr);
        Ok(AblationRow {
            variant: v,
            auc: ctr.and_then(|s| s.auc),
            uauc: ctr.and_then(|s| s.uauc),
            delta_auc: None,
            delta_uauc: None,
            params: out.params,
            flops: out.forward_flops,
            cache_compatible: model.attention == AttentionKind::Causal && model.backbone == Backbone::OneTrans,
            partial: out.report.partial,
        })
    };
    let reference = run(Variant::Reference)?;
    let mut rows = Vec::with_capacity(variants.len() + 1);
    rows.push(reference.clone());
    for &v in variants.iter().filter(|&&v| v != Variant::Reference) {
        rows.push(run(v)?);
    }
    let delta = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    for r in &mut rows {
        r.delta_auc = delta(r.auc, reference.auc);
        r.delta_uauc = delta(r.uauc, reference.uauc);
    }
    Ok(rows)
}

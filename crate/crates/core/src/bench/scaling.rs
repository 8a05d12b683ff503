use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{train_once, Experiment};
use crate::config::{ModelConfig, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Per-sequence event window (`tokenizer.max_seq_len`).
    Length,
    /// Number of blocks.
    Depth,
    /// Model width `d`; heads are kept fixed.
    Width,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Length => "length",
            Axis::Depth => "depth",
            Axis::Width => "width",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(Axis::Length),
            "depth" => Ok(Axis::Depth),
            "width" => Ok(Axis::Width),
            _ => Err(Error::config(format!(
                "unknown scaling axis `{s}` (expected length, depth or width)"
            ))),
        }
    }

    pub fn apply(self, base: &ModelConfig, value: usize) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Axis::Length => c.tokenizer.max_seq_len = value,
            Axis::Depth => c.layers = value,
            Axis::Width => c.d_model = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub axis: Axis,
    pub grid: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub axis: Axis,
    pub value: usize,
    /// Measured training multiply-adds, forward and backward.
    pub flops: u64,
    pub final_loss: Option<f64>,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    /// CTR UAUC relative to the first grid point.
    pub delta_uauc: Option<f64>,
    pub partial: bool,
}

impl ScalingRow {
    pub const HEADER: &'static str = "axis,value,flops,log10_flops,final_loss,auc,uauc,delta_uauc,partial";

    pub fn to_csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let log = (self.flops > 0).then(|| (self.flops as f64).log10());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.axis.name(),
            self.value,
            self.flops,
            f(log),
            f(self.final_loss),
            f(self.auc),
            f(self.uauc),
            f(self.delta_uauc),
            self.partial
        )
    }
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(ScalingRow::HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv_line()).expect("writing to a String");
    }
    out
}

/// One training run per grid value on fixed data and seed.
pub fn run_scaling(experiment: &Experiment, spec: &ScalingSpec, budget_steps: Option<u64>) -> Result<Vec<ScalingRow>> {
    if spec.grid.is_empty() {
        return Err(Error::config("scaling grid is empty"));
    }
    let mut train = experiment.train.clone();
    if budget_steps.is_some() {
        train.max_steps = budget_steps;
    }
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(spec.grid.len());
    for &value in &spec.grid {
        let model = spec.axis.apply(&experiment.model, value);
        model.validate()?;
        let out = train_once(&model, &experiment.data, &train, spec.seed)?;
        let ctr = out.report.summary_for(Task::Ctr);
        let uauc = ctr.and_then(|s| s.uauc);
        let base = rows.first().map_or(uauc, |r| r.uauc);
        rows.push(ScalingRow {
            axis: spec.axis,
            value,
            flops: out.training_flops,
            final_loss: out.report.final_loss,
            auc: ctr.and_then(|s| s.auc),
            uauc,
            delta_uauc: uauc.zip(base).map(|(a, b)| a - b),
            partial: out.report.partial,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SynthConfig;

    fn quick() -> Experiment {
        Experiment {
            data: SynthConfig {
                requests: 16,
                ..SynthConfig::small()
            },
            ..Experiment::default()
        }
    }

    #[test]
    fn single_point_grid_gives_one_row() {
        let spec = ScalingSpec {
            axis: Axis::Width,
            grid: vec![16],
            seed: 1,
        };
        let rows = run_scaling(&quick(), &spec, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].delta_uauc.unwrap_or(0.0), 0.0);
    }

    #[test]
    fn depth_grid_costs_strictly_more() {
        let spec = ScalingSpec {
            axis: Axis::Depth,
            grid: vec![1, 2, 4],
            seed: 2,
        };
        let rows = run_scaling(&quick(), &spec, None).unwrap();
        assert!(rows.windows(2).all(|w| w[1].flops > w[0].flops));
        let csv = scaling_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("depth,1,"));
    }

    #[test]
    fn bad_axis_and_empty_grid_are_rejected() {
        assert!(Axis::parse("height").is_err());
        let spec = ScalingSpec {
            axis: Axis::Length,
            grid: vec![],
            seed: 0,
        };
        assert!(run_scaling(&quick(), &spec, None).is_err());
    }
}

use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{serve_request, stage1_s_side, stage2_candidate, KVCacheStore};
use crate::config::{ModelConfig, ScheduleRule};
use crate::error::{Error, Result};
use crate::features::{generate_synthetic, Request, SynthConfig};
use crate::numerics::FlopCounter;
use crate::stack::OneTrans;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Pyramid,
    Cache,
}

impl Toggle {
    pub fn name(self) -> &'static str {
        match self {
            Toggle::Pyramid => "pyramid",
            Toggle::Cache => "cache",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pyramid" => Ok(Toggle::Pyramid),
            "cache" => Ok(Toggle::Cache),
            _ => Err(Error::config(format!("unknown toggle `{s}` (expected pyramid or cache)"))),
        }
    }
}

/// Requests replayed in order; every repetition starts with an empty cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub data: SynthConfig,
    pub candidates: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            data: SynthConfig {
                users: 8,
                requests: 48,
                candidates_per_request: 32,
                ..SynthConfig::default()
            },
            candidates: 32,
            reps: 5,
            warmup: 1,
        }
    }
}

impl Workload {
    /// The generated requests, each cut to `candidates` candidates, so the
    /// user side is identical for every candidate count.
    pub fn requests(&self, seed: u64) -> Result<Vec<Request>> {
        if self.candidates == 0 || self.candidates > self.data.candidates_per_request {
            return Err(Error::config(format!(
                "candidates must lie in 1..={}",
                self.data.candidates_per_request
            )));
        }
        if self.reps < 5 {
            return Err(Error::config("perf needs at least 5 repetitions"));
        }
        Ok(generate_synthetic(&self.data, seed)?
            .map(|mut r| {
                r.candidates.truncate(self.candidates);
                r
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfRow {
    pub toggle: Toggle,
    pub enabled: bool,
    pub candidates: usize,
    pub requests: usize,
    pub median_us_per_request: f64,
    /// Multiply-adds spent on the S side (stage 1) over the workload; for
    /// uncached serving every candidate recomputes it, so this is empty.
    pub stage1_flops: Option<u64>,
    pub total_flops: u64,
    pub peak_rss_kb: Option<u64>,
}

impl PerfRow {
    pub const HEADER: &'static str =
        "toggle,enabled,candidates,requests,median_us_per_request,stage1_flops,total_flops,peak_rss_kb,threads";

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{:.3},{},{},{},1",
            self.toggle.name(),
            self.enabled,
            self.candidates,
            self.requests,
            self.median_us_per_request,
            opt(self.stage1_flops),
            self.total_flops,
            opt(self.peak_rss_kb)
        )
    }
}

pub fn perf_csv(rows: &[PerfRow]) -> String {
    let mut out = String::from(PerfRow::HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv_line()).expect("writing to a String");
    }
    out
}

/// Peak resident set size of this process in KiB, where the OS reports it.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

fn serve_all(model: &OneTrans<f32>, requests: &[Request], cached: bool) -> Result<()> {
    if cached {
        let mut store = KVCacheStore::new(requests.len().max(1))?;
        for r in requests {
            serve_request(model, &mut store, r)?;
        }
    } else {
        for r in requests {
            for c in &r.candidates {
                model.forward(r, c)?;
            }
        }
    }
    Ok(())
}

/// Stage-1 and total multiply-adds of serving `requests` through the cache.
pub fn cached_flops(model: &OneTrans<f32>, requests: &[Request]) -> Result<(u64, u64)> {
    let mut store = KVCacheStore::new(requests.len().max(1))?;
    let stage1 = FlopCounter::new();
    let stage2 = FlopCounter::new();
    for r in requests {
        stage1.measure(|| stage1_s_side(model, &mut store, r))?;
        for c in &r.candidates {
            stage2.measure(|| stage2_candidate(model, &store, r, c))?;
        }
    }
    Ok((stage1.total(), stage1.total() + stage2.total()))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn measure(
    model: &OneTrans<f32>,
    requests: &[Request],
    workload: &Workload,
    cached: bool,
) -> Result<(f64, Option<u64>, u64)> {
    for _ in 0..workload.warmup {
        serve_all(model, requests, cached)?;
    }
    let mut times = Vec::with_capacity(workload.reps);
    for _ in 0..workload.reps {
        let t = Instant::now();
        serve_all(model, requests, cached)?;
        times.push(t.elapsed().as_secs_f64() * 1e6 / requests.len().max(1) as f64);
    }
    let (stage1, total) = if cached {
        let (s, t) = cached_flops(model, requests)?;
        (Some(s), t)
    } else {
        let counter = FlopCounter::new();
        counter.measure(|| serve_all(model, requests, false))?;
        (None, counter.total())
    };
    Ok((median(times), stage1, total))
}

/// Median wall time per request with each toggle on and off. Pyramid rows
/// serve uncached; cache rows keep the configured schedule.
pub fn measure_runtime_memory(
    config: &ModelConfig,
    workload: &Workload,
    toggles: &[Toggle],
    seed: u64,
) -> Result<Vec<PerfRow>> {
    let requests = workload.requests(seed)?;
    let mut rows = Vec::new();
    for &toggle in toggles {
        for enabled in [true, false] {
            let (model_config, cached) = match toggle {
                Toggle::Pyramid => {
                    let mut c = config.clone();
                    c.schedule = if enabled { ScheduleRule::Linear } else { ScheduleRule::Off };
                    (c, false)
                }
                Toggle::Cache => (config.clone(), enabled),
            };
            let model = OneTrans::<f32>::new(model_config, seed)?;
            let (us, stage1, total) = measure(&model, &requests, workload, cached)?;
            rows.push(PerfRow {
                toggle,
                enabled,
                candidates: workload.candidates,
                requests: requests.len(),
                median_us_per_request: us,
                stage1_flops: stage1,
                total_flops: total,
                peak_rss_kb: peak_rss_kb(),
            });
        }
    }
    Ok(rows)
}

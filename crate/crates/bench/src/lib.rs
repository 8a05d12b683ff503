//! Shared fixtures for the criterion benchmarks under `benches/`.

use onetrans_core::config::ScheduleRule;
use onetrans_core::features::{generate_synthetic, Request, SynthConfig};
use onetrans_core::stack::OneTrans;
use onetrans_core::{ModelConfig, Result};

/// A tiny model and a few requests, each cut to `candidates` candidates.
pub fn fixture(candidates: usize, pyramid: bool) -> Result<(OneTrans<f32>, Vec<Request>)> {
    let mut config = ModelConfig::tiny();
    if !pyramid {
        config.schedule = ScheduleRule::Off;
    }
    let model = OneTrans::new(config, 7)?;
    let data = SynthConfig {
        users: 4,
        requests: 8,
        candidates_per_request: candidates.max(1),
        ..SynthConfig::default()
    };
    let requests = generate_synthetic(&data, 7)?.collect();
    Ok((model, requests))
}

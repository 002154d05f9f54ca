//! Parameter count and per-stage inference timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::run_heads;
use crate::instances::decode_instances;
use crate::model::count_params;

use super::{encode_scene, load_model, predict_map, synth_scene, RunConfig};

pub const REFERENCE_CONTEXT: &str =
    "published reference (full-scale model): 9.42M params, 165 ms per inference; not reproducible at this scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: u64,
    /// Scalars enumerated from the weights manifest.
    pub manifest_params: u64,
    pub repeats: usize,
    pub stages: Vec<StageTime>,
    pub end_to_end_ms: f64,
    pub reference: String,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain report") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("bench report", e.to_string()))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One warmup pass, then `repeats` timed passes of encode, predict, heads
/// and decode on the run's synthetic scene.
pub fn bench(cfg: &RunConfig, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    cfg.validate()?;
    let (scn, _) = synth_scene(cfg)?;
    let model = load_model(cfg, None)?;
    const NAMES: [&str; 4] = ["encode", "predict", "heads", "decode"];
    let mut times = vec![Vec::with_capacity(repeats); NAMES.len()];
    let mut totals = Vec::with_capacity(repeats);
    for rep in 0..=repeats {
        let mut lap = [0.0; 4];
        let mut clock = Instant::now();
        let mut tick = |i: usize| {
            lap[i] = clock.elapsed().as_secs_f64() * 1e3;
            clock = Instant::now();
        };
        let (map, _) = encode_scene(cfg, &model, &scn)?;
        tick(0);
        let out = predict_map(&model, &map, false)?;
        tick(1);
        let bundle = run_heads(&out.d0, &model.heads)?;
        tick(2);
        decode_instances(&bundle, &cfg.decode)?;
        tick(3);
        if rep > 0 {
            for (t, l) in times.iter_mut().zip(lap) {
                t.push(l);
            }
            totals.push(lap.iter().sum());
        }
    }
    Ok(BenchReport {
        param_count: count_params(&cfg.model()),
        manifest_params: model.to_store().scalar_count(),
        repeats,
        stages: NAMES
            .iter()
            .zip(&mut times)
            .map(|(n, t)| StageTime { stage: n.to_string(), median_ms: median(t) })
            .collect(),
        end_to_end_ms: median(&mut totals),
        reference: REFERENCE_CONTEXT.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn counts_agree_and_report_round_trips() {
        let mut cfg = RunConfig::desk();
        cfg.stpt.depth = 1;
        let r = bench(&cfg, 1).unwrap();
        assert_eq!(r.param_count, r.manifest_params);
        assert_eq!(r.stages.len(), 4);
        assert!(r.end_to_end_ms > 0.0);
        assert!(r.reference.contains("9.42M") && r.reference.contains("165 ms"));
        let json = r.to_json();
        assert_eq!(BenchReport::from_json(&json).unwrap().to_json(), json);
        assert!(bench(&cfg, 0).is_err());
    }
}

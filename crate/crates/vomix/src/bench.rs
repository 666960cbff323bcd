//! Wall-clock and op-count benchmark harness.
//!
//! Op counts are the primary cross-machine metric (deterministic for a
//! fixed seed); wall-clock numbers are hardware-specific and reported with
//! their min/max spread over the repeats.

use crate::error::{Error, Result};
use crate::model::{forward_state, seeded_state, EngineMode, ForwardOptions, ModelWeights, ViTConfig};
use crate::opcount;
use crate::schedule::expand_schedule;
use crate::strategy::StrategyConfig;
use crate::weights::init_weights;
use std::io::Write;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct BenchParams {
    /// Timed runs; at least 5.
    pub repeats: usize,
    /// Untimed runs before measurement starts.
    pub warmup: usize,
    /// Images per timed run.
    pub batch: usize,
    pub seed: u64,
    /// Worker threads the kernels may use; recorded in the result.
    pub threads: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 2,
            batch: 1,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub config_id: String,
    pub schedule: String,
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    pub images_per_sec: f64,
    pub tokens_per_sec: f64,
    /// Measured multiplies for one batch (identical across runs).
    pub mac_count: u64,
    pub peak_mem_bytes: u64,
    pub threads: usize,
    pub repeats: usize,
}

/// Worker threads the kernels may use (the rayon pool size).
pub fn worker_threads() -> usize {
    rayon::current_num_threads()
}

/// Analytic estimate of peak live bytes during a forward pass: parameters
/// plus the largest per-layer working set along the trajectory.
pub fn estimate_peak_memory(cfg: &ViTConfig, trajectory: &[usize]) -> u64 {
    let d = cfg.dim as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let params: u64 = crate::weights::manifest(cfg)
        .iter()
        .map(|(_, dims)| dims.iter().product::<u64>())
        .sum();
    let live = trajectory
        .iter()
        .map(|&n| {
            let n = n as u64;
            // x + normed + qkv + similarity + logits + mlp hidden
            6 * n * d + 2 * n * n + n * hidden
        })
        .max()
        .unwrap_or(0);
    4 * (params + live)
}

/// Runs one configuration/schedule pair: seeded weights and inputs, warmup
/// runs excluded, median of `repeats` timed runs. Op counts come from the
/// first warmup run and are checked against a second run for determinism.
pub fn run_bench(
    cfg: &ViTConfig,
    sched_spec: &str,
    strategy: StrategyConfig,
    mode: EngineMode,
    params: &BenchParams,
) -> Result<BenchResult> {
    if params.repeats < 5 {
        return Err(Error::Config(format!(
            "repeats must be at least 5, got {}",
            params.repeats
        )));
    }
    let sched = expand_schedule(sched_spec, cfg.depth)?;
    let weights = ModelWeights::from_store(cfg, &init_weights(cfg, params.seed))?;
    let opts = ForwardOptions {
        mode,
        strategy,
        protected: cfg.default_protected(),
        collect_trace: false,
    };
    let n0 = cfg.token_count();
    let states: Vec<_> = (0..params.batch.max(1))
        .map(|i| seeded_state(n0, cfg.dim, params.seed ^ (i as u64 + 1)))
        .collect();

    let run_batch = |count: bool| -> Result<u64> {
        let before = if count { opcount::total() } else { 0 };
        for s in &states {
            forward_state(s.clone(), &weights, cfg, &sched, &opts)?;
        }
        Ok(if count { opcount::total() - before } else { 0 })
    };

    let mut mac_count = 0;
    for w in 0..params.warmup.max(1) {
        let counted = run_batch(true)?;
        if w == 0 {
            mac_count = counted;
        } else if counted != mac_count {
            return Err(Error::Invariant(format!(
                "op count changed between runs: {mac_count} vs {counted}"
            )));
        }
    }

    let mut times = Vec::with_capacity(params.repeats);
    for _ in 0..params.repeats {
        let t0 = Instant::now();
        run_batch(false)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    let per_image = median / states.len() as f64;
    let trajectory = crate::flops::token_trajectory(n0, &sched, cfg.default_protected().len());

    Ok(BenchResult {
        config_id: format!("{}x{}d{}h{}", cfg.depth, cfg.dim, cfg.heads, n0),
        schedule: sched_spec.to_string(),
        median_secs: median,
        min_secs: times[0],
        max_secs: times[times.len() - 1],
        images_per_sec: 1.0 / per_image,
        tokens_per_sec: n0 as f64 / per_image,
        mac_count,
        peak_mem_bytes: estimate_peak_memory(cfg, &trajectory),
        threads: params.threads,
        repeats: params.repeats,
    })
}

/// One result row per schedule.
pub fn sweep(
    cfg: &ViTConfig,
    sched_specs: &[String],
    strategy: StrategyConfig,
    mode: EngineMode,
    params: &BenchParams,
) -> Result<Vec<BenchResult>> {
    sched_specs
        .iter()
        .map(|s| run_bench(cfg, s, strategy, mode, params))
        .collect()
}

pub fn write_csv<W: Write>(results: &[BenchResult], w: &mut W) -> std::io::Result<()> {
    writeln!(
        w,
        "config,schedule,threads,repeats,median_s,min_s,max_s,images_per_s,tokens_per_s,mac_count,peak_mem_bytes"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3},{:.1},{},{}",
            r.config_id,
            r.schedule,
            r.threads,
            r.repeats,
            r.median_secs,
            r.min_secs,
            r.max_secs,
            r.images_per_sec,
            r.tokens_per_sec,
            r.mac_count,
            r.peak_mem_bytes
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig::preset("vit-tiny").unwrap()
    }

    #[test]
    fn rejects_too_few_repeats() {
        let params = BenchParams {
            repeats: 3,
            ..BenchParams::default()
        };
        let r = run_bench(
            &tiny(),
            "const:0:4",
            StrategyConfig::default(),
            EngineMode::VoMix,
            &params,
        );
        assert!(r.is_err());
    }

    #[test]
    fn op_counts_reproduce_across_runs() {
        let params = BenchParams::default();
        let a = run_bench(
            &tiny(),
            "const:0.2:4",
            StrategyConfig::default(),
            EngineMode::VoMix,
            &params,
        )
        .unwrap();
        let b = run_bench(
            &tiny(),
            "const:0.2:4",
            StrategyConfig::default(),
            EngineMode::VoMix,
            &params,
        )
        .unwrap();
        assert_eq!(a.mac_count, b.mac_count);
        assert!(a.mac_count > 0);
    }

    #[test]
    fn sweep_rows_match_schedules() {
        let params = BenchParams::default();
        let specs = vec!["const:0:4".to_string(), "const:0.2:4".to_string()];
        let rows = sweep(
            &tiny(),
            &specs,
            StrategyConfig::default(),
            EngineMode::VoMix,
            &params,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].mac_count > rows[1].mac_count);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let rows: Vec<BenchResult> = Vec::new();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }
}

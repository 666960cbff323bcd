//! Analytic floating-op cost model for vanilla and Vote&Mix ViTs.
//!
//! Counting convention: one fused multiply-add is one op, matmul-dominated
//! terms only. Under that convention a vanilla ViT-B/16 at 224 px comes to
//! about 17.6 G ops. Softmax, layer-norm and GELU element-ops are excluded
//! from the headline totals (well under 1% at these shapes) and reported
//! separately.

use crate::error::Result;
use crate::model::ViTConfig;
use crate::schedule::PruneSchedule;
use std::io::Write;

/// Token count before each layer and after the last one, following
/// `N_{l+1} = N_l - floor((N_l - protected) * r_l)` with the product taken
/// in f64, the same rule the engine's selection uses.
pub fn token_trajectory(n0: usize, sched: &PruneSchedule, protected: usize) -> Vec<usize> {
    let mut ns = Vec::with_capacity(sched.depth() + 1);
    let mut n = n0;
    ns.push(n);
    for &r in sched.ratios() {
        let prunable = n.saturating_sub(protected);
        let k = (prunable as f64 * r as f64).floor() as usize;
        n -= k;
        ns.push(n);
    }
    ns
}

/// Multiply-accumulate counts of one block.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerFlops {
    pub layer: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub ratio: f32,
    pub qkv: u64,
    pub similarity: u64,
    pub vote: u64,
    pub mix_softmax: u64,
    pub query_mix: u64,
    pub attention: u64,
    pub out_proj: u64,
    pub mlp: u64,
    /// Softmax/norm/GELU element ops, excluded from headline totals.
    pub elementwise: u64,
}

impl LayerFlops {
    pub fn attn_ops(&self) -> u64 {
        self.qkv + self.attention + self.out_proj
    }

    pub fn mlp_ops(&self) -> u64 {
        self.mlp
    }

    /// The Vote&Mix-specific additional cost.
    pub fn overhead_ops(&self) -> u64 {
        self.similarity + self.vote + self.mix_softmax + self.query_mix
    }

    pub fn total(&self) -> u64 {
        self.attn_ops() + self.mlp_ops() + self.overhead_ops()
    }
}

fn layer_flops_with(
    layer: usize,
    n_in: usize,
    n_out: usize,
    r: f32,
    cfg: &ViTConfig,
    vomix: bool,
) -> LayerFlops {
    let d = cfg.dim as u64;
    let n = n_in as u64;
    let m = n_out as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let rr = r as f64;
    let (similarity, vote, mix_softmax, query_mix) = if vomix {
        (
            n * n * (d / cfg.heads as u64),
            n * n,
            ((n * n) as f64 * rr * (1.0 - rr)).round() as u64,
            ((n * n * d) as f64 * rr * (1.0 - rr)).round() as u64,
        )
    } else {
        (0, 0, 0, 0)
    };
    let elementwise = {
        // Two layer norms (3 ops/element), per-head softmax (2 ops/logit),
        // GELU (6 ops/element), mixture softmax already in the overhead.
        3 * d * (n + m) + 2 * cfg.heads as u64 * m * n + 6 * m * hidden
    };
    LayerFlops {
        layer,
        n_in,
        n_out,
        ratio: r,
        qkv: 3 * n * d * d,
        similarity,
        vote,
        mix_softmax,
        query_mix,
        attention: 2 * m * n * d,
        out_proj: m * d * d,
        mlp: (2.0 * cfg.mlp_ratio as f64 * (m * d * d) as f64).round() as u64,
        elementwise,
    }
}

/// Cost of one Vote&Mix block given only the input count and ratio, with
/// `n_out = n_in - floor(n_in * r)` (no protected tokens).
pub fn layer_flops(n_in: usize, r: f32, cfg: &ViTConfig) -> LayerFlops {
    let n_out = n_in - (n_in as f64 * r as f64).floor() as usize;
    layer_flops_with(0, n_in, n_out, r, cfg, true)
}

#[derive(Clone, Debug)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub front_end: u64,
    pub head: u64,
    /// Headline total: front end + all layers + head.
    pub total: u64,
    pub elementwise_total: u64,
    /// The same model with an all-zero schedule and Vote&Mix disabled.
    pub vanilla_total: u64,
    /// Percent reduction vs the vanilla baseline (positive = cheaper).
    pub reduction_pct: f64,
    pub trajectory: Vec<usize>,
    pub convention: &'static str,
}

/// Full-model cost under a schedule. The trajectory accounts for the
/// default protected set of the configuration.
pub fn model_flops(cfg: &ViTConfig, sched: &PruneSchedule, vomix_enabled: bool) -> Result<FlopsReport> {
    cfg.validate()?;
    let protected = cfg.default_protected().len();
    let trajectory = token_trajectory(cfg.token_count(), sched, protected);
    let d = cfg.dim as u64;
    let front_end = (cfg.patch_count() * cfg.patch_dim()) as u64 * d;
    let head = d * cfg.classes as u64;

    let per_layer: Vec<LayerFlops> = (0..cfg.depth)
        .map(|l| {
            layer_flops_with(
                l,
                trajectory[l],
                trajectory[l + 1],
                sched.ratios()[l],
                cfg,
                vomix_enabled,
            )
        })
        .collect();
    let layer_sum: u64 = per_layer.iter().map(LayerFlops::total).sum();
    let elementwise_total: u64 = per_layer.iter().map(|l| l.elementwise).sum();
    let total = front_end + layer_sum + head;

    let vanilla_total = if sched.is_vanilla() && !vomix_enabled {
        total
    } else {
        let zeros = PruneSchedule::zeros(cfg.depth);
        model_flops(cfg, &zeros, false)?.total
    };
    let reduction_pct = 100.0 * (1.0 - total as f64 / vanilla_total as f64);

    Ok(FlopsReport {
        per_layer,
        front_end,
        head,
        total,
        elementwise_total,
        vanilla_total,
        reduction_pct,
        trajectory,
        convention: "one multiply-accumulate = one op",
    })
}

/// One row per layer plus a summary row holding the column sums. The
/// headline total additionally includes the front end and head.
pub fn write_csv<W: Write>(report: &FlopsReport, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "layer,n_in,n_out,r,attn_ops,mlp_ops,overhead_ops")?;
    for l in &report.per_layer {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            l.layer,
            l.n_in,
            l.n_out,
            l.ratio,
            l.attn_ops(),
            l.mlp_ops(),
            l.overhead_ops()
        )?;
    }
    let attn: u64 = report.per_layer.iter().map(LayerFlops::attn_ops).sum();
    let mlp: u64 = report.per_layer.iter().map(LayerFlops::mlp_ops).sum();
    let overhead: u64 = report.per_layer.iter().map(LayerFlops::overhead_ops).sum();
    writeln!(
        w,
        "total,{},{},,{attn},{mlp},{overhead}",
        report.trajectory[0],
        report.trajectory[report.trajectory.len() - 1]
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::expand_schedule;

    fn preset(name: &str) -> ViTConfig {
        ViTConfig::preset(name).unwrap()
    }

    #[test]
    fn trajectory_all_zero() {
        let sched = PruneSchedule::zeros(12);
        let t = token_trajectory(197, &sched, 1);
        assert_eq!(t, vec![197; 13]);
    }

    #[test]
    fn trajectory_protected_floor() {
        let sched = expand_schedule("const:0.05:12", 12).unwrap();
        let t = token_trajectory(197, &sched, 1);
        assert_eq!(&t[..4], &[197, 188, 179, 171]);
    }

    #[test]
    fn trajectory_small_floor() {
        let sched = expand_schedule("const:0.25:4", 4).unwrap();
        let t = token_trajectory(8, &sched, 0);
        assert_eq!(t, vec![8, 6, 5, 4, 3]);
    }

    #[test]
    fn vanilla_layer_cost_matches_hand_arithmetic() {
        let cfg = preset("vit-b16-224");
        let l = layer_flops_with(0, 197, 197, 0.0, &cfg, false);
        let expect = 12 * 197 * 768u64 * 768 + 2 * 197 * 197 * 768;
        assert_eq!(l.total(), expect);
        assert!((l.total() as f64 - 1.454e9).abs() / 1.454e9 < 0.01);
    }

    #[test]
    fn disabled_path_has_zero_overhead() {
        let cfg = preset("vit-b16-224");
        let l = layer_flops_with(0, 197, 197, 0.0, &cfg, false);
        assert_eq!(l.overhead_ops(), 0);
    }

    #[test]
    fn overhead_respects_section_bound() {
        // Term by term: similarity and query mix meet their bounds exactly,
        // vote and the mixture softmax each stay under N^2.
        let cfg = preset("vit-b16-224");
        for &r in &[0.0f32, 0.05, 0.25, 0.5, 0.9] {
            let l = layer_flops(197, r, &cfg);
            let n = 197f64;
            let d = 768f64;
            let bound =
                n * n * d * (1.0 / 12.0 + (r as f64) * (1.0 - r as f64)) + 2.0 * n * n;
            assert!(l.overhead_ops() as f64 <= bound + 1.0, "r={r}");
        }
    }

    #[test]
    fn vanilla_vit_b_total() {
        let cfg = preset("vit-b16-224");
        let sched = PruneSchedule::zeros(12);
        let report = model_flops(&cfg, &sched, false).unwrap();
        let g = report.total as f64 / 1e9;
        assert!((g - 17.6).abs() / 17.6 < 0.05, "got {g} G");
        assert_eq!(report.reduction_pct, 0.0);
    }

    #[test]
    fn vomix_reduction_vit_b() {
        let cfg = preset("vit-b16-224");
        let sched = expand_schedule("const:0.05:12", 12).unwrap();
        let report = model_flops(&cfg, &sched, true).unwrap();
        assert!((report.reduction_pct - 25.0).abs() <= 3.0, "{}", report.reduction_pct);
    }

    #[test]
    fn overhead_accounting_is_separable() {
        // Enabling Vote&Mix on an all-zero schedule adds exactly the
        // similarity+vote overhead of every layer.
        let cfg = preset("vit-s16-224");
        let zeros = PruneSchedule::zeros(12);
        let off = model_flops(&cfg, &zeros, false).unwrap();
        let on = model_flops(&cfg, &zeros, true).unwrap();
        let overhead: u64 = on.per_layer.iter().map(LayerFlops::overhead_ops).sum();
        assert_eq!(on.total - off.total, overhead);
        let sim_vote: u64 = on.per_layer.iter().map(|l| l.similarity + l.vote).sum();
        assert_eq!(overhead, sim_vote);
    }

    #[test]
    fn reduction_monotone_in_ratio() {
        let cfg = preset("vit-s16-224");
        let mut last = -1.0f64;
        for &a in &[0.0f32, 0.02, 0.05, 0.08, 0.12] {
            let sched = expand_schedule(&format!("const:{a}:12"), 12).unwrap();
            let report = model_flops(&cfg, &sched, true).unwrap();
            assert!(
                report.reduction_pct >= last - 1e-9,
                "reduction not monotone at a={a}"
            );
            last = report.reduction_pct;
        }
    }

    #[test]
    fn csv_shape() {
        let cfg = preset("vit-tiny");
        let sched = expand_schedule("const:0.1:4", 4).unwrap();
        let report = model_flops(&cfg, &sched, true).unwrap();
        let mut buf = Vec::new();
        write_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert!(lines[0].starts_with("layer,"));
        assert!(lines[5].starts_with("total,"));
    }
}

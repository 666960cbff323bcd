//! Built-in verification suites: oracle equivalence against the naive
//! reference path (including tie-heavy quantized inputs), conservation
//! checks, and degenerate-ratio equivalence against the vanilla route.

use vomix::attention::{vomix_attention_block, AttentionLayerWeights, TokenState};
use vomix::error::{Error, Result};
use vomix::model::{
    forward_state, seeded_state, ForwardOptions, ModelWeights, ViTConfig,

};
use vomix::provenance::{column_sums, init_assignment, update_assignment};
use vomix::reference::vomix_block_reference;
use vomix::rng::SplitMix64;
use vomix::schedule::{expand_schedule, PruneSchedule};
use vomix::strategy::{
    AttnMix, Fanout, Feature, Metric, QueryMix, Selection, StrategyConfig,
};
use vomix::tensor::Matrix;
use vomix::weights::init_weights;

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, amp: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.next_range(-amp, amp))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_layer_weights(rng: &mut SplitMix64, d: usize) -> AttentionLayerWeights {
    AttentionLayerWeights {
        ln_gamma: (0..d).map(|_| rng.next_range(0.5, 1.5)).collect(),
        ln_beta: (0..d).map(|_| rng.next_range(-0.1, 0.1)).collect(),
        qkv_weight: random_matrix(rng, d, 3 * d, 0.1),
        qkv_bias: (0..3 * d).map(|_| rng.next_range(-0.05, 0.05)).collect(),
        out_weight: random_matrix(rng, d, d, 0.1),
        out_bias: (0..d).map(|_| rng.next_range(-0.05, 0.05)).collect(),
    }
}

fn oracle_suite(trials: usize) -> Result<()> {
    let selections = [
        Selection::Vote,
        Selection::MaxSim,
        Selection::Random { seed: 11 },
    ];
    let fanouts = [Fanout::Top1, Fanout::Top2, Fanout::TopR];
    let qmixes = [QueryMix::Global, QueryMix::Max, QueryMix::None];
    let amixes = [AttnMix::Prop, AttnMix::NoProp, AttnMix::None];
    let features = [Feature::Key, Feature::Query, Feature::Value];
    let metrics = [Metric::Cosine, Metric::L2, Metric::Dot];

    for t in 0..trials {
        let mut rng = SplitMix64::new(0x5E1F + t as u64);
        let heads = [1usize, 2][(rng.next_u64() % 2) as usize];
        let d = heads * 8;
        let n = 4 + (rng.next_u64() % 29) as usize;
        let ratio = [0.1f32, 0.25, 0.4][t % 3];
        let strategy = StrategyConfig {
            selection: selections[(t / 3) % 3],
            fanout: fanouts[(t / 9) % 3],
            feature: features[(t / 27) % 3],
            metric: metrics[(t / 81) % 3],
            query_mix: qmixes[(t / 243) % 3],
            attn_mix: amixes[(t / 729) % 3],
        };
        let protected: Vec<usize> = if t % 4 == 1 { vec![0] } else { vec![] };
        let w = random_layer_weights(&mut rng, d);
        let mut x = random_matrix(&mut rng, n, d, 0.5);
        // Every fourth trial quantizes the inputs so exact similarity ties
        // appear and the tie-break contract gets exercised.
        if t % 4 == 0 {
            for v in x.data_mut() {
                *v = (*v * 2.0).round() * 0.5;
            }
        }
        let sizes = vec![1.0f32; n];
        let state = TokenState {
            x: x.clone(),
            sizes: sizes.clone(),
            layer: 0,
        };
        let (engine, trace) =
            vomix_attention_block(&state, &w, heads, ratio, &strategy, &protected, false)?;
        let rows: Vec<Vec<f32>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        let oracle =
            vomix_block_reference(&rows, &sizes, &w, heads, ratio, &strategy, &protected, 0);
        if trace.pruned != oracle.pruned || trace.retained != oracle.retained {
            return Err(Error::Invariant(format!(
                "oracle trial {t}: partitions diverged (pruned {:?} vs {:?})",
                trace.pruned, oracle.pruned
            )));
        }
        for (i, orow) in oracle.x_out.iter().enumerate() {
            for (j, &ov) in orow.iter().enumerate() {
                if (engine.x.get(i, j) - ov).abs() >= 1e-6 {
                    return Err(Error::Invariant(format!(
                        "oracle trial {t}: output[{i}][{j}] differs by {}",
                        (engine.x.get(i, j) - ov).abs()
                    )));
                }
            }
        }
    }
    Ok(())
}

fn conservation_suite(trials: usize) -> Result<()> {
    let cfg = ViTConfig {
        image_size: 40,
        patch_size: 8,
        channels: 3,
        depth: 4,
        dim: 16,
        heads: 4,
        mlp_ratio: 4.0,
        classes: 5,
        class_token: true,
    };
    let n0 = cfg.token_count();
    for t in 0..trials {
        let w = ModelWeights::from_store(&cfg, &init_weights(&cfg, t as u64))?;
        let sched = expand_schedule("const:0.25:4", cfg.depth)?;
        let mut opts = ForwardOptions::vomix(&cfg);
        opts.strategy.query_mix = if t % 2 == 0 {
            QueryMix::Global
        } else {
            QueryMix::Max
        };
        opts.collect_trace = true;
        let state = seeded_state(n0, cfg.dim, 0xC0DE + t as u64);
        let out = forward_state(state, &w, &cfg, &sched, &opts)?;
        let mut assignment = init_assignment(n0);
        for trace in &out.traces {
            let total: f32 = trace.sizes_after.as_ref().unwrap().iter().sum();
            if (total - n0 as f32).abs() / n0 as f32 > 1e-4 {
                return Err(Error::Invariant(format!(
                    "conservation trial {t}: size sum {total} vs {n0}"
                )));
            }
            let mw = trace.mix_weights.as_ref().unwrap();
            for r in 0..mw.rows() {
                let s: f32 = mw.row(r).iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Invariant(format!(
                        "conservation trial {t}: mixture row sums to {s}"
                    )));
                }
            }
            assignment = update_assignment(&assignment, trace)?;
            for sum in column_sums(&assignment.m) {
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Invariant(format!(
                        "conservation trial {t}: assignment column sums to {sum}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn r_zero_suite(trials: usize) -> Result<()> {
    let cfg = ViTConfig {
        image_size: 48,
        patch_size: 8,
        channels: 3,
        depth: 3,
        dim: 24,
        heads: 3,
        mlp_ratio: 4.0,
        classes: 6,
        class_token: true,
    };
    let sched = PruneSchedule::zeros(cfg.depth);
    for t in 0..trials {
        let w = ModelWeights::from_store(&cfg, &init_weights(&cfg, 0xF0 + t as u64))?;
        let state = seeded_state(cfg.token_count(), cfg.dim, 0x0DD + t as u64);
        let vomix = forward_state(
            state.clone(),
            &w,
            &cfg,
            &sched,
            &ForwardOptions::vomix(&cfg),
        )?;
        let vanilla = forward_state(state, &w, &cfg, &sched, &ForwardOptions::vanilla())?;
        for (a, b) in vomix.logits.iter().zip(&vanilla.logits) {
            if (a - b).abs() >= 1e-5 {
                return Err(Error::Invariant(format!(
                    "r=0 trial {t}: logit diff {}",
                    (a - b).abs()
                )));
            }
        }
    }
    Ok(())
}

pub fn run(trials: usize) -> Result<()> {
    let oracle_trials = trials.max(1);
    let conservation_trials = (trials / 8).max(2);
    let r_zero_trials = (trials / 8).max(2);
    let mut failed = false;

    for (name, result, count) in [
        ("oracle-equivalence", oracle_suite(oracle_trials), oracle_trials),
        (
            "conservation",
            conservation_suite(conservation_trials),
            conservation_trials,
        ),
        ("r0-equivalence", r_zero_suite(r_zero_trials), r_zero_trials),
    ] {
        match result {
            Ok(()) => println!("selftest {name}: {count} trials PASS"),
            Err(e) => {
                println!("selftest {name}: FAIL ({e})");
                failed = true;
            }
        }
    }
    if failed {
        Err(Error::Invariant("selftest failed".into()))
    } else {
        println!("selftest: all suites passed");
        Ok(())
    }
}

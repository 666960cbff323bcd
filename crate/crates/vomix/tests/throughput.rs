//! Criterion 8: wall-clock throughput property on the build machine.
//! Absolute images/s is hardware-specific; the portable check is the
//! op-count ratio against the analytic model. Kept in its own test binary
//! so the timed section never shares the machine with other tests.

use vomix::bench::{run_bench, worker_threads, BenchParams};
use vomix::flops::model_flops;
use vomix::model::{EngineMode, ViTConfig};
use vomix::schedule::expand_schedule;
use vomix::strategy::StrategyConfig;

#[test]
fn criterion_8_throughput_property() {
    let cfg = ViTConfig::preset("vit-b16-224").unwrap();
    let params = BenchParams {
        repeats: 5,
        warmup: 1,
        batch: 1,
        seed: 3,
        threads: worker_threads(),
    };
    let specs = ["const:0:12", "const:0.05:12", "const:0.12:12"];
    let mut results = Vec::new();
    for spec in specs {
        let r = run_bench(
            &cfg,
            spec,
            StrategyConfig::default(),
            EngineMode::VoMix,
            &params,
        )
        .unwrap();
        println!(
            "[criterion 8] {spec}: median {:.3} s, {:.2} im/s, {} Mops",
            r.median_secs,
            r.images_per_sec,
            r.mac_count / 1_000_000
        );
        results.push(r);
    }

    // Measured op counts match the analytic model within +-10% per schedule.
    for (r, spec) in results.iter().zip(specs) {
        let sched = expand_schedule(spec, cfg.depth).unwrap();
        let predicted = model_flops(&cfg, &sched, true).unwrap().total as f64;
        let rel = (r.mac_count as f64 - predicted).abs() / predicted;
        assert!(
            rel <= 0.10,
            "{spec}: measured {} vs analytic {predicted} ({rel:.3})",
            r.mac_count
        );
    }
    // Op-count ratio between schedules matches the analytic ratio.
    let analytic_ratio = {
        let z = model_flops(&cfg, &expand_schedule(specs[0], 12).unwrap(), true)
            .unwrap()
            .total as f64;
        let m = model_flops(&cfg, &expand_schedule(specs[2], 12).unwrap(), true)
            .unwrap()
            .total as f64;
        z / m
    };
    let measured_ratio = results[0].mac_count as f64 / results[2].mac_count as f64;
    assert!(
        (measured_ratio - analytic_ratio).abs() / analytic_ratio <= 0.10,
        "op-count ratio {measured_ratio:.3} vs analytic {analytic_ratio:.3}"
    );

    // Wall-clock monotone non-increasing in the pruning ratio (5% noise
    // allowance), and at least 1.2x end-to-end speedup at r = 12%.
    assert!(
        results[1].median_secs <= results[0].median_secs * 1.05,
        "r=5% slower than r=0: {:.3} vs {:.3}",
        results[1].median_secs,
        results[0].median_secs
    );
    assert!(
        results[2].median_secs <= results[1].median_secs * 1.05,
        "r=12% slower than r=5%: {:.3} vs {:.3}",
        results[2].median_secs,
        results[1].median_secs
    );
    let speedup = results[0].median_secs / results[2].median_secs;
    assert!(
        speedup >= 1.2,
        "const:0.12:12 speedup {speedup:.2}x below 1.2x"
    );
    println!(
        "[criterion 8] wall-clock monotone across r in {{0, 5%, 12%}}, \
         {speedup:.2}x speedup at r=12%, op counts within +-10% of analytic: PASS"
    );
}

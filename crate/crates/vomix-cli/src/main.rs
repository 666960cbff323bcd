//! Command-line entry point: `flops`, `forward`, `bench`, `heatmap`,
//! `regionmap`, `ablate`, `selftest`.
//!
//! Exit codes: 0 success, 1 test/assertion failure, 2 configuration error.

mod selftest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use vomix::bench::{sweep, worker_threads, BenchParams};
use vomix::error::{Error, Result};
use vomix::flops::{model_flops, write_csv as write_flops_csv};
use vomix::model::{
    forward_image, forward_state, parse_config_str, patch_embed, seeded_state, EngineMode,
    ForwardOptions, ImageTensor, ModelWeights, Normalization, ViTConfig,
};
use vomix::provenance::{assignment_from_traces, render_heatmap, render_region_map, TokenGrid};
use vomix::schedule::{expand_schedule, PruneSchedule};
use vomix::strategy::{validate as validate_strategy, Selection, StrategyConfig};
use vomix::weights::{init_weights, WeightStore};

#[derive(Parser)]
#[command(
    name = "vomix",
    version,
    about = "Vision Transformer forward-pass engine with Vote&Mix token reduction"
)]
struct Cli {
    /// Worker threads (default: VOMIX_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analytic op counts for a model/schedule, with the Table-style totals.
    Flops(FlopsCmd),
    /// Run one forward pass and write the logits.
    Forward(ForwardCmd),
    /// Wall-clock and op-count benchmark over one or more schedules.
    Bench(BenchCmd),
    /// Render the feature-source heatmap of one surviving token.
    Heatmap(HeatmapCmd),
    /// Render the dominant-destination region map.
    Regionmap(RegionmapCmd),
    /// Run a strategy grid and report output checksums and op counts.
    Ablate(AblateCmd),
    /// Run the built-in equivalence and conservation suites.
    Selftest(SelftestCmd),
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in model shape (vit-s16-224, vit-b16-224, vit-l16-224,
    /// vit-h14-224, vit-b16-384, vit-l16-512, vit-h14-518, vit-tiny).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Model config file (key=value; see README).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(ViTConfig, Normalization)> {
        if let Some(name) = &self.preset {
            let cfg = ViTConfig::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset \"{name}\" (available: {})",
                    ViTConfig::preset_names().join(", ")
                ))
            })?;
            return Ok((cfg, Normalization::default()));
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            return parse_config_str(&text);
        }
        Err(Error::Config("specify --preset or --config".into()))
    }
}

#[derive(Args, Clone)]
struct StrategyArgs {
    /// Token selection: vote, max_sim, random.
    #[arg(long)]
    selection: Option<String>,
    /// Vote fanout: top1, top2, topr.
    #[arg(long)]
    fanout: Option<String>,
    /// Similarity feature: q, k, v.
    #[arg(long)]
    feature: Option<String>,
    /// Similarity metric: cosine, l2, dot.
    #[arg(long)]
    metric: Option<String>,
    /// Query mixing: global, max, none.
    #[arg(long = "query-mix")]
    query_mix: Option<String>,
    /// Attention mixing: prop, no_prop, none.
    #[arg(long = "attn-mix")]
    attn_mix: Option<String>,
}

impl StrategyArgs {
    fn resolve(&self, random_seed: u64) -> Result<StrategyConfig> {
        let v = validate_strategy(
            self.selection.as_deref(),
            self.fanout.as_deref(),
            self.feature.as_deref(),
            self.metric.as_deref(),
            self.query_mix.as_deref(),
            self.attn_mix.as_deref(),
            random_seed,
        )?;
        for w in &v.warnings {
            eprintln!("warning: {w}");
        }
        Ok(v.config)
    }
}

/// Parses `--protect`: "auto" (class token when present), "none", or a
/// comma-separated index list.
fn parse_protect(spec: Option<&str>, cfg: &ViTConfig) -> Result<Vec<usize>> {
    match spec.unwrap_or("auto") {
        "auto" => Ok(cfg.default_protected()),
        "none" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad protected index \"{s}\"")))
            })
            .collect(),
    }
}

fn schedule_or_zeros(spec: Option<&str>, cfg: &ViTConfig) -> Result<PruneSchedule> {
    match spec {
        Some(s) => expand_schedule(s, cfg.depth),
        None => Ok(PruneSchedule::zeros(cfg.depth)),
    }
}

/// FNV-1a 64 over the little-endian bytes of the values.
fn checksum(values: &[f32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FlopsCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Pruning schedule (const:a:b | decr:a:b | list:r0,r1,...).
    #[arg(long)]
    schedule: String,
    /// Write the per-layer CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_flops(args: &FlopsCmd) -> Result<()> {
    let (cfg, _) = args.model.resolve()?;
    let sched = expand_schedule(&args.schedule, cfg.depth)?;
    let vomix_enabled = !sched.is_vanilla();
    let report = model_flops(&cfg, &sched, vomix_enabled)?;

    println!(
        "model: L={} D={} H={} N={} ({}x{} px, patch {})",
        cfg.depth,
        cfg.dim,
        cfg.heads,
        cfg.token_count(),
        cfg.image_size,
        cfg.image_size,
        cfg.patch_size
    );
    println!(
        "schedule: {} ({})",
        args.schedule,
        if vomix_enabled {
            "vote&mix enabled"
        } else {
            "vanilla"
        }
    );
    println!("{:>5} {:>6} {:>6} {:>7} {:>14} {:>14} {:>13}", "layer", "n_in", "n_out", "r", "attn_ops", "mlp_ops", "overhead_ops");
    for l in &report.per_layer {
        println!(
            "{:>5} {:>6} {:>6} {:>7.3} {:>14} {:>14} {:>13}",
            l.layer,
            l.n_in,
            l.n_out,
            l.ratio,
            l.attn_ops(),
            l.mlp_ops(),
            l.overhead_ops()
        );
    }
    println!(
        "front_end {} ops, head {} ops",
        report.front_end, report.head
    );
    println!(
        "total {:.3} G ops ({})",
        report.total as f64 / 1e9,
        report.convention
    );
    if vomix_enabled {
        println!(
            "vanilla baseline {:.3} G ops, reduction -{:.1}%",
            report.vanilla_total as f64 / 1e9,
            report.reduction_pct
        );
    }
    println!(
        "elementwise (softmax/norm/GELU, excluded from totals): {:.3} G",
        report.elementwise_total as f64 / 1e9
    );
    if let Some(path) = &args.out {
        let mut f = std::fs::File::create(path)?;
        write_flops_csv(&report, &mut f)?;
        println!("per-layer CSV written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ForwardCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// VMTW weight container; omitted = deterministic init from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Input image (binary PPM, P6); omitted = seeded random token state.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    schedule: Option<String>,
    /// Attention path: auto (vanilla iff the schedule is all zeros),
    /// vanilla, or vomix.
    #[arg(long, default_value = "auto")]
    engine: String,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Protected tokens: auto | none | comma-separated indices.
    #[arg(long)]
    protect: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print per-layer retained-index lists.
    #[arg(long)]
    trace: bool,
    /// Write logits here (one per line).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(
    cfg: &ViTConfig,
    weights: Option<&PathBuf>,
    seed: u64,
) -> Result<ModelWeights> {
    let store = match weights {
        Some(path) => WeightStore::load(path)?,
        None => init_weights(cfg, seed),
    };
    ModelWeights::from_store(cfg, &store)
}

fn engine_mode(spec: &str, sched: &PruneSchedule) -> Result<EngineMode> {
    match spec {
        "auto" => Ok(if sched.is_vanilla() {
            EngineMode::Vanilla
        } else {
            EngineMode::VoMix
        }),
        "vanilla" => Ok(EngineMode::Vanilla),
        "vomix" => Ok(EngineMode::VoMix),
        other => Err(Error::Config(format!(
            "unknown engine \"{other}\" (auto|vanilla|vomix)"
        ))),
    }
}

fn cmd_forward(args: &ForwardCmd) -> Result<()> {
    let (cfg, norm) = args.model.resolve()?;
    let sched = schedule_or_zeros(args.schedule.as_deref(), &cfg)?;
    let mode = engine_mode(&args.engine, &sched)?;
    let weights = load_model(&cfg, args.weights.as_ref(), args.seed)?;
    let opts = ForwardOptions {
        mode,
        strategy: args.strategy.resolve(args.seed)?,
        protected: parse_protect(args.protect.as_deref(), &cfg)?,
        collect_trace: false,
    };
    let result = match &args.image {
        Some(path) => {
            let ppm = vomix::ppm::read_ppm(path)?;
            let img = ImageTensor::from_rgb8(ppm.width, ppm.height, &ppm.pixels, &norm);
            forward_image(&img, &weights, &cfg, &sched, &opts)?
        }
        None => {
            let state = seeded_state(cfg.token_count(), cfg.dim, args.seed);
            forward_state(state, &weights, &cfg, &sched, &opts)?
        }
    };

    if args.trace {
        for t in &result.traces {
            let list: Vec<String> = t.retained.iter().map(usize::to_string).collect();
            println!(
                "layer {}: kept {}/{} retained: {}",
                t.layer,
                t.n_out,
                t.n_in,
                list.join(" ")
            );
        }
    }
    println!(
        "tokens {} -> {}",
        result.trajectory[0],
        result.trajectory[result.trajectory.len() - 1]
    );
    println!("mac_ops {}", result.mac_count);
    println!("logits checksum {:016x}", checksum(&result.logits));
    if let Some(path) = &args.out {
        let mut text = String::with_capacity(result.logits.len() * 16);
        for v in &result.logits {
            text.push_str(&format!("{v:.9e}\n"));
        }
        std::fs::write(path, text)?;
        println!("logits written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Pruning schedule; repeat the flag to sweep several.
    #[arg(long, required = true)]
    schedule: Vec<String>,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Timed runs per schedule (minimum 5).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Images per timed run.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the result CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench(args: &BenchCmd) -> Result<()> {
    let (cfg, _) = args.model.resolve()?;
    let strategy = args.strategy.resolve(args.seed)?;
    let params = BenchParams {
        repeats: args.repeats,
        warmup: 2,
        batch: args.batch,
        seed: args.seed,
        threads: worker_threads(),
    };
    let results = sweep(&cfg, &args.schedule, strategy, EngineMode::VoMix, &params)?;
    for r in &results {
        println!(
            "{} {}: median {:.4} s (min {:.4}, max {:.4}), {:.2} im/s, {:.0} tok/s, {} mac_ops, ~{} MB peak",
            r.config_id,
            r.schedule,
            r.median_secs,
            r.min_secs,
            r.max_secs,
            r.images_per_sec,
            r.tokens_per_sec,
            r.mac_count,
            r.peak_mem_bytes / (1 << 20)
        );
    }
    if let Some(path) = &args.out {
        let mut f = std::fs::File::create(path)?;
        vomix::bench::write_csv(&results, &mut f)?;
        println!("CSV written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// heatmap / regionmap
// ---------------------------------------------------------------------------

#[derive(Args)]
struct VisCommon {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    schedule: Option<String>,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long)]
    protect: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Integer upscale factor per patch cell.
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapCmd {
    #[command(flatten)]
    common: VisCommon,
    /// Surviving-token index whose feature sources get rendered.
    #[arg(long)]
    token: usize,
}

#[derive(Args)]
struct RegionmapCmd {
    #[command(flatten)]
    common: VisCommon,
}

fn traced_assignment(
    args: &VisCommon,
) -> Result<(ViTConfig, vomix::provenance::AssignmentMatrix)> {
    let (cfg, norm) = args.model.resolve()?;
    let sched = schedule_or_zeros(args.schedule.as_deref(), &cfg)?;
    let weights = load_model(&cfg, args.weights.as_ref(), args.seed)?;
    let opts = ForwardOptions {
        mode: EngineMode::VoMix,
        strategy: args.strategy.resolve(args.seed)?,
        protected: parse_protect(args.protect.as_deref(), &cfg)?,
        collect_trace: true,
    };
    let result = match &args.image {
        Some(path) => {
            let ppm = vomix::ppm::read_ppm(path)?;
            let img = ImageTensor::from_rgb8(ppm.width, ppm.height, &ppm.pixels, &norm);
            let state = patch_embed(&img, &weights, &cfg)?;
            forward_state(state, &weights, &cfg, &sched, &opts)?
        }
        None => {
            let state = seeded_state(cfg.token_count(), cfg.dim, args.seed);
            forward_state(state, &weights, &cfg, &sched, &opts)?
        }
    };
    let assignment = assignment_from_traces(cfg.token_count(), &result.traces)?;
    Ok((cfg, assignment))
}

fn cmd_heatmap(args: &HeatmapCmd) -> Result<()> {
    let (cfg, assignment) = traced_assignment(&args.common)?;
    let grid = TokenGrid::image(cfg.grid(), cfg.grid());
    let (w, h, px) = render_heatmap(
        &assignment,
        args.token,
        &grid,
        cfg.class_token,
        args.common.scale,
    )?;
    vomix::ppm::write_ppm(&args.common.out, w, h, &px)?;
    println!(
        "heatmap for surviving token {} ({} originals) written to {}",
        args.token,
        assignment.m.rows(),
        args.common.out.display()
    );
    Ok(())
}

fn cmd_regionmap(args: &RegionmapCmd) -> Result<()> {
    let (cfg, assignment) = traced_assignment(&args.common)?;
    let grid = TokenGrid::image(cfg.grid(), cfg.grid());
    let (w, h, px) =
        render_region_map(&assignment, &grid, cfg.class_token, args.common.scale)?;
    vomix::ppm::write_ppm(&args.common.out, w, h, &px)?;
    println!(
        "region map ({} survivors) written to {}",
        assignment.m.cols(),
        args.common.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Axes to vary: "selection=vote,max_sim;metric=cosine,l2". Unlisted
    /// axes stay at their defaults; the full default combo is always
    /// included once.
    #[arg(long, default_value = "")]
    grid: String,
    #[arg(long)]
    schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(spec: &str, seed: u64) -> Result<Vec<StrategyConfig>> {
    let mut axes: [Vec<Option<String>>; 6] = [
        vec![None],
        vec![None],
        vec![None],
        vec![None],
        vec![None],
        vec![None],
    ];
    const NAMES: [&str; 6] = [
        "selection",
        "fanout",
        "feature",
        "metric",
        "query-mix",
        "attn-mix",
    ];
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let (name, vals) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis \"{part}\" is not name=v1,v2")))?;
        let idx = NAMES
            .iter()
            .position(|&n| n == name.trim())
            .ok_or_else(|| Error::Config(format!("unknown grid axis \"{name}\"")))?;
        axes[idx] = vals
            .split(',')
            .map(|v| Some(v.trim().to_string()))
            .collect();
    }
    let mut combos = Vec::new();
    for sel in &axes[0] {
        for fan in &axes[1] {
            for feat in &axes[2] {
                for met in &axes[3] {
                    for qm in &axes[4] {
                        for am in &axes[5] {
                            let v = validate_strategy(
                                sel.as_deref(),
                                fan.as_deref(),
                                feat.as_deref(),
                                met.as_deref(),
                                qm.as_deref(),
                                am.as_deref(),
                                seed,
                            )?;
                            combos.push(v.config);
                        }
                    }
                }
            }
        }
    }
    // The default combo appears exactly once in any grid.
    let default = StrategyConfig::default();
    if !combos.iter().any(|c| c == &default) {
        combos.insert(0, default);
    }
    let mut seen = std::collections::HashSet::new();
    combos.retain(|c| seen.insert(c.id()));
    Ok(combos)
}

fn cmd_ablate(args: &AblateCmd) -> Result<()> {
    let (cfg, _) = args.model.resolve()?;
    let sched = expand_schedule(&args.schedule, cfg.depth)?;
    let combos = parse_grid(&args.grid, args.seed)?;
    let weights = load_model(&cfg, None, args.seed)?;
    let mut rows = Vec::new();
    for combo in &combos {
        let mut strategy = *combo;
        if let Selection::Random { .. } = strategy.selection {
            strategy.selection = Selection::Random { seed: args.seed };
        }
        let opts = ForwardOptions {
            mode: EngineMode::VoMix,
            strategy,
            protected: cfg.default_protected(),
            collect_trace: false,
        };
        let state = seeded_state(cfg.token_count(), cfg.dim, args.seed);
        let result = forward_state(state, &weights, &cfg, &sched, &opts)?;
        rows.push(format!(
            "{},{:016x},{}",
            combo.id().replace('/', ","),
            checksum(&result.logits),
            result.mac_count
        ));
    }
    let header = "selection,fanout,feature,metric,query_mix,attn_mix,checksum,mac_ops";
    println!("{header}");
    for r in &rows {
        println!("{r}");
    }
    if let Some(path) = &args.out {
        let mut text = String::from(header);
        text.push('\n');
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SelftestCmd {
    /// Oracle-equivalence trials (other suites scale off this).
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Flip the argmax/argsort tie-break contract to prove the suites
    /// detect it. Expected outcome: exit 1.
    #[arg(long, hide = true)]
    inject_tie_fault: bool,
}

fn cmd_selftest(args: &SelftestCmd) -> Result<()> {
    if args.inject_tie_fault {
        vomix::opcount::set_tie_break_fault(true);
        eprintln!("tie-break fault injected: suites should now fail");
    }
    selftest::run(args.trials)
}

// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("VOMIX_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        });
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Ignore the error if a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    match &cli.cmd {
        Cmd::Flops(a) => cmd_flops(a),
        Cmd::Forward(a) => cmd_forward(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Heatmap(a) => cmd_heatmap(a),
        Cmd::Regionmap(a) => cmd_regionmap(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Selftest(a) => cmd_selftest(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

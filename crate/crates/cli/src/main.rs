mod config;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use noiseflow::datagen::{build_dataset, gen_layout, load_manifest, load_split, GenConfig, Split};
use noiseflow::flow::{load_checkpoint, FlowConfig, FlowModel, GradMode};
use noiseflow::metrics::{bench_runtime, evaluate_testset, reference_for, EvalOptions, RegionLabel};
use noiseflow::raster::{load_raster, save_raster, LayoutMask};
use noiseflow::simulator::{build_region_masks, simulate, Scenario, ScenarioConfig};
use noiseflow::trainer::{grad_check, grad_check_config, train, GradCheckOptions, RunDir, TrainConfig};

use config::{canonical, resolve, Overrides};

/// Urban noise workbench: simulate sound maps, train and evaluate the
/// conditional flow surrogate, and serve what-if requests.
#[derive(Parser)]
#[command(name = "noiseflow", version)]
struct Cli {
    /// Cap on worker threads for all parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a layout corpus and simulate its targets.
    GenData(GenDataArgs),
    /// Simulate one layout.
    Simulate(SimulateArgs),
    /// Train the flow on a generated corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Time the simulator against model inference on one layout.
    Bench(BenchArgs),
    /// Run the HTTP what-if service.
    Serve(ServeArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Grid side in cells.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated scenarios.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<Scenario>>,
    #[arg(long)]
    reflection_order: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    out: PathBuf,
    gen: GenConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { out: "data".into(), gen: GenConfig::default() }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Layout raster (.nfr). Without it a layout is generated from --layout-seed.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Index of the generated layout when no file is given.
    #[arg(long)]
    layout_seed: Option<u64>,
    /// Grid side for generated layouts.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    reflection_order: Option<u32>,
    /// Output map raster (dB).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    layout: Option<PathBuf>,
    layout_seed: u64,
    size: usize,
    scenario: Scenario,
    reflection_order: u32,
    out: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            layout: None,
            layout_seed: 0,
            size: 64,
            scenario: Scenario::Baseline,
            reflection_order: 1,
            out: "map.nfr".into(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Directory for history.csv and checkpoints.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from run-dir/last.nfck.
    #[arg(long)]
    resume: bool,
    /// Stop this session after the given iteration (resume later).
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Seed of the parameter initialization.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    num_scales: Option<usize>,
    /// Comma-separated steps per scale.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    coupling_hidden: Option<usize>,
    #[arg(long)]
    cond_hidden: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmdConfig {
    data: PathBuf,
    scenario: Scenario,
    run_dir: PathBuf,
    resume: bool,
    stop_after: Option<u64>,
    model_seed: u64,
    flow: FlowConfig,
    train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            scenario: Scenario::Baseline,
            run_dir: "run".into(),
            resume: false,
            stop_after: None,
            model_seed: 0,
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Split to evaluate (train, val or test).
    #[arg(long)]
    split: Option<Split>,
    /// Sampling temperature; defaults to the model's.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    bench_reps: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalCmdConfig {
    checkpoint: PathBuf,
    data: PathBuf,
    scenario: Scenario,
    split: Split,
    tau: Option<f64>,
    seed: u64,
    resamples: usize,
    bootstrap_seed: u64,
    bench_warmup: usize,
    bench_reps: usize,
    json: Option<PathBuf>,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            checkpoint: "run/best.nfck".into(),
            data: "data".into(),
            scenario: Scenario::Baseline,
            split: Split::Test,
            tau: None,
            seed: o.seed,
            resamples: o.resamples,
            bootstrap_seed: o.bootstrap_seed,
            bench_warmup: o.bench_warmup,
            bench_reps: o.bench_reps,
            json: None,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint; a freshly initialized default model otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    reflection_order: Option<u32>,
    #[arg(long)]
    layout_seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchCmdConfig {
    checkpoint: Option<PathBuf>,
    size: usize,
    scenario: Scenario,
    reflection_order: u32,
    layout_seed: u64,
    reps: usize,
    warmup: usize,
    tau: f64,
    seed: u64,
}

impl Default for BenchCmdConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            size: 64,
            scenario: Scenario::Reflection,
            reflection_order: 2,
            layout_seed: 0,
            reps: 5,
            warmup: 2,
            tau: 0.7,
            seed: 0,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Reject requests whose grid side differs.
    #[arg(long)]
    grid_size: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ServeCmdConfig {
    checkpoint: Option<PathBuf>,
    host: String,
    port: u16,
    grid_size: Option<usize>,
}

impl Default for ServeCmdConfig {
    fn default() -> Self {
        Self { checkpoint: None, host: "127.0.0.1".into(), port: 8080, grid_size: None }
    }
}

#[derive(Args)]
struct GradCheckArgs {
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    /// Grid side of the probe input.
    #[arg(long)]
    size: Option<usize>,
    /// Check the identity-initialized model instead of a perturbed one.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradCheckCmdConfig {
    seed: u64,
    seeds: u64,
    size: usize,
    identity: bool,
    spread: f64,
    threshold: f64,
    eps: f64,
    store_all: bool,
    flow: FlowConfig,
}

impl Default for GradCheckCmdConfig {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        Self {
            seed: 1,
            seeds: 3,
            size: o.size,
            identity: false,
            spread: o.spread,
            threshold: o.threshold,
            eps: o.eps,
            store_all: false,
            flow: grad_check_config(),
        }
    }
}

fn echo<C: Serialize>(cfg: &C) {
    eprintln!("{}", canonical(cfg));
}

fn load_model(path: &Path) -> Result<(FlowModel<f32>, BTreeMap<String, serde_json::Value>)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ck.to_model()?, ck.meta))
}

fn gen_data(file: Option<&Path>, a: GenDataArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("out", a.out)
        .set("gen.samples", a.n)
        .set("gen.grid_size", a.size)
        .set("gen.seed", a.seed)
        .set("gen.scenarios", a.scenarios)
        .set("gen.reflection_order", a.reflection_order);
    let cfg: GenDataConfig = resolve(file, o)?;
    echo(&cfg);
    let m = build_dataset(&cfg.gen, &cfg.out)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        m.samples.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test),
        cfg.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn simulate_cmd(file: Option<&Path>, a: SimulateArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("layout", a.layout)
        .set("layout_seed", a.layout_seed)
        .set("size", a.size)
        .set("scenario", a.scenario)
        .set("reflection_order", a.reflection_order)
        .set("out", a.out);
    let cfg: SimulateConfig = resolve(file, o)?;
    echo(&cfg);
    let mask = match &cfg.layout {
        Some(p) => LayoutMask::from_raster(&load_raster(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => {
            let g = GenConfig { grid_size: cfg.size, ..GenConfig::default() };
            gen_layout(&g, cfg.layout_seed as usize)?
        }
    };
    let sc = ScenarioConfig { reflection_order: cfg.reflection_order, ..ScenarioConfig::for_scenario(cfg.scenario) };
    let t = Instant::now();
    let map = simulate(&mask, &sc)?;
    eprintln!("simulated in {:.3} ms", t.elapsed().as_secs_f64() * 1e3);
    save_raster(&cfg.out, &map.to_raster())?;
    let regions = build_region_masks(&mask);
    let (lo, hi) = map.values().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    println!(
        "{} {}x{}: {:.2}..{:.2} dB; building {} LoS {} NLoS {}; wrote {}",
        cfg.scenario,
        mask.size(),
        mask.size(),
        lo,
        hi,
        regions.count(RegionLabel::Building),
        regions.count(RegionLabel::Los),
        regions.count(RegionLabel::Nlos),
        cfg.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(file: Option<&Path>, a: TrainArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("data", a.data)
        .set("scenario", a.scenario)
        .set("run_dir", a.run_dir)
        .flag("resume", a.resume)
        .set("stop_after", a.stop_after)
        .set("model_seed", a.model_seed)
        .set("train.total_iters", a.iters)
        .set("train.batch_size", a.batch_size)
        .set("train.seed", a.seed)
        .set("train.lr_init", a.lr_init)
        .set("train.lr_final", a.lr_final)
        .set("train.eval_every", a.eval_every)
        .set("train.checkpoint_every", a.checkpoint_every)
        .set("flow.num_scales", a.num_scales)
        .set("flow.steps_per_scale", a.steps)
        .set("flow.coupling_hidden_channels", a.coupling_hidden)
        .set("flow.cond_hidden_channels", a.cond_hidden);
    let cfg: TrainCmdConfig = resolve(file, o)?;
    echo(&cfg);
    let m = load_manifest(&cfg.data)?;
    let tr = load_split(&cfg.data, &m, Split::Train, cfg.scenario)?;
    let va = load_split(&cfg.data, &m, Split::Val, cfg.scenario)?;
    let model = FlowModel::new(cfg.flow.clone(), cfg.model_seed)?;
    let mut run = RunDir { dir: Some(cfg.run_dir.clone()), resume: cfg.resume, stop_after: cfg.stop_after, ..RunDir::default() };
    run.meta.insert("scenario".into(), cfg.scenario.as_str().into());
    run.meta.insert("dataset".into(), cfg.data.display().to_string().into());
    let out = train(&tr, &va, model, &cfg.train, &run)?;
    println!(
        "iterations {}; validation NLL {:.4} after init, best {:.4} nats/dim; checkpoints in {}",
        out.iters_done,
        out.initial_val_nll,
        out.best_val_nll,
        cfg.run_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(file: Option<&Path>, a: EvalArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("checkpoint", a.checkpoint)
        .set("data", a.data)
        .set("scenario", a.scenario)
        .set("split", a.split)
        .set("tau", a.tau)
        .set("seed", a.seed)
        .set("resamples", a.resamples)
        .set("bench_reps", a.bench_reps)
        .set("json", a.json);
    let cfg: EvalCmdConfig = resolve(file, o)?;
    echo(&cfg);
    let (model, _) = load_model(&cfg.checkpoint)?;
    let m = load_manifest(&cfg.data)?;
    let samples = load_split(&cfg.data, &m, cfg.split, cfg.scenario)?;
    let train = load_split(&cfg.data, &m, Split::Train, cfg.scenario)?;
    let opts = EvalOptions {
        tau: cfg.tau.unwrap_or(model.config().temperature),
        seed: cfg.seed,
        resamples: cfg.resamples,
        bootstrap_seed: cfg.bootstrap_seed,
        bench_warmup: cfg.bench_warmup,
        bench_reps: cfg.bench_reps,
        ..EvalOptions::default()
    };
    let report = evaluate_testset(&model, &samples, &train, &m.config.scenario_config(cfg.scenario), &opts)?;
    print!("{}", report.to_table());
    if let Some(p) = &cfg.json {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(file: Option<&Path>, a: BenchArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("checkpoint", a.checkpoint)
        .set("size", a.size)
        .set("scenario", a.scenario)
        .set("reflection_order", a.reflection_order)
        .set("layout_seed", a.layout_seed)
        .set("reps", a.reps)
        .set("warmup", a.warmup)
        .set("tau", a.tau);
    let cfg: BenchCmdConfig = resolve(file, o)?;
    echo(&cfg);
    let model = match &cfg.checkpoint {
        Some(p) => load_model(p)?.0,
        None => FlowModel::new(FlowConfig::default(), 0)?,
    };
    let mask = gen_layout(&GenConfig { grid_size: cfg.size, ..GenConfig::default() }, cfg.layout_seed as usize)?;
    let sc = ScenarioConfig { reflection_order: cfg.reflection_order, ..ScenarioConfig::for_scenario(cfg.scenario) };
    sc.validate()?;
    model.config().check_size(cfg.size)?;
    let sim = bench_runtime(|| simulate(&mask, &sc), cfg.warmup, cfg.reps);
    let net = bench_runtime(|| model.sample(&mask, cfg.tau, cfg.seed), cfg.warmup, cfg.reps);
    let r = reference_for(cfg.scenario);
    println!("{} {}x{} order {}", cfg.scenario, cfg.size, cfg.size, cfg.reflection_order);
    println!("simulator  median {:10.3} ms  mean {:10.3} ms", sim.median_ms, sim.mean_ms);
    println!("model      median {:10.3} ms  mean {:10.3} ms", net.median_ms, net.mean_ms);
    println!("speedup {:.1}x  (cpu {}, threads {})", sim.median_ms / net.median_ms, net.cpu_model, net.threads);
    println!(
        "reference (256x256 benchmark, GPU): simulator {} ms vs Full-Glow {:.2} ms ({:.0}x)",
        r.simulator_ms,
        r.model_ms,
        r.simulator_ms / r.model_ms
    );
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(file: Option<&Path>, a: ServeArgs, threads: Option<usize>) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("checkpoint", a.checkpoint).set("host", a.host).set("port", a.port).set("grid_size", a.grid_size);
    let cfg: ServeCmdConfig = resolve(file, o)?;
    echo(&cfg);
    let model = match &cfg.checkpoint {
        Some(p) => Some(noiseflow_service::LoadedModel::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let state = noiseflow_service::AppState::new(model, cfg.grid_size);
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port).parse().context("invalid host/port")?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        rt.worker_threads(n);
    }
    rt.enable_all().build()?.block_on(noiseflow_service::serve(addr, state))?;
    Ok(ExitCode::SUCCESS)
}

fn grad_check_cmd(file: Option<&Path>, a: GradCheckArgs) -> Result<ExitCode> {
    let mut o = Overrides::default();
    o.set("seed", a.seed)
        .set("seeds", a.seeds)
        .set("size", a.size)
        .flag("identity", a.identity)
        .set("threshold", a.threshold);
    let cfg: GradCheckCmdConfig = resolve(file, o)?;
    echo(&cfg);
    if cfg.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut ok = true;
    for seed in cfg.seed..cfg.seed + cfg.seeds {
        let opts = GradCheckOptions {
            seed,
            size: cfg.size,
            randomize: !cfg.identity,
            spread: cfg.spread,
            threshold: cfg.threshold,
            eps: cfg.eps,
            mode: if cfg.store_all { GradMode::StoreAll } else { GradMode::Recompute },
        };
        let report = grad_check(&cfg.flow, &opts, None)?;
        let width = report.blocks.iter().map(|b| b.name.len()).max().unwrap_or(0);
        println!("seed {seed}: {}", if report.passed { "pass" } else { "FAIL" });
        for b in &report.blocks {
            println!(
                "  {:<width$}  {:>6} elems  max rel err {:.2e}{}",
                b.name,
                b.elements,
                b.max_rel_err,
                if b.passed { "" } else { "  FAIL" }
            );
        }
        ok &= report.passed;
    }
    println!("grad-check {} (threshold {:e})", if ok { "passed" } else { "failed" }, cfg.threshold);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => gen_data(file, a),
        Command::Simulate(a) => simulate_cmd(file, a),
        Command::Train(a) => train_cmd(file, a),
        Command::Eval(a) => eval_cmd(file, a),
        Command::Bench(a) => bench_cmd(file, a),
        Command::Serve(a) => serve_cmd(file, a, cli.threads),
        Command::GradCheck(a) => grad_check_cmd(file, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prunepath::analysis::{compare_methods, tau_sweep_layers, topk_mse_curve_layers, LayerRef};
use prunepath::bench::{run_decode_bench_with, timing_disabled_by_env, BenchOptions, ExecStats};
use prunepath::bundle::{self, Bundle, Tensor};
use prunepath::config::{resolve, RunConfig};
use prunepath::ffn::MoefiedFFN;
use prunepath::moefication::{balanced_kmeans, build_moefied, centroid_router, neuron_features, DEFAULT_MAX_ITERS};
use prunepath::numkit::Matrix;
use prunepath::routing::{RouterState, TAU_ALL_EXPERTS};
use prunepath::synth::{self, GaussianMixture, SynthConfig};
use prunepath::training::{
    train_lte_baseline, train_sparsity_path, Distillation, LteSchedule, SparsityPath, TrainConfig, TrainLog,
};
use prunepath::{Error, Exec};

#[derive(Parser)]
#[command(name = "prunepath", version, about = "Cumulative-mass sparse expert routing for gated FFN layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with default values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Skip wall-clock measurement (also PRUNEPATH_NO_TIMING=1).
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a seeded synthetic dense model with probe tokens.
    GenSynth(GenSynth),
    /// Cluster neurons into experts and add a reference router.
    Moefy(Moefy),
    /// Train routers along the progressive sparsity path.
    TrainRouter(TrainRouter),
    /// Train the two-stage independent-threshold baseline.
    TrainLte(TrainLte),
    /// Evaluate one router at several thresholds.
    SweepTau(SweepTau),
    /// Top-k reconstruction error for one or more routers.
    TopkMse(TopkMse),
    /// Dense versus blocked sparse single-token decode.
    Bench(Bench),
}

#[derive(Args)]
struct GenSynth {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    dff: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Moefy {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Length of each reference router column.
    #[arg(long)]
    reference_scale: Option<f32>,
}

#[derive(Args)]
struct Optim {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient steps per round.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Standard deviation of the initial router weights.
    #[arg(long)]
    init_scale: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainRouter {
    #[command(flatten)]
    common: Common,
    /// Bundle written by `moefy`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    tau_warm: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    warmup_rounds: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    optim: Optim,
}

#[derive(Args)]
struct TrainLte {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Hard-stage gate threshold.
    #[arg(long)]
    delta: Option<f32>,
    #[arg(long)]
    soft_rounds: Option<usize>,
    #[arg(long)]
    hard_rounds: Option<usize>,
    #[command(flatten)]
    optim: Optim,
}

#[derive(Args)]
struct SweepTau {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    router: Option<PathBuf>,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Frontier CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional JSON mirror of the frontier.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TopkMse {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Router bundle as `name=path` or `path`; repeat to compare methods.
    #[arg(long = "router")]
    routers: Vec<String>,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Both,
    Dense,
    Sparse,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    router: Option<PathBuf>,
    /// Decode steps (one token each).
    #[arg(long)]
    steps: Option<usize>,
    /// Which rows to report.
    #[arg(long, value_enum)]
    mode: Option<BenchMode>,
    /// Force exactly this many experts per token.
    #[arg(long)]
    top_k: Option<usize>,
    /// Override the router's threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status plus a message naming the offending flag or file.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        Failure { code: 2, msg: msg.into() }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Attaches the flag or file responsible for a library error.
trait Context<T> {
    fn ctx(self, what: impl std::fmt::Display) -> Outcome<T>;
}

impl<T> Context<T> for prunepath::Result<T> {
    fn ctx(self, what: impl std::fmt::Display) -> Outcome<T> {
        self.map_err(|e| {
            let code = if matches!(e, Error::Divergence(_)) { 3 } else { 2 };
            Failure {
                code,
                msg: format!("{what}: {e}"),
            }
        })
    }
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => RunConfig::load(path).map_err(|e| Failure::data(format!("--config {}: {e}", path.display()))),
    }
}

fn required(flag: Option<PathBuf>, config: Option<PathBuf>, name: &str) -> Outcome<PathBuf> {
    flag.or(config)
        .ok_or_else(|| Failure::usage(format!("missing {name} (flag or config file)")))
}

fn read(path: &Path, flag: &str) -> Outcome<Bundle> {
    bundle::read_bundle(path).ctx(format_args!("{flag} {}", path.display()))
}

fn write(path: &Path, flag: &str, b: &Bundle) -> Outcome<()> {
    bundle::write_bundle(path, b).ctx(format_args!("{flag} {}", path.display()))
}

fn write_text(path: &Path, flag: &str, text: &str) -> Outcome<()> {
    std::fs::write(path, text).map_err(|e| Failure::data(format!("{flag} {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(path) => write_text(path, "--out", text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_synth(a: GenSynth) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        d: resolve(a.d, c.d, base.d),
        d_ff: resolve(a.dff, c.d_ff, base.d_ff),
        num_layers: resolve(a.layers, c.layers, base.num_layers),
        components: resolve(a.components, c.components, base.components),
        probes: resolve(a.probes, c.probes, base.probes),
        seed: resolve(a.seed, c.seed, base.seed),
        ..base
    };
    let out = required(a.out, c.output, "--out")?;
    let model = synth::generate(&cfg).ctx("--d/--dff/--layers/--components/--probes")?;
    let mut b = Bundle::new();
    for (l, ffn) in model.layers.iter().enumerate() {
        bundle::put_dense(&mut b, l, ffn);
    }
    bundle::put_matrix(&mut b, "probes", &model.probes);
    bundle::put_matrix(&mut b, "synth.centers", &model.centers);
    b.insert("synth.token_noise".into(), Tensor::vector(vec![cfg.token_noise]));
    write(&out, "--out", &b)
}

fn moefy(a: Moefy) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let input = required(a.input, c.input, "--input")?;
    let out = required(a.out, c.output, "--out")?;
    let experts = resolve(a.experts, c.experts, 16);
    let seed = resolve(a.seed, c.seed, 0);
    let max_iters = resolve(a.max_iters, c.max_iters, DEFAULT_MAX_ITERS);
    let scale = resolve(a.reference_scale, c.reference_scale, 2.0);
    let src = read(&input, "--input")?;
    let layers = bundle::dense_layers(&src).ctx(format_args!("--input {}", input.display()))?;
    let mut b: Bundle = src
        .iter()
        .filter(|(name, _)| !name.starts_with("layer"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    for (l, ffn) in layers.iter().enumerate() {
        let features = neuron_features(ffn);
        let clustering = balanced_kmeans(&features, experts, seed, max_iters).ctx(format_args!("--experts {experts}"))?;
        let moe = build_moefied(ffn, &clustering).ctx(format_args!("--experts {experts}"))?;
        bundle::put_moefied(&mut b, l, &moe);
        bundle::put_matrix(&mut b, format!("layer{l}.reference.w"), &centroid_router(&moe, scale));
    }
    write(&out, "--out", &b)
}

/// Expert layers, reference routers and the token distribution of a
/// `moefy` bundle.
struct Workload {
    layers: Vec<MoefiedFFN>,
    references: Vec<Matrix>,
    centers: Matrix,
    token_noise: f32,
    probes: Matrix,
}

fn load_workload(path: &Path, flag: &str) -> Outcome<Workload> {
    let b = read(path, flag)?;
    let at = format!("{flag} {}", path.display());
    let noise = bundle::get(&b, "synth.token_noise").ctx(&at)?;
    let token_noise = match noise.data[..] {
        [v] => v,
        _ => return Err(Failure::data(format!("{at}: `synth.token_noise` must hold one value"))),
    };
    let layers = bundle::moefied_layers(&b).ctx(&at)?;
    let references = bundle::reference_routers(&b).ctx(&at)?;
    if references.len() != layers.len() {
        return Err(Failure::data(format!("{at}: {} reference routers for {} layers", references.len(), layers.len())));
    }
    Ok(Workload {
        layers,
        references,
        centers: bundle::get_matrix(&b, "synth.centers").ctx(&at)?,
        token_noise,
        probes: bundle::get_matrix(&b, "probes").ctx(&at)?,
    })
}

fn train_config(o: &Optim, c: &RunConfig, eta: f64, lambda: f64) -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        eta,
        lambda,
        gamma: resolve(o.gamma, c.gamma, base.gamma),
        lr: resolve(o.lr, c.lr, base.lr),
        batch_size: resolve(o.batch_size, c.batch_size, base.batch_size),
        steps_per_round: resolve(o.steps, c.steps, base.steps_per_round),
        seed: resolve(o.seed, c.seed, base.seed),
        ..base
    }
}

/// Log path for `layer`: the given path for layer 0, `<stem>.layer<l>.<ext>`
/// for the others.
fn layer_log_path(log: &Path, layer: usize) -> PathBuf {
    if layer == 0 {
        return log.to_path_buf();
    }
    let stem = log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match log.extension() {
        Some(ext) => format!("{stem}.layer{layer}.{}", ext.to_string_lossy()),
        None => format!("{stem}.layer{layer}"),
    };
    log.with_file_name(name)
}

/// Trains every layer independently: initial weights from `seed + 2l`,
/// tokens from `seed + 2l + 1`.
fn train_layers(
    w: &Workload,
    cfg: &TrainConfig,
    init_scale: f32,
    mut train: impl FnMut(&MoefiedFFN, &RouterState, &mut dyn prunepath::training::BatchSource) -> prunepath::Result<(RouterState, TrainLog)>,
) -> Outcome<Vec<(RouterState, TrainLog)>> {
    w.layers
        .iter()
        .zip(&w.references)
        .enumerate()
        .map(|(l, (moe, reference))| {
            let seed = cfg.seed.wrapping_add(2 * l as u64);
            let init = synth::random_router(moe.d(), moe.num_experts(), init_scale, seed);
            let init = RouterState::cumulative(init, TAU_ALL_EXPERTS).ctx("--init-scale")?;
            let tokens = GaussianMixture::new(w.centers.clone(), w.token_noise, seed.wrapping_add(1)).ctx("--model")?;
            let mut data = Distillation::new(tokens, moe, reference).ctx("--model")?;
            train(moe, &init, &mut data).ctx(format_args!("training layer {l}"))
        })
        .collect()
}

fn save_training(results: Vec<(RouterState, TrainLog)>, out: &Path, log: Option<PathBuf>) -> Outcome<()> {
    let (routers, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut b = Bundle::new();
    bundle::put_routers(&mut b, &routers);
    write(out, "--out", &b)?;
    if let Some(log) = log {
        for (l, tl) in logs.iter().enumerate() {
            write_text(&layer_log_path(&log, l), "--log", &tl.to_csv_string())?;
        }
    }
    Ok(())
}

fn train_router(a: TrainRouter) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let model = required(a.model, c.model.clone(), "--model")?;
    let out = required(a.out, c.output.clone(), "--out")?;
    let log = a.log.or(c.log.clone());
    let base = TrainConfig::default();
    let cfg = train_config(
        &a.optim,
        &c,
        resolve(a.eta, c.eta, base.eta),
        resolve(a.lambda, c.lambda, base.lambda),
    );
    let mut path = SparsityPath::new(
        resolve(a.tau_min, c.tau_min, 0.6),
        resolve(a.rounds, c.rounds, 6),
        resolve(a.warmup_rounds, c.warmup_rounds, 4),
    )
    .ctx("--tau-min/--rounds/--warmup-rounds")?;
    path.tau_warm = resolve(a.tau_warm, c.tau_warm, TAU_ALL_EXPERTS);
    path.validate().ctx("--tau-warm")?;
    cfg.validate().ctx("--eta/--lambda/--gamma/--lr/--batch-size")?;
    let init_scale = resolve(a.optim.init_scale, c.init_scale, 0.1);
    let workload = load_workload(&model, "--model")?;
    let results = train_layers(&workload, &cfg, init_scale, |m, r, data| {
        train_sparsity_path(m, r, data, &path, &cfg)
    })?;
    save_training(results, &out, log)
}

fn train_lte(a: TrainLte) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let model = required(a.model, c.model.clone(), "--model")?;
    let out = required(a.out, c.output.clone(), "--out")?;
    let log = a.log.or(c.log.clone());
    let cfg = train_config(&a.optim, &c, 0.0, 0.0);
    cfg.validate().ctx("--gamma/--lr/--batch-size")?;
    let schedule = LteSchedule {
        soft_rounds: resolve(a.soft_rounds, c.soft_rounds, 4),
        hard_rounds: resolve(a.hard_rounds, c.hard_rounds, 6),
        delta: resolve(a.delta, c.delta, 0.5),
    };
    if !(schedule.delta.is_finite() && (0.0..1.0).contains(&schedule.delta)) {
        return Err(Failure::data(format!("--delta {}: must lie in [0, 1)", schedule.delta)));
    }
    let init_scale = resolve(a.optim.init_scale, c.init_scale, 0.1);
    let workload = load_workload(&model, "--model")?;
    let results = train_layers(&workload, &cfg, init_scale, |m, r, data| {
        train_lte_baseline(m, r, data, &cfg, &schedule)
    })?;
    save_training(results, &out, log)
}

fn load_routers(path: &Path, flag: &str, w: &Workload) -> Outcome<Vec<RouterState>> {
    let b = read(path, flag)?;
    let routers = bundle::get_routers(&b).ctx(format_args!("{flag} {}", path.display()))?;
    if routers.len() != w.layers.len() {
        return Err(Failure::data(format!(
            "{flag} {}: {} routers for {} layers",
            path.display(),
            routers.len(),
            w.layers.len()
        )));
    }
    Ok(routers)
}

fn layer_refs<'a>(w: &'a Workload, routers: &'a [RouterState], flag: &str) -> Outcome<Vec<LayerRef<'a>>> {
    w.layers
        .iter()
        .zip(routers)
        .map(|(m, r)| LayerRef::new(m, r).ctx(flag))
        .collect()
}

fn sweep_tau(a: SweepTau) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let model = required(a.model, c.model.clone(), "--model")?;
    let router = required(a.router, c.router.clone(), "--router")?;
    let taus = resolve(
        a.taus,
        c.taus.clone(),
        vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0, TAU_ALL_EXPERTS],
    );
    let w = load_workload(&model, "--model")?;
    let routers = load_routers(&router, "--router", &w)?;
    let layers = layer_refs(&w, &routers, "--router")?;
    let report = tau_sweep_layers(Exec::default(), &layers, &w.probes, &taus).ctx("--taus")?;
    for (lo, hi) in &report.recon_monotonicity_violations {
        eprintln!("note: reconstruction error at tau {hi} exceeds tau {lo}");
    }
    emit(a.out.or(c.output).as_deref(), &report.to_csv_string())?;
    if let Some(json) = a.json {
        write_text(&json, "--json", &report.to_json().ctx("--json")?)?;
    }
    Ok(())
}

fn default_budgets(num_experts: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2))
        .take_while(|&k| k < num_experts)
        .collect();
    ks.push(num_experts);
    ks
}

fn topk_mse(a: TopkMse) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let model = required(a.model, c.model.clone(), "--model")?;
    let mut specs = a.routers;
    if specs.is_empty() {
        if let Some(r) = &c.router {
            specs.push(r.display().to_string());
        }
    }
    if specs.is_empty() {
        return Err(Failure::usage("missing --router (flag or config file)"));
    }
    let w = load_workload(&model, "--model")?;
    let ks = resolve(a.ks, c.ks.clone(), default_budgets(w.layers[0].num_experts()));
    let mut curves = Vec::new();
    for spec in &specs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        let routers = load_routers(&path, "--router", &w)?;
        let layers = layer_refs(&w, &routers, "--router")?;
        let curve = topk_mse_curve_layers(Exec::default(), &layers, &w.probes, &ks).ctx("--ks")?;
        curves.push((name, curve));
    }
    let table = compare_methods(&curves).ctx("--router")?;
    emit(a.out.or(c.output).as_deref(), &table.to_csv_string())
}

fn bench(a: Bench) -> Outcome<()> {
    let c = load_config(&a.common)?;
    let model = required(a.model, c.model.clone(), "--model")?;
    let router = required(a.router, c.router.clone(), "--router")?;
    let steps = resolve(a.steps, c.steps, 128);
    let mode = match (a.mode, c.mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => BenchMode::from_str(s, true).map_err(|_| Failure::data(format!("--config mode: unknown bench mode `{s}`")))?,
        (None, None) => BenchMode::Both,
    };
    let w = load_workload(&model, "--model")?;
    let routers = load_routers(&router, "--router", &w)?;
    let (Some(m), Some(r)) = (w.layers.get(a.layer), routers.get(a.layer)) else {
        return Err(Failure::data(format!("--layer {}: model has {} layers", a.layer, w.layers.len())));
    };
    let mut r = r.clone();
    if let Some(tau) = a.tau {
        r = r.with_mode(prunepath::routing::GateMode::CumulativeMass).with_tau(tau);
        r.validate().ctx("--tau")?;
    }
    if let Some(k) = a.top_k.or(c.top_k) {
        r = r.forced_topk(k).ctx("--top-k")?;
    }
    let opts = BenchOptions {
        timing: !(a.common.no_timing || timing_disabled_by_env()),
    };
    let result = run_decode_bench_with(m, &r, &w.probes, steps, opts).ctx("--steps")?;
    let rows: Vec<&ExecStats> = match mode {
        BenchMode::Both => vec![&result.dense, &result.sparse],
        BenchMode::Dense => vec![&result.dense],
        BenchMode::Sparse => vec![&result.sparse],
    };
    let mut text = format!("{}\n", prunepath::bench::REPORT_HEADER);
    for s in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.mode, s.tokens, s.flops, s.peak_activation_elems, s.wall_ns, s.mean_active
        ));
    }
    emit(a.out.or(c.output).as_deref(), &text)
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Moefy(a) => moefy(a),
        Command::TrainRouter(a) => train_router(a),
        Command::TrainLte(a) => train_lte(a),
        Command::SweepTau(a) => sweep_tau(a),
        Command::TopkMse(a) => topk_mse(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

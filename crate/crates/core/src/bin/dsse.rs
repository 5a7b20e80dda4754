use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dsse::bench::{
    complexity_sweep, eps_sweep, evaluation_set, initial_state, reconfig_bench, run_bench,
    BenchConfig, BenchReport, Method, Scenario,
};
use dsse::dataset::{build_dataset, sample_scenarios, Dataset, NoiseMode, ProfileLibrary};
use dsse::estimator::{estimate, nu_index, EstimateReport, EstimatorConfig};
use dsse::feeder::{load_feeder, FeederModel};
use dsse::measurement::{build_measurement_set, set_fingerprint, MeasurementConfig, MeasurementSet};
use dsse::nn::{train, NnModel, TrainConfig};
use dsse::oracle3bus::{check_point, ThreeBusParams};
use dsse::StateVector;

/// Exit 2: usage or file problems. Exit 3: numerical failure.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn file_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: e.into() }
}

fn numeric_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, err: e.into() }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "dsse", version, about = "Learning-initialized distribution system state estimation")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve sampled scenarios and write a (z, v) dataset.
    GenData(GenData),
    /// Train a shallow network on a dataset.
    Train(Train),
    /// Estimate the state for one measurement vector.
    Estimate(Estimate),
    /// Compare initializations over fresh noisy scenarios.
    Bench(Bench),
    /// Train one model per ε and evaluate NN-initialized estimation.
    EpsSweep(EpsSweep),
    /// Evaluate an original-topology model after a switching event.
    Reconfig(Reconfig),
    /// Print the analytic 3-bus round-trip error table.
    Oracle3bus(Oracle3bus),
}

#[derive(Args, Clone)]
struct NetworkArgs {
    /// Feeder document (default: shipped IEEE-37 fixture).
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Measurement placement document (default: shipped IEEE-37 placement).
    #[arg(long)]
    measurement_config: Option<PathBuf>,
}

impl NetworkArgs {
    fn load(&self) -> CliResult<(FeederModel, MeasurementConfig, MeasurementSet)> {
        let model = match &self.feeder {
            Some(p) => load_feeder(p).with_context(|| format!("loading feeder {}", p.display())),
            None => Ok(dsse::fixtures::ieee37()),
        }
        .map_err(file_err)?;
        let cfg = match &self.measurement_config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(MeasurementConfig::parse(&t)?))
                .with_context(|| format!("loading measurement config {}", p.display())),
            None => Ok(MeasurementConfig::ieee37()),
        }
        .map_err(file_err)?;
        let set = build_measurement_set(&model, &cfg).map_err(file_err)?;
        Ok((model, cfg, set))
    }
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// Profile library CSV (`t,unit_class,multiplier`); default: built-in daily shapes.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Per-unit uniform jitter half-width.
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
}

impl ProfileArgs {
    fn load(&self) -> CliResult<ProfileLibrary> {
        match &self.profiles {
            Some(p) => File::open(p)
                .map_err(anyhow::Error::from)
                .and_then(|f| Ok(ProfileLibrary::from_csv(f, self.jitter)?))
                .with_context(|| format!("loading profiles {}", p.display()))
                .map_err(file_err),
            None => Ok(ProfileLibrary::synthetic().with_jitter(self.jitter)),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    None,
    Paper,
}

impl From<Noise> for NoiseMode {
    fn from(n: Noise) -> Self {
        match n {
            Noise::None => NoiseMode::Noiseless,
            Noise::Paper => NoiseMode::PaperNoise,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value = "none")]
    noise: Noise,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.9)]
    split: f64,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epsilon: self.epsilon,
            hidden: self.hidden,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            patience: self.patience,
            split: self.split,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    out: PathBuf,
    /// Training trace CSV (default: `<out>.trace.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Plain Gauss-Newton (no Levenberg adaptation).
    #[arg(long, conflicts_with = "damped")]
    no_damping: bool,
    /// Adaptive Levenberg damping.
    #[arg(long)]
    damped: bool,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
}

impl SolverArgs {
    fn config(&self, damped_default: bool) -> EstimatorConfig {
        let damped = if self.no_damping {
            false
        } else {
            self.damped || damped_default
        };
        EstimatorConfig {
            adaptive_damping: damped,
            max_iter: self.max_iter,
            ..EstimatorConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Nn,
    Flat,
    Pmu,
}

impl From<Init> for Method {
    fn from(i: Init) -> Self {
        match i {
            Init::Nn => Method::Nn,
            Init::Flat => Method::Flat,
            Init::Pmu => Method::Pmu,
        }
    }
}

#[derive(Args)]
struct Estimate {
    #[command(flatten)]
    net: NetworkArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON `{"z": [...], "v_true": [...]?}` with `v_true` in rectangular packing.
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long, value_enum)]
    init: Init,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct MeasurementFile {
    z: Vec<f64>,
    #[serde(default)]
    v_true: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct EstimateOutput {
    init: Method,
    nu: Option<f64>,
    report: EstimateReport,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    runs: usize,
    #[arg(long, value_delimiter = ',', default_value = "nn,flat,pmu")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "paper")]
    noise: Noise,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    /// Histogram CSV of NN-output distances (default: `<out>.hist.csv`).
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Per-run wall times (default: `<out>.timings.csv`).
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args)]
struct EpsSweep {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
    /// Training dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.125,0.25,0.5,0.7071067811865476,1,2")]
    epsilons: Vec<f64>,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value_t = 200)]
    runs: usize,
    /// Seed of the evaluation scenarios.
    #[arg(long, default_value_t = 1)]
    eval_seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Hidden sizes tried (ascending) for the minimal zero-loss size.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    hidden_sizes: Vec<usize>,
    /// Leading dataset samples used for the hidden-size sweep.
    #[arg(long, default_value_t = 200)]
    complexity_samples: usize,
    #[arg(long, default_value_t = 2000)]
    complexity_epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Reconfig {
    #[command(flatten)]
    net: NetworkArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, value_delimiter = ',', default_value = "nn,flat,pmu")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: dsse::bench::BenchError| e.to_string())
}

#[derive(Args)]
struct Oracle3bus {
    #[arg(long, default_value_t = 10.0)]
    b12: f64,
    #[arg(long, default_value_t = 8.0)]
    b13: f64,
    /// Grid points per angle.
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// Largest angle difference on the grid (rad).
    #[arg(long, default_value_t = 1.2)]
    max_angle: f64,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(p: &Path) -> CliResult<BufWriter<File>> {
    File::create(p)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", p.display()))
        .map_err(file_err)
}

fn write_text(p: &Path, text: &str) -> CliResult<()> {
    let mut w = create(p)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(file_err)
}

fn parse_methods(names: &[String]) -> CliResult<Vec<Method>> {
    names
        .iter()
        .map(|n| n.parse::<Method>().map_err(file_err))
        .collect()
}

fn load_model(path: Option<&Path>, fingerprint: Option<&[u8; 32]>) -> CliResult<Option<NnModel>> {
    let Some(p) = path else { return Ok(None) };
    let m = match fingerprint {
        Some(fp) => NnModel::load_checked(p, fp),
        None => NnModel::load(p),
    };
    m.with_context(|| format!("loading model {}", p.display()))
        .map(Some)
        .map_err(file_err)
}

fn load_dataset(p: &Path) -> CliResult<Dataset> {
    Dataset::load(p)
        .with_context(|| format!("loading dataset {}", p.display()))
        .map_err(file_err)
}

fn print_summary(rep: &BenchReport) {
    for s in &rep.methods {
        let t = rep.total_times().get(&s.method).copied().unwrap_or_default();
        println!(
            "{:<5} runs {:>5}  divergences {:>5}  mean iters {}  mean nu {} (all {})  mean mu {} (all {})  time {:.3} s",
            s.method,
            s.runs,
            s.divergences,
            fmt_opt(s.mean_iterations),
            fmt_opt(s.mean_nu),
            fmt_opt(s.mean_nu_all),
            fmt_opt(s.mean_mu),
            fmt_opt(s.mean_mu_all),
            t.as_secs_f64()
        );
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"))
}

fn cmd_gen_data(a: GenData) -> CliResult<()> {
    let (model, _, set) = a.net.load()?;
    let lib = a.profiles.load()?;
    let scenarios = sample_scenarios(&lib, &model, a.n, a.seed).map_err(file_err)?;
    let ds = build_dataset(&model, &set, &scenarios, a.noise.into(), a.seed).map_err(numeric_err)?;
    ds.save(&a.out).map_err(file_err)?;
    println!(
        "{} samples ({} skipped), fingerprint {}",
        ds.len(),
        ds.skipped(),
        hex(&ds.fingerprint())
    );
    Ok(())
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn cmd_train(a: Train) -> CliResult<()> {
    let ds = load_dataset(&a.dataset)?;
    let cfg = a.opts.config();
    let (m, trace) = train(&ds, &cfg).map_err(|e| match e {
        dsse::nn::NnError::Config(_) => file_err(e),
        _ => numeric_err(e),
    })?;
    m.save(&a.out).map_err(file_err)?;
    let trace_path = a.trace.unwrap_or_else(|| with_suffix(&a.out, ".trace.csv"));
    trace.write_csv(create(&trace_path)?).map_err(file_err)?;
    let last = trace.epochs.last();
    println!(
        "epochs {}  best epoch {}  final train {:.4e}  final val {:.4e}",
        trace.epochs.len(),
        trace.best_epoch,
        last.map_or(f64::NAN, |r| r.train_loss),
        last.map_or(f64::NAN, |r| r.val_loss)
    );
    Ok(())
}

fn cmd_estimate(a: Estimate) -> CliResult<()> {
    let (model, _, template) = a.net.load()?;
    let method: Method = a.init.into();
    if method == Method::Nn && a.model.is_none() {
        return Err(file_err(anyhow!("--init nn requires --model")));
    }
    let nn = load_model(a.model.as_deref(), Some(&set_fingerprint(&model, &template)))?;
    let text = std::fs::read_to_string(&a.measurements)
        .with_context(|| format!("reading {}", a.measurements.display()))
        .map_err(file_err)?;
    let mf: MeasurementFile = serde_json::from_str(&text).map_err(file_err)?;
    let set = template.with_z(mf.z).map_err(file_err)?;
    let v0 = initial_state(method, &model, &set, nn.as_ref()).map_err(file_err)?;
    let report = estimate(&set, &v0, &a.solver.config(true)).map_err(numeric_err)?;
    let nu = match mf.v_true {
        Some(v) if v.len() == 2 * model.num_nodes() => Some(nu_index(&report.v_hat, &StateVector::from_rect(&v))),
        Some(v) => return Err(file_err(anyhow!("v_true has length {}, expected {}", v.len(), 2 * model.num_nodes()))),
        None => None,
    };
    println!(
        "{:?} after {} iterations{}",
        report.termination,
        report.iterations,
        nu.map_or(String::new(), |n| format!(", nu {n:.4e}"))
    );
    let out = serde_json::to_string_pretty(&EstimateOutput { init: method, nu, report }).map_err(numeric_err)?;
    match a.out {
        Some(p) => write_text(&p, &out),
        None => {
            println!("{out}");
            Ok(())
        }
    }
}

fn write_bench(rep: &BenchReport, out: &Path, hist: Option<PathBuf>, timings: Option<PathBuf>) -> CliResult<()> {
    write_text(out, &rep.to_json())?;
    if let Some(h) = &rep.histogram {
        let p = hist.unwrap_or_else(|| with_suffix(out, ".hist.csv"));
        h.write_csv(create(&p)?).map_err(file_err)?;
    }
    let p = timings.unwrap_or_else(|| with_suffix(out, ".timings.csv"));
    rep.write_timings_csv(create(&p)?).map_err(file_err)
}

fn cmd_bench(a: Bench) -> CliResult<()> {
    let (model, _, set) = a.net.load()?;
    let lib = a.profiles.load()?;
    let methods = parse_methods(&a.methods)?;
    if methods.contains(&Method::Nn) && a.model.is_none() {
        return Err(file_err(anyhow!("method nn requires --model")));
    }
    let nn = load_model(a.model.as_deref(), Some(&set_fingerprint(&model, &set)))?;
    let cases = evaluation_set(&model, &set, &lib, a.runs, a.noise.into(), a.seed).map_err(numeric_err)?;
    let cfg = BenchConfig {
        methods,
        estimator: a.solver.config(false),
    };
    let rep = run_bench(&model, &set, &cases, nn.as_ref(), &cfg).map_err(numeric_err)?;
    print_summary(&rep);
    write_bench(&rep, &a.out, a.histogram, a.timings)
}

#[derive(Serialize)]
struct EpsSweepReport {
    rows: Vec<dsse::bench::EpsSweepRow>,
    complexity: Vec<dsse::bench::ComplexityRow>,
}

fn cmd_eps_sweep(a: EpsSweep) -> CliResult<()> {
    let (model, _, set) = a.net.load()?;
    let lib = a.profiles.load()?;
    let ds = load_dataset(&a.dataset)?;
    if ds.fingerprint() != set_fingerprint(&model, &set) {
        return Err(file_err(anyhow!("dataset was generated for a different feeder/measurement layout")));
    }
    let cases = evaluation_set(&model, &set, &lib, a.runs, NoiseMode::PaperNoise, a.eval_seed).map_err(numeric_err)?;
    let cfg = a.opts.config();
    let swept = eps_sweep(&model, &set, &ds, &cases, &a.epsilons, &cfg, &a.solver.config(false)).map_err(numeric_err)?;
    for (row, _, _) in &swept {
        println!(
            "eps {:<8.4} divergences {:>4}  mean iters {}  mean mu {}  mean |g(z)-v| {:.4e}",
            row.epsilon,
            row.divergences,
            fmt_opt(row.mean_iterations),
            fmt_opt(row.mean_mu),
            row.mean_init_distance
        );
    }
    let small = Dataset::new(
        ds.input_len(),
        ds.output_len(),
        ds.fingerprint(),
        ds.samples().iter().take(a.complexity_samples).cloned().collect(),
        ds.meta.clone(),
    );
    let complexity_cfg = TrainConfig {
        epochs: a.complexity_epochs,
        patience: a.complexity_epochs,
        ..cfg
    };
    let complexity = complexity_sweep(&small, &a.epsilons, &a.hidden_sizes, &complexity_cfg).map_err(numeric_err)?;
    for c in &complexity {
        println!("eps {:<8.4} minimal zero-loss hidden size {:?}", c.epsilon, c.min_hidden);
    }
    let rep = EpsSweepReport {
        rows: swept.into_iter().map(|(r, _, _)| r).collect(),
        complexity,
    };
    write_text(&a.out, &serde_json::to_string_pretty(&rep).map_err(numeric_err)?)
}

fn cmd_reconfig(a: Reconfig) -> CliResult<()> {
    let (model, meas_cfg, set) = a.net.load()?;
    let lib = a.profiles.load()?;
    let methods = parse_methods(&a.methods)?;
    if methods.contains(&Method::Nn) && a.model.is_none() {
        return Err(file_err(anyhow!("method nn requires --model")));
    }
    // the model must match the original topology it was trained on
    let nn = load_model(a.model.as_deref(), Some(&set_fingerprint(&model, &set)))?;
    let cfg = BenchConfig {
        methods,
        estimator: a.solver.config(false),
    };
    let rep = reconfig_bench(&model, &meas_cfg, &lib, nn.as_ref(), a.scenario, a.runs, a.seed, &cfg)
        .map_err(|e| match e {
            dsse::bench::BenchError::Feeder(_) => file_err(e),
            _ => numeric_err(e),
        })?;
    println!("scenario {}", a.scenario);
    print_summary(&rep);
    write_bench(&rep, &a.out, None, None)
}

fn cmd_oracle3bus(a: Oracle3bus) -> CliResult<()> {
    let p = ThreeBusParams {
        b12: a.b12,
        b13: a.b13,
        vmag: [1.0; 3],
    };
    p.validate(1e-6).map_err(file_err)?;
    if a.points < 2 {
        return Err(file_err(anyhow!("--points must be at least 2")));
    }
    println!("{:>10} {:>10} {:>12} {:>12} {:>5} {:>9}", "theta12", "theta13", "roundtrip", "pipeline", "iters", "converged");
    let mut worst = (0.0f64, 0.0f64);
    for i in 0..a.points {
        for j in 0..a.points {
            let step = 2.0 * a.max_angle / (a.points - 1) as f64;
            let (t12, t13) = (-a.max_angle + step * i as f64, -a.max_angle + step * j as f64);
            let row = check_point(&p, t12, t13).map_err(numeric_err)?;
            worst = (worst.0.max(row.roundtrip_err), worst.1.max(row.pipeline_err));
            println!(
                "{:>10.4} {:>10.4} {:>12.3e} {:>12.3e} {:>5} {:>9}",
                t12, t13, row.roundtrip_err, row.pipeline_err, row.iterations, row.converged
            );
        }
    }
    println!("max roundtrip {:.3e}, max pipeline {:.3e}", worst.0, worst.1);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(numeric_err)?;
    }
    match cli.cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::EpsSweep(a) => cmd_eps_sweep(a),
        Command::Reconfig(a) => cmd_reconfig(a),
        Command::Oracle3bus(a) => cmd_oracle3bus(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use raftlab::data::{estimate_aug_moments, AugmentationSpec, BlobsSpec, DataSource};
use raftlab::eval::{export_representations, metrics_report, ProbeConfig};
use raftlab::model::{init_params, load_checkpoint, save_checkpoint, ModelParams, NormGradient};
use raftlab::seed::{derive_seed, TAG_INIT};
use raftlab::train::{train_run_with, MetricsRecord, Schedule, TrainConfig, TrainObserver};
use raftlab::verify::{
    blobs_batch, finite_difference_gradcheck, sylvester_null_space, trajectory_correspondence_experiment,
    upper_bound_sweep, CorrespondenceSpec, GradcheckLoss, DEFAULT_PIVOT_TOL,
};
use raftlab::{Error, Objective, OptimizerKind, PredictorKind, TangentialMode, Tensor};

mod manifest;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "raftlab", version, about = "BYOL / BYOL' / RAFT experiments on small data")]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "raftlab-out")]
    out_dir: PathBuf,
    /// JSON config; flags take precedence over its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.jsonl, checkpoints and a manifest.
    Train(TrainArgs),
    /// Probe and measure a checkpoint.
    Eval(EvalArgs),
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Write the configured dataset as CSV.
    MakeData(MakeDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Byol,
    ByolPrime,
    Raft,
}

impl From<ObjectiveArg> for Objective {
    fn from(v: ObjectiveArg) -> Self {
        match v {
            ObjectiveArg::Byol => Objective::Byol,
            ObjectiveArg::ByolPrime => Objective::ByolPrime,
            ObjectiveArg::Raft => Objective::Raft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Mlp,
    Linear,
    Identity,
}

impl From<PredictorArg> for PredictorKind {
    fn from(v: PredictorArg) -> Self {
        match v {
            PredictorArg::Mlp => PredictorKind::Mlp,
            PredictorArg::Linear => PredictorKind::Linear,
            PredictorArg::Identity => PredictorKind::Identity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(v: OptimizerArg) -> Self {
        match v {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, value_enum)]
    predictor: Option<PredictorArg>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Constant learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    predictor_lr_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Distinct samples for alignment and uniformity.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long)]
    probe_epochs: Option<usize>,
    /// Also write representations as CSV.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Randomized sweep of the BYOL' upper bound on BYOL.
    UpperBound {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Mirrored BYOL' and RAFT trajectories. `--config` is read as the
    /// experiment setup rather than a training config.
    Correspondence {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, value_enum)]
        predictor: Option<PredictorArg>,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        #[arg(long)]
        lr: Option<f64>,
        /// Turn off the tangential gradient filter (a negative control).
        #[arg(long)]
        no_filter: bool,
    },
    /// Null space of the Sylvester fixed-point operator.
    Sylvester {
        /// Data dimension for the Monte-Carlo moments.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        /// Diagonal of an extra `W` to analyze against the estimated moments.
        #[arg(long, value_delimiter = ',')]
        w_diag: Option<Vec<f64>>,
        /// Use the default augmentation instead of identical views.
        #[arg(long)]
        augmented: bool,
    },
    /// Central finite differences against tape gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        loss: GradcheckArg,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GradcheckArg {
    All,
    Align,
    Uniformity,
    CrossModel,
    Byol,
    ByolPrime,
    Raft,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

fn read_config<T: Default>(path: Option<&Path>, parse: impl Fn(&str) -> raftlab::Result<T>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = read_config(cli.config.as_deref(), TrainConfig::from_json)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

struct RunWriter {
    metrics: BufWriter<File>,
    checkpoint_dir: PathBuf,
    checkpoints: Vec<PathBuf>,
}

impl TrainObserver for RunWriter {
    fn on_metrics(&mut self, record: &MetricsRecord) -> raftlab::Result<()> {
        writeln!(self.metrics, "{}", record.to_json_line())?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &ModelParams) -> raftlab::Result<()> {
        fs::create_dir_all(&self.checkpoint_dir)?;
        let path = self.checkpoint_dir.join(format!("step_{step:06}.ckpt"));
        save_checkpoint(params, &path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(cli)?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.objective {
        cfg.loss.objective = v.into();
    }
    if let Some(v) = args.predictor {
        cfg.network.predictor = v.into();
    }
    if let Some(v) = args.optimizer {
        cfg.optimizer = v.into();
    }
    if let Some(v) = args.lr {
        cfg.lr = Schedule::Constant(v);
    }
    if let Some(v) = args.predictor_lr_scale {
        cfg.predictor_lr_scale = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("train", serde_json::to_value(&cfg)?, cfg.seed);
    let data = cfg.data.load()?;
    info!("training {:?} for {} steps on {} samples", cfg.loss.objective, cfg.steps, data.len());

    let metrics_path = out.join("metrics.jsonl");
    let mut writer = RunWriter {
        metrics: BufWriter::new(File::create(&metrics_path)?),
        checkpoint_dir: out.join("checkpoints"),
        checkpoints: Vec::new(),
    };
    let result = train_run_with(&cfg, &data, &mut writer);
    writer.metrics.flush()?;
    manifest.add(&metrics_path);
    manifest.artifacts.extend(writer.checkpoints.iter().cloned());
    match result {
        Ok(run) => {
            let final_path = out.join("final.ckpt");
            save_checkpoint(&run.params, &final_path)?;
            manifest.add(&final_path);
            if let Some(last) = run.metrics.last() {
                info!("final step {}: {}", last.step, last.to_json_line());
            }
            let path = manifest.finish(out, true)?;
            println!("{}", path.display());
            Ok(())
        }
        Err(Error::NonFiniteLoss { step, value, state }) => {
            let dump = out.join(format!("nonfinite_step_{step}.ckpt"));
            save_checkpoint(&state, &dump)?;
            manifest.add(&dump);
            manifest.finish(out, false)?;
            bail!("non-finite loss {value} at step {step}; parameters saved to {}", dump.display())
        }
        Err(e) => {
            manifest.finish(out, false)?;
            Err(e.into())
        }
    }
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cfg = train_config(cli)?;
    let params = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data = cfg.data.load()?;
    let mut probe = ProbeConfig { seed: cfg.seed, ..ProbeConfig::default() };
    if let Some(e) = args.probe_epochs {
        probe.epochs = e;
    }
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("eval", serde_json::to_value(&cfg)?, cfg.seed);
    let report = metrics_report(&params, &data, &cfg.augmentation, args.samples, cfg.loss.temperature, &probe)?;
    let report_path = out.join("eval_report.json");
    write_json(&report_path, &report)?;
    manifest.add(&report_path);
    if let Some(path) = &args.export {
        export_representations(&params, &data, path)?;
        manifest.add(path);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    manifest.finish(out, true)?;
    Ok(())
}

fn cmd_make_data(cli: &Cli, args: &MakeDataArgs) -> Result<()> {
    let mut cfg = train_config(cli)?;
    if let DataSource::Blobs(spec) = &mut cfg.data {
        spec.seed = cli.seed.unwrap_or(spec.seed);
        spec.dim = args.dim.unwrap_or(spec.dim);
        spec.classes = args.classes.unwrap_or(spec.classes);
        spec.per_class = args.per_class.unwrap_or(spec.per_class);
        spec.noise = args.noise.unwrap_or(spec.noise);
    }
    let data = cfg.data.load()?;
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start("make-data", serde_json::to_value(&cfg.data)?, cfg.seed);
    let path = out.join("data.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    data.write_csv(&mut w)?;
    w.flush()?;
    manifest.add(&path);
    manifest.finish(out, true)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SylvesterCase {
    name: String,
    expected_null_dim: Option<usize>,
    null_dim: usize,
    rank: usize,
    system_dim: usize,
    nontrivial: bool,
    ok: bool,
}

fn sylvester_case(name: &str, w: &Tensor, a: &Tensor, b: &Tensor, expected: Option<usize>) -> Result<SylvesterCase> {
    let r = sylvester_null_space(w, a, b, DEFAULT_PIVOT_TOL)?;
    Ok(SylvesterCase {
        name: name.to_string(),
        expected_null_dim: expected,
        null_dim: r.null_dim,
        rank: r.rank,
        system_dim: r.system_dim,
        nontrivial: r.nontrivial,
        ok: expected.is_none_or(|e| e == r.null_dim),
    })
}

fn diag(values: &[f64]) -> Tensor {
    let n = values.len();
    let mut t = Tensor::zeros(&[n, n]);
    for (i, v) in values.iter().enumerate() {
        t.data_mut()[i * n + i] = *v;
    }
    t
}

fn finish_verify(cli: &Cli, command: &str, config: serde_json::Value, seed: u64, report: &impl Serialize, passed: bool, extra: Vec<PathBuf>) -> Result<()> {
    let out = &cli.out_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start(command, config, seed);
    let path = out.join(format!("{}_report.json", command.trim_start_matches("verify ")));
    write_json(&path, report)?;
    manifest.add(&path);
    manifest.artifacts.extend(extra);
    manifest.finish(out, passed)?;
    println!("{}", serde_json::to_string_pretty(report)?);
    if !passed {
        bail!("{command} failed; see {}", path.display());
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, cmd: &VerifyCommand) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cmd {
        VerifyCommand::UpperBound { trials } => {
            let report = upper_bound_sweep(*trials, seed)?;
            info!("min margin {:e} over {} evaluations", report.min_margin, report.evaluations);
            let passed = report.passed;
            finish_verify(cli, "verify upper-bound", serde_json::json!({ "trials": trials }), seed, &report, passed, vec![])
        }
        VerifyCommand::Correspondence { steps, predictor, optimizer, lr, no_filter } => {
            let mut spec = read_config(cli.config.as_deref(), |t| {
                serde_json::from_str::<CorrespondenceSpec>(t).map_err(Error::from)
            })?;
            if let Some(p) = predictor {
                spec.predictor = (*p).into();
            }
            if let Some(o) = optimizer {
                spec.optimizer = (*o).into();
            }
            if let Some(v) = lr {
                spec.lr = *v;
            }
            if *no_filter {
                spec.tangential = TangentialMode::Off;
            }
            let report = trajectory_correspondence_experiment(&spec, *steps, seed)?;
            let out = &cli.out_dir;
            fs::create_dir_all(out)?;
            let csv = out.join("correspondence_series.csv");
            let mut w = BufWriter::new(File::create(&csv)?);
            report.write_csv(&mut w)?;
            w.flush()?;
            let passed = report.passed;
            info!(
                "relative deviations: theta {:e}, W {:e}",
                report.relative_theta_dev, report.relative_w_dev
            );
            finish_verify(cli, "verify correspondence", serde_json::to_value(&spec)?, seed, &report, passed, vec![csv])
        }
        VerifyCommand::Sylvester { dim, samples, w_diag, augmented } => {
            let i2 = Tensor::identity(2);
            let mut cases = vec![
                sylvester_case("W=I", &i2, &i2, &i2, Some(4))?,
                sylvester_case("W=2I", &i2.map(|v| 2.0 * v), &i2, &i2, Some(0))?,
                sylvester_case("W=diag(1,2)", &diag(&[1.0, 2.0]), &i2, &i2, Some(2))?,
            ];
            let data = raftlab::data::make_blobs(&BlobsSpec { dim: *dim, seed, ..BlobsSpec::default() })?;
            let aug = if *augmented {
                AugmentationSpec::default()
            } else {
                AugmentationSpec::identity(0)
            };
            let m = estimate_aug_moments(&data, &aug, *samples, derive_seed(seed, 1))?;
            let max_ab = m
                .a
                .data()
                .iter()
                .zip(m.b.data())
                .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));
            let bound = 5.0 / (*samples as f64).sqrt();
            let id = Tensor::identity(*dim);
            cases.push(sylvester_case("W=I on estimated moments", &id, &m.a, &m.b, (!*augmented).then_some(dim * dim))?);
            if let Some(d) = w_diag {
                cases.push(sylvester_case("W=diag(--w-diag)", &diag(d), &m.a, &m.b, None)?);
            }
            let moments_ok = *augmented || max_ab <= bound;
            let passed = moments_ok && cases.iter().all(|c| c.ok);
            let report = serde_json::json!({
                "cases": cases,
                "moments": { "samples": samples, "max_abs_a_minus_b": max_ab, "bound": bound, "rank_a": m.rank_a, "warning": m.warning, "a": m.a, "b": m.b },
                "passed": passed,
            });
            let config = serde_json::json!({ "dim": dim, "samples": samples, "augmented": augmented, "w_diag": w_diag });
            finish_verify(cli, "verify sylvester", config, seed, &report, passed, vec![])
        }
        VerifyCommand::Gradcheck { loss, step, tolerance, batch } => {
            let cfg = train_config(cli)?;
            let mut spec = cfg.network.clone();
            spec.norm_gradient = NormGradient::Full;
            let params = init_params(&spec, derive_seed(cfg.seed, TAG_INIT))?;
            let blobs = match &cfg.data {
                DataSource::Blobs(b) => b.clone(),
                DataSource::Cifar10 { .. } => bail!("gradcheck runs on blobs data only"),
            };
            let pb = blobs_batch(&blobs, *batch, cfg.seed)?;
            let t = cfg.loss.temperature;
            let (a, b) = (cfg.loss.alpha, cfg.loss.beta);
            let losses = match loss {
                GradcheckArg::All => vec![
                    GradcheckLoss::Align,
                    GradcheckLoss::Uniformity { temperature: t },
                    GradcheckLoss::CrossModel,
                    GradcheckLoss::Byol,
                    GradcheckLoss::ByolPrime { alpha: a, beta: b },
                    GradcheckLoss::Raft { alpha: a, beta: b },
                ],
                GradcheckArg::Align => vec![GradcheckLoss::Align],
                GradcheckArg::Uniformity => vec![GradcheckLoss::Uniformity { temperature: t }],
                GradcheckArg::CrossModel => vec![GradcheckLoss::CrossModel],
                GradcheckArg::Byol => vec![GradcheckLoss::Byol],
                GradcheckArg::ByolPrime => vec![GradcheckLoss::ByolPrime { alpha: a, beta: b }],
                GradcheckArg::Raft => vec![GradcheckLoss::Raft { alpha: a, beta: b }],
            };
            let reports = losses
                .into_iter()
                .map(|l| finite_difference_gradcheck(l, &params, &pb, *step))
                .collect::<raftlab::Result<Vec<_>>>()?;
            for r in &reports {
                info!("{}: max relative error {:e}", r.loss.name(), r.max_rel_error);
            }
            let passed = reports.iter().all(|r| r.max_rel_error <= *tolerance);
            let report = serde_json::json!({ "tolerance": tolerance, "checks": reports, "passed": passed });
            let config = serde_json::json!({ "network": spec, "step": step, "batch": batch });
            finish_verify(cli, "verify gradcheck", config, cfg.seed, &report, passed, vec![])
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RAFTLAB_LOG", "info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Verify(cmd) => cmd_verify(&cli, cmd),
        Command::MakeData(args) => cmd_make_data(&cli, args),
    }
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use clta_core::attention::FusionMode;
use clta_core::classifiers::ClassifierKind;
use clta_core::dataset::{describe, Split};
use clta_core::episodic::{EpisodeSpec, EvalSummary};
use clta_core::error::CltaError;
use clta_core::io::{labels_path, load_checkpoint, load_dataset, read_labels, save_checkpoint, save_dataset, write_labels};
use clta_core::model::{AttentionKind, ProjectionStage};
use clta_core::pipeline::{ablate, evaluate, gradcheck, train_model, validation_spec, GradCheckSetup, ModelOptions, Sweep};
use clta_core::synth::{generate, SynthConfig, SynthMode};
use clta_core::trainer::TrainConfig;

/// Gradient-check threshold for a passing run.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "clta", version, about = "Temporal attention for few-shot sequence classification")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (feature files and manifest).
    Gen(GenArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Few-shot evaluation of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a seeded batch.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a parameter sweep.
    Ablate(AblateArgs),
    /// Write per-video attention curves as CSV.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit the timestamp comment from result CSVs.
    #[arg(long)]
    deterministic_output: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    FixedPosition,
    InstanceShifted,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "instance-shifted")]
    mode: ModeArg,
    #[arg(long, default_value_t = 30)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    videos_per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    t_min: usize,
    #[arg(long, default_value_t = 40)]
    t_max: usize,
    #[arg(long, default_value_t = 6)]
    window: usize,
    #[arg(long, default_value_t = 3.0)]
    amp: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Spread of class window positions in fixed-position mode.
    #[arg(long, default_value_t = 0.2)]
    position_spread: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Clta,
    Avg,
    Selfattn,
    Tsf,
    Sldg,
}

impl From<ModelArg> for AttentionKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Clta => AttentionKind::Clta,
            ModelArg::Avg => AttentionKind::Average,
            ModelArg::Selfattn => AttentionKind::SelfAttention,
            ModelArg::Tsf => AttentionKind::Tsf,
            ModelArg::Sldg => AttentionKind::Sldg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    Softmax,
    Cosine,
}

impl From<ClassifierArg> for ClassifierKind {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Softmax => ClassifierKind::Softmax,
            ClassifierArg::Cosine => ClassifierKind::Cosine,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Average,
    Soft,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pre,
    Post,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long, value_enum, default_value = "clta")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "softmax")]
    classifier: ClassifierArg,
    #[arg(long, value_enum, default_value = "average")]
    fusion: FusionArg,
    #[arg(long, default_value_t = 6)]
    k_gaussians: usize,
    #[arg(long, default_value_t = 1e3)]
    beta: f64,
    #[arg(long, value_enum, default_value = "post")]
    projection_stage: StageArg,
    /// Projection width; 0 disables the projection.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    batch_norm: bool,
}

impl ModelFlags {
    fn options(&self) -> ModelOptions {
        ModelOptions {
            attention: self.model.into(),
            k: self.k_gaussians,
            beta: self.beta,
            fusion: match self.fusion {
                FusionArg::Average => FusionMode::Average,
                FusionArg::Soft => FusionMode::SoftWeight,
            },
            classifier: self.classifier.into(),
            hidden: self.hidden,
            projection_stage: match self.projection_stage {
                StageArg::Pre => ProjectionStage::Pre,
                StageArg::Post => ProjectionStage::Post,
            },
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    decay_every: usize,
    #[arg(long, default_value_t = 0.5)]
    decay_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    dropout: f64,
    /// Validation episodes per epoch; 0 keeps the last epoch.
    #[arg(long, default_value_t = 100)]
    val_episodes: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    /// Same head type as training.
    Same,
    Softmax,
    Cosine,
}

#[derive(Args, Debug, Clone)]
struct EpisodeFlags {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 5)]
    k_shot: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    retrain_epochs: usize,
    #[arg(long, default_value_t = 64)]
    retrain_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    retrain_lr: f64,
    #[arg(long, value_enum, default_value = "same")]
    retrain_head: HeadArg,
}

impl EpisodeFlags {
    fn spec(&self, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            num_episodes: self.episodes,
            retrain_epochs: self.retrain_epochs,
            retrain_batch: self.retrain_batch,
            retrain_lr: self.retrain_lr,
            seed,
            head: match self.retrain_head {
                HeadArg::Same => None,
                HeadArg::Softmax => Some(ClassifierKind::Softmax),
                HeadArg::Cosine => Some(ClassifierKind::Cosine),
            },
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log CSV (default: `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Result CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Finite-difference step, within [1e-6, 1e-4].
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 3)]
    videos: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepArg {
    K,
    Beta,
    Fusion,
    Classifier,
    All,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    sweep: SweepArg,
    /// Result CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    episodes: EpisodeFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory receiving one `<video_id>.csv` per video.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Maximum number of videos to dump (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<CltaError> for Failure {
    fn from(e: CltaError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Converts `key = value` lines into flags placed right after the subcommand,
/// so flags given on the command line win.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut out = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it
                .next()
                .ok_or_else(|| Failure::Usage("--config needs a path".into()))?;
            config = Some(p);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            out.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(out);
    };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("cannot read config {path}: {e}")))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => extra.push(flag),
            "false" => {}
            v => {
                extra.push(flag);
                extra.push(v.to_string());
            }
        }
    }
    // argv[0] is the program, argv[1] the subcommand.
    let at = out.len().min(2);
    out.splice(at..at, extra);
    Ok(out)
}

fn timestamp_line(deterministic: bool) -> String {
    if deterministic {
        return String::new();
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# generated_at_unix={secs}\n")
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, body).map_err(|e| io_failure(p, e)),
        None => io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

const RESULT_HEADER: &str = "model,n_way,k_shot,num_episodes,mean_acc,ci95,seed";

fn result_row(model: &str, spec: &EpisodeSpec, s: &EvalSummary) -> String {
    format!(
        "{model},{},{},{},{:.6},{:.6},{}",
        spec.n_way, spec.k_shot, spec.num_episodes, s.mean_acc, s.ci95, spec.seed
    )
}

fn train_config(flags: &TrainFlags, seed: u64) -> TrainConfig {
    TrainConfig {
        lr0: flags.lr,
        decay_every: flags.decay_every,
        decay_factor: flags.decay_factor,
        batch_size: flags.batch_size,
        epochs: flags.epochs,
        dropout_rate: flags.dropout,
        seed,
    }
}

fn val_spec(flags: &TrainFlags, episodes: &EpisodeFlags, seed: u64) -> Option<EpisodeSpec> {
    (flags.val_episodes > 0).then(|| validation_spec(&episodes.spec(seed), flags.val_episodes))
}

fn run_gen(a: GenArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        videos_per_class: a.videos_per_class,
        d: a.dim,
        t_min: a.t_min,
        t_max: a.t_max,
        window_len: a.window,
        signal_amp: a.amp,
        noise_std: a.noise,
        mode: match a.mode {
            ModeArg::FixedPosition => SynthMode::FixedPosition,
            ModeArg::InstanceShifted => SynthMode::InstanceShifted,
        },
        position_spread: a.position_spread,
        seed: a.common.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    let manifest = save_dataset(&ds.dataset, &a.out)?;
    println!("{}", describe(&ds.dataset));
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Failure> {
    let ds = load_dataset(&a.data)?;
    let cfg = train_config(&a.train, a.common.seed);
    let val = val_spec(&a.train, &a.episodes, a.common.seed);
    let trained = train_model(&ds, &a.model.options(), &cfg, val.as_ref())?;
    save_checkpoint(&a.out, &trained.model)?;
    write_labels(&labels_path(&a.out), &trained.class_names)?;

    let mut body = timestamp_line(a.common.deterministic_output);
    body.push_str("epoch,lr,train_loss,train_acc,val_acc\n");
    for e in &trained.log {
        let val = e.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        body.push_str(&format!("{},{:e},{:.6},{:.6},{val}\n", e.epoch, e.lr, e.train_loss, e.train_acc));
    }
    let log_path = a.log.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    emit(Some(&log_path), &body)?;
    println!(
        "trained {} for {} epochs, selected epoch {}; checkpoint {}",
        trained.model.config.attention.name(),
        trained.log.len(),
        trained.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn load_trained(checkpoint: &Path) -> Result<clta_core::model::Model, Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::Runtime(format!(
            "checkpoint {} not found; run `clta train` first",
            checkpoint.display()
        )));
    }
    Ok(load_checkpoint(checkpoint)?)
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_trained(&a.checkpoint)?;
    let lp = labels_path(&a.checkpoint);
    if lp.is_file() {
        let names = read_labels(&lp)?;
        info!("checkpoint trained on {} base classes", names.len());
    }
    let ds = load_dataset(&a.data)?;
    let spec = a.episodes.spec(a.common.seed);
    let summary = evaluate(&model, &ds, &spec)?;
    let mut body = timestamp_line(a.common.deterministic_output);
    body.push_str(RESULT_HEADER);
    body.push('\n');
    body.push_str(&result_row(model.config.attention.name(), &spec, &summary));
    body.push('\n');
    emit(a.out.as_deref(), &body)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let setup = GradCheckSetup {
        videos: a.videos,
        eps: a.eps,
        ..GradCheckSetup::default()
    };
    let report = gradcheck(a.common.seed, &setup)?;
    println!(
        "max relative error {:.3e} over {} entries (worst: {}[{}])",
        report.max_rel_error,
        report.checked,
        report.worst_param.as_deref().unwrap_or("-"),
        report.worst_index
    );
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn run_ablate(a: AblateArgs) -> Result<(), Failure> {
    let ds = load_dataset(&a.data)?;
    let sweeps = match a.sweep {
        SweepArg::K => vec![Sweep::K],
        SweepArg::Beta => vec![Sweep::Beta],
        SweepArg::Fusion => vec![Sweep::Fusion],
        SweepArg::Classifier => vec![Sweep::Classifier],
        SweepArg::All => Sweep::ALL.to_vec(),
    };
    let cfg = train_config(&a.train, a.common.seed);
    let val = val_spec(&a.train, &a.episodes, a.common.seed);
    let spec = a.episodes.spec(a.common.seed);
    let rows = ablate(&ds, &a.model.options(), &sweeps, &cfg, val.as_ref(), &spec)?;
    let mut body = timestamp_line(a.common.deterministic_output);
    body.push_str("sweep,value,");
    body.push_str(RESULT_HEADER);
    body.push('\n');
    for r in &rows {
        body.push_str(&format!(
            "{},{},{}\n",
            r.sweep.name(),
            r.value,
            result_row(r.options.attention.name(), &spec, &r.summary)
        ));
    }
    emit(a.out.as_deref(), &body)
}

fn run_dump(a: DumpArgs) -> Result<(), Failure> {
    let model = load_trained(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut set = ds.split(split);
    set.retain_max_len(model.config.z);
    fs::create_dir_all(&a.out_dir).map_err(|e| io_failure(&a.out_dir, e))?;
    let z = model.config.z as f64;
    let limit = if a.limit == 0 { usize::MAX } else { a.limit };
    let mut written = 0;
    for seq in set.sequences.iter().take(limit) {
        let trace = model.trace(seq)?;
        let mut body = timestamp_line(a.common.deterministic_output);
        body.push_str("k,t,t_over_Z,a,e,mu_k,sigma_k\n");
        for k in 0..trace.norm.rows() {
            let mu = trace.mu.get(k).map(|v| format!("{v:.9}")).unwrap_or_default();
            let sigma = trace.sigma.get(k).map(|v| format!("{v:.9}")).unwrap_or_default();
            for t in 0..trace.norm.cols() {
                body.push_str(&format!(
                    "{k},{},{:.9},{:.9},{:.9},{mu},{sigma}\n",
                    t + 1,
                    (t + 1) as f64 / z,
                    trace.raw.get(k, t),
                    trace.norm.get(k, t)
                ));
            }
        }
        emit(Some(&a.out_dir.join(format!("{}.csv", seq.video_id))), &body)?;
        written += 1;
    }
    println!("wrote {written} attention files to {}", a.out_dir.display());
    Ok(())
}

fn run(argv: Vec<String>) -> Result<(), Failure> {
    let argv = expand_config(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    // Help requested explicitly is a success; a bare `clta` is not.
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        Err(Failure::Usage(String::new()))
                    } else {
                        Ok(())
                    }
                }
                _ => Err(Failure::Usage(e.render().to_string())),
            };
        }
    };
    match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => run_ablate(a),
        Command::DumpAttention(a) => run_dump(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            if !msg.is_empty() {
                eprint!("{msg}");
                if !msg.ends_with('\n') {
                    eprintln!();
                }
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

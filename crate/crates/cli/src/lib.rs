//! Command-line driver: data generation, training, evaluation, gradient
//! verification, field rendering and operator ablations.

// `!(x > 0.0)` style checks are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pgm;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mondrian::model::Model;
use mondrian::par::{default_threads, parallel_map};
use mondrian::pde::{dataset_generate, Dataset};
use mondrian::tensor::Tensor;
use mondrian::training::{
    evaluate, gather, load_checkpoint, read_state, save_checkpoint, state_bytes, EpochMetrics, Metrics, OptimState, TrainReport, Trainer,
};
use mondrian::verify::{gradient_checks, NamedCheck, TOLERANCE};
use mondrian::Error;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 2 config, 3 I/O, 4 format, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Check(_) => 5,
            CliError::Core(e) => match e {
                Error::Invalid(_) | Error::Divisibility { .. } | Error::Shape { .. } | Error::NotScalar(_) => 2,
                Error::Io(_) => 3,
                Error::Format(_) => 4,
                Error::NonFinite { .. }
                | Error::AllMasked { .. }
                | Error::NonDeterministic { .. }
                | Error::Unstable { .. }
                | Error::BlowUp { .. }
                | Error::Diverged { .. } => 5,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Attach the path to plain I/O failures; format errors pass through.
fn core_at(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(source) => io_at(path)(source),
        e => CliError::Core(e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "mondrian", version, about = "Domain-decomposed transformer neural operators for Allen-Cahn")]
pub struct Cli {
    /// Worker threads; 1 gives the deterministic single-thread mode.
    /// Defaults to MONDRIAN_THREADS, else the available parallelism.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (key = value lines); built-in desk defaults when omitted.
    #[arg(value_name = "CONFIG")]
    pub config: Option<PathBuf>,

    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        overrides.extend_from_slice(extra);
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(io_at(p))?,
            None => String::new(),
        };
        Ok(ExperimentConfig::parse_with(&text, &overrides)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve Allen-Cahn for random initial states and write MNDR datasets.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for train_<N>x<N>.mndr and test_<N>x<N>.mndr.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the best-validation checkpoint, a resume file
    /// (<out>.state) and the metrics log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset (MNDR).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (MNCK).
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path; defaults to <out>.log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from <out>.state, appending to the log.
        #[arg(long)]
        resume: bool,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this epoch without changing the learning-rate schedule.
        #[arg(long, value_name = "EPOCH")]
        stop_after: Option<usize>,
    },
    /// Per-resolution MAE and MSE of a checkpoint.
    Eval {
        /// Checkpoint (MNCK).
        checkpoint: PathBuf,
        /// Test dataset; repeat once per resolution.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write each dataset with u(T) replaced by predictions to
        /// DIR/<stem>.pred.mndr.
        #[arg(long, value_name = "DIR")]
        save_predictions: Option<PathBuf>,
        /// Samples per forward pass.
        #[arg(long, default_value_t = 8)]
        chunk: usize,
    },
    /// Compare reverse-mode gradients with central differences for every
    /// operator, attention variant, the feed-forward block and tiny models.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Finite-difference step; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',', default_value = "1e-6")]
        eps: Vec<f64>,
    },
    /// Write PGM panels (input, target, prediction, |error|) for one sample.
    Render {
        /// Dataset (MNDR).
        data: PathBuf,
        /// Sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Predict with this checkpoint.
        #[arg(long, conflicts_with = "prediction")]
        checkpoint: Option<PathBuf>,
        /// Take predictions from the u(T) fields of this MNDR file.
        #[arg(long)]
        prediction: Option<PathBuf>,
    },
    /// Train and evaluate one model per *.cfg file in a directory.
    Ablate {
        /// Directory of experiment configs.
        dir: PathBuf,
        /// Training dataset shared by every config.
        #[arg(long)]
        data: PathBuf,
        /// Test dataset; repeat once per resolution.
        #[arg(long, required = true)]
        test: Vec<PathBuf>,
        /// Directory for per-config checkpoints and logs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override one key in every config; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let threads = cli.threads.filter(|&t| t > 0).unwrap_or_else(default_threads);
    match cli.command {
        Command::GenData { config, out: dir } => gen_data(&config.load(&[])?, &dir, threads, out),
        Command::Train {
            config,
            data,
            out: ckpt,
            log,
            resume,
            epochs,
            stop_after,
        } => {
            let extra: Vec<String> = epochs.map(|e| format!("epochs={e}")).into_iter().collect();
            let cfg = config.load(&extra)?;
            let log = log.unwrap_or_else(|| with_suffix(&ckpt, "log"));
            train(&cfg, &data, &ckpt, &log, resume, stop_after, threads, out)
        }
        Command::Eval {
            checkpoint,
            data,
            csv,
            save_predictions,
            chunk,
        } => eval(&checkpoint, &data, csv.as_deref(), save_predictions.as_deref(), chunk, threads, out),
        Command::Gradcheck { config, eps } => {
            let cfg = config.load(&[])?;
            gradcheck(&gradient_checks(cfg.seed), &eps, threads, out)
        }
        Command::Render {
            data,
            index,
            out: dir,
            checkpoint,
            prediction,
        } => render(&data, index, &dir, checkpoint.as_deref(), prediction.as_deref(), out),
        Command::Ablate {
            dir,
            data,
            test,
            out: save,
            csv,
            set,
        } => ablate(&dir, &data, &test, save.as_deref(), csv.as_deref(), &set, threads, out),
    }
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn res_label(r: [usize; 2]) -> String {
    format!("{}x{}", r[0], r[1])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(core_at(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

pub fn gen_data(cfg: &ExperimentConfig, dir: &Path, threads: usize, out: &mut dyn Write) -> Result<()> {
    let d = &cfg.data;
    let mut jobs = Vec::new();
    if d.train_count > 0 {
        jobs.push(("train", d.train_count, d.train_resolution));
    }
    if d.test_count > 0 {
        jobs.extend(d.test_resolutions.iter().map(|&r| ("test", d.test_count, r)));
    }
    if jobs.is_empty() {
        return Err(CliError::Usage("nothing to generate: train_count and test_count are both 0".into()));
    }
    // Check every resolution before spending time on any solve.
    for &(_, _, r) in &jobs {
        cfg.model.check_resolution([r, r])?;
    }
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    for (kind, count, r) in jobs {
        let spec = cfg.dataset_spec(count, r, kind == "test");
        let data = dataset_generate(&spec, threads)?;
        let bytes = data.to_bytes()?;
        let path = dir.join(format!("{kind}_{r}x{r}.mndr"));
        write_file(&path, &bytes)?;
        writeln!(out, "{}  {} samples  {}  sha256 {}", path.display(), count, res_label(data.resolution), sha256_hex(&bytes)).map_err(io_at(&path))?;
    }
    Ok(())
}

fn history_table(report: &TrainReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{:>5}  {:>10}  {:>10}  {:>10}  {:>10}", "epoch", "lr", "train_mse", "val_mse", "val_mae")?;
    for m in &report.history {
        let mark = if report.best.is_some_and(|b| b.epoch == m.epoch) { " *" } else { "" };
        writeln!(out, "{:>5}  {:>10.3e}  {:>10.3e}  {:>10.3e}  {:>10.3e}{mark}", m.epoch, m.lr, m.train_mse, m.val_mse, m.val_mae)?;
    }
    Ok(())
}

/// Copies metric lines to the log file and the console.
struct Tee<'a> {
    file: fs::File,
    console: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        self.console.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.console.flush()
    }
}

/// Outcome of [`train_model`].
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Model<f32>,
    pub state: OptimState<f32>,
}

/// Train per `cfg`, saving the best checkpoint to `ckpt` (when given) on
/// every improvement and the resume file after every epoch.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ckpt: Option<&Path>,
    resume: bool,
    stop_after: Option<usize>,
    threads: usize,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.model.check_resolution(data.resolution)?;
    let tc = mondrian::training::TrainConfig {
        threads,
        stop_after,
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let trainer = Trainer::new(&tc, data)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut state = OptimState::new(&model.params);
    let state_path = ckpt.map(|p| with_suffix(p, "state"));
    let mut best = model.clone();
    if resume {
        let p = state_path.as_deref().ok_or_else(|| CliError::Usage("resume needs a checkpoint path".into()))?;
        let bytes = fs::read(p).map_err(io_at(p))?;
        state = read_state(&mut bytes.as_slice(), &mut model)?;
        if let Some(c) = ckpt.filter(|c| c.exists()) {
            best = load_checkpoint(c).map_err(core_at(c))?;
        }
    }
    let report = trainer.run(&mut model, &mut state, log, |ev| {
        if ev.improved {
            best = ev.model.clone();
            if let Some(c) = ckpt {
                save_checkpoint(ev.model, c)?;
            }
        }
        if let Some(p) = &state_path {
            fs::write(p, state_bytes(ev.model, ev.state)?)?;
        }
        Ok(())
    })?;
    Ok(TrainOutcome { report, best, state })
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &ExperimentConfig,
    data_path: &Path,
    ckpt: &Path,
    log_path: &Path,
    resume: bool,
    stop_after: Option<usize>,
    threads: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let data = load_dataset(data_path)?;
    cfg.model.check_resolution(data.resolution)?;
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(log_path)
        .map_err(io_at(log_path))?;
    let mut tee = Tee { file, console: out };
    let outcome = train_model(cfg, &data, Some(ckpt), resume, stop_after, threads, &mut tee)?;
    let st = &outcome.state;
    history_table(&outcome.report, out).map_err(io_at(ckpt))?;
    writeln!(
        out,
        "iterations {}  updates {}  skipped {}  parameters {}  checkpoint {}",
        st.iteration,
        st.updates,
        st.skipped,
        outcome.best.parameter_count(),
        ckpt.display()
    )
    .map_err(io_at(ckpt))?;
    Ok(())
}

/// Predictions for every sample of `data`, shape `(n, N1, N2)`.
pub fn predict_dataset(model: &Model<f32>, data: &Dataset, chunk: usize) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    let (u0, gammas, _) = gather::<f32>(data, &idx)?;
    Ok(model.predict(&u0, &gammas, chunk)?)
}

fn metrics_table(rows: &[(String, usize, Metrics)], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{:<12}{:>8}  {:>10}  {:>10}", "resolution", "samples", "MAE", "MSE")?;
    for (label, n, m) in rows {
        writeln!(out, "{label:<12}{n:>8}  {:>10.3e}  {:>10.3e}", m.mae, m.mse)?;
    }
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    data: &[PathBuf],
    csv: Option<&Path>,
    save_predictions: Option<&Path>,
    chunk: usize,
    threads: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_checkpoint::<f32>(ckpt).map_err(core_at(ckpt))?;
    let mut rows = Vec::new();
    for path in data {
        let d = load_dataset(path)?;
        model.config.check_resolution(d.resolution)?;
        let m = evaluate(&model, &d, chunk.max(1), threads)?;
        rows.push((res_label(d.resolution), d.samples.len(), m));
        if let Some(dir) = save_predictions {
            let pred = predict_dataset(&model, &d, chunk)?;
            let mut p = d.clone();
            for (s, y) in p.samples.iter_mut().zip(pred.data().chunks(d.points())) {
                s.ut = y.to_vec();
            }
            fs::create_dir_all(dir).map_err(io_at(dir))?;
            let stem = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            let target = dir.join(format!("{stem}.pred.mndr"));
            write_file(&target, &p.to_bytes()?)?;
        }
    }
    metrics_table(&rows, out).map_err(io_at(ckpt))?;
    if let Some(c) = csv {
        let mut text = String::from("resolution,samples,mae,mse\n");
        for (label, n, m) in &rows {
            text.push_str(&format!("{label},{n},{:e},{:e}\n", m.mae, m.mse));
        }
        write_file(c, text.as_bytes())?;
    }
    Ok(())
}

/// Run every check at every step size, print one line each, and fail
/// unless all errors are below [`TOLERANCE`].
pub fn gradcheck(checks: &[NamedCheck], eps: &[f64], threads: usize, out: &mut dyn Write) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(CliError::Usage("--eps values must be positive".into()));
    }
    let jobs: Vec<(usize, f64)> = (0..checks.len()).flat_map(|c| eps.iter().map(move |&e| (c, e))).collect();
    let results = parallel_map(jobs.len(), threads, |k| {
        let (c, e) = jobs[k];
        (checks[c].run)(e)
    });
    let stdout_err = |e: io::Error| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(out, "{:<26}{:>8}  {:>12}  status", "component", "eps", "max_rel_err").map_err(stdout_err)?;
    let mut failed = 0;
    for ((c, e), r) in jobs.iter().zip(results) {
        let name = &checks[*c].name;
        let line = match r {
            Ok(rep) if rep.max_rel_error < TOLERANCE => format!("{name:<26}{e:>8.0e}  {:>12.3e}  ok", rep.max_rel_error),
            Ok(rep) => {
                failed += 1;
                let worst = rep.worst_param.unwrap_or_default();
                format!("{name:<26}{e:>8.0e}  {:>12.3e}  FAIL ({worst})", rep.max_rel_error)
            }
            Err(err) => {
                failed += 1;
                format!("{name:<26}{e:>8.0e}  {:>12}  FAIL ({err})", "-")
            }
        };
        writeln!(out, "{line}").map_err(stdout_err)?;
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", jobs.len())));
    }
    writeln!(out, "all {} gradient checks below {TOLERANCE:e}", jobs.len()).map_err(stdout_err)?;
    Ok(())
}

pub fn render(data_path: &Path, index: usize, dir: &Path, ckpt: Option<&Path>, prediction: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(data_path)?;
    let n = data.samples.len();
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {n} samples")))?;
    let pred: Option<Vec<f32>> = match (ckpt, prediction) {
        (Some(c), _) => {
            let model = load_checkpoint::<f32>(c).map_err(core_at(c))?;
            model.config.check_resolution(data.resolution)?;
            let (u0, gammas, _) = gather::<f32>(&data, &[index])?;
            Some(model.predict(&u0, &gammas, 1)?.into_data())
        }
        (None, Some(p)) => {
            let pd = load_dataset(p)?;
            if pd.resolution != data.resolution {
                return Err(Error::Shape {
                    op: "render",
                    detail: format!("prediction {:?} vs data {:?}", pd.resolution, data.resolution),
                }
                .into());
            }
            let s = pd
                .samples
                .get(index)
                .ok_or_else(|| CliError::Usage(format!("index {index} out of range for {} predictions", pd.samples.len())))?;
            Some(s.ut.clone())
        }
        (None, None) => None,
    };
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let [h, w] = data.resolution;
    let mut panels = vec![("input", sample.u0.clone()), ("target", sample.ut.clone())];
    if let Some(p) = pred {
        let err = p.iter().zip(&sample.ut).map(|(a, b)| (a - b).abs()).collect();
        panels.push(("prediction", p));
        panels.push(("error", err));
    }
    for (name, values) in panels {
        let path = dir.join(format!("{name}.pgm"));
        write_file(&path, &pgm::encode(&values, w, h))?;
        writeln!(out, "{}", path.display()).map_err(io_at(&path))?;
    }
    Ok(())
}

/// One row of an ablation table.
pub struct AblationRow {
    pub name: String,
    pub operator: String,
    pub parameters: usize,
    pub history: Vec<EpochMetrics>,
    pub metrics: Vec<Metrics>,
}

/// Sorted `*.cfg` files of `dir`.
pub fn config_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let p = entry.map_err(io_at(dir))?.path();
        if p.extension().is_some_and(|e| e == "cfg") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("{} holds no *.cfg files", dir.display())));
    }
    Ok(files)
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    dir: &Path,
    train_path: &Path,
    tests: &[PathBuf],
    save: Option<&Path>,
    csv: Option<&Path>,
    set: &[String],
    threads: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let files = config_files(dir)?;
    let configs = files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_at(p))?;
            ExperimentConfig::parse_with(&text, set).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = load_dataset(train_path)?;
    let test_sets = tests.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    for cfg in &configs {
        cfg.model.check_resolution(data.resolution)?;
        for t in &test_sets {
            cfg.model.check_resolution(t.resolution)?;
        }
    }
    if let Some(s) = save {
        fs::create_dir_all(s).map_err(io_at(s))?;
    }
    let mut rows = Vec::new();
    for (path, cfg) in files.iter().zip(&configs) {
        let name = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
        let ckpt = save.map(|s| s.join(format!("{name}.mnck")));
        let mut log: Box<dyn Write> = match save {
            Some(s) => {
                let p = s.join(format!("{name}.log"));
                Box::new(fs::File::create(&p).map_err(io_at(&p))?)
            }
            None => Box::new(io::sink()),
        };
        let outcome = train_model(cfg, &data, ckpt.as_deref(), false, None, threads, &mut log)?;
        let metrics = test_sets
            .iter()
            .map(|t| evaluate(&outcome.best, t, cfg.train.eval_chunk, threads))
            .collect::<mondrian::Result<Vec<_>>>()?;
        rows.push(AblationRow {
            name,
            operator: cfg.model.operator.kind.to_string(),
            parameters: outcome.best.parameter_count(),
            history: outcome.report.history,
            metrics,
        });
    }
    let labels: Vec<String> = test_sets.iter().map(|t| res_label(t.resolution)).collect();
    ablation_table(&rows, &labels, out).map_err(io_at(dir))?;
    if let Some(c) = csv {
        let mut text = String::from("config,operator,parameters");
        for l in &labels {
            text.push_str(&format!(",{l}_mae,{l}_mse"));
        }
        text.push('\n');
        for r in &rows {
            text.push_str(&format!("{},{},{}", r.name, r.operator, r.parameters));
            for m in &r.metrics {
                text.push_str(&format!(",{:e},{:e}", m.mae, m.mse));
            }
            text.push('\n');
        }
        write_file(c, text.as_bytes())?;
    }
    Ok(())
}

fn ablation_table(rows: &[AblationRow], labels: &[String], out: &mut dyn Write) -> io::Result<()> {
    write!(out, "{:<20}{:<20}{:>12}", "config", "operator", "parameters")?;
    for l in labels {
        write!(out, "  {:>10}  {:>10}", format!("{l} MAE"), format!("{l} MSE"))?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{:<20}{:<20}{:>12}", r.name, r.operator, r.parameters)?;
        for m in &r.metrics {
            write!(out, "  {:>10.3e}  {:>10.3e}", m.mae, m.mse)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

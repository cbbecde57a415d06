//! `skode`: train, stream, evaluate and inspect skeleton action models.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use skeleton_ode::checkpoint;
use skeleton_ode::config::Config;
use skeleton_ode::data::{
    check_uniform, generate_synthetic, load_sequences, parse_record, preprocess, save_sequences, to_tensors,
    synthetic_split, Normalizer, Sequence, SyntheticSpec,
};
use skeleton_ode::eval::{
    ablate, attention_map, evaluate, matrix_csv, Arm, Split, DEFAULT_RATIO_STEP,
};
use skeleton_ode::tensor::{Precision, Real, Tensor};
use skeleton_ode::train::Trainer;
use skeleton_ode::verify::{self, Suite};
use skeleton_ode::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "skode", version, about = "Online skeleton action recognition with latent ODE extrapolation")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Evaluation grid step over observation ratios.
    #[arg(long, global = true)]
    ratio_step: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

/// Config keys settable from the command line. Values are parsed as JSON
/// when possible (`--decay-epochs [40,50]`), otherwise taken as strings.
#[derive(Args, Default)]
struct Overrides {
    /// JSON config file; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    solver: Option<String>,
    #[arg(long, global = true)]
    substeps: Option<String>,
    #[arg(long, global = true)]
    n_steps: Option<String>,
    #[arg(long, global = true)]
    lambda1: Option<String>,
    #[arg(long, global = true)]
    lambda2: Option<String>,
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    joints: Option<String>,
    #[arg(long, global = true)]
    edges: Option<String>,
    #[arg(long, global = true)]
    hidden: Option<String>,
    #[arg(long, global = true)]
    layers: Option<String>,
    #[arg(long, global = true)]
    sagc_heads: Option<String>,
    #[arg(long, global = true)]
    temporal_heads: Option<String>,
    #[arg(long, global = true)]
    classes: Option<String>,
    #[arg(long, global = true)]
    max_len: Option<String>,
    #[arg(long, global = true)]
    stop_grad_feat_target: Option<String>,
    #[arg(long, global = true)]
    pe_relative: Option<String>,
    #[arg(long, global = true)]
    temporal_pe: Option<String>,
    #[arg(long, global = true)]
    pe_base: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long, global = true)]
    momentum: Option<String>,
    #[arg(long, global = true)]
    weight_decay: Option<String>,
    #[arg(long, global = true)]
    decay_epochs: Option<String>,
    #[arg(long, global = true)]
    decay_factor: Option<String>,
    #[arg(long, global = true)]
    max_epochs: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    label_smoothing: Option<String>,
    #[arg(long, global = true)]
    seq_len: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields = [
            ("seed", &self.seed),
            ("solver", &self.solver),
            ("substeps", &self.substeps),
            ("n_steps", &self.n_steps),
            ("lambda1", &self.lambda1),
            ("lambda2", &self.lambda2),
            ("precision", &self.precision),
            ("joints", &self.joints),
            ("edges", &self.edges),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("sagc_heads", &self.sagc_heads),
            ("temporal_heads", &self.temporal_heads),
            ("classes", &self.classes),
            ("max_len", &self.max_len),
            ("stop_grad_feat_target", &self.stop_grad_feat_target),
            ("pe_relative", &self.pe_relative),
            ("temporal_pe", &self.temporal_pe),
            ("pe_base", &self.pe_base),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("decay_epochs", &self.decay_epochs),
            ("decay_factor", &self.decay_factor),
            ("max_epochs", &self.max_epochs),
            ("batch_size", &self.batch_size),
            ("label_smoothing", &self.label_smoothing),
            ("seq_len", &self.seq_len),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn is_empty(&self) -> bool {
        self.config.is_none() && self.pairs().is_empty()
    }

    /// `base` with the config file and flags layered on top.
    fn apply(&self, base: &Config) -> Result<Config, Failure> {
        let mut doc = match serde_json::to_value(base)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => doc.extend(m),
                Ok(_) => return Err(Failure::usage(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(Failure::usage(format!("{}: {e}", path.display()))),
            }
        }
        for (k, v) in self.pairs() {
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            doc.insert(k.to_string(), value);
        }
        let config: Config =
            serde_json::from_value(Value::Object(doc)).map_err(|e| Failure::usage(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a JSON-lines epoch log.
    Train {
        /// Training sequences (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Epoch log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classify a sequence frame by frame, one JSON record per frame.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence file; standard input when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Feed coordinates as stored, without frame-1 normalization.
        #[arg(long)]
        raw: bool,
    },
    /// Accuracy per observation ratio (CSV on stdout, JSON summary on stderr).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON summary here as well.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Last-layer temporal attention of one head, averaged over joints (CSV).
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record index in the data file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Use frames as stored instead of resampling to `seq_len`.
        #[arg(long)]
        raw: bool,
    },
    /// Run self-check suites: grad, ode, causal, count or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Train each arm over several seeds and compare test AUC.
    Ablate {
        /// Training sequences; the synthetic set when absent.
        #[arg(long, requires = "test")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        test: Option<PathBuf>,
        /// Comma-separated arms, e.g. `cls-only,cls+pred@2,cls+pred+feat@2`.
        #[arg(long, default_value = "cls-only,cls+pred+feat")]
        arms: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value_t = 0.25)]
        low_ratio: f64,
        /// JSON report; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset (JSON lines).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0.02)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
}

/// Error with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Prefixes the failure message with `path`.
fn at<T>(path: &Path, r: skeleton_ode::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", path.display(), f.msg);
        f
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
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

fn run(cli: Cli) -> CliResult {
    let ratio_step = cli.ratio_step.unwrap_or(DEFAULT_RATIO_STEP);
    let o = &cli.overrides;
    match cli.command {
        Command::Train { data, out, log, resume } => {
            let log = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log.jsonl");
                PathBuf::from(p)
            });
            let precision = match &resume {
                Some(path) => o.apply(&at(path, checkpoint::read_header(path))?.config)?.train.precision,
                None => o.apply(&Config::default())?.train.precision,
            };
            match precision {
                Precision::Single => train::<f32>(o, &data, &out, &log, resume.as_deref()),
                Precision::Double => train::<f64>(o, &data, &out, &log, resume.as_deref()),
            }
        }
        Command::Stream { checkpoint, data, raw } => dispatch(&checkpoint, |p| match p {
            Precision::Single => stream::<f32>(o, &checkpoint, data.as_deref(), raw),
            Precision::Double => stream::<f64>(o, &checkpoint, data.as_deref(), raw),
        }),
        Command::Eval {
            checkpoint,
            data,
            summary,
        } => dispatch(&checkpoint, |p| match p {
            Precision::Single => eval::<f32>(o, &checkpoint, &data, ratio_step, summary.as_deref()),
            Precision::Double => eval::<f64>(o, &checkpoint, &data, ratio_step, summary.as_deref()),
        }),
        Command::DumpAttention {
            checkpoint,
            data,
            index,
            head,
            raw,
        } => dispatch(&checkpoint, |p| match p {
            Precision::Single => dump_attention::<f32>(o, &checkpoint, &data, index, head, raw),
            Precision::Double => dump_attention::<f64>(o, &checkpoint, &data, index, head, raw),
        }),
        Command::Verify { suite } => run_verify(&suite),
        Command::Ablate {
            data,
            test,
            arms,
            seeds,
            low_ratio,
            out,
        } => {
            let config = o.apply(&Config::default())?;
            let paths = data.zip(test);
            match config.train.precision {
                Precision::Single => run_ablate::<f32>(&config, paths, &arms, &seeds, ratio_step, low_ratio, out),
                Precision::Double => run_ablate::<f64>(&config, paths, &arms, &seeds, ratio_step, low_ratio, out),
            }
        }
        Command::Synth {
            out,
            num_classes,
            per_class,
            frames,
            noise_std,
            data_seed,
        } => {
            let spec = SyntheticSpec {
                classes: num_classes,
                per_class,
                frames,
                noise_std,
                seed: data_seed,
                ..SyntheticSpec::default()
            };
            let data = generate_synthetic(&spec)?;
            save_sequences(&data, &out)?;
            eprintln!("wrote {} sequences to {}", data.len(), out.display());
            Ok(())
        }
    }
}

fn dispatch(checkpoint: &Path, f: impl FnOnce(Precision) -> CliResult) -> CliResult {
    f(at(checkpoint, checkpoint::read_header(checkpoint))?.precision)
}

/// Loads a checkpoint and applies command-line overrides that keep its
/// parameter layout (solver, substeps and the like).
fn load_trainer<T: Real>(o: &Overrides, path: &Path) -> CliResult<Trainer<T>> {
    let stored = at(path, checkpoint::load::<T>(path))?;
    if o.is_empty() {
        return Ok(stored);
    }
    let config = o.apply(&stored.config)?;
    let mut fresh = Trainer::<T>::new(config)?;
    let layout = |t: &Trainer<T>| -> Vec<(String, Vec<usize>)> {
        t.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    if layout(&fresh) != layout(&stored) {
        return Err(Error::Compatibility("overrides change the parameter layout of the checkpoint".into()).into());
    }
    fresh.params = stored.params;
    fresh.velocity = stored.velocity;
    fresh.epoch = stored.epoch;
    fresh.log = stored.log;
    Ok(fresh)
}

/// Loads, validates and preprocesses a dataset for `config`.
fn load_dataset(path: &Path, config: &Config) -> CliResult<Vec<Sequence>> {
    let data = at(path, load_sequences(path))?;
    if data.is_empty() {
        return Err(Error::Schema {
            id: String::new(),
            msg: format!("{} holds no sequences", path.display()),
        }
        .into());
    }
    check_labels(&data, config)?;
    let data = data
        .iter()
        .map(|s| preprocess(s, config.train.seq_len))
        .collect::<skeleton_ode::Result<Vec<_>>>()?;
    Ok(data)
}

fn check_labels(data: &[Sequence], config: &Config) -> CliResult {
    check_uniform(data, config.model.joints, None)?;
    if let Some(s) = data.iter().find(|s| s.label >= config.model.classes) {
        return Err(Error::Schema {
            id: s.id.clone(),
            msg: format!("label {} but the model has {} classes", s.label, config.model.classes),
        }
        .into());
    }
    Ok(())
}

fn train<T: Real>(o: &Overrides, data: &Path, out: &Path, log: &Path, resume: Option<&Path>) -> CliResult {
    let mut trainer = match resume {
        Some(path) => load_trainer::<T>(o, path)?,
        None => Trainer::<T>::new(o.apply(&Config::default())?)?,
    };
    let sequences = load_dataset(data, &trainer.config)?;
    let (xs, ys) = to_tensors::<T>(&sequences);
    let mut log_file = BufWriter::new(fs::File::create(log)?);
    let mut io_error = None;
    let start = Instant::now();
    let result = trainer.fit(&xs, &ys, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.4}  loss {:.4} (cls {:.4} pred {:.4} feat {:.4})  acc {:.3}",
            e.epoch, e.lr, e.total, e.l_cls, e.l_pred, e.l_feat, e.train_acc
        );
        if let Err(err) = serde_json::to_writer(&mut log_file, e).map_err(io::Error::from).and_then(|_| writeln!(log_file)) {
            io_error.get_or_insert(err);
        }
    });
    log_file.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    result?;
    checkpoint::save(&trainer, out)?;
    let last = trainer.log.last();
    let summary = json!({
        "checkpoint": out,
        "log": log,
        "epochs": trainer.epoch,
        "sequences": xs.len(),
        "parameters": trainer.params.numel(),
        "final_loss": last.map(|e| e.total),
        "final_train_acc": last.map(|e| e.train_acc),
        "seconds": start.elapsed().as_secs_f64(),
    });
    println!("{summary}");
    Ok(())
}

fn stream<T: Real>(o: &Overrides, checkpoint: &Path, data: Option<&Path>, raw: bool) -> CliResult {
    let trainer = load_trainer::<T>(o, checkpoint)?;
    let reader: Box<dyn BufRead> = match data {
        Some(p) => Box::new(io::BufReader::new(at(p, fs::File::open(p).map_err(Error::from))?)),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let model = &trainer.model;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = parse_record(&line, i + 1)?;
        check_uniform(std::slice::from_ref(&seq), trainer.config.model.joints, None)?;
        let norm = if raw { None } else { Some(Normalizer::from_first_frame(&seq)?) };
        let mut state = model.start_stream::<T>();
        for (t, frame) in seq.frames.iter().enumerate() {
            let start = Instant::now();
            let frame = match &norm {
                Some(n) => n.apply_frame(frame),
                None => frame.clone(),
            };
            let flat: Vec<f64> = frame.iter().flatten().copied().collect();
            let x = Tensor::<T>::from_f64([frame.len(), 3], &flat)?;
            let probs = model.stream_step(&trainer.params, &mut state, &x)?;
            let latency_ms = start.elapsed().as_secs_f64() * 1e3;
            let record = json!({
                "id": seq.id,
                "t": t + 1,
                "probs": probs.to_f64_vec(),
                "latency_ms": latency_ms,
            });
            writeln!(out, "{record}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn eval<T: Real>(o: &Overrides, checkpoint: &Path, data: &Path, step: f64, summary: Option<&Path>) -> CliResult {
    let trainer = load_trainer::<T>(o, checkpoint)?;
    let sequences = load_dataset(data, &trainer.config)?;
    let (xs, ys) = to_tensors::<T>(&sequences);
    let curve = evaluate(&trainer.model, &trainer.params, &xs, &ys, step)?;
    print!("{}", curve.to_csv());
    let report = json!({
        "sequences": xs.len(),
        "ratio_step": step,
        "auc": curve.auc,
        "ratios": curve.ratios,
        "accuracies": curve.accuracies,
    });
    eprintln!("{report}");
    if let Some(p) = summary {
        fs::write(p, format!("{report}\n"))?;
    }
    Ok(())
}

fn dump_attention<T: Real>(o: &Overrides, checkpoint: &Path, data: &Path, index: usize, head: usize, raw: bool) -> CliResult {
    let trainer = load_trainer::<T>(o, checkpoint)?;
    let heads = trainer.config.model.temporal_heads;
    if head >= heads {
        return Err(Failure::usage(format!("--head {head} out of range (model has {heads} heads)")));
    }
    let all = at(data, load_sequences(data))?;
    let seq = all
        .get(index)
        .ok_or_else(|| Failure::usage(format!("--index {index} out of range ({} records)", all.len())))?;
    check_uniform(std::slice::from_ref(seq), trainer.config.model.joints, None)?;
    let seq = if raw {
        seq.clone()
    } else {
        preprocess(seq, trainer.config.train.seq_len)?
    };
    let map = attention_map(&trainer.model, &trainer.params, &seq.to_tensor::<T>(), head)?;
    print!("{}", matrix_csv(&map));
    Ok(())
}

fn run_verify(which: &str) -> CliResult {
    let suites: Vec<Suite> = if which == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![which.parse::<Suite>().map_err(|e| Failure::usage(e.to_string()))?]
    };
    let mut failed = 0;
    for suite in suites {
        let start = Instant::now();
        let checks = verify::run(suite)?;
        for c in &checks {
            eprintln!("{c}");
            println!("{}", serde_json::to_string(c)?);
            failed += !c.passed as usize;
        }
        eprintln!("suite {suite}: {} checks in {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("{failed} check(s) failed"),
        });
    }
    Ok(())
}

fn run_ablate<T: Real>(
    config: &Config,
    paths: Option<(PathBuf, PathBuf)>,
    arms: &str,
    seeds: &str,
    step: f64,
    low_ratio: f64,
    out: Option<PathBuf>,
) -> CliResult {
    let arms = arms
        .split(',')
        .map(|a| Arm::parse(a.trim(), config.model.n_steps))
        .collect::<skeleton_ode::Result<Vec<_>>>()?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(format!("--seeds: {e}")))?;
    if seeds.is_empty() || arms.is_empty() {
        return Err(Failure::usage("need at least one arm and one seed"));
    }
    let (train, test) = match paths {
        Some((a, b)) => (load_dataset(&a, config)?, load_dataset(&b, config)?),
        None => {
            let (a, b) = synthetic_split()?;
            let prep = |d: Vec<Sequence>| {
                d.iter()
                    .map(|s| preprocess(s, config.train.seq_len))
                    .collect::<skeleton_ode::Result<Vec<_>>>()
            };
            (prep(a)?, prep(b)?)
        }
    };
    let (train_x, train_y) = to_tensors::<T>(&train);
    let (test_x, test_y) = to_tensors::<T>(&test);
    let split = Split {
        train_x: &train_x,
        train_y: &train_y,
        test_x: &test_x,
        test_y: &test_y,
    };
    let report = ablate(config, &arms, &seeds, &split, step, low_ratio, |arm, seed, curve| {
        eprintln!("{arm} seed {seed}: auc {:.4}", curve.auc);
    })?;
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    let mut m = Map::new();
    for a in &report.arms {
        m.insert(a.arm.name.clone(), json!(a.median_auc));
    }
    eprintln!("median auc: {}", Value::Object(m));
    Ok(())
}

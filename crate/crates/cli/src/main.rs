//! Command-line front end: data generation, training, evaluation, inference
//! and the gradient check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use psan::checkpoint;
use psan::data::dataset::{CorpusSpec, Dataset};
use psan::data::pgm;
use psan::data::preprocess::preprocess;
use psan::data::transform::Transform;
use psan::eval::evaluate;
use psan::gradcheck::suite;
use psan::train::Trainer;
use psan::{Config, Error, Precision, Real, Tensor};

#[derive(Parser, Debug)]
#[command(name = "psan", version, about = "Scene-text recognition with parallel scale-wise attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base channel count C.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    rus_per_rs: Option<usize>,
    #[arg(long)]
    vab_convs: Option<usize>,
    #[arg(long)]
    num_scales: Option<usize>,
    #[arg(long)]
    max_length: Option<usize>,
    /// Replace every VAB with a plain 3×3 conv branch.
    #[arg(long)]
    no_vab: bool,
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> psan::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(seed => seed, channels => base_channels, rus_per_rs => rus_per_rs, vab_convs => vab_convs,
             num_scales => num_scales, max_length => max_length, num_samples => num_samples,
             batch_size => batch_size, epochs => epochs);
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.no_vab {
            cfg.vab_enabled = false;
        }
        if let Ok(p) = std::env::var("PSAN_PRECISION") {
            cfg.precision = p.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether anything beyond the seed would change the architecture.
    fn touches_model(&self) -> bool {
        self.config.is_some()
            || self.channels.is_some()
            || self.rus_per_rs.is_some()
            || self.vab_convs.is_some()
            || self.num_scales.is_some()
            || self.max_length.is_some()
            || self.no_vab
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset manifest; defaults to the checkpoint's training corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate on N freshly generated held-out samples instead.
    #[arg(long, conflicts_with = "data")]
    held_out: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset manifest (and optionally PGM images).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Generate N held-out samples instead of the training corpus.
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        pgm: bool,
    },
    /// Train on the synthetic corpus, logging metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Word accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "none")]
        transform: Transform,
        #[command(flatten)]
        data: DataArgs,
        /// Include per-sample predictions in the report.
        #[arg(long)]
        predictions: bool,
    },
    /// Transcribe a PGM image or every record of a manifest.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Accuracy under each robustness transform.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Run<T = ()> = Result<T, Failure>;

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn precision_of(args: &ConfigArgs) -> psan::Result<Precision> {
    match std::env::var("PSAN_PRECISION") {
        Ok(p) => p.parse(),
        Err(_) => Ok(args.config.as_deref().map(Config::load).transpose()?.map(|c| c.precision).unwrap_or_default()),
    }
}

fn gen_data(cfg: &Config, out: &Path, held_out: Option<usize>, with_pgm: bool) -> Run {
    let data = match held_out {
        Some(n) => Dataset::held_out(cfg, n)?,
        None => Dataset::training(cfg)?,
    };
    fs::create_dir_all(out)?;
    let manifest = out.join("manifest.tsv");
    data.write_manifest(&manifest)?;
    if with_pgm {
        data.export_pgm(out)?;
    }
    emit(json!({"manifest": manifest, "records": data.len(), "pgm": with_pgm}));
    Ok(())
}

fn train<T: Real>(cfg: &Config, out: &Path) -> Run {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let data = Dataset::training(cfg)?;
    let ckpt = out.join("checkpoint.psan");
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut trainer = Trainer::<T>::new(cfg)?;
    let metrics = trainer.fit(
        &data,
        &mut |m| {
            serde_json::to_writer(&mut log, m)?;
            log.write_all(b"\n")?;
            Ok(())
        },
        &mut |t, _| checkpoint::save(&ckpt, t.cfg(), &t.store, t.step),
    )?;
    log.flush()?;
    checkpoint::save(&ckpt, cfg, &trainer.store, trainer.step)?;
    let accuracy = evaluate(&trainer.model, &trainer.store, &data, Transform::None, cfg.batch_size)?.accuracy;
    emit(json!({
        "steps": trainer.step,
        "final_loss": metrics.last().map(|m| m.loss),
        "train_accuracy": accuracy,
        "checkpoint": ckpt,
    }));
    Ok(())
}

fn load<T: Real>(path: &Path, args: &ConfigArgs) -> Run<(psan::Psan, psan::param::ParamStore<T>)> {
    let (model, store, _) = checkpoint::load::<T>(path)?;
    if args.touches_model() {
        let want = args.resolve()?;
        let same = want.encoder() == model.cfg.encoder()
            && (want.max_length, want.hidden_size, want.embedding_dim, want.input_height, want.input_width)
                == (
                    model.cfg.max_length,
                    model.cfg.hidden_size,
                    model.cfg.embedding_dim,
                    model.cfg.input_height,
                    model.cfg.input_width,
                );
        if !same {
            return Err(Error::Config("requested architecture does not match the checkpoint".into()).into());
        }
    }
    Ok((model, store))
}

fn dataset(cfg: &Config, args: &DataArgs) -> psan::Result<Dataset> {
    match (&args.data, args.held_out) {
        (Some(p), _) => Dataset::read_manifest(p, CorpusSpec::from_config(cfg).render),
        (None, Some(n)) => Dataset::held_out(cfg, n),
        (None, None) => Dataset::training(cfg),
    }
}

fn eval<T: Real>(args: &ConfigArgs, ckpt: &Path, transform: Transform, data: &DataArgs, predictions: bool) -> Run {
    let (model, store) = load::<T>(ckpt, args)?;
    let data = dataset(&model.cfg, data)?;
    let mut report = evaluate(&model, &store, &data, transform, model.cfg.batch_size)?;
    if !predictions {
        report.predictions.clear();
    }
    emit(serde_json::to_value(&report).map_err(Error::from)?);
    Ok(())
}

fn infer<T: Real>(args: &ConfigArgs, ckpt: &Path, image: &Path) -> Run {
    let (model, store) = load::<T>(ckpt, args)?;
    let bytes = fs::read(image)?;
    if bytes.starts_with(b"P5") {
        let x = preprocess(&pgm::decode(&bytes)?);
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let batch = Tensor::new(&shape, x.into_data())?.cast::<T>();
        println!("{}", model.predict(&store, &batch)?[0]);
    } else {
        let data = Dataset::read_manifest(image, CorpusSpec::from_config(&model.cfg).render)?;
        let report = evaluate(&model, &store, &data, Transform::None, model.cfg.batch_size)?;
        for p in &report.predictions {
            println!("{p}");
        }
    }
    Ok(())
}

fn robustness<T: Real>(args: &ConfigArgs, ckpt: &Path, data: &DataArgs) -> Run {
    let (model, store) = load::<T>(ckpt, args)?;
    let data = dataset(&model.cfg, data)?;
    let mut base = None;
    for t in Transform::ALL {
        let r = evaluate(&model, &store, &data, t, model.cfg.batch_size)?;
        let base = *base.get_or_insert(r.accuracy);
        emit(json!({"transform": t.name(), "accuracy": r.accuracy, "diff": r.accuracy - base, "samples": r.samples}));
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Run {
    let reports = suite::run(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        emit(json!({
            "op": r.op,
            "max_rel_err": r.max_rel_err,
            "tolerance": r.tolerance,
            "checked": r.checked,
            "skipped": r.skipped,
            "passed": r.passed(),
        }));
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Run {
    match cli.command {
        Command::GenData { cfg, out, held_out, pgm } => gen_data(&cfg.resolve()?, &out, held_out, pgm),
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            with_precision!(cfg.precision, train(&cfg, &out))
        }
        Command::Eval { cfg, checkpoint, transform, data, predictions } => {
            with_precision!(precision_of(&cfg)?, eval(&cfg, &checkpoint, transform, &data, predictions))
        }
        Command::Infer { cfg, checkpoint, image } => {
            with_precision!(precision_of(&cfg)?, infer(&cfg, &checkpoint, &image))
        }
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Robustness { cfg, checkpoint, data } => {
            with_precision!(precision_of(&cfg)?, robustness(&cfg, &checkpoint, &data))
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return fail("usage", first, 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => fail(e.kind(), e.to_string(), 1),
        Err(Failure::Check(m)) => fail("check_failed", m, 1),
    }
}

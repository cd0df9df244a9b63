//! The `mmunet` command-line tool.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 usage, 3 I/O,
//! 4 parse, 5 file format, 6 configuration, 7 shape, 8 data.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{self, PhantomSpec};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::models::{count_params, Model, ModelSpec, Variant};
use crate::training::{self, TrainConfig};

/// Effective settings file written next to every checkpoint.
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmun";
pub const LOG_FILE: &str = "train.log";

/// Flat `key=value` run configuration covering the model, the optimizer
/// and the phantom generator. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub base_width: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub ltm_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_start: usize,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub phantom_count: usize,
    pub noise_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variant: Variant::MmUnet,
            base_width: 64,
            input_size: t.input_size,
            num_classes: data::NUM_CLASSES,
            ltm_ratio: 1.0,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_drop_start: t.lr_drop_start,
            lr_drop_every: t.lr_drop_every,
            lr_drop_factor: t.lr_drop_factor,
            seed: t.seed,
            phantom_count: 500,
            noise_sigma: 0.05,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 16] = [
        "variant",
        "base_width",
        "input_size",
        "num_classes",
        "ltm_ratio",
        "epochs",
        "batch_size",
        "base_lr",
        "momentum",
        "weight_decay",
        "lr_drop_start",
        "lr_drop_every",
        "lr_drop_factor",
        "seed",
        "phantom_count",
        "noise_sigma",
    ];

    /// Parses `text` on top of the defaults, then checks every invariant.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {line}: expected key=value, got {body:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "variant" => c.variant = v.parse().map_err(|e| Error::Parse(format!("line {line}: {e}")))?,
                "base_width" => c.base_width = parse_value(key, v, line)?,
                "input_size" => c.input_size = parse_value(key, v, line)?,
                "num_classes" => c.num_classes = parse_value(key, v, line)?,
                "ltm_ratio" => c.ltm_ratio = parse_value(key, v, line)?,
                "epochs" => c.epochs = parse_value(key, v, line)?,
                "batch_size" => c.batch_size = parse_value(key, v, line)?,
                "base_lr" => c.base_lr = parse_value(key, v, line)?,
                "momentum" => c.momentum = parse_value(key, v, line)?,
                "weight_decay" => c.weight_decay = parse_value(key, v, line)?,
                "lr_drop_start" => c.lr_drop_start = parse_value(key, v, line)?,
                "lr_drop_every" => c.lr_drop_every = parse_value(key, v, line)?,
                "lr_drop_factor" => c.lr_drop_factor = parse_value(key, v, line)?,
                "seed" => c.seed = parse_value(key, v, line)?,
                "phantom_count" => c.phantom_count = parse_value(key, v, line)?,
                "noise_sigma" => c.noise_sigma = parse_value(key, v, line)?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {line}: unknown key {other:?} (known: {})",
                        Self::KEYS.join(", ")
                    )))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.train_config().validate()?;
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::with_ratio(self.variant, self.base_width, self.input_size, self.num_classes, self.ltm_ratio)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_start: self.lr_drop_start,
            lr_drop_every: self.lr_drop_every,
            lr_drop_factor: self.lr_drop_factor,
            seed: self.seed,
            input_size: self.input_size,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            count: self.phantom_count,
            size: self.input_size,
            seed: self.seed,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "base_width={}", self.base_width);
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "ltm_ratio={}", self.ltm_ratio);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "base_lr={}", self.base_lr);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "lr_drop_start={}", self.lr_drop_start);
        let _ = writeln!(s, "lr_drop_every={}", self.lr_drop_every);
        let _ = writeln!(s, "lr_drop_factor={}", self.lr_drop_factor);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "phantom_count={}", self.phantom_count);
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        s
    }
}

#[derive(Debug, Parser)]
#[command(name = "mmunet", version, about = "Train and evaluate UNet / MM-UNet segmentation models on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom-lens dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
    },
    /// Train on a dataset directory (6:2:2 split) and keep the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every sample of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Model settings; defaults to config.txt beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment one PPM image into a PGM mask of class ids.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the exact parameter count of a model variant.
    CountParams {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value_t = 64)]
        base_width: usize,
        #[arg(long, default_value_t = 256)]
        input_size: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        /// Also list every module's count.
        #[arg(long)]
        breakdown: bool,
    },
    /// Finite-difference gradient checks for every operator.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        op: Option<String>,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config_for(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no model config at {}; pass --config",
            path.display()
        )));
    }
    RunConfig::load(&path)
}

fn check_sizes(samples: &[data::Sample], size: usize) -> Result<()> {
    match samples.iter().find(|s| s.side() != size) {
        Some(s) => Err(Error::Data(format!(
            "dataset holds {0}×{0} images, model expects {size}×{size}",
            s.side()
        ))),
        None => Ok(()),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenData {
            out: dir,
            count,
            size,
            seed,
            noise_sigma,
        } => {
            if count == 0 || size == 0 || !(noise_sigma >= 0.0) {
                return Err(Error::Usage("count and size must be positive, noise_sigma non-negative".into()));
            }
            let spec = PhantomSpec {
                count,
                size,
                seed,
                noise_sigma,
            };
            let samples = data::gen_phantom(&spec);
            data::write_dataset(&dir, &samples, Some(&spec))?;
            writeln!(out, "wrote {count} samples ({size}×{size}) to {}", dir.display())?;
        }
        Command::Train {
            config,
            data: data_dir,
            out: out_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (samples, _) = data::read_dataset(&data_dir)?;
            check_sizes(&samples, cfg.input_size)?;
            let (train, val, test) = data::split(samples, cfg.seed)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
            write!(out, "{}", cfg.to_text())?;
            writeln!(out, "split train={} val={} test={}", train.len(), val.len(), test.len())?;

            let mut model = Model::<f32>::build(cfg.model_spec()?, cfg.seed)?;
            let mut log = fs::File::create(out_dir.join(LOG_FILE))?;
            let mut io_err = None;
            let outcome = training::train(&mut model, &train, &val, &cfg.train_config(), |row| {
                let res = writeln!(log, "{row}").and_then(|_| writeln!(out, "{row}"));
                if let Err(e) = res {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            data::save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &outcome.best)?;
            writeln!(out, "best_epoch={} {}", outcome.best_epoch, outcome.best_metrics)?;
            if !test.is_empty() {
                let best = Model::from_params(cfg.model_spec()?, outcome.best)?;
                let m = training::evaluate(&best, &test, cfg.batch_size)?;
                writeln!(out, "test {m}")?;
            }
        }
        Command::Eval {
            checkpoint,
            data: data_dir,
            config,
        } => {
            let cfg = config_for(&checkpoint, config.as_deref())?;
            let model = data::load_model::<f32>(&checkpoint, cfg.model_spec()?)?;
            let (samples, _) = data::read_dataset(&data_dir)?;
            check_sizes(&samples, cfg.input_size)?;
            let m = training::evaluate(&model, &samples, cfg.batch_size)?;
            writeln!(out, "{m}")?;
        }
        Command::Predict {
            checkpoint,
            image,
            out: mask_path,
            config,
        } => {
            let cfg = config_for(&checkpoint, config.as_deref())?;
            let model = data::load_model::<f32>(&checkpoint, cfg.model_spec()?)?;
            let img = data::read_image(&image)?;
            let s = img.shape().to_vec();
            let batch = img.reshape(&[1, s[0], s[1], s[2]])?;
            let ids = training::argmax_classes(&model.predict(&batch)?);
            data::write_mask(&mask_path, &data::Mask::new(s[1], ids)?)?;
            writeln!(out, "wrote {}", mask_path.display())?;
        }
        Command::CountParams {
            variant,
            base_width,
            input_size,
            num_classes,
            breakdown,
        } => {
            let report = count_params(&ModelSpec::new(variant, base_width, input_size, num_classes)?)?;
            if breakdown {
                for (name, n) in &report.breakdown {
                    writeln!(out, "{name} {n}")?;
                }
            }
            writeln!(out, "total={} overhead={}", report.total, report.mmlp_overhead)?;
        }
        Command::GradCheck { seed, op } => {
            let entries = gradcheck::run_suite(seed, op.as_deref())?;
            let mut ok = true;
            for e in &entries {
                let verdict = if e.passes() { "PASS" } else { "FAIL" };
                ok &= e.passes();
                writeln!(
                    out,
                    "{:<20} max_rel_err={:.3e} threshold={:e} {verdict}",
                    e.name,
                    e.max_rel_err,
                    e.tolerance()
                )?;
            }
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out`. Returns the process exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Error::Usage(String::new()).exit_code() } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "mmunet: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data error (missing or malformed files, bad inputs).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench, length_scaling, sweep_lambda, BenchOptions, System};
use crate::config::{ExperimentConfig, ThresholdMode, TrainMode};
use crate::data::{read_dataset, write_dataset, Dataset, Split, Synthesizer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, infer, ArSearch, EvalOptions};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{Architecture, Model};
use crate::train::{architecture_for, train};

#[derive(Debug, Parser)]
#[command(
    name = "paraformer",
    version,
    about = "Single-step non-autoregressive recognizer with an autoregressive baseline, on synthetic pseudo-speech"
)]
pub struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment file with [model], [synth] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.glm.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides),
            None => ExperimentConfig::from_toml_str("", &self.overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/dev/test corpus.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one system and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// paraformer, vanilla_nar or ar. Overrides train.mode.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Write one JSON object per step and per epoch here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode a split and report error rates.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report destination.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// dynamic or fixed_1.0; defaults to the checkpoint's training setting.
        #[arg(long)]
        threshold: Option<ThresholdArg>,
        /// Beam width for autoregressive checkpoints (1 to 4).
        #[arg(long)]
        beam: Option<usize>,
        /// Write each utterance's firing plan as a JSON line.
        #[arg(long)]
        dump_firings: Option<PathBuf>,
    },
    /// Time the systems at batch size 1.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ar_ckpt: Option<PathBuf>,
        #[arg(long)]
        nar_ckpt: Option<PathBuf>,
        #[arg(long)]
        paraformer_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        /// JSON report destination.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// Also time the decoders at these output lengths (needs the AR and
        /// paraformer checkpoints), e.g. `5,10,20,40`.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Train and score a Paraformer per sampling factor.
    SweepLambda {
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Existing corpus; generated from [synth] when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ThresholdArg {
    Dynamic,
    #[value(name = "fixed_1.0")]
    Fixed,
}

impl From<ThresholdArg> for ThresholdMode {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::Dynamic => ThresholdMode::Dynamic,
            ThresholdArg::Fixed => ThresholdMode::Fixed,
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` and runs the command, printing errors to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn check_data_dims(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if let Some(fd) = ds.feat_dim() {
        if fd != cfg.model.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim is {} but the data has {fd} features per frame",
                cfg.model.feat_dim
            )));
        }
    }
    if let Some(bad) = ds
        .utterances
        .iter()
        .flat_map(|u| u.tokens.iter())
        .find(|&&t| t >= cfg.model.vocab_size)
    {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the data contains token {bad}",
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Option<CheckpointMeta>)> {
    checkpoint::load(path)
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::SynthData { config, out, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let ds = Dataset::generate(&cfg.synth)?;
            write_dataset(&ds, &out)?;
            println!(
                "wrote {} utterances to {}",
                ds.utterances.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out_ckpt,
            mode,
            metrics,
        } => {
            let mut cfg = config.load()?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            cfg.validate()?;
            let ds = read_dataset(&data)?;
            check_data_dims(&cfg, &ds)?;
            let train_set = ds.split_owned(Split::Train);
            let dev = ds.split_owned(Split::Dev);
            let mut model = Model::new(cfg.model.clone(), architecture_for(cfg.train.mode))?;
            let mut sink = match &metrics {
                Some(p) => Some(BufWriter::new(
                    fs::File::create(p).map_err(|e| Error::file(p, e))?,
                )),
                None => None,
            };
            let summary = train(
                &mut model,
                &train_set,
                &dev,
                &cfg.train,
                sink.as_mut().map(|w| w as &mut dyn Write),
            )?;
            if let Some(w) = sink.as_mut() {
                w.flush()?;
            }
            let meta = CheckpointMeta {
                mode: cfg.train.mode,
                threshold_mode: cfg.train.threshold_mode,
            };
            checkpoint::save(&model, Some(meta), &out_ckpt)?;
            println!(
                "trained {} for {} steps in {:.1}s (skipped {}), dev cer {}",
                cfg.train.mode.name(),
                summary.steps,
                summary.seconds,
                summary.skipped,
                summary
                    .final_dev_cer
                    .map_or("n/a".to_string(), |c| format!("{c:.4}"))
            );
        }
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            threshold,
            beam,
            dump_firings,
        } => {
            let (model, meta) = load_model(&ckpt)?;
            let ds = read_dataset(&data)?;
            let utts = ds.split_owned(split.into());
            let threshold_mode = threshold
                .map(ThresholdMode::from)
                .or(meta.map(|m| m.threshold_mode))
                .unwrap_or(ThresholdMode::Dynamic);
            let opts = EvalOptions {
                threshold_mode,
                ar_search: beam.map_or(ArSearch::Greedy, ArSearch::Beam),
                threads,
            };
            let r = evaluate(&model, &utts, &opts)?;
            write_text(&report, &serde_json::to_string_pretty(&r)?)?;
            if let Some(path) = dump_firings {
                if model.architecture() != Architecture::Nar {
                    return Err(Error::Config(
                        "--dump-firings needs a non-autoregressive checkpoint".into(),
                    ));
                }
                let mut out = String::new();
                for u in &utts {
                    let (_, trace) = infer(&model, &u.feats, &opts)?;
                    let plan = trace.plan.map_or("null".to_string(), |p| p.to_json());
                    out.push_str(&format!(
                        "{{\"id\":{},\"alpha_sum\":{:.16e},\"plan\":{plan}}}\n",
                        serde_json::to_string(&u.id)?,
                        trace.alpha_sum
                    ));
                }
                write_text(&path, &out)?;
            }
            println!(
                "cer {:.4} (sub {:.4} ins {:.4} del {:.4}) length accuracy {:.4} rtf {:.5} over {} utterances",
                r.cer, r.sub, r.ins, r.del, r.length_accuracy, r.rtf, r.n_utterances
            );
        }
        Command::Bench {
            data,
            ar_ckpt,
            nar_ckpt,
            paraformer_ckpt,
            warmup,
            iters,
            report,
            split,
            lengths,
        } => {
            if iters == 0 {
                return Err(Error::Config("--iters must be at least 1".into()));
            }
            let load0 = Instant::now();
            let ds = read_dataset(&data)?;
            let utts = ds.split_owned(split.into());
            let mut models = Vec::new();
            for (system, path) in [
                (System::Ar, &ar_ckpt),
                (System::VanillaNar, &nar_ckpt),
                (System::Paraformer, &paraformer_ckpt),
            ] {
                if let Some(p) = path {
                    models.push((system, load_model(p)?.0));
                }
            }
            if models.is_empty() {
                return Err(Error::Config("bench needs at least one checkpoint".into()));
            }
            let load_seconds = load0.elapsed().as_secs_f64();
            let systems: Vec<(System, &Model)> = models.iter().map(|(s, m)| (*s, m)).collect();
            let opts = BenchOptions {
                warmup,
                iters,
                eval: EvalOptions {
                    threads,
                    ..EvalOptions::default()
                },
                load_seconds,
            };
            let r = bench(&systems, &utts, &opts)?;
            let mut json = serde_json::to_value(&r)?;
            print!("{}", r.to_table());
            if !lengths.is_empty() {
                let find = |s: System| models.iter().find(|(x, _)| *x == s).map(|(_, m)| m);
                let (Some(ar), Some(nar)) = (find(System::Ar), find(System::Paraformer)) else {
                    return Err(Error::Config(
                        "--lengths needs --ar-ckpt and --paraformer-ckpt".into(),
                    ));
                };
                let synth_cfg = ds.config.clone().ok_or_else(|| {
                    Error::Input("dataset header has no synth config to draw inputs from".into())
                })?;
                let synth = Synthesizer::new(&synth_cfg)?;
                let scaling = length_scaling(ar, nar, &synth, &lengths, 8, iters, 1)?;
                print!("{}", scaling.to_table());
                json["length_scaling"] = serde_json::to_value(&scaling)?;
            }
            write_text(&report, &serde_json::to_string_pretty(&json)?)?;
        }
        Command::SweepLambda {
            lambdas,
            config,
            data,
            report,
        } => {
            let cfg = config.load()?;
            let ds = match data {
                Some(p) => read_dataset(&p)?,
                None => Dataset::generate(&cfg.synth)?,
            };
            check_data_dims(&cfg, &ds)?;
            let r = sweep_lambda(&lambdas, &cfg, &ds, |row, _| {
                eprintln!("lambda {} cer {:.4}", row.lambda, row.cer);
            })?;
            print!("{}", r.to_table());
            if let Some(p) = report {
                write_text(&p, &serde_json::to_string_pretty(&r)?)?;
            }
        }
    }
    Ok(())
}

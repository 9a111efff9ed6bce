//! Latency benchmark and the sampling-factor sweep.
//!
//! Timing covers encode plus decode for one utterance at a time. Loading
//! data and checkpoints happens before the measured window and is reported
//! as a separate phase.

use std::fmt::Write as _;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cif::{cif_integrate, scale_alpha};
use crate::config::{ExperimentConfig, TrainMode};
use crate::data::{Dataset, Split, Synthesizer, Utterance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, infer, EvalOptions, EvalReport, FRAME_SHIFT_SECONDS};
use crate::model::{Architecture, Model};
use crate::train::{architecture_for, train};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Ar,
    VanillaNar,
    Paraformer,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Ar => "ar",
            System::VanillaNar => "vanilla_nar",
            System::Paraformer => "paraformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub system: System,
    pub rtf: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub cer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub build_profile: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub warmup: usize,
    pub iters: usize,
}

/// Wall time spent in each phase, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub load: f64,
    pub warmup: f64,
    pub measure: f64,
    /// Sum of the individually timed decodes; never exceeds `measure`.
    pub timed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: u32,
    pub systems: Vec<BenchRow>,
    /// `ar_rtf / paraformer_rtf`, when both were measured.
    pub speedup: Option<f64>,
    pub environment: Environment,
    pub phases: PhaseTimes,
}

fn build_profile() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Value at quantile `q` of sorted data, nearest rank.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub struct BenchOptions {
    pub warmup: usize,
    pub iters: usize,
    pub eval: EvalOptions,
    /// Seconds spent loading inputs, recorded in the report.
    pub load_seconds: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 1,
            iters: 3,
            eval: EvalOptions::default(),
            load_seconds: 0.0,
        }
    }
}

/// Benchmarks each `(system, model)` pair on `utts` at batch size 1.
pub fn bench(
    systems: &[(System, &Model)],
    utts: &[Utterance],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.iters == 0 {
        return Err(Error::Config("bench needs at least one measured iteration".into()));
    }
    if utts.is_empty() {
        return Err(Error::Input("bench set is empty".into()));
    }
    for (system, model) in systems {
        let want = match system {
            System::Ar => Architecture::Ar,
            _ => Architecture::Nar,
        };
        if model.architecture() != want {
            return Err(Error::Config(format!(
                "{} checkpoint has a {:?} architecture",
                system.name(),
                model.architecture()
            )));
        }
        let fd = utts[0].feats.feat_dim();
        if model.config().feat_dim != fd {
            return Err(Error::Config(format!(
                "{} checkpoint expects feat_dim {}, data has {fd}",
                system.name(),
                model.config().feat_dim
            )));
        }
    }
    let audio: f64 = utts.iter().map(|u| u.num_frames() as f64).sum::<f64>() * FRAME_SHIFT_SECONDS;
    let mut phases = PhaseTimes {
        load: opts.load_seconds,
        ..PhaseTimes::default()
    };
    let mut rows = Vec::new();
    for &(system, model) in systems {
        let w0 = Instant::now();
        for _ in 0..opts.warmup {
            for u in utts {
                infer(model, &u.feats, &opts.eval)?;
            }
        }
        phases.warmup += w0.elapsed().as_secs_f64();

        let m0 = Instant::now();
        let mut per_utt = vec![0.0; utts.len()];
        for _ in 0..opts.iters {
            for (i, u) in utts.iter().enumerate() {
                let t = Instant::now();
                std::hint::black_box(infer(model, &u.feats, &opts.eval)?);
                per_utt[i] += t.elapsed().as_secs_f64();
            }
        }
        phases.measure += m0.elapsed().as_secs_f64();
        let total: f64 = per_utt.iter().sum();
        phases.timed += total;
        let mut lat_ms: Vec<f64> = per_utt
            .iter()
            .map(|s| 1000.0 * s / opts.iters as f64)
            .collect();
        lat_ms.sort_by(f64::total_cmp);
        let cer = evaluate(model, utts, &opts.eval)?.cer;
        rows.push(BenchRow {
            system,
            rtf: total / (audio * opts.iters as f64),
            mean_latency_ms: lat_ms.iter().sum::<f64>() / lat_ms.len() as f64,
            median_latency_ms: median(&lat_ms),
            p95_latency_ms: quantile(&lat_ms, 0.95),
            cer,
        });
    }
    let rtf_of = |s: System| rows.iter().find(|r| r.system == s).map(|r| r.rtf);
    let speedup = match (rtf_of(System::Ar), rtf_of(System::Paraformer)) {
        (Some(a), Some(p)) if p > 0.0 => Some(a / p),
        _ => None,
    };
    Ok(BenchReport {
        schema: SCHEMA,
        systems: rows,
        speedup,
        environment: Environment {
            threads: opts.eval.threads,
            build_profile: build_profile().into(),
            timestamp: now_unix(),
            warmup: opts.warmup,
            iters: opts.iters,
        },
        phases,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with the same numbers as the JSON.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>8}",
            "system", "rtf", "mean_ms", "median_ms", "p95_ms", "cer"
        );
        for r in &self.systems {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>12} {:>12} {:>12} {:>8}",
                r.system.name(),
                r.rtf,
                r.mean_latency_ms,
                r.median_latency_ms,
                r.p95_latency_ms,
                r.cer
            );
        }
        if let Some(x) = self.speedup {
            let _ = writeln!(s, "speedup (ar_rtf / paraformer_rtf): {x}");
        }
        s
    }
}

/// Decoder cost at one output length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthPoint {
    pub tokens: usize,
    /// Mean decoder-only time per utterance (everything after the encoder).
    pub ar_decoder_ms: f64,
    pub nar_decoder_ms: f64,
    /// Encode plus decode over audio duration.
    pub ar_rtf: f64,
    pub nar_rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthScaling {
    pub schema: u32,
    pub points: Vec<LengthPoint>,
    /// Least-squares slope of `ln(time)` against `ln(length)`.
    pub ar_loglog_slope: f64,
    pub nar_loglog_slope: f64,
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Times the two decoders at fixed output lengths. The AR decoder runs
/// exactly `n` greedy steps; the NAR path runs the predictor, the
/// integrate-and-fire step with its weights rescaled to `n` fires, and one
/// parallel decoder pass. Inputs are synthesized with `n` tokens each, so
/// the encoder memory grows with the length too.
pub fn length_scaling(
    ar: &Model,
    nar: &Model,
    synth: &Synthesizer,
    lengths: &[usize],
    utts_per_length: usize,
    iters: usize,
    seed: u64,
) -> Result<LengthScaling> {
    if iters == 0 || utts_per_length == 0 || lengths.len() < 2 {
        return Err(Error::Config(
            "length scaling needs iterations, utterances and at least two lengths".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for &n in lengths {
        let utts = synth.gen_fixed_length(n, utts_per_length, &mut rng)?;
        let audio: f64 =
            utts.iter().map(|u| u.num_frames() as f64).sum::<f64>() * FRAME_SHIFT_SECONDS;
        let (mut ar_dec, mut nar_dec, mut ar_all, mut nar_all) = (0.0, 0.0, 0.0, 0.0);
        for it in 0..=iters {
            // Iteration 0 warms caches and is discarded.
            let keep = it > 0;
            for u in &utts {
                let t0 = Instant::now();
                let h = ar.encode(&u.feats)?;
                let t1 = Instant::now();
                std::hint::black_box(ar.ar_decode_fixed_length(&h, n)?);
                let t2 = Instant::now();
                if keep {
                    ar_dec += (t2 - t1).as_secs_f64();
                    ar_all += (t2 - t0).as_secs_f64();
                }

                let t0 = Instant::now();
                let h = nar.encode(&u.feats)?;
                let t1 = Instant::now();
                let alpha = nar.predict_alpha(&h)?;
                let (emb, _) = cif_integrate(&h, &scale_alpha(&alpha, n)?, 1.0)?;
                std::hint::black_box(nar.decode_parallel(&emb, &h)?);
                let t2 = Instant::now();
                if keep {
                    nar_dec += (t2 - t1).as_secs_f64();
                    nar_all += (t2 - t0).as_secs_f64();
                }
            }
        }
        let k = (iters * utts.len()) as f64;
        points.push(LengthPoint {
            tokens: n,
            ar_decoder_ms: 1000.0 * ar_dec / k,
            nar_decoder_ms: 1000.0 * nar_dec / k,
            ar_rtf: ar_all / (audio * iters as f64),
            nar_rtf: nar_all / (audio * iters as f64),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.tokens as f64).collect();
    let ar_ys: Vec<f64> = points.iter().map(|p| p.ar_decoder_ms).collect();
    let nar_ys: Vec<f64> = points.iter().map(|p| p.nar_decoder_ms).collect();
    Ok(LengthScaling {
        schema: SCHEMA,
        ar_loglog_slope: loglog_slope(&xs, &ar_ys),
        nar_loglog_slope: loglog_slope(&xs, &nar_ys),
        points,
    })
}

impl LengthScaling {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>14} {:>14} {:>12} {:>12}",
            "tokens", "ar_decoder_ms", "nar_decoder_ms", "ar_rtf", "nar_rtf"
        );
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:>6} {:>14} {:>14} {:>12} {:>12}",
                p.tokens, p.ar_decoder_ms, p.nar_decoder_ms, p.ar_rtf, p.nar_rtf
            );
        }
        let _ = writeln!(
            s,
            "log-log slope: ar {} nar {}",
            self.ar_loglog_slope, self.nar_loglog_slope
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub cer: f64,
    pub sub: f64,
    pub ins: f64,
    pub del: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: u32,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>10} {:>10} {:>10} {:>10}", "lambda", "cer", "sub", "ins", "del");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                r.lambda, r.cer, r.sub, r.ins, r.del
            );
        }
        s
    }

    pub fn cer_at(&self, lambda: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.lambda == lambda).map(|r| r.cer)
    }
}

/// Trains one Paraformer per `lambda` from the same initial weights and
/// seed, and scores each on the test split.
pub fn sweep_lambda(
    lambdas: &[f64],
    base: &ExperimentConfig,
    data: &Dataset,
    mut on_row: impl FnMut(&SweepRow, &EvalReport),
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let train_set = data.split_owned(Split::Train);
    let dev = data.split_owned(Split::Dev);
    let test = data.split_owned(Split::Test);
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.train.mode = TrainMode::Paraformer;
        cfg.train.glm.lambda = lambda;
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone(), architecture_for(TrainMode::Paraformer))?;
        let summary = train(&mut model, &train_set, &dev, &cfg.train, None)?;
        let opts = EvalOptions {
            threshold_mode: cfg.train.threshold_mode,
            ..EvalOptions::default()
        };
        let report = evaluate(&model, &test, &opts)?;
        let row = SweepRow {
            lambda,
            cer: report.cer,
            sub: report.sub,
            ins: report.ins,
            del: report.del,
            steps: summary.steps,
            seconds: summary.seconds,
        };
        on_row(&row, &report);
        rows.push(row);
    }
    Ok(SweepReport {
        schema: SCHEMA,
        rows,
    })
}

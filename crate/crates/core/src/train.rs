//! Training steps for the three systems and the epoch loop around them.
//!
//! Each utterance gets its own tape; a batch step averages the per-utterance
//! losses and gradients. The optimizer is Adam on the inverse-square-root
//! schedule in [`LrSchedule`](crate::config::LrSchedule).

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::config::{TrainConfig, TrainMode};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::glm::{hamming_distance, select_positions, GlanceSelection};
use crate::losses::{generate_negative_candidates, total_loss, LossBundle};
use crate::metrics::edit_distance;
use crate::model::{Architecture, Dropout, Model};
use crate::params::{Grads, ParamStore};
use crate::seq::{Logits, BOS, EOS};
use crate::tensor::Matrix;

/// The architecture a training mode needs.
pub fn architecture_for(mode: TrainMode) -> Architecture {
    match mode {
        TrainMode::Ar => Architecture::Ar,
        TrainMode::Paraformer | TrainMode::VanillaNar => Architecture::Nar,
    }
}

/// Optional instrumentation for a training step.
#[derive(Debug, Default, Clone)]
pub struct StepProbe {
    /// Added to every first-pass logit before the argmax. A row-constant
    /// shift leaves the argmax unchanged, so gradients must not move.
    pub first_pass_offset: f64,
    /// Set if any first-pass output was recorded with gradient tracking.
    pub first_pass_tracked: bool,
    /// `(fires, target length)` for every utterance that was integrated.
    pub fires: Vec<(usize, usize)>,
    /// Glance selections in utterance order.
    pub selections: Vec<GlanceSelection>,
    pub decoder_passes: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub bundle: LossBundle,
    /// Gradient of the batch-mean total loss.
    pub grads: Grads,
    pub used: usize,
    /// Utterances dropped because their firing weights summed to zero.
    pub skipped: usize,
}

struct UttLoss {
    loss: Var,
    bundle: LossBundle,
}

fn dropout<'r>(model: &Model, rng: &'r mut ChaCha8Rng) -> Option<Dropout<'r>> {
    let p = model.config().dropout;
    (p > 0.0).then_some(Dropout { p, rng })
}

/// Shared NAR path. With `glance` off this is the plain single-pass
/// objective; with it on, a gradient-free first pass picks the tokens to
/// reveal before the second pass.
#[allow(clippy::too_many_arguments)]
fn nar_utterance(
    model: &Model,
    t: &mut Tape<'_>,
    utt: &Utterance,
    cfg: &TrainConfig,
    glance: bool,
    mwer_on: bool,
    rng: &mut ChaCha8Rng,
    probe: &mut Option<&mut StepProbe>,
) -> Result<Option<UttLoss>> {
    let gold = &utt.tokens;
    let n = gold.len();
    let mut drop = dropout(model, rng);
    let h = model.encode_on(t, &utt.feats.valid(), &mut drop);
    let alpha = model.predict_alpha_on(t, h)?;
    let alpha_sum = t.value(alpha).sum();
    if !(alpha_sum > 0.0) {
        return Ok(None);
    }
    let s = t.sum_all(alpha);
    let mae = t.abs_diff(s, n as f64);
    let scaled = t.scale_to_sum(alpha, n as f64);
    let (ea, plan) = t.cif(h, scaled, 1.0)?;
    if let Some(p) = probe.as_deref_mut() {
        p.fires.push((plan.num_fires(), n));
    }
    if plan.num_fires() != n {
        return Err(Error::Contract(format!(
            "{}: scaled weights fired {} times for {} tokens",
            utt.id,
            plan.num_fires(),
            n
        )));
    }

    let mut selection = GlanceSelection::empty(n);
    let mut decoder_input = ea;
    if glance {
        let offset = probe.as_deref().map_or(0.0, |p| p.first_pass_offset);
        let (first, tracked) = t.no_grad(|t| {
            let l = model.decode_parallel_on(t, ea, h, &mut None);
            let mut v = t.value(l).clone();
            if offset != 0.0 {
                v.data_mut().iter_mut().for_each(|x| *x += offset);
            }
            let pred: Vec<usize> = (0..v.rows()).map(|r| v.argmax_row(r)).collect();
            (pred, t.requires_grad(l))
        });
        if let Some(p) = probe.as_deref_mut() {
            p.first_pass_tracked |= tracked;
            p.decoder_passes += 1;
        }
        let d = hamming_distance(gold, &first)?;
        selection = select_positions(n, d, cfg.glm.lambda, rng);
        if !selection.selected.is_empty() {
            let ec = model.embed_on(t, gold);
            decoder_input = t.mix_rows(ea, ec, &selection.mask());
        }
    }
    let mut drop = dropout(model, rng);
    let logits = model.decode_parallel_on(t, decoder_input, h, &mut drop);
    if let Some(p) = probe.as_deref_mut() {
        p.decoder_passes += 1;
    }

    let targets: Vec<Option<usize>> = gold
        .iter()
        .enumerate()
        .map(|(i, &tok)| (!selection.contains(i)).then_some(tok))
        .collect();
    let n_ce = targets.iter().filter(|x| x.is_some()).count();
    let ce = if n_ce > 0 {
        let sum = t.cross_entropy_sum(logits, &targets);
        Some(t.scale(sum, 1.0 / n_ce as f64))
    } else {
        None
    };
    if let Some(p) = probe.as_deref_mut() {
        p.selections.push(selection);
    }

    let mwer = if mwer_on {
        let lv = Logits::new(t.value(logits).clone(), n)?;
        let cands = generate_negative_candidates(&lv, cfg.mwer.n_cand, cfg.mwer.p_mask, rng)?;
        let paths = cands.paths();
        let errors: Vec<f64> = paths.iter().map(|p| edit_distance(p, gold) as f64).collect();
        Some(t.mwer(logits, &paths, &errors))
    } else {
        None
    };

    let mut loss = mae;
    let mut bundle = LossBundle {
        mae: t.value(mae).item(),
        n_tokens_in_ce: n_ce,
        ..LossBundle::default()
    };
    if let Some(ce) = ce {
        bundle.ce = t.value(ce).item();
        let weighted = t.scale(ce, cfg.loss.gamma);
        loss = t.add(weighted, loss);
    }
    if let Some(m) = mwer {
        bundle.mwer = t.value(m).item();
        loss = t.add(loss, m);
    }
    bundle.total = total_loss(bundle.ce, bundle.mae, bundle.mwer, cfg.loss.gamma);
    Ok(Some(UttLoss { loss, bundle }))
}

fn ar_utterance(
    model: &Model,
    t: &mut Tape<'_>,
    utt: &Utterance,
    rng: &mut ChaCha8Rng,
    probe: &mut Option<&mut StepProbe>,
) -> Result<UttLoss> {
    let mut drop = dropout(model, rng);
    let h = model.encode_on(t, &utt.feats.valid(), &mut drop);
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(&utt.tokens);
    let mut targets: Vec<Option<usize>> = utt.tokens.iter().map(|&x| Some(x)).collect();
    targets.push(Some(EOS));
    let logits = model.decode_causal_on(t, &inputs, h, &mut drop);
    if let Some(p) = probe.as_deref_mut() {
        p.decoder_passes += 1;
    }
    let sum = t.cross_entropy_sum(logits, &targets);
    let ce = t.scale(sum, 1.0 / targets.len() as f64);
    let v = t.value(ce).item();
    Ok(UttLoss {
        loss: ce,
        bundle: LossBundle {
            ce: v,
            mae: 0.0,
            mwer: 0.0,
            total: v,
            n_tokens_in_ce: targets.len(),
        },
    })
}

fn check_mode(model: &Model, mode: TrainMode) -> Result<()> {
    if model.architecture() != architecture_for(mode) {
        return Err(Error::Config(format!(
            "mode {} needs a {:?} model, got {:?}",
            mode.name(),
            architecture_for(mode),
            model.architecture()
        )));
    }
    Ok(())
}

fn run_batch(
    model: &Model,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    mode: TrainMode,
    mwer_on: bool,
    rng: &mut ChaCha8Rng,
    mut probe: Option<&mut StepProbe>,
) -> Result<StepOutput> {
    check_mode(model, mode)?;
    let mut grads = model.params().zero_grads();
    let mut sum = LossBundle::default();
    let mut used = 0;
    let mut skipped = 0;
    for utt in batch {
        if utt.tokens.is_empty() {
            return Err(Error::Input(format!("{}: empty target", utt.id)));
        }
        let mut t = Tape::new(model.params());
        let out = match mode {
            TrainMode::Paraformer => {
                nar_utterance(model, &mut t, utt, cfg, true, mwer_on, rng, &mut probe)?
            }
            TrainMode::VanillaNar => {
                nar_utterance(model, &mut t, utt, cfg, false, false, rng, &mut probe)?
            }
            TrainMode::Ar => Some(ar_utterance(model, &mut t, utt, rng, &mut probe)?),
        };
        let Some(out) = out else {
            skipped += 1;
            continue;
        };
        grads.add_assign(t.backward(out.loss).params());
        sum.ce += out.bundle.ce;
        sum.mae += out.bundle.mae;
        sum.mwer += out.bundle.mwer;
        sum.n_tokens_in_ce += out.bundle.n_tokens_in_ce;
        used += 1;
    }
    let mut bundle = LossBundle {
        n_tokens_in_ce: sum.n_tokens_in_ce,
        ..LossBundle::default()
    };
    if used > 0 {
        let k = used as f64;
        grads.scale(1.0 / k);
        bundle.ce = sum.ce / k;
        bundle.mae = sum.mae / k;
        bundle.mwer = sum.mwer / k;
    }
    bundle.total = total_loss(bundle.ce, bundle.mae, bundle.mwer, cfg.loss.gamma);
    Ok(StepOutput {
        bundle,
        grads,
        used,
        skipped,
    })
}

/// Two-pass glancing step, plus MWER when `mwer_on`.
pub fn train_step_paraformer(
    model: &Model,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    mwer_on: bool,
    rng: &mut ChaCha8Rng,
    probe: Option<&mut StepProbe>,
) -> Result<StepOutput> {
    run_batch(model, batch, cfg, TrainMode::Paraformer, mwer_on, rng, probe)
}

/// Single decoder pass on the acoustic embeddings, full cross-entropy plus
/// the length term.
pub fn train_step_vanilla(
    model: &Model,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    probe: Option<&mut StepProbe>,
) -> Result<StepOutput> {
    run_batch(model, batch, cfg, TrainMode::VanillaNar, false, rng, probe)
}

/// Teacher-forced causal decoding on `BOS + tokens` against `tokens + EOS`.
pub fn train_step_ar(
    model: &Model,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    probe: Option<&mut StepProbe>,
) -> Result<StepOutput> {
    run_batch(model, batch, cfg, TrainMode::Ar, false, rng, probe)
}

/// Dispatches on `cfg.mode`.
pub fn train_step(
    model: &Model,
    batch: &[&Utterance],
    cfg: &TrainConfig,
    mwer_on: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    run_batch(model, batch, cfg, cfg.mode, mwer_on, rng, None)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (id, g)) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g.data()[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g.data()[k] * g.data()[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        ce: f64,
        mae: f64,
        mwer: f64,
        total: f64,
        grad_norm: f64,
        skipped: usize,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        mean_total: f64,
        dev_cer: Option<f64>,
        seconds: f64,
    },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_run: usize,
    pub skipped: usize,
    pub final_dev_cer: Option<f64>,
    pub seconds: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains `model` in place. Dev CER is computed after each epoch when `dev`
/// is non-empty. Each metrics record is written as one JSON line.
pub fn train(
    model: &mut Model,
    train_set: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_mode(model, cfg.mode)?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut summary = TrainSummary::default();
    let mut emit = |rec: &MetricsRecord| -> Result<()> {
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mwer_on = cfg.mwer_active(epoch);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| summary.steps >= m) {
                break 'epochs;
            }
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut out = run_batch(model, &batch, cfg, cfg.mode, mwer_on, &mut rng, None)?;
            summary.skipped += out.skipped;
            if out.used == 0 {
                continue;
            }
            let grad_norm = out.grads.global_norm();
            if !grad_norm.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite gradient at step {}",
                    summary.steps + 1
                )));
            }
            if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
                out.grads.scale(cfg.grad_clip / grad_norm);
            }
            summary.steps += 1;
            let lr = cfg.schedule.lr(summary.steps);
            adam.step(model.params_mut(), &out.grads, lr);
            epoch_total += out.bundle.total;
            epoch_steps += 1;
            emit(&MetricsRecord::Step {
                step: summary.steps,
                epoch,
                lr,
                ce: out.bundle.ce,
                mae: out.bundle.mae,
                mwer: out.bundle.mwer,
                total: out.bundle.total,
                grad_norm,
                skipped: out.skipped,
            })?;
        }
        let dev_cer = if dev.is_empty() {
            None
        } else {
            let opts = EvalOptions {
                threshold_mode: cfg.threshold_mode,
                ..EvalOptions::default()
            };
            Some(evaluate(model, dev, &opts)?.cer)
        };
        summary.final_dev_cer = dev_cer;
        summary.epochs_run = epoch + 1;
        let mean_total = epoch_total / epoch_steps.max(1) as f64;
        summary.epoch_losses.push(mean_total);
        emit(&MetricsRecord::Epoch {
            epoch,
            steps: epoch_steps,
            mean_total,
            dev_cer,
            seconds: epoch_start.elapsed().as_secs_f64(),
        })?;
    }
    summary.seconds = start.elapsed().as_secs_f64();
    Ok(summary)
}

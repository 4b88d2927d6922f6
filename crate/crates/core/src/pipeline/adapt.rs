use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::batch::{predict_slices, Prediction};
use super::TrainConfig;
use crate::autodiff::{AdamConfig, AdamState, Graph};
use crate::benchmark::{mix_seed, SubjectRecord};
use crate::error::{Error, Result};
use crate::losses::{adaptation_loss, adaptation_loss_warm, LossReport, PowerVectors, DEFAULT_ORTH_SEED};
use crate::nn::FEATURE_CHANNELS;
use crate::nn::{task_forward, AdaptorSet, AeBank, TaskWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    InsufficientImprovement,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxIters => "max-iters",
            StopReason::InsufficientImprovement => "insufficient-improvement",
        }
    }
}

/// Loop guard: keep going while `iter < max_iters` and
/// `factor · L_prev > L_current`, with the loss before the first iteration
/// taken as +∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    pub max_iters: usize,
    pub factor: f64,
}

impl StopRule {
    /// Calls `step(iter)` (0-based) until the guard fails; every call runs
    /// one full iteration and returns its mean losses.
    pub fn run(&self, mut step: impl FnMut(usize) -> Result<LossReport>) -> Result<(Vec<LossReport>, StopReason)> {
        let mut prev = f64::INFINITY;
        let mut history = Vec::with_capacity(self.max_iters);
        loop {
            let r = step(history.len())?;
            if !r.l_a.is_finite() {
                return Err(Error::NonFinite(format!("adaptation loss at iteration {}: {:?}", history.len() + 1, r)));
            }
            history.push(r);
            if !(self.factor * prev > r.l_a) {
                return Ok((history, StopReason::InsufficientImprovement));
            }
            if history.len() >= self.max_iters {
                return Ok((history, StopReason::MaxIters));
            }
            prev = r.l_a;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationReport {
    pub subject: String,
    /// Iteration-mean losses, one entry per executed iteration.
    pub history: Vec<LossReport>,
    pub stop_reason: StopReason,
    pub duration: Duration,
    /// Mean L_A of each initial candidate and the index chosen.
    pub init_losses: Vec<f64>,
    pub chosen_init: usize,
}

impl AdaptationReport {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// Plain-text rendering. `with_duration` off gives a run-invariant text.
    pub fn to_text(&self, with_duration: bool) -> String {
        let mut s = format!("subject {}\n", self.subject);
        let inits: Vec<String> = self.init_losses.iter().map(|l| format!("{l:.8e}")).collect();
        let _ = writeln!(s, "init_losses {}", inits.join(","));
        let _ = writeln!(s, "chosen_init {}", self.chosen_init);
        s.push_str("iter,l_ae,l_orth,l_a\n");
        for (i, r) in self.history.iter().enumerate() {
            let _ = writeln!(s, "{},{:.8e},{:.8e},{:.8e}", i + 1, r.l_ae, r.l_orth, r.l_a);
        }
        let _ = writeln!(s, "iterations {}", self.iterations());
        let _ = writeln!(s, "stop_reason {}", self.stop_reason.as_str());
        if with_duration {
            let _ = writeln!(s, "duration_s {:.3}", self.duration.as_secs_f64());
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub prediction: Prediction,
    pub report: AdaptationReport,
    pub adaptors: AdaptorSet<f32>,
}

/// Mean L_A over the subject's mini-batches without updating anything.
pub fn subject_loss(
    subject: &SubjectRecord,
    task: &TaskWeights<f32>,
    bank: &AeBank<f32>,
    adaptors: &AdaptorSet<f32>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let n = subject.num_slices();
    let mut reports = Vec::new();
    let mut weights = Vec::new();
    for b0 in (0..n).step_by(cfg.batch_size) {
        let len = cfg.batch_size.min(n - b0);
        let mut g = Graph::new();
        let tp = task.bind(&mut g, false);
        let bp = bank.bind(&mut g, false);
        let ap = adaptors.bind(&mut g, false);
        let x = g.constant(subject.slices.slice_batch(b0, len)?);
        let bundle = task_forward(&mut g, task, &tp, x, Some((adaptors, &ap)))?;
        let loss = adaptation_loss(&mut g, &bundle, bank, &bp, adaptors, &ap, cfg.lambda_orth, cfg.power_iters)?;
        reports.push(loss.report);
        weights.push(len);
    }
    Ok(weighted_mean(&reports, &weights))
}

/// Draws `cfg.init_candidates` adaptor sets (the first from `cfg.seed`) and
/// returns the one with the lowest finite L_A on the subject, its index and
/// every candidate's loss.
pub fn initial_adaptors(
    subject: &SubjectRecord,
    task: &TaskWeights<f32>,
    bank: &AeBank<f32>,
    cfg: &TrainConfig,
) -> Result<(AdaptorSet<f32>, usize, Vec<f64>)> {
    let seed_of = |k: usize| if k == 0 { cfg.seed } else { mix_seed(cfg.seed, k as u64) };
    if cfg.init_candidates == 1 {
        return Ok((AdaptorSet::init(seed_of(0), cfg.image_adaptor), 0, Vec::new()));
    }
    let mut best: Option<(AdaptorSet<f32>, usize, f64)> = None;
    let mut losses = Vec::with_capacity(cfg.init_candidates);
    for k in 0..cfg.init_candidates {
        let a = AdaptorSet::<f32>::init(seed_of(k), cfg.image_adaptor);
        let l = subject_loss(subject, task, bank, &a, cfg)?.l_a;
        losses.push(l);
        if l.is_finite() && best.as_ref().is_none_or(|b| l < b.2) {
            best = Some((a, k, l));
        }
    }
    let (a, k, _) = best.ok_or_else(|| Error::NonFinite(format!("every initial adaptor gives a non-finite loss on {}", subject.id)))?;
    Ok((a, k, losses))
}

/// Fresh adaptors trained on one subject against the frozen network and
/// bank, then used for the subject's final prediction.
pub fn adapt_subject(
    subject: &SubjectRecord,
    task: &TaskWeights<f32>,
    bank: &AeBank<f32>,
    cfg: &TrainConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    subject.validate()?;
    let start = Instant::now();
    let (mut adaptors, chosen_init, init_losses) = initial_adaptors(subject, task, bank, cfg)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.adapt_lr));
    let n = subject.num_slices();
    let rule = StopRule { max_iters: cfg.max_adapt_iters, factor: cfg.improvement };
    let mut power = PowerVectors::seeded(3, FEATURE_CHANNELS, DEFAULT_ORTH_SEED);
    let (history, stop_reason) = rule.run(|iter| {
        let mut reports = Vec::new();
        let mut weights = Vec::new();
        for b0 in (0..n).step_by(cfg.batch_size) {
            let len = cfg.batch_size.min(n - b0);
            let mut g = Graph::new();
            let tp = task.bind(&mut g, false);
            let bp = bank.bind(&mut g, false);
            let ap = adaptors.bind(&mut g, true);
            let x = g.constant(subject.slices.slice_batch(b0, len)?);
            let bundle = task_forward(&mut g, task, &tp, x, Some((&adaptors, &ap)))?;
            let loss = adaptation_loss_warm(
                &mut g,
                &bundle,
                bank,
                &bp,
                &adaptors,
                &ap,
                cfg.lambda_orth,
                cfg.power_iters,
                &mut power,
            )?;
            if !loss.report.l_a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "adaptation loss on subject {} at iteration {}, slices {}..{}: {:?}",
                    subject.id,
                    iter + 1,
                    b0,
                    b0 + len,
                    loss.report
                )));
            }
            let grads = g.backward(loss.total)?;
            let gs: Vec<_> = ap.vars().iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut adaptors.store_mut().tensors_mut(), &gs)?;
            reports.push(loss.report);
            weights.push(len);
        }
        Ok(weighted_mean(&reports, &weights))
    })?;
    let prediction = predict_slices(&subject.slices, task, Some(&adaptors), cfg.batch_size)?;
    let report = AdaptationReport {
        subject: subject.id.clone(),
        history,
        stop_reason,
        duration: start.elapsed(),
        init_losses,
        chosen_init,
    };
    Ok(AdaptOutcome { prediction, report, adaptors })
}

/// Slice-weighted mean so a short trailing batch counts proportionally.
fn weighted_mean(reports: &[LossReport], weights: &[usize]) -> LossReport {
    if weights.iter().all(|&w| w == weights[0]) {
        return LossReport::mean(reports);
    }
    let total: usize = weights.iter().sum();
    let mut out = LossReport { lambda_orth: reports[0].lambda_orth, ..Default::default() };
    for (r, &w) in reports.iter().zip(weights) {
        let f = w as f64 / total as f64;
        for (o, t) in out.l_ae_terms.iter_mut().zip(r.l_ae_terms) {
            *o += f * t;
        }
        out.l_ae += f * r.l_ae;
        out.l_orth += f * r.l_orth;
        out.l_a += f * r.l_a;
    }
    out
}

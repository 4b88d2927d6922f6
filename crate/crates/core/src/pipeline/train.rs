use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{argmax_labels, BundleValues};
use super::TrainConfig;
use crate::autodiff::{AdamConfig, AdamState, Graph, Var};
use crate::benchmark::{dice, mix_seed, SubjectRecord};
use crate::error::{Error, Result};
use crate::losses::reconstruction_loss;
use crate::nn::{task_forward, AeBank, TaskConfig, TaskKind, TaskWeights};
use crate::tensor::{Labels, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskTrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Epoch (1-based) whose weights were returned; 0 for the initial ones.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean Dice over classes (segmentation) or MSE (synthesis) of the
    /// returned weights on the validation set.
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AeTrainReport {
    /// Mean L_AE per epoch.
    pub epoch_losses: Vec<f64>,
}

enum Target {
    Labels(Labels),
    Images(Tensor<f32>),
}

/// Flat (subject, slice) index over a set of subjects, checked for one
/// common slice shape and the annotation the task needs.
struct SliceSet<'a> {
    subjects: &'a [SubjectRecord],
    index: Vec<(usize, usize)>,
}

impl<'a> SliceSet<'a> {
    fn new(subjects: &'a [SubjectRecord], what: &str, need: Option<TaskConfig>) -> Result<Self> {
        let mut index = Vec::new();
        let mut shape: Option<Vec<usize>> = None;
        for (si, s) in subjects.iter().enumerate() {
            s.validate()?;
            let dims = s.slices.dims()[1..].to_vec();
            match &shape {
                Some(d) if *d != dims => {
                    return Err(Error::Shape(format!("subject {} slices {:?} differ from {:?}", s.id, dims, d)))
                }
                _ => shape = Some(dims),
            }
            if let Some(cfg) = need {
                check_annotation(s, cfg)?;
            }
            index.extend((0..s.num_slices()).map(|i| (si, i)));
        }
        if index.is_empty() {
            return Err(Error::EmptyDataset(what.into()));
        }
        Ok(Self { subjects, index })
    }

    fn images(&self, items: &[(usize, usize)]) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> =
            items.iter().map(|&(s, i)| self.subjects[s].slices.slice_batch(i, 1)).collect::<Result<_>>()?;
        Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
    }

    fn targets(&self, items: &[(usize, usize)], kind: TaskKind) -> Result<Target> {
        match kind {
            TaskKind::Segmentation => {
                let parts: Vec<Labels> = items
                    .iter()
                    .map(|&(s, i)| self.subjects[s].labels().expect("checked").slice_batch(i, 1))
                    .collect::<Result<_>>()?;
                Ok(Target::Labels(Labels::stack_batch(&parts.iter().collect::<Vec<_>>())?))
            }
            TaskKind::Synthesis => {
                let parts: Vec<Tensor<f32>> = items
                    .iter()
                    .map(|&(s, i)| self.subjects[s].targets().expect("checked").slice_batch(i, 1))
                    .collect::<Result<_>>()?;
                Ok(Target::Images(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?))
            }
        }
    }
}

fn check_annotation(s: &SubjectRecord, cfg: TaskConfig) -> Result<()> {
    match cfg.kind {
        TaskKind::Segmentation => {
            let l = s.labels().ok_or_else(|| Error::InvalidArgument(format!("subject {} has no labels", s.id)))?;
            if let Some(m) = l.max_class() {
                if m as usize >= cfg.out_channels {
                    return Err(Error::InvalidArgument(format!(
                        "subject {} has label {} but the network predicts {} classes",
                        s.id, m, cfg.out_channels
                    )));
                }
            }
        }
        TaskKind::Synthesis => {
            s.targets().ok_or_else(|| Error::InvalidArgument(format!("subject {} has no paired targets", s.id)))?;
        }
    }
    Ok(())
}

fn task_loss(g: &mut Graph<f32>, logits: Var, prediction: Var, target: &Target) -> Result<Var> {
    match target {
        Target::Labels(l) => g.cross_entropy(logits, l),
        Target::Images(t) => {
            let t = g.constant(t.clone());
            g.mse(prediction, t)
        }
    }
}

/// Validation loss and metric of `net` over every slice of `set`.
fn evaluate(net: &TaskWeights<f32>, set: &SliceSet, batch: usize) -> Result<(f64, f64)> {
    let kind = net.config().kind;
    let (mut loss, mut metric, mut n) = (0.0, 0.0, 0usize);
    for items in set.index.chunks(batch) {
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(set.images(items)?);
        let b = task_forward(&mut g, net, &p, x, None)?;
        let target = set.targets(items, kind)?;
        let l = task_loss(&mut g, b.logits, b.prediction, &target)?;
        loss += g.value(l).item()? as f64 * items.len() as f64;
        metric += match &target {
            Target::Labels(gt) => {
                let pred = argmax_labels(g.value(b.prediction))?;
                let classes = net.config().out_channels;
                let mut d = 0.0;
                for c in 0..classes {
                    d += dice(pred.data(), gt.data(), c as u8)?;
                }
                d / classes as f64 * items.len() as f64
            }
            Target::Images(t) => crate::benchmark::mse_metric(g.value(b.prediction), t)? * items.len() as f64,
        };
        n += items.len();
    }
    Ok((loss / n as f64, metric / n as f64))
}

/// Supervised training of a fresh task network with early stopping on the
/// validation loss. Returns the best-validation weights.
pub fn train_task(
    train: &[SubjectRecord],
    val: &[SubjectRecord],
    net_cfg: TaskConfig,
    cfg: &TrainConfig,
) -> Result<(TaskWeights<f32>, TaskTrainReport)> {
    cfg.validate()?;
    if net_cfg.kind != cfg.kind {
        return Err(Error::Config("network and training configs disagree on the task kind".into()));
    }
    let train_set = SliceSet::new(train, "task training set", Some(net_cfg))?;
    let val_set = SliceSet::new(val, "task validation set", Some(net_cfg))?;
    let mut net = TaskWeights::<f32>::new(net_cfg, cfg.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let (val0, metric0) = evaluate(&net, &val_set, cfg.batch_size)?;
    let mut report =
        TaskTrainReport { best_epoch: 0, best_val_loss: val0, val_metric: metric0, ..Default::default() };
    let mut best = net.store().clone();
    let mut since_best = 0;
    let mut order = train_set.index.clone();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for items in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let p = net.bind(&mut g, true);
            let x = g.constant(train_set.images(items)?);
            let b = task_forward(&mut g, &net, &p, x, None)?;
            let target = train_set.targets(items, cfg.kind)?;
            let loss = task_loss(&mut g, b.logits, b.prediction, &target)?;
            let lv = g.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("task loss at epoch {epoch}")));
            }
            total += lv * items.len() as f64;
            let grads = g.backward(loss)?;
            let gs: Vec<_> = p.vars().iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut net.store_mut().tensors_mut(), &gs)?;
        }
        report.train_losses.push(total / order.len() as f64);
        let (vl, _) = evaluate(&net, &val_set, cfg.batch_size)?;
        report.val_losses.push(vl);
        log::debug!("task epoch {epoch}: train {:.5} val {:.5}", total / order.len() as f64, vl);
        if vl < report.best_val_loss {
            report.best_val_loss = vl;
            report.best_epoch = epoch;
            best = net.store().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    *net.store_mut() = best;
    report.val_metric = evaluate(&net, &val_set, cfg.batch_size)?.1;
    Ok((net, report))
}

/// Trains a fresh AE bank on the frozen network's source-image taps.
pub fn train_autoencoders(
    task: &TaskWeights<f32>,
    train: &[SubjectRecord],
    cfg: &TrainConfig,
) -> Result<(AeBank<f32>, AeTrainReport)> {
    cfg.validate()?;
    let set = SliceSet::new(train, "auto-encoder training set", None)?;
    // T is frozen: its taps per slice are fixed for the whole run
    let cache: Vec<BundleValues> = set
        .index
        .iter()
        .map(|&it| {
            let mut g = Graph::new();
            let p = task.bind(&mut g, false);
            let x = g.constant(set.images(&[it])?);
            let b = task_forward(&mut g, task, &p, x, None)?;
            Ok(BundleValues::extract(&g, &b))
        })
        .collect::<Result<_>>()?;
    let mut bank = AeBank::<f32>::new(task.config().out_channels, mix_seed(cfg.seed, 0xae));
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut report = AeTrainReport::default();
    let mut order: Vec<usize> = (0..cache.len()).collect();
    for epoch in 1..=cfg.ae_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0xae, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for items in order.chunks(cfg.batch_size) {
            let parts: Vec<&BundleValues> = items.iter().map(|&i| &cache[i]).collect();
            let vals = BundleValues::stack(&parts)?;
            let mut g = Graph::new();
            let bp = bank.bind(&mut g, true);
            let bundle = vals.constants(&mut g);
            let rec = reconstruction_loss(&mut g, &bank, &bp, &bundle)?;
            let lv = g.value(rec.total).item()? as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("reconstruction loss at epoch {epoch}")));
            }
            total += lv * items.len() as f64;
            let grads = g.backward(rec.total)?;
            let gs: Vec<_> = bp.vars().iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut bank.store_mut().tensors_mut(), &gs)?;
        }
        report.epoch_losses.push(total / order.len() as f64);
        log::debug!("ae epoch {epoch}: {:.5}", total / order.len() as f64);
    }
    Ok((bank, report))
}

/// Mean L_AE of a bank over subjects, taps taken from `task` without
/// adaptors.
pub fn mean_reconstruction_error(
    task: &TaskWeights<f32>,
    bank: &AeBank<f32>,
    subjects: &[SubjectRecord],
    batch_size: usize,
) -> Result<f64> {
    let set = SliceSet::new(subjects, "evaluation set", None)?;
    let mut total = 0.0;
    for items in set.index.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let tp = task.bind(&mut g, false);
        let bp = bank.bind(&mut g, false);
        let x = g.constant(set.images(items)?);
        let b = task_forward(&mut g, task, &tp, x, None)?;
        let rec = reconstruction_loss(&mut g, bank, &bp, &b)?;
        total += g.value(rec.total).item()? as f64 * items.len() as f64;
    }
    Ok(total / set.index.len() as f64)
}

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::harmonize::harmonize;
use super::metrics::{dice, mse_metric, ssim};
use super::phantom::{gen_phantom_dataset, mix_seed, Domain, PhantomConfig, PhantomKind, SubjectRecord};
use super::shift::ShiftConfig;
use crate::error::{Error, Result};
use crate::losses::orth_deviation;
use crate::nn::{AeBank, ImageAdaptorMode, TaskConfig, TaskKind, TaskWeights};
use crate::pipeline::{
    adapt_subject, mean_reconstruction_error, predict_slices, train_autoencoders, train_task, AdaptationReport,
    Prediction, TrainConfig,
};
use crate::tensor::Tensor;

/// Power iterations used when measuring the final adaptor deviation.
const MEASURE_POWER_ITERS: usize = 500;

/// Everything needed to generate data, train and evaluate one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub phantom: PhantomConfig,
    pub shift: ShiftConfig,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub source_test_subjects: usize,
    pub target_subjects: usize,
    pub slices_per_subject: usize,
    pub train: TrainConfig,
    /// Slice of the first training subject used as the histogram reference.
    pub reference_slice: usize,
}

impl Scenario {
    /// Five-band segmentation with a gamma 1.8 shift plus noise.
    pub fn standard_segmentation(seed: u64) -> Self {
        let mut train = TrainConfig::new(TaskKind::Segmentation);
        train.seed = seed;
        Self {
            phantom: PhantomConfig {
                height: 64,
                width: 32,
                kind: PhantomKind::Segmentation,
                band_means: vec![0.1, 0.3, 0.5, 0.7, 0.9],
                band_stds: vec![0.04; 5],
                noise: 0.03,
                smoothness: 4.0,
                shuffle_bands: false,
                target_noise: 0.0,
                seed,
            },
            shift: ShiftConfig { gamma: 1.8, contrast: 1.0, brightness: 0.0, noise_sigma: 0.05, speckle: false },
            train_subjects: 3,
            val_subjects: 1,
            source_test_subjects: 2,
            target_subjects: 6,
            slices_per_subject: 8,
            train,
            reference_slice: 0,
        }
    }

    /// Intensity-remap synthesis with the same shift family.
    pub fn standard_synthesis(seed: u64) -> Self {
        let mut s = Self::standard_segmentation(seed);
        s.phantom.kind = PhantomKind::Synthesis;
        s.phantom.target_noise = 0.02;
        let mut train = TrainConfig::new(TaskKind::Synthesis);
        train.seed = seed;
        s.train = train;
        s
    }

    pub fn task_config(&self) -> TaskConfig {
        match self.phantom.kind {
            PhantomKind::Segmentation => TaskConfig::segmentation(self.phantom.classes()),
            PhantomKind::Synthesis => TaskConfig::synthesis(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.shift.validate()?;
        self.train.validate()?;
        let kind = match self.phantom.kind {
            PhantomKind::Segmentation => TaskKind::Segmentation,
            PhantomKind::Synthesis => TaskKind::Synthesis,
        };
        if kind != self.train.kind {
            return Err(Error::Config("phantom kind and training task kind differ".into()));
        }
        if self.train_subjects == 0 || self.val_subjects == 0 || self.slices_per_subject == 0 {
            return Err(Error::Config("need at least one training and one validation subject".into()));
        }
        if self.reference_slice >= self.slices_per_subject {
            return Err(Error::Config("reference slice out of range".into()));
        }
        Ok(())
    }
}

/// The four data splits of a scenario.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub train: Vec<SubjectRecord>,
    pub val: Vec<SubjectRecord>,
    pub source_test: Vec<SubjectRecord>,
    pub target: Vec<SubjectRecord>,
}

/// Generates all splits; target subjects are distinct phantoms passed
/// through the shift.
pub fn generate_scenario_data(s: &Scenario) -> Result<ScenarioData> {
    s.validate()?;
    let n_src = s.train_subjects + s.val_subjects + s.source_test_subjects;
    let mut source = gen_phantom_dataset(&s.phantom, n_src + s.target_subjects, s.slices_per_subject, "subject-")?;
    let clean_target = source.split_off(n_src);
    let target = clean_target
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut t = r.shifted(&s.shift, mix_seed(s.phantom.seed ^ 0x5417, i as u64))?;
            t.id = format!("target-{i:03}");
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let source_test = source.split_off(s.train_subjects + s.val_subjects);
    let val = source.split_off(s.train_subjects);
    let rename = |v: Vec<SubjectRecord>, p: &str| -> Vec<SubjectRecord> {
        v.into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.id = format!("{p}-{i:03}");
                r
            })
            .collect()
    };
    Ok(ScenarioData {
        train: rename(source, "train"),
        val: rename(val, "val"),
        source_test: rename(source_test, "source"),
        target,
    })
}

/// Offline-trained models of a scenario.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub task: TaskWeights<f32>,
    pub bank: AeBank<f32>,
}

pub fn train_models(s: &Scenario, data: &ScenarioData) -> Result<TrainedModels> {
    let (task, tr) = train_task(&data.train, &data.val, s.task_config(), &s.train)?;
    log::info!("task network: best epoch {} val metric {:.4}", tr.best_epoch, tr.val_metric);
    let (bank, ar) = train_autoencoders(&task, &data.train, &s.train)?;
    log::info!("auto-encoders: epoch losses {:?}", ar.epoch_losses);
    Ok(TrainedModels { task, bank })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    NoAdaptation,
    MedianHistogram,
    Ours,
    Ours3x3,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoAdaptation, Method::MedianHistogram, Method::Ours, Method::Ours3x3];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoAdaptation => "NA",
            Method::MedianHistogram => "M&H",
            Method::Ours => "Ours",
            Method::Ours3x3 => "Ours-3x3",
        }
    }
}

/// One CSV line. `class` is `None` for whole-image metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub domain: Domain,
    pub subject: String,
    pub metric: &'static str,
    pub class: Option<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub domain: Domain,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct BenchmarkResults {
    pub kind: TaskKind,
    pub rows: Vec<ResultRow>,
    pub reports: Vec<(Method, Domain, AdaptationReport)>,
    /// Deviation from orthogonality of each adapted subject's three feature
    /// adaptors.
    pub orth_deviations: Vec<(Method, String, [f64; 3])>,
    /// Mean L_AE without adaptors on source test and target subjects.
    pub source_l_ae: f64,
    pub target_l_ae: f64,
    pub duration: Duration,
}

/// Whole-image metric used for the per-subject headline number.
pub fn headline_metric(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Segmentation => "dice_mean",
        TaskKind::Synthesis => "mse",
    }
}

/// Per-class Dice plus their mean, or MSE and SSIM.
pub fn subject_metrics(subject: &SubjectRecord, pred: &Prediction, classes: usize) -> Result<Vec<(&'static str, Option<usize>, f64)>> {
    let mut out = Vec::new();
    if let Some(gt) = subject.labels() {
        let pl = pred.labels.as_ref().ok_or_else(|| Error::InvalidArgument("prediction has no label map".into()))?;
        let mut total = 0.0;
        for c in 0..classes {
            let d = dice(pl.data(), gt.data(), c as u8)?;
            total += d;
            out.push(("dice", Some(c), d));
        }
        out.push(("dice_mean", None, total / classes as f64));
    } else if let Some(t) = subject.targets() {
        out.push(("mse", None, mse_metric(&pred.outputs, t)?));
        out.push(("ssim", None, ssim(&pred.outputs, t)?));
    } else {
        return Err(Error::InvalidArgument(format!("subject {} has no ground truth", subject.id)));
    }
    Ok(out)
}

/// Runs every method on the source-test and target subjects.
pub fn run_benchmark(s: &Scenario, data: &ScenarioData, models: &TrainedModels) -> Result<BenchmarkResults> {
    let start = Instant::now();
    let kind = s.train.kind;
    let classes = s.task_config().out_channels;
    let reference = data
        .train
        .first()
        .ok_or_else(|| Error::EmptyDataset("training set".into()))?
        .slices
        .slice_batch(s.reference_slice, 1)?;
    let source_l_ae = mean_reconstruction_error(&models.task, &models.bank, &data.source_test, s.train.batch_size)?;
    let target_l_ae = mean_reconstruction_error(&models.task, &models.bank, &data.target, s.train.batch_size)?;
    let mut res = BenchmarkResults {
        kind,
        rows: Vec::new(),
        reports: Vec::new(),
        orth_deviations: Vec::new(),
        source_l_ae,
        target_l_ae,
        duration: Duration::ZERO,
    };
    let groups = [(Domain::Target, &data.target), (Domain::Source, &data.source_test)];
    for (domain, subjects) in groups {
        for subject in subjects.iter() {
            for method in Method::ALL {
                let pred = match method {
                    Method::NoAdaptation => predict_slices(&subject.slices, &models.task, None, s.train.batch_size)?,
                    Method::MedianHistogram => {
                        let h = harmonize_stack(&subject.slices, &reference)?;
                        predict_slices(&h, &models.task, None, s.train.batch_size)?
                    }
                    Method::Ours | Method::Ours3x3 => {
                        let mut cfg = s.train.clone();
                        cfg.image_adaptor = if method == Method::Ours {
                            ImageAdaptorMode::Pointwise
                        } else {
                            ImageAdaptorMode::FirstKernel3x3
                        };
                        let out = adapt_subject(subject, &models.task, &models.bank, &cfg)?;
                        let dev = [0, 1, 2].map(|i| {
                            orth_deviation(out.adaptors.feature_matrix(i), MEASURE_POWER_ITERS, i as u64)
                                .unwrap_or(f64::NAN)
                        });
                        res.orth_deviations.push((method, subject.id.clone(), dev));
                        res.reports.push((method, domain, out.report));
                        out.prediction
                    }
                };
                for (metric, class, value) in subject_metrics(subject, &pred, classes)? {
                    res.rows.push(ResultRow { method, domain, subject: subject.id.clone(), metric, class, value });
                }
            }
        }
    }
    res.duration = start.elapsed();
    Ok(res)
}

/// Median filter and histogram match per slice.
pub fn harmonize_stack(slices: &Tensor<f32>, reference: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, _, _, _) = slices.nchw()?;
    let parts = (0..n).map(|i| harmonize(&slices.slice_batch(i, 1)?, reference)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
}

impl BenchmarkResults {
    /// Per-subject values of a whole-image metric.
    pub fn subject_values(&self, method: Method, domain: Domain, metric: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.domain == domain && r.metric == metric && r.class.is_none())
            .map(|r| (r.subject.clone(), r.value))
            .collect()
    }

    pub fn mean(&self, method: Method, domain: Domain, metric: &str) -> f64 {
        let v = self.subject_values(method, domain, metric);
        v.iter().map(|x| x.1).sum::<f64>() / v.len().max(1) as f64
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let metrics: &[&'static str] = match self.kind {
            TaskKind::Segmentation => &["dice_mean"],
            TaskKind::Synthesis => &["mse", "ssim"],
        };
        let mut out = Vec::new();
        for domain in [Domain::Target, Domain::Source] {
            for method in Method::ALL {
                for &metric in metrics {
                    let v: Vec<f64> = self.subject_values(method, domain, metric).into_iter().map(|x| x.1).collect();
                    if v.is_empty() {
                        continue;
                    }
                    let n = v.len();
                    let mean = v.iter().sum::<f64>() / n as f64;
                    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                    out.push(SummaryRow { method, domain, metric, mean, std, n });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,subject,metric,class,value\n");
        for r in &self.rows {
            let class = r.class.map_or_else(|| "all".to_string(), |c| c.to_string());
            let _ = writeln!(s, "{},{},{},{},{:.8}", r.method.as_str(), r.subject, r.metric, class, r.value);
        }
        s
    }

    /// Aligned text table of mean ± std per method and domain.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<9} {:<10} {:>18}\n", "domain", "method", "metric", "mean ± std");
        for r in self.summary() {
            let _ = writeln!(
                s,
                "{:<8} {:<9} {:<10} {:>9.4} ± {:<7.4}",
                r.domain.as_str(),
                r.method.as_str(),
                r.metric,
                r.mean,
                r.std
            );
        }
        let _ = writeln!(s, "mean L_AE without adaptation: source {:.5}, target {:.5}", self.source_l_ae, self.target_l_ae);
        s
    }
}

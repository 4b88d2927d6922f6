//! Run configuration: `key=value` text plus command-line overrides, covering
//! every field of the scenario, phantom, shift and training settings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::benchmark::{PhantomConfig, PhantomKind, Scenario, ShiftConfig};
use crate::error::{Error, Result};
use crate::nn::{ImageAdaptorMode, TaskKind};
use crate::pipeline::TrainConfig;

/// Effective configuration of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { scenario: Scenario::standard_segmentation(0) }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `phantom.*` entries of `p`.
pub fn phantom_entries(p: &PhantomConfig) -> Vec<(String, String)> {
    [
        ("height", p.height.to_string()),
        ("width", p.width.to_string()),
        ("band_means", join(&p.band_means)),
        ("band_stds", join(&p.band_stds)),
        ("noise", p.noise.to_string()),
        ("smoothness", p.smoothness.to_string()),
        ("shuffle_bands", p.shuffle_bands.to_string()),
        ("target_noise", p.target_noise.to_string()),
        ("seed", p.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("phantom.{k}"), v))
    .collect()
}

/// Sets one `phantom.*` field; `Ok(false)` when the key names none.
pub fn set_phantom(p: &mut PhantomConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("phantom.") else { return Ok(false) };
    match field {
        "height" => p.height = parse(key, value)?,
        "width" => p.width = parse(key, value)?,
        "band_means" => p.band_means = parse_list(key, value)?,
        "band_stds" => p.band_stds = parse_list(key, value)?,
        "noise" => p.noise = parse(key, value)?,
        "smoothness" => p.smoothness = parse(key, value)?,
        "shuffle_bands" => p.shuffle_bands = parse(key, value)?,
        "target_noise" => p.target_noise = parse(key, value)?,
        "seed" => p.seed = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `shift.*` entries of `s`.
pub fn shift_entries(s: &ShiftConfig) -> Vec<(String, String)> {
    [
        ("gamma", s.gamma.to_string()),
        ("contrast", s.contrast.to_string()),
        ("brightness", s.brightness.to_string()),
        ("noise_sigma", s.noise_sigma.to_string()),
        ("speckle", s.speckle.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("shift.{k}"), v))
    .collect()
}

pub fn set_shift(s: &mut ShiftConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("shift.") else { return Ok(false) };
    match field {
        "gamma" => s.gamma = parse(key, value)?,
        "contrast" => s.contrast = parse(key, value)?,
        "brightness" => s.brightness = parse(key, value)?,
        "noise_sigma" => s.noise_sigma = parse(key, value)?,
        "speckle" => s.speckle = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(t: &TrainConfig) -> Vec<(String, String)> {
    [
        ("epochs", t.epochs.to_string()),
        ("ae_epochs", t.ae_epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr", t.lr.to_string()),
        ("adapt_lr", t.adapt_lr.to_string()),
        ("lambda_orth", t.lambda_orth.to_string()),
        ("max_adapt_iters", t.max_adapt_iters.to_string()),
        ("improvement", t.improvement.to_string()),
        ("patience", t.patience.to_string()),
        ("power_iters", t.power_iters.to_string()),
        ("image_adaptor", t.image_adaptor.as_str().to_string()),
        ("init_candidates", t.init_candidates.to_string()),
        ("seed", t.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("train.{k}"), v))
    .collect()
}

fn set_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("train.") else { return Ok(false) };
    match field {
        "epochs" => t.epochs = parse(key, value)?,
        "ae_epochs" => t.ae_epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "lr" => t.lr = parse(key, value)?,
        "adapt_lr" => t.adapt_lr = parse(key, value)?,
        "lambda_orth" => t.lambda_orth = parse(key, value)?,
        "max_adapt_iters" => t.max_adapt_iters = parse(key, value)?,
        "improvement" => t.improvement = parse(key, value)?,
        "patience" => t.patience = parse(key, value)?,
        "power_iters" => t.power_iters = parse(key, value)?,
        "image_adaptor" => t.image_adaptor = ImageAdaptorMode::parse(value.trim())?,
        "init_candidates" => t.init_candidates = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_scenario(s: &mut Scenario, key: &str, value: &str) -> Result<bool> {
    let Some(field) = key.strip_prefix("scenario.") else { return Ok(false) };
    match field {
        "train_subjects" => s.train_subjects = parse(key, value)?,
        "val_subjects" => s.val_subjects = parse(key, value)?,
        "source_test_subjects" => s.source_test_subjects = parse(key, value)?,
        "target_subjects" => s.target_subjects = parse(key, value)?,
        "slices_per_subject" => s.slices_per_subject = parse(key, value)?,
        "reference_slice" => s.reference_slice = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Applies `entries` over the standard scenario. The last `task` is
    /// applied first (it selects the defaults), then the last `seed` (phantom
    /// and training seeds), then every other key in order, later values
    /// winning.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let last = |name: &str| entries.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
        let kind = match last("task") {
            Some(v) => TaskKind::parse(v.trim())?,
            None => TaskKind::Segmentation,
        };
        let seed: u64 = match last("seed") {
            Some(v) => parse("seed", v)?,
            None => 0,
        };
        let mut scenario = match kind {
            TaskKind::Segmentation => Scenario::standard_segmentation(seed),
            TaskKind::Synthesis => Scenario::standard_synthesis(seed),
        };
        for (k, v) in entries {
            let known = k == "task"
                || k == "seed"
                || set_scenario(&mut scenario, k, v)?
                || set_phantom(&mut scenario.phantom, k, v)?
                || set_shift(&mut scenario.shift, k, v)?
                || set_train(&mut scenario.train, k, v)?;
            if !known {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        scenario.validate()?;
        Ok(Self { scenario })
    }

    /// Reads `file` (if any), then applies `overrides` on top.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = match file {
            Some(p) => parse_entries(&fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        entries.extend_from_slice(overrides);
        Self::from_entries(&entries)
    }

    pub fn is_key(key: &str) -> bool {
        key == "task" || key == "seed" || Self::default().entries().iter().any(|(k, _)| k == key)
    }

    /// Every effective setting; feeding it back reproduces `self`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.scenario;
        let mut out = vec![("task".to_string(), s.train.kind.as_str().to_string())];
        for (k, v) in [
            ("train_subjects", s.train_subjects),
            ("val_subjects", s.val_subjects),
            ("source_test_subjects", s.source_test_subjects),
            ("target_subjects", s.target_subjects),
            ("slices_per_subject", s.slices_per_subject),
            ("reference_slice", s.reference_slice),
        ] {
            out.push((format!("scenario.{k}"), v.to_string()));
        }
        out.extend(phantom_entries(&s.phantom));
        out.extend(shift_entries(&s.shift));
        out.extend(train_entries(&s.train));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn kind(&self) -> TaskKind {
        match self.scenario.phantom.kind {
            PhantomKind::Segmentation => TaskKind::Segmentation,
            PhantomKind::Synthesis => TaskKind::Synthesis,
        }
    }
}

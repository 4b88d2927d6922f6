//! Dataset and prediction directories.
//!
//! `<root>/<subject-id>/` holds `slice_###.sdat` (f32 `[H, W]`), the ground
//! truth as `label_###.sdat` (u8 `[H, W]`) or `target_###.sdat` (f32
//! `[H, W]`), and `provenance.txt`. Prediction directories use the same
//! ground-truth file names plus `prob_###.sdat` (f32 `[C, H, W]`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{parse_entries, phantom_entries, set_phantom, set_shift, shift_entries};
use super::tensor_file::{encode_u8, read_labels, read_tensor, write_tensor};
use crate::benchmark::{Annotation, Domain, PhantomKind, Provenance, ShiftConfig, SubjectRecord};
use crate::error::{Error, Result};
use crate::pipeline::Prediction;
use crate::tensor::{Labels, Tensor};

pub const PROVENANCE_FILE: &str = "provenance.txt";

fn numbered(dir: &Path, stem: &str, i: usize) -> PathBuf {
    dir.join(format!("{stem}_{i:03}.sdat"))
}

/// Number of consecutive `stem_000.sdat, stem_001.sdat, …` files.
fn count_numbered(dir: &Path, stem: &str) -> usize {
    (0..).take_while(|&i| numbered(dir, stem, i).is_file()).count()
}

fn write_slices(dir: &Path, stem: &str, t: &Tensor<f32>) -> Result<()> {
    let (n, c, h, w) = t.nchw()?;
    for i in 0..n {
        let part = t.slice_batch(i, 1)?;
        let dims = if c == 1 { vec![h, w] } else { vec![c, h, w] };
        write_tensor(&numbered(dir, stem, i), &part.reshape(dims)?)?;
    }
    Ok(())
}

/// Reads `n` single-image tensor files into `[n, C, H, W]`.
fn read_slices(dir: &Path, stem: &str, n: usize) -> Result<Tensor<f32>> {
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let path = numbered(dir, stem, i);
        let t = read_tensor(&path)?;
        let dims = match t.dims() {
            [h, w] => vec![1, 1, *h, *w],
            [c, h, w] => vec![1, *c, *h, *w],
            d => return Err(Error::Format(format!("{} has dims {d:?}, expected [H, W] or [C, H, W]", path.display()))),
        };
        parts.push(t.reshape(dims)?);
    }
    Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
}

fn write_label_maps(dir: &Path, l: &Labels) -> Result<()> {
    let [n, h, w] = l.dims();
    for i in 0..n {
        let mut buf = Vec::new();
        encode_u8(&[h, w], &l.data()[i * h * w..(i + 1) * h * w], &mut buf)?;
        fs::write(numbered(dir, "label", i), buf)?;
    }
    Ok(())
}

fn read_label_maps(dir: &Path, n: usize) -> Result<Labels> {
    let parts = (0..n).map(|i| read_labels(&numbered(dir, "label", i))).collect::<Result<Vec<_>>>()?;
    Labels::stack_batch(&parts.iter().collect::<Vec<_>>())
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
    if ok && id != "." && id != ".." {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("subject id `{id}` is not a plain directory name")))
    }
}

fn provenance_text(rec: &SubjectRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "id={}", rec.id);
    let _ = writeln!(s, "domain={}", rec.domain.as_str());
    let _ = writeln!(s, "slices={}", rec.num_slices());
    if let Some(p) = &rec.provenance {
        let _ = writeln!(s, "kind={}", p.phantom.kind.as_str());
        let _ = writeln!(s, "classes={}", p.phantom.classes());
        let _ = writeln!(s, "seed={}", p.seed);
        for (k, v) in phantom_entries(&p.phantom) {
            let _ = writeln!(s, "{k}={v}");
        }
        if let Some(shift) = &p.shift {
            for (k, v) in shift_entries(shift) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
    }
    s
}

struct ProvenanceFile {
    id: String,
    domain: Domain,
    provenance: Option<Provenance>,
}

fn parse_provenance(text: &str) -> Result<ProvenanceFile> {
    let entries = parse_entries(text)?;
    let get = |k: &str| entries.iter().find(|e| e.0 == k).map(|e| e.1.as_str());
    let id = get("id").ok_or_else(|| Error::Format("provenance lacks `id`".into()))?.to_string();
    let domain = match get("domain") {
        Some("source") | None => Domain::Source,
        Some("target") => Domain::Target,
        Some(d) => return Err(Error::Format(format!("unknown domain `{d}`"))),
    };
    let provenance = match get("kind") {
        None => None,
        Some(kind) => {
            let mut phantom = crate::benchmark::Scenario::standard_segmentation(0).phantom;
            phantom.kind = match kind {
                "segmentation" => PhantomKind::Segmentation,
                "synthesis" => PhantomKind::Synthesis,
                other => return Err(Error::Format(format!("unknown phantom kind `{other}`"))),
            };
            let mut shift: Option<ShiftConfig> = None;
            let mut seed = 0;
            for (k, v) in &entries {
                if k.starts_with("shift.") {
                    set_shift(shift.get_or_insert(ShiftConfig::IDENTITY), k, v)?;
                } else if k == "seed" {
                    seed = v.parse().map_err(|_| Error::Format(format!("invalid seed `{v}`")))?;
                } else if k.starts_with("phantom.") && !set_phantom(&mut phantom, k, v)? {
                    return Err(Error::Format(format!("unknown provenance key `{k}`")));
                }
            }
            Some(Provenance { phantom, shift, seed })
        }
    };
    Ok(ProvenanceFile { id, domain, provenance })
}

/// Writes `rec` to `root/<id>/` and returns that directory.
pub fn write_subject(root: &Path, rec: &SubjectRecord) -> Result<PathBuf> {
    rec.validate()?;
    check_id(&rec.id)?;
    let dir = root.join(&rec.id);
    fs::create_dir_all(&dir)?;
    write_slices(&dir, "slice", &rec.slices)?;
    match &rec.annotation {
        Some(Annotation::Labels(l)) => write_label_maps(&dir, l)?,
        Some(Annotation::Targets(t)) => write_slices(&dir, "target", t)?,
        None => {}
    }
    fs::write(dir.join(PROVENANCE_FILE), provenance_text(rec))?;
    Ok(dir)
}

/// Reads the ground truth stored in `dir`, if any: label maps take
/// precedence over target images.
pub fn read_annotation(dir: &Path, n: usize) -> Result<Option<Annotation>> {
    if count_numbered(dir, "label") > 0 {
        Ok(Some(Annotation::Labels(read_label_maps(dir, n)?)))
    } else if count_numbered(dir, "target") > 0 {
        Ok(Some(Annotation::Targets(read_slices(dir, "target", n)?)))
    } else {
        Ok(None)
    }
}

pub fn read_subject(dir: &Path) -> Result<SubjectRecord> {
    let prov_path = dir.join(PROVENANCE_FILE);
    let text = fs::read_to_string(&prov_path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", prov_path.display())))?;
    let prov = parse_provenance(&text)?;
    let n = count_numbered(dir, "slice");
    if n == 0 {
        return Err(Error::EmptyDataset(format!("no slice_000.sdat in {}", dir.display())));
    }
    let rec = SubjectRecord {
        id: prov.id,
        slices: read_slices(dir, "slice", n)?,
        annotation: read_annotation(dir, n)?,
        domain: prov.domain,
        provenance: prov.provenance,
    };
    rec.validate()?;
    Ok(rec)
}

/// Sorted subdirectories of `root`.
pub fn subject_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::Format(format!("cannot list {}: {e}", root.display())))? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn write_dataset(root: &Path, subjects: &[SubjectRecord]) -> Result<()> {
    fs::create_dir_all(root)?;
    for s in subjects {
        write_subject(root, s)?;
    }
    Ok(())
}

/// Every subject directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SubjectRecord>> {
    let subjects = subject_dirs(root)?.iter().map(|d| read_subject(d)).collect::<Result<Vec<_>>>()?;
    if subjects.is_empty() {
        return Err(Error::EmptyDataset(format!("no subjects under {}", root.display())));
    }
    Ok(subjects)
}

/// Writes `pred` to `root/<id>/`: label maps and class probabilities for
/// segmentation, synthesized images otherwise.
pub fn write_prediction(root: &Path, id: &str, pred: &Prediction) -> Result<PathBuf> {
    check_id(id)?;
    let dir = root.join(id);
    fs::create_dir_all(&dir)?;
    match &pred.labels {
        Some(l) => {
            write_label_maps(&dir, l)?;
            write_slices(&dir, "prob", &pred.outputs)?;
        }
        None => write_slices(&dir, "target", &pred.outputs)?,
    }
    Ok(dir)
}

pub fn read_prediction(dir: &Path) -> Result<Prediction> {
    let n = count_numbered(dir, "label").max(count_numbered(dir, "target"));
    if n == 0 {
        return Err(Error::EmptyDataset(format!("no predictions in {}", dir.display())));
    }
    match read_annotation(dir, n)? {
        Some(Annotation::Labels(labels)) => {
            Ok(Prediction { outputs: read_slices(dir, "prob", n)?, labels: Some(labels) })
        }
        Some(Annotation::Targets(outputs)) => Ok(Prediction { outputs, labels: None }),
        None => unreachable!("n > 0 implies an annotation"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{gen_phantom_dataset, Scenario};

    #[test]
    fn subject_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for s in [Scenario::standard_segmentation(3), Scenario::standard_synthesis(3)] {
            let mut rec = gen_phantom_dataset(&s.phantom, 1, 3, "s").unwrap().remove(0);
            rec = rec.shifted(&s.shift, 9).unwrap();
            write_subject(dir.path(), &rec).unwrap();
            let back = read_subject(&dir.path().join(&rec.id)).unwrap();
            assert_eq!(back, rec);
            fs::remove_dir_all(dir.path().join(&rec.id)).unwrap();
        }
    }

    #[test]
    fn rejects_unsafe_ids_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(check_id("../x").is_err() && check_id("a/b").is_err() && check_id("target-001").is_ok());
        assert!(read_subject(dir.path()).is_err());
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn prediction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = Tensor::from_fn([2, 3, 4, 4], |i| (i % 7) as f32 / 7.0);
        let labels = crate::pipeline::argmax_labels(&outputs).unwrap();
        let p = Prediction { outputs, labels: Some(labels) };
        let d = write_prediction(dir.path(), "s0", &p).unwrap();
        assert_eq!(read_prediction(&d).unwrap(), p);
    }
}

use crate::autodiff::Graph;
use crate::benchmark::SubjectRecord;
use crate::error::{Error, Result};
use crate::nn::{task_forward, AdaptorSet, FeatureBundle, TaskKind, TaskWeights};
use crate::tensor::{Labels, Tensor};

/// Values of a [`FeatureBundle`], detached from any graph.
#[derive(Clone, Debug)]
pub struct BundleValues {
    pub x_adapted: Tensor<f32>,
    pub taps: [Tensor<f32>; 6],
    pub prediction: Tensor<f32>,
}

impl BundleValues {
    pub fn extract(g: &Graph<f32>, b: &FeatureBundle) -> Self {
        Self {
            x_adapted: g.value(b.x_adapted).clone(),
            taps: b.taps.map(|t| g.value(t).clone()),
            prediction: g.value(b.prediction).clone(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[&BundleValues]) -> Result<Self> {
        let cat = |f: &dyn Fn(&BundleValues) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            Tensor::stack_batch(&parts.iter().map(|p| f(p)).collect::<Vec<_>>())
        };
        let mut taps = Vec::with_capacity(6);
        for i in 0..6 {
            taps.push(cat(&|p| &p.taps[i])?);
        }
        Ok(Self {
            x_adapted: cat(&|p| &p.x_adapted)?,
            taps: taps.try_into().expect("six taps"),
            prediction: cat(&|p| &p.prediction)?,
        })
    }

    /// Records the values as constants; `logits` aliases `prediction`.
    pub fn constants(&self, g: &mut Graph<f32>) -> FeatureBundle {
        let prediction = g.constant(self.prediction.clone());
        FeatureBundle {
            x_adapted: g.constant(self.x_adapted.clone()),
            taps: self.taps.clone().map(|t| g.constant(t)),
            logits: prediction,
            prediction,
        }
    }
}

/// Per-slice network outputs for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Class probabilities or synthesized images, `[S, C, H, W]`.
    pub outputs: Tensor<f32>,
    /// Arg-max label map (segmentation only).
    pub labels: Option<Labels>,
}

/// Per-pixel arg-max over channels; the first maximum wins.
pub fn argmax_labels(probs: &Tensor<f32>) -> Result<Labels> {
    let (n, c, h, w) = probs.nchw()?;
    if c > 256 {
        return Err(Error::Shape(format!("{c} classes do not fit a u8 label map")));
    }
    let d = probs.data();
    let hw = h * w;
    let mut out = vec![0u8; n * hw];
    for s in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(s * c + k) * hw + px] > d[(s * c + best) * hw + px] {
                    best = k;
                }
            }
            out[s * hw + px] = best as u8;
        }
    }
    Labels::new([n, h, w], out)
}

/// Forward pass over a slice stack in mini-batches, with the adaptors when
/// given.
pub fn predict_slices(
    slices: &Tensor<f32>,
    task: &TaskWeights<f32>,
    adaptors: Option<&AdaptorSet<f32>>,
    batch_size: usize,
) -> Result<Prediction> {
    let (s, _, _, _) = slices.nchw()?;
    let bs = batch_size.max(1);
    let mut parts = Vec::new();
    for start in (0..s).step_by(bs) {
        let len = bs.min(s - start);
        let mut g = Graph::new();
        let tp = task.bind(&mut g, false);
        let ap = adaptors.map(|a| (a, a.bind(&mut g, false)));
        let x = g.constant(slices.slice_batch(start, len)?);
        let b = task_forward(&mut g, task, &tp, x, ap.as_ref().map(|(a, p)| (*a, p)))?;
        parts.push(g.value(b.prediction).clone());
    }
    let outputs = Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?;
    let labels = match task.config().kind {
        TaskKind::Segmentation => Some(argmax_labels(&outputs)?),
        TaskKind::Synthesis => None,
    };
    Ok(Prediction { outputs, labels })
}

pub fn predict(
    subject: &SubjectRecord,
    task: &TaskWeights<f32>,
    adaptors: Option<&AdaptorSet<f32>>,
    batch_size: usize,
) -> Result<Prediction> {
    subject.validate()?;
    predict_slices(&subject.slices, task, adaptors, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_first_max_wins() {
        let p = Tensor::new([1, 3, 1, 2], vec![0.2, 0.4, 0.4, 0.4, 0.4, 0.2]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap().data(), &[1, 0]);
    }
}

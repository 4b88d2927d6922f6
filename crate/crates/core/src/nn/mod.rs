//! Network architectures: the residual U-Net task network, the
//! auto-encoder bank and the test-time adaptors.
//!
//! Parameters of each weights group live in a [`ParamStore`]; the
//! architecture structs only hold [`ParamId`]s into it. A forward pass binds
//! the store into a [`Graph`] (as trainable leaves or as constants) and
//! walks the layout.

mod adaptor;
mod autoencoder;
mod task;

pub use adaptor::{adaptor_feature_apply, AdaptorSet, ImageAdaptorMode};
pub use autoencoder::{AeBank, AeInputs, AeSlot, Reconstructions};
pub use task::{task_forward, FeatureBundle, TaskConfig, TaskKind, TaskWeights};

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel count of every intermediate task-network feature map.
pub const FEATURE_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one weights group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    /// Replaces every tensor with the same-named entry from `entries`,
    /// checking that each one exists and has the expected dims.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor<f32>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.dims() != t.dims() {
                return Err(Error::ShapeConflict {
                    name: name.clone(),
                    expected: t.dims().to_vec(),
                    found: src.dims().to_vec(),
                });
            }
            *t = src.cast();
        }
        Ok(())
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Routes parameter `id` through `v` instead of its bound leaf.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Kaiming-normal tensor for a conv weight `[cout, cin, k, k]`, fan-in mode
/// with the leaky-ReLU gain.
pub fn kaiming_normal<T: Real>(dims: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = dims[1] * dims[2] * dims[3];
    let std = kaiming_std(fan_in);
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(dims.to_vec(), |_| T::of(normal.sample(rng)))
}

pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

/// Stride-1 convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_normal([cout, cin, k, k], rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, k }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), (self.k - 1) / 2)
    }
}

/// conv3×3 → IN → leaky ReLU → conv3×3 → IN, plus the (projected) input,
/// then leaky ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub proj: Option<ConvLayer>,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let conv1 = ConvLayer::new(store, &format!("{name}.conv1"), cin, cout, 3, rng);
        let conv2 = ConvLayer::new(store, &format!("{name}.conv2"), cout, cout, 3, rng);
        let proj = (cin != cout).then(|| ConvLayer::new(store, &format!("{name}.proj"), cin, cout, 1, rng));
        Self { conv1, conv2, proj }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let h = self.conv1.forward(g, p, x)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv2.forward(g, p, h)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(g, p, x)?,
            None => x,
        };
        let s = g.add(h, skip)?;
        g.leaky_relu(s, slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_std_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = kaiming_normal([64, 64, 3, 3], &mut rng);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / (576.0 * (1.0 + 1e-4))).sqrt();
        assert!((sd / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn load_reports_offending_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        ConvLayer::new(&mut a, "head", 64, 4, 1, &mut rng);
        let mut b = ParamStore::<f32>::new();
        ConvLayer::new(&mut b, "head", 64, 5, 1, &mut rng);
        let entries: Vec<(String, Tensor<f32>)> = a.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let err = b.load_from(|n| entries.iter().find(|e| e.0 == n).map(|e| &e.1)).unwrap_err();
        match err {
            Error::ShapeConflict { name, .. } => assert_eq!(name, "head.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

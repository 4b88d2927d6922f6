use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ConvLayer, ParamId, ParamStore, FEATURE_CHANNELS};
use crate::autodiff::{Graph, Var, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Structure of the image adaptor `A^x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageAdaptorMode {
    /// Three 1×1 layers: a per-pixel intensity map.
    Pointwise,
    /// First layer 3×3, the other two 1×1.
    FirstKernel3x3,
    /// No parameters; outputs the standardized input exactly as the
    /// unadapted task network would see it.
    PassThrough,
}

impl ImageAdaptorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageAdaptorMode::Pointwise => "pointwise",
            ImageAdaptorMode::FirstKernel3x3 => "first3x3",
            ImageAdaptorMode::PassThrough => "passthrough",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pointwise" | "1x1" => Ok(Self::Pointwise),
            "first3x3" | "3x3" => Ok(Self::FirstKernel3x3),
            "passthrough" => Ok(Self::PassThrough),
            other => Err(Error::Config(format!("unknown image adaptor mode `{other}`"))),
        }
    }
}

/// Test-time trainable parameters: the image adaptor and the three 64×64
/// feature adaptor matrices.
#[derive(Clone, Debug)]
pub struct AdaptorSet<T: Real = f32> {
    mode: ImageAdaptorMode,
    store: ParamStore<T>,
    image: Option<[ConvLayer; 3]>,
    features: [ParamId; 3],
}

/// Output channels of the three image adaptor layers.
const IMAGE_CHANNELS: [usize; 3] = [64, 64, 1];

impl<T: Real> AdaptorSet<T> {
    /// Kaiming-normal image adaptor (zero biases), identity feature adaptors.
    /// With the same seed, the 3×3 variant computes the same function as the
    /// pointwise one at init; its off-centre taps start at zero.
    pub fn init(seed: u64, mode: ImageAdaptorMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = match mode {
            ImageAdaptorMode::PassThrough => None,
            _ => {
                let [c0, c1, c2] = IMAGE_CHANNELS;
                let mut l0 = ConvLayer::new(&mut store, "adaptor.image.l0", 1, c0, 1, &mut rng);
                if mode == ImageAdaptorMode::FirstKernel3x3 {
                    // the 1×1 draw sits at the centre tap so both variants start from the same map
                    let w = store.get_mut(l0.w);
                    *w = Tensor::from_fn([c0, 1, 3, 3], |i| if i % 9 == 4 { w.data()[i / 9] } else { T::zero() });
                    l0.k = 3;
                }
                Some([
                    l0,
                    ConvLayer::new(&mut store, "adaptor.image.l1", c0, c1, 1, &mut rng),
                    ConvLayer::new(&mut store, "adaptor.image.l2", c1, c2, 1, &mut rng),
                ])
            }
        };
        let features = [1, 2, 3].map(|i| store.add(format!("adaptor.feature{i}"), Tensor::eye(FEATURE_CHANNELS)));
        Self { mode, store, image, features }
    }

    /// Pass-through image adaptor and identity feature adaptors: the
    /// adapted forward pass reproduces the unadapted one bit for bit.
    pub fn identity() -> Self {
        Self::init(0, ImageAdaptorMode::PassThrough)
    }

    pub fn mode(&self) -> ImageAdaptorMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }

    pub fn cast<U: Real>(&self) -> AdaptorSet<U> {
        AdaptorSet { mode: self.mode, store: self.store.cast(), image: self.image, features: self.features }
    }

    /// `W_{A^i}` for level `i ∈ {0, 1, 2}`.
    pub fn feature_matrix(&self, level: usize) -> &Tensor<T> {
        self.store.get(self.features[level])
    }

    pub fn feature_matrix_mut(&mut self, level: usize) -> &mut Tensor<T> {
        self.store.get_mut(self.features[level])
    }

    pub fn feature_ids(&self) -> [ParamId; 3] {
        self.features
    }

    /// Conv weights of the image adaptor layers, when present.
    pub fn image_weight(&self, layer: usize) -> Option<&Tensor<T>> {
        self.image.map(|l| self.store.get(l[layer].w))
    }

    pub fn image_forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let Some(layers) = &self.image else {
            return g.instance_norm(x, NORM_EPS);
        };
        let slope = T::of(LEAKY_SLOPE);
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            // the single output channel is zero-mean at init; rectifying it
            // would flatten the lower half of the intensity range
            if i + 1 < layers.len() {
                h = g.leaky_relu(h, slope)?;
            }
            h = g.instance_norm(h, NORM_EPS)?;
        }
        Ok(h)
    }

    pub fn feature_forward(&self, g: &mut Graph<T>, p: &Bound, level: usize, f: Var) -> Result<Var> {
        adaptor_feature_apply(g, p[self.features[level]], f)
    }
}

/// Maps every pixel's 64-vector of `f` through the 64×64 matrix `w`
/// (a bias-free 1×1 convolution).
pub fn adaptor_feature_apply<T: Real>(g: &mut Graph<T>, w: Var, f: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(f).nchw()?;
    if c != FEATURE_CHANNELS {
        return Err(Error::Shape(format!("feature adaptor expects {FEATURE_CHANNELS} channels, got {c}")));
    }
    if g.value(w).dims() != [FEATURE_CHANNELS, FEATURE_CHANNELS] {
        return Err(Error::Shape(format!("feature adaptor matrix has dims {:?}", g.value(w).dims())));
    }
    let kernel = g.reshape(w, &[FEATURE_CHANNELS, FEATURE_CHANNELS, 1, 1])?;
    g.conv2d(f, kernel, None, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_identity_on_features() {
        let a = AdaptorSet::<f32>::init(5, ImageAdaptorMode::Pointwise);
        let b = AdaptorSet::<f32>::init(5, ImageAdaptorMode::Pointwise);
        assert!(a.store().bit_eq(b.store()));
        for i in 0..3 {
            assert!(a.feature_matrix(i).bit_eq(&Tensor::eye(64)));
        }
        assert_eq!(a.image_weight(0).unwrap().dims(), &[64, 1, 1, 1]);
        let c = AdaptorSet::<f32>::init(5, ImageAdaptorMode::FirstKernel3x3);
        assert_eq!(c.image_weight(0).unwrap().dims(), &[64, 1, 3, 3]);
        assert_eq!(c.image_weight(1).unwrap().dims(), &[64, 64, 1, 1]);
        assert_eq!(c.image_weight(2).unwrap().dims(), &[1, 64, 1, 1]);
        let (p0, c0) = (a.image_weight(0).unwrap().data(), c.image_weight(0).unwrap().data());
        for (i, v) in c0.iter().enumerate() {
            assert_eq!(*v, if i % 9 == 4 { p0[i / 9] } else { 0.0 });
        }
        assert!(a.image_weight(1).unwrap().bit_eq(c.image_weight(1).unwrap()));
    }

    #[test]
    fn feature_apply_rejects_wrong_channels() {
        let mut g = Graph::<f32>::new();
        let w = g.constant(Tensor::eye(64));
        let f = g.constant(Tensor::zeros([1, 32, 2, 2]));
        assert!(matches!(adaptor_feature_apply(&mut g, w, f), Err(Error::Shape(_))));
    }
}

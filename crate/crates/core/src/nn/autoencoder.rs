use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ConvLayer, FeatureBundle, ParamStore, ResBlock, FEATURE_CHANNELS};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// The five auto-encoders, in loss-report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeSlot {
    Image,
    Level1,
    Level2,
    Level3,
    Output,
}

impl AeSlot {
    pub const ALL: [AeSlot; 5] = [AeSlot::Image, AeSlot::Level1, AeSlot::Level2, AeSlot::Level3, AeSlot::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AeSlot::Image => "x",
            AeSlot::Level1 => "1",
            AeSlot::Level2 => "2",
            AeSlot::Level3 => "3",
            AeSlot::Output => "y",
        }
    }
}

/// Fully convolutional AE with two poolings and no long skips.
#[derive(Clone, Debug)]
struct AeLayout {
    in_channels: usize,
    /// Encoder blocks at full, 1/2 and 1/4 of the AE's input resolution.
    enc: [ResBlock; 3],
    /// Decoder blocks at 1/2 and full resolution.
    dec: [ResBlock; 2],
    head: ConvLayer,
}

impl AeLayout {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        chans: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let [c1, c2, c3] = chans;
        let enc = [
            ResBlock::new(store, &format!("{name}.enc0"), in_channels, c1, rng),
            ResBlock::new(store, &format!("{name}.enc1"), c1, c2, rng),
            ResBlock::new(store, &format!("{name}.enc2"), c2, c3, rng),
        ];
        let dec = [
            ResBlock::new(store, &format!("{name}.dec1"), c3, c2, rng),
            ResBlock::new(store, &format!("{name}.dec0"), c2, c1, rng),
        ];
        let head = ConvLayer::new(store, &format!("{name}.head"), c1, in_channels, 1, rng);
        Self { in_channels, enc, dec, head }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).nchw()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("auto-encoder expects {} channels, got {}", self.in_channels, c)));
        }
        if h % 4 != 0 || w % 4 != 0 || (h / 4) * (w / 4) < 2 {
            return Err(Error::Shape(format!("auto-encoder input {h}×{w} must be divisible by 4 with ≥2 bottleneck pixels")));
        }
        let e0 = self.enc[0].forward(g, p, x)?;
        let d = g.maxpool2x2(e0)?;
        let e1 = self.enc[1].forward(g, p, d)?;
        let d = g.maxpool2x2(e1)?;
        let e2 = self.enc[2].forward(g, p, d)?;
        let u = g.upsample_nearest2x(e2)?;
        let d1 = self.dec[0].forward(g, p, u)?;
        let u = g.upsample_nearest2x(d1)?;
        let d0 = self.dec[1].forward(g, p, u)?;
        self.head.forward(g, p, d0)
    }
}

/// AE inputs (targets) and their reconstructions, indexed by [`AeSlot`].
#[derive(Clone, Copy, Debug)]
pub struct Reconstructions {
    pub inputs: [Var; 5],
    pub outputs: [Var; 5],
}

/// Builds the five AE inputs from a bundle: x', {f¹,f⁶}, {f²,f⁵}, {f³,f⁴}, y'.
#[derive(Clone, Copy, Debug)]
pub struct AeInputs;

impl AeInputs {
    pub fn collect<T: Real>(g: &mut Graph<T>, bundle: &FeatureBundle) -> Result<[Var; 5]> {
        let t = bundle.taps;
        let mut levels = [bundle.x_adapted; 3];
        for (i, slot) in levels.iter_mut().enumerate() {
            let (a, b) = (t[i], t[5 - i]);
            if g.value(a).dims()[2..] != g.value(b).dims()[2..] {
                return Err(Error::Shape(format!(
                    "taps f{} {:?} and f{} {:?} differ in resolution",
                    i + 1,
                    g.value(a).dims(),
                    6 - i,
                    g.value(b).dims()
                )));
            }
            *slot = g.concat_channels(a, b)?;
        }
        Ok([bundle.x_adapted, levels[0], levels[1], levels[2], bundle.prediction])
    }
}

/// Parameters of {AE^x, AE^1, AE^2, AE^3, AE^y}.
#[derive(Clone, Debug)]
pub struct AeBank<T: Real = f32> {
    output_channels: usize,
    store: ParamStore<T>,
    aes: Vec<AeLayout>,
    identity: [bool; 5],
}

impl<T: Real> AeBank<T> {
    /// `output_channels` is the channel count of the task prediction y'.
    pub fn new(output_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = FEATURE_CHANNELS;
        let aes = vec![
            AeLayout::new(&mut store, "ae.x", 1, [32, 16, 8], &mut rng),
            AeLayout::new(&mut store, "ae.1", 2 * c, [64, 32, 16], &mut rng),
            AeLayout::new(&mut store, "ae.2", 2 * c, [64, 32, 16], &mut rng),
            AeLayout::new(&mut store, "ae.3", 2 * c, [64, 32, 16], &mut rng),
            AeLayout::new(&mut store, "ae.y", output_channels, [32, 16, 8], &mut rng),
        ];
        Self { output_channels, store, aes, identity: [false; 5] }
    }

    pub fn output_channels(&self) -> usize {
        self.output_channels
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

    pub fn cast<U: Real>(&self) -> AeBank<U> {
        AeBank {
            output_channels: self.output_channels,
            store: self.store.cast(),
            aes: self.aes.clone(),
            identity: self.identity,
        }
    }

    /// Test hook: make one AE return its input unchanged.
    pub fn set_identity(&mut self, slot: AeSlot, on: bool) {
        self.identity[slot.index()] = on;
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, bundle: &FeatureBundle) -> Result<Reconstructions> {
        let inputs = AeInputs::collect(g, bundle)?;
        let mut outputs = inputs;
        for slot in AeSlot::ALL {
            let i = slot.index();
            if !self.identity[i] {
                outputs[i] = self.aes[i].forward(g, p, inputs[i])?;
            }
        }
        Ok(Reconstructions { inputs, outputs })
    }

    /// Forward of a single AE on an explicit input.
    pub fn forward_slot(&self, g: &mut Graph<T>, p: &Bound, slot: AeSlot, x: Var) -> Result<Var> {
        if self.identity[slot.index()] {
            return Ok(x);
        }
        self.aes[slot.index()].forward(g, p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{task_forward, TaskConfig, TaskWeights};
    use crate::tensor::Tensor;

    #[test]
    fn reconstructions_keep_input_shapes() {
        let net = TaskWeights::<f32>::new(TaskConfig::segmentation(3), 1);
        let bank = AeBank::<f32>::new(3, 2);
        let mut g = Graph::new();
        let tp = net.bind(&mut g, false);
        let bp = bank.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn([1, 1, 64, 32], |i| (i % 5) as f32 * 0.2));
        let b = task_forward(&mut g, &net, &tp, x, None).unwrap();
        let r = bank.forward(&mut g, &bp, &b).unwrap();
        for i in 0..5 {
            assert_eq!(g.value(r.inputs[i]).dims(), g.value(r.outputs[i]).dims());
        }
        assert_eq!(g.value(r.inputs[1]).dims(), &[1, 128, 32, 16]);
        assert_eq!(g.value(r.inputs[3]).dims(), &[1, 128, 8, 4]);
    }

    #[test]
    fn rejects_bad_spatial_extent() {
        let bank = AeBank::<f32>::new(2, 0);
        let mut g = Graph::new();
        let bp = bank.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 1, 6, 8]));
        assert!(bank.forward_slot(&mut g, &bp, AeSlot::Image, x).is_err());
        let tiny = g.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(bank.forward_slot(&mut g, &bp, AeSlot::Image, tiny).is_err());
    }
}

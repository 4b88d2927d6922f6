use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdaptorSet, Bound, ConvLayer, ParamStore, ResBlock, FEATURE_CHANNELS};
use crate::autodiff::{Graph, Var, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Segmentation,
    Synthesis,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::Synthesis => "synthesis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            "synthesis" | "syn" => Ok(TaskKind::Synthesis),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Class count for segmentation, 1 for synthesis.
    pub out_channels: usize,
}

impl TaskConfig {
    pub fn segmentation(classes: usize) -> Self {
        Self { kind: TaskKind::Segmentation, out_channels: classes }
    }

    pub fn synthesis() -> Self {
        Self { kind: TaskKind::Synthesis, out_channels: 1 }
    }
}

#[derive(Clone, Debug)]
struct TaskLayout {
    /// Full, 1/2, 1/4 and 1/8 resolution.
    enc: [ResBlock; 4],
    /// 1/8, 1/4 and 1/2 resolution.
    dec: [ResBlock; 3],
    /// Convolutions after each nearest-neighbour upsampling (to 1/4, 1/2, full).
    up: [ConvLayer; 3],
    head: ConvLayer,
}

/// Parameters of the residual U-Net task network.
#[derive(Clone, Debug)]
pub struct TaskWeights<T: Real = f32> {
    config: TaskConfig,
    layout: TaskLayout,
    store: ParamStore<T>,
}

impl<T: Real> TaskWeights<T> {
    pub fn new(config: TaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = FEATURE_CHANNELS;
        let enc = [
            ResBlock::new(&mut store, "task.enc0", 1, c, &mut rng),
            ResBlock::new(&mut store, "task.enc1", c, c, &mut rng),
            ResBlock::new(&mut store, "task.enc2", c, c, &mut rng),
            ResBlock::new(&mut store, "task.enc3", c, c, &mut rng),
        ];
        let dec = [
            ResBlock::new(&mut store, "task.dec3", c, c, &mut rng),
            ResBlock::new(&mut store, "task.dec2", 2 * c, c, &mut rng),
            ResBlock::new(&mut store, "task.dec1", 2 * c, c, &mut rng),
        ];
        let up = [
            ConvLayer::new(&mut store, "task.up2", c, c, 3, &mut rng),
            ConvLayer::new(&mut store, "task.up1", c, c, 3, &mut rng),
            ConvLayer::new(&mut store, "task.up0", c, c, 3, &mut rng),
        ];
        let head = ConvLayer::new(&mut store, "task.head", 2 * c, config.out_channels, 1, &mut rng);
        Self { config, layout: TaskLayout { enc, dec, up, head }, store }
    }

    pub fn config(&self) -> TaskConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Real>(&self) -> TaskWeights<U> {
        TaskWeights { config: self.config, layout: self.layout.clone(), store: self.store.cast() }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.store.bind(g, trainable)
    }
}

/// One forward pass's taps.
///
/// `taps[0..3]` are the encoder features f¹..f³ at 1/2, 1/4 and 1/8
/// resolution (after the feature adaptors, when present); `taps[3..6]` are
/// the decoder features f⁴..f⁶ at 1/8, 1/4 and 1/2 resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub x_adapted: Var,
    pub taps: [Var; 6],
    /// Raw head output (pre-softmax for segmentation).
    pub logits: Var,
    /// Class probabilities (segmentation) or the synthesized image.
    pub prediction: Var,
}

/// Runs the task network on `x` (`[N, 1, H, W]`, H and W divisible by 8).
///
/// Without adaptors the network sees the per-slice standardized image;
/// with adaptors it sees `A^x(x)` and every encoder tap fⁱ is replaced by
/// `A^i(fⁱ)` before it flows further.
pub fn task_forward<T: Real>(
    g: &mut Graph<T>,
    net: &TaskWeights<T>,
    p: &Bound,
    x: Var,
    adaptors: Option<(&AdaptorSet<T>, &Bound)>,
) -> Result<FeatureBundle> {
    let (_, c, h, w) = g.value(x).nchw()?;
    if c != 1 {
        return Err(Error::Shape(format!("task network expects 1 input channel, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}×{w} is not divisible by 8")));
    }
    let slope = T::of(LEAKY_SLOPE);
    let l = &net.layout;
    let x_adapted = match adaptors {
        Some((a, ap)) => a.image_forward(g, ap, x)?,
        None => g.instance_norm(x, NORM_EPS)?,
    };
    let adapt = |g: &mut Graph<T>, level: usize, f: Var| -> Result<Var> {
        match adaptors {
            Some((a, ap)) => a.feature_forward(g, ap, level, f),
            None => Ok(f),
        }
    };

    let e0 = l.enc[0].forward(g, p, x_adapted)?;
    let mut skips = [e0; 3];
    let mut cur = e0;
    for level in 0..3 {
        let pooled = g.maxpool2x2(cur)?;
        let f = l.enc[level + 1].forward(g, p, pooled)?;
        cur = adapt(g, level, f)?;
        skips[level] = cur;
    }
    let [f1, f2, f3] = skips;

    let f4 = l.dec[0].forward(g, p, f3)?;
    let up = upsample_conv(g, p, &l.up[0], f4, slope)?;
    let cat = g.concat_channels(up, f2)?;
    let f5 = l.dec[1].forward(g, p, cat)?;
    let up = upsample_conv(g, p, &l.up[1], f5, slope)?;
    let cat = g.concat_channels(up, f1)?;
    let f6 = l.dec[2].forward(g, p, cat)?;
    let up = upsample_conv(g, p, &l.up[2], f6, slope)?;
    let cat = g.concat_channels(up, e0)?;
    let logits = l.head.forward(g, p, cat)?;
    let prediction = match net.config.kind {
        TaskKind::Segmentation => g.softmax_channels(logits)?,
        TaskKind::Synthesis => logits,
    };
    Ok(FeatureBundle { x_adapted, taps: [f1, f2, f3, f4, f5, f6], logits, prediction })
}

fn upsample_conv<T: Real>(g: &mut Graph<T>, p: &Bound, conv: &ConvLayer, x: Var, slope: T) -> Result<Var> {
    let u = g.upsample_nearest2x(x)?;
    let u = conv.forward(g, p, u)?;
    g.leaky_relu(u, slope)
}

//! Finite-difference checks of every differentiable operation and of the
//! composed network blocks, in both precisions.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{default_step, directional_check, directional_check_against, grad_check_coords, Graph, Var, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};
use crate::losses::{adaptation_loss, srip_orth_loss};
use crate::nn::{
    adaptor_feature_apply, task_forward, AdaptorSet, AeBank, AeSlot, ImageAdaptorMode, ParamStore, ResBlock,
    TaskConfig, TaskWeights,
};
use crate::tensor::{Labels, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }

    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => default_step::<f32>(),
            Precision::F64 => default_step::<f64>(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    /// `coords` or `direction`.
    pub method: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub duration: Duration,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.passed)
    }

    pub fn max_error(&self, p: Precision) -> f64 {
        self.results.iter().filter(|r| r.precision == p).map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<44} {:<4} {:<15} {:>7} {:>12} {}\n", "check", "prec", "method", "coords", "max rel err", "ok");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<44} {:<4} {:<15} {:>7} {:>12.3e} {}",
                r.name,
                r.precision.as_str(),
                r.method,
                r.coords,
                r.max_rel_err,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        for p in [Precision::F32, Precision::F64] {
            if self.results.iter().any(|r| r.precision == p) {
                let _ = writeln!(s, "max {} error {:.3e} (tolerance {:.0e})", p.as_str(), self.max_error(p), p.tolerance());
            }
        }
        let _ = writeln!(s, "duration {:.1}s", self.duration.as_secs_f64());
        s
    }
}

type ScalarFn<T> = Box<dyn Fn(&mut Graph<T>, Var) -> Result<Var>>;

/// How many coordinates a check perturbs one at a time.
#[derive(Clone, Copy)]
enum Coverage {
    All,
    /// A seeded random subset plus two random directions.
    Sampled(usize),
}

struct Case<T: Real> {
    name: String,
    x: Tensor<T>,
    f: ScalarFn<T>,
    coverage: Coverage,
}

fn randn<T: Real>(dims: &[usize], scale: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::of(scale * v)
    })
}

/// Random values bounded away from zero, for kinked operations.
fn away_from_zero<T: Real>(dims: &[usize], seed: u64) -> Tensor<T> {
    randn::<T>(dims, 1.0, seed).map(|v| {
        let f = v.as_f64();
        T::of(f.signum() * (f.abs() + 0.2))
    })
}

/// Scalar `mean((y − r)²)` against a fixed random `r`, so every output
/// coordinate carries a generic weight.
fn reduce<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(randn(g.value(y).dims(), 1.0, seed));
    g.mse(y, r)
}

fn case<T: Real>(name: &str, x: Tensor<T>, coverage: Coverage, f: impl Fn(&mut Graph<T>, Var) -> Result<Var> + 'static) -> Case<T> {
    Case { name: name.to_string(), x, f: Box::new(f), coverage }
}

fn op_cases<T: Real>() -> Vec<Case<T>> {
    let all = Coverage::All;
    let mut v = Vec::new();
    let (x, w, b) = (randn::<T>(&[2, 3, 5, 5], 1.0, 1), randn::<T>(&[4, 3, 3, 3], 0.5, 2), randn::<T>(&[4], 0.5, 3));
    {
        let (w, b) = (w.clone(), b.clone());
        v.push(case("conv2d 3x3 / input", x.clone(), all, move |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            reduce(g, y, 10)
        }));
    }
    {
        let (x, b) = (x.clone(), b.clone());
        v.push(case("conv2d 3x3 / weight", w.clone(), all, move |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            reduce(g, y, 10)
        }));
    }
    {
        let (x, w) = (x.clone(), w.clone());
        v.push(case("conv2d 3x3 / bias", b, all, move |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 1)?;
            reduce(g, y, 10)
        }));
    }
    {
        let w1 = randn::<T>(&[2, 3, 1, 1], 0.5, 4);
        v.push(case("conv2d 1x1 unpadded / input", x.clone(), all, move |g, xv| {
            let wv = g.constant(w1.clone());
            let y = g.conv2d(xv, wv, None, 0)?;
            reduce(g, y, 11)
        }));
    }
    v.push(case("maxpool2x2", randn(&[1, 2, 4, 6], 1.0, 5), all, |g, x| {
        let y = g.maxpool2x2(x)?;
        reduce(g, y, 12)
    }));
    v.push(case("upsample_nearest2x", randn(&[1, 2, 3, 3], 1.0, 6), all, |g, x| {
        let y = g.upsample_nearest2x(x)?;
        reduce(g, y, 13)
    }));
    v.push(case("leaky_relu", away_from_zero(&[1, 2, 3, 3], 7), all, |g, x| {
        let y = g.leaky_relu(x, T::of(LEAKY_SLOPE))?;
        reduce(g, y, 14)
    }));
    v.push(case("instance_norm", randn(&[2, 2, 4, 4], 1.0, 8), all, |g, x| {
        let y = g.instance_norm(x, NORM_EPS)?;
        reduce(g, y, 15)
    }));
    {
        let other = randn::<T>(&[1, 3, 3, 3], 1.0, 9);
        v.push(case("concat_channels", randn(&[1, 2, 3, 3], 1.0, 16), all, move |g, x| {
            let o = g.constant(other.clone());
            let y = g.concat_channels(o, x)?;
            reduce(g, y, 17)
        }));
    }
    v.push(case("slice_channels", randn(&[1, 4, 3, 3], 1.0, 18), all, |g, x| {
        let y = g.slice_channels(x, 1, 2)?;
        reduce(g, y, 19)
    }));
    v.push(case("softmax_channels", randn(&[1, 4, 3, 3], 1.0, 20), all, |g, x| {
        let y = g.softmax_channels(x)?;
        reduce(g, y, 21)
    }));
    {
        let labels = Labels::new([1, 3, 3], (0..9).map(|i| (i * 7 % 4) as u8).collect()).expect("label dims");
        v.push(case("cross_entropy", randn(&[1, 4, 3, 3], 1.0, 22), all, move |g, x| g.cross_entropy(x, &labels)));
    }
    {
        let other = randn::<T>(&[1, 2, 3, 3], 1.0, 23);
        v.push(case("mse", randn(&[1, 2, 3, 3], 1.0, 24), all, move |g, x| {
            let o = g.constant(other.clone());
            g.mse(o, x)
        }));
    }
    {
        let other = randn::<T>(&[2, 3], 1.0, 25);
        let o2 = other.clone();
        v.push(case("add", randn(&[2, 3], 1.0, 26), all, move |g, x| {
            let o = g.constant(other.clone());
            let y = g.add(x, o)?;
            reduce(g, y, 27)
        }));
        v.push(case("sub", randn(&[2, 3], 1.0, 28), all, move |g, x| {
            let o = g.constant(o2.clone());
            let y = g.sub(o, x)?;
            reduce(g, y, 29)
        }));
    }
    v.push(case("scale", randn(&[2, 3], 1.0, 30), all, |g, x| {
        let y = g.scale(x, T::of(-1.7));
        reduce(g, y, 31)
    }));
    v.push(case("sum", randn(&[2, 3], 1.0, 32), all, |g, x| {
        let s = g.sum(x);
        let t = g.scale(s, T::of(0.3));
        let y = g.reshape(t, &[1])?;
        reduce(g, y, 33)
    }));
    v.push(case("mean", randn(&[2, 3], 1.0, 34), all, |g, x| {
        let m = g.mean(x);
        reduce(g, m, 35)
    }));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let da: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let db: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let other_b = randn::<T>(db, 1.0, 36);
        let other_a = randn::<T>(da, 1.0, 37);
        v.push(case(&format!("matmul ta={ta} tb={tb} / left"), other_a.clone(), all, move |g, a| {
            let b = g.constant(other_b.clone());
            let y = g.matmul(a, b, ta, tb)?;
            reduce(g, y, 38)
        }));
        v.push(case(&format!("matmul ta={ta} tb={tb} / right"), randn(db, 1.0, 39), all, move |g, b| {
            let a = g.constant(other_a.clone());
            let y = g.matmul(a, b, ta, tb)?;
            reduce(g, y, 38)
        }));
    }
    v.push(case("reshape", randn(&[2, 6], 1.0, 40), all, |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        reduce(g, y, 41)
    }));
    v.push(case("norm2", randn(&[3, 4], 1.0, 42), all, |g, x| {
        let n = g.norm2(x);
        let y = g.reshape(n, &[1])?;
        reduce(g, y, 43)
    }));
    v
}

/// Parameter `name` of `store`, or an error naming it.
fn param_id<T: Real>(store: &ParamStore<T>, name: &str) -> Result<crate::nn::ParamId> {
    store.ids().find(|&id| store.name(id) == name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn block_cases<T: Real>() -> Vec<Case<T>> {
    let sampled = Coverage::Sampled(6);
    let mut v = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut store = ParamStore::<T>::new();
    let block = ResBlock::new(&mut store, "block", 3, 4, &mut rng);
    {
        let store = store.clone();
        v.push(case("residual block / input", randn(&[1, 3, 8, 8], 1.0, 51), sampled, move |g, x| {
            let p = store.bind(g, false);
            let y = block.forward(g, &p, x)?;
            reduce(g, y, 52)
        }));
    }
    {
        let id = param_id(&store, "block.conv1.w").expect("block weight");
        let w = store.get(id).clone();
        v.push(case("residual block / conv1 weight", w, sampled, move |g, w| {
            let mut p = store.bind(g, false);
            p.replace(id, w);
            let x = g.constant(randn(&[1, 3, 8, 8], 1.0, 51));
            let y = block.forward(g, &p, x)?;
            reduce(g, y, 52)
        }));
    }

    let net = TaskWeights::<T>::new(TaskConfig::segmentation(3), 53);
    let labels = Labels::new([1, 16, 16], (0..256).map(|i| ((i / 16) * 3 / 16) as u8).collect()).expect("label dims");
    {
        let (net, labels) = (net.clone(), labels.clone());
        v.push(case("task network / input", randn(&[1, 1, 16, 16], 1.0, 54), sampled, move |g, x| {
            let p = net.bind(g, false);
            let b = task_forward(g, &net, &p, x, None)?;
            g.cross_entropy(b.logits, &labels)
        }));
    }
    for name in ["task.enc2.conv1.w", "task.head.w"] {
        let id = param_id(net.store(), name).expect("task weight");
        let (net, labels) = (net.clone(), labels.clone());
        let w = net.store().get(id).clone();
        v.push(case(&format!("task network / {name}"), w, sampled, move |g, w| {
            let mut p = net.bind(g, false);
            p.replace(id, w);
            let x = g.constant(randn(&[1, 1, 16, 16], 1.0, 54));
            let b = task_forward(g, &net, &p, x, None)?;
            g.cross_entropy(b.logits, &labels)
        }));
    }
    {
        let syn = TaskWeights::<T>::new(TaskConfig::synthesis(), 55);
        v.push(case("task network synthesis / input", randn(&[1, 1, 16, 16], 1.0, 56), sampled, move |g, x| {
            let p = syn.bind(g, false);
            let b = task_forward(g, &syn, &p, x, None)?;
            reduce(g, b.prediction, 57)
        }));
    }

    let bank = AeBank::<T>::new(3, 58);
    {
        let bank = bank.clone();
        v.push(case("auto-encoder / input", randn(&[1, 1, 16, 16], 1.0, 59), sampled, move |g, x| {
            let p = bank.bind(g, false);
            let y = bank.forward_slot(g, &p, AeSlot::Image, x)?;
            g.mse(y, x)
        }));
    }
    {
        let id = param_id(bank.store(), "ae.x.enc1.conv2.w").expect("ae weight");
        let bank = bank.clone();
        let w = bank.store().get(id).clone();
        v.push(case("auto-encoder / ae.x.enc1.conv2.w", w, sampled, move |g, w| {
            let mut p = bank.bind(g, false);
            p.replace(id, w);
            let x = g.constant(randn(&[1, 1, 16, 16], 1.0, 59));
            let y = bank.forward_slot(g, &p, AeSlot::Image, x)?;
            g.mse(y, x)
        }));
    }

    for mode in [ImageAdaptorMode::Pointwise, ImageAdaptorMode::FirstKernel3x3] {
        let mut a = AdaptorSet::<T>::init(60, mode);
        // a generic point: the 3×3 init has zero off-centre taps, which
        // makes every first-layer channel collinear
        let l0 = param_id(a.store(), "adaptor.image.l0.w").expect("adaptor weight");
        let dims = a.store().get(l0).dims().to_vec();
        *a.store_mut().get_mut(l0) = randn(&dims, 1.0, 67);
        let x = nonnegative_image::<T>(&[1, 1, 8, 8], 61);
        {
            let a = a.clone();
            v.push(case(&format!("image adaptor {} / input", mode.as_str()), x.clone(), sampled, move |g, x| {
                let p = a.bind(g, false);
                let y = a.image_forward(g, &p, x)?;
                reduce(g, y, 62)
            }));
        }
        let id = param_id(a.store(), "adaptor.image.l0.w").expect("adaptor weight");
        let w = a.store().get(id).clone();
        v.push(case(&format!("image adaptor {} / l0 weight", mode.as_str()), w, sampled, move |g, w| {
            let mut p = a.bind(g, false);
            p.replace(id, w);
            let xv = g.constant(x.clone());
            let y = a.image_forward(g, &p, xv)?;
            reduce(g, y, 62)
        }));
    }

    let f = randn::<T>(&[1, 64, 2, 3], 1.0, 63);
    let w = perturbed_identity::<T>(64, 0.05, 64);
    {
        let f = f.clone();
        v.push(case("feature adaptor / matrix", w.clone(), sampled, move |g, w| {
            let fv = g.constant(f.clone());
            let y = adaptor_feature_apply(g, w, fv)?;
            reduce(g, y, 65)
        }));
    }
    v.push(case("feature adaptor / features", f, sampled, move |g, f| {
        let wv = g.constant(w.clone());
        let y = adaptor_feature_apply(g, wv, f)?;
        reduce(g, y, 65)
    }));

    // converged power vector: the estimate is stationary in v, so the
    // constant-v gradient is the full derivative
    v.push(case("orthogonality loss", perturbed_identity(64, 0.1, 66), sampled, |g, w| {
        srip_orth_loss(g, &[w], 2000, 7)
    }));

    v.extend(adaptation_cases());
    v
}

/// Intensities in [0.1, 1], clear of the kink every channel of the first
/// adaptor layer has at x = 0.
fn nonnegative_image<T: Real>(dims: &[usize], seed: u64) -> Tensor<T> {
    randn::<T>(dims, 0.3, seed).map(|v| T::of((0.1 + v.as_f64().abs()).min(1.0)))
}

fn perturbed_identity<T: Real>(n: usize, scale: f64, seed: u64) -> Tensor<T> {
    let noise = randn::<T>(&[n, n], scale / (n as f64).sqrt(), seed);
    Tensor::from_fn([n, n], |i| T::of(noise.data()[i].as_f64() + if i / n == i % n { 1.0 } else { 0.0 }))
}

/// L_A with respect to every adaptor tensor, through the full task network
/// and auto-encoder bank.
fn adaptation_cases<T: Real>() -> Vec<Case<T>> {
    let net = TaskWeights::<T>::new(TaskConfig::segmentation(3), 70);
    let bank = AeBank::<T>::new(3, 71);
    let mut adaptors = AdaptorSet::<T>::init(72, ImageAdaptorMode::Pointwise);
    // away from W = I, where σ(WᵀW − I) has a kink at zero
    for level in 0..3 {
        *adaptors.feature_matrix_mut(level) = perturbed_identity(64, 0.1, 73 + level as u64);
    }
    // non-zero biases, so first-layer channels are not sign-constant
    let ids: Vec<_> = adaptors.store().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if adaptors.store().name(id).ends_with(".b") {
            let dims = adaptors.store().get(id).dims().to_vec();
            *adaptors.store_mut().get_mut(id) = randn(&dims, 0.3, 80 + k as u64);
        }
    }
    let x = nonnegative_image::<T>(&[1, 1, 64, 32], 76);
    let mut v = Vec::new();
    for id in adaptors.store().ids() {
        let name = format!("adaptation loss / {}", adaptors.store().name(id));
        let (net, bank, adaptors, x) = (net.clone(), bank.clone(), adaptors.clone(), x.clone());
        let value = adaptors.store().get(id).clone();
        v.push(case(&name, value, Coverage::Sampled(2), move |g, w| {
            let tp = net.bind(g, false);
            let bp = bank.bind(g, false);
            let mut ap = adaptors.bind(g, false);
            ap.replace(id, w);
            let xv = g.constant(x.clone());
            let bundle = task_forward(g, &net, &tp, xv, Some((&adaptors, &ap)))?;
            Ok(adaptation_loss(g, &bundle, &bank, &bp, &adaptors, &ap, 1.0, 2000)?.total)
        }));
    }
    v
}

/// Runs `cases`. When `reference` holds the same cases built in 64-bit,
/// sampled cases take their difference quotients there: through deep
/// 32-bit blocks any step large enough to beat forward rounding also
/// crosses activation kinks.
fn run_cases<T: Real>(
    precision: Precision,
    cases: Vec<Case<T>>,
    reference: Option<Vec<Case<f64>>>,
    out: &mut Vec<CheckResult>,
) -> Result<()> {
    let h = precision.step();
    let tol = precision.tolerance();
    let mut reference = reference.map(|r| r.into_iter());
    for (k, c) in cases.into_iter().enumerate() {
        let r = reference.as_mut().and_then(|it| it.next());
        let n = c.x.numel();
        let mut push = |method: &'static str, coords: usize, err: f64| {
            log::debug!("{} [{}] {method}: {err:.3e}", c.name, precision.as_str());
            out.push(CheckResult { name: c.name.clone(), precision, method, coords, max_rel_err: err, passed: err < tol });
        };
        match c.coverage {
            Coverage::All => {
                let coords: Vec<usize> = (0..n).collect();
                let r = grad_check_coords(&c.f, &c.x, h, &coords)?;
                push("coords", r.coords, r.max_rel_err);
            }
            Coverage::Sampled(m) => {
                if precision == Precision::F64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
                    let coords = sample(&mut rng, n, m.min(n)).into_vec();
                    let r = grad_check_coords(&c.f, &c.x, h, &coords)?;
                    push("coords", r.coords, r.max_rel_err);
                }
                let mut worst: f64 = 0.0;
                for d in 0..2u64 {
                    let dir = randn::<T>(c.x.dims(), 1.0, 2000 + 10 * k as u64 + d);
                    let report = match &r {
                        Some(r) => {
                            if r.name != c.name {
                                return Err(Error::InvalidArgument(format!("reference case {} for {}", r.name, c.name)));
                            }
                            let step = Precision::F64.step();
                            directional_check_against(&c.f, &c.x, &r.f, &c.x.cast::<f64>(), step, &dir)?
                        }
                        None => directional_check(&c.f, &c.x, h, &dir)?,
                    };
                    worst = worst.max(report.max_rel_err);
                }
                push(if r.is_some() { "direction-ref64" } else { "direction" }, n, worst);
            }
        }
    }
    Ok(())
}

/// Runs the suite in the requested precisions.
pub fn run_suite(precisions: &[Precision]) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut results = Vec::new();
    for &p in precisions {
        match p {
            Precision::F32 => {
                run_cases(p, op_cases::<f32>(), None, &mut results)?;
                run_cases(p, block_cases::<f32>(), Some(block_cases::<f64>()), &mut results)?;
            }
            Precision::F64 => {
                let mut cases = op_cases::<f64>();
                cases.extend(block_cases::<f64>());
                run_cases(p, cases, None, &mut results)?;
            }
        }
    }
    Ok(SuiteReport { results, duration: start.elapsed() })
}

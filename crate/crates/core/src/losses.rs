//! The test-time objective: auto-encoder reconstruction error plus the
//! SRIP orthogonality penalty on the feature adaptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AdaptorSet, AeBank, Bound, FeatureBundle, Reconstructions};
use crate::tensor::{Real, Tensor};

/// Default power-iteration count of the orthogonality penalty.
pub const DEFAULT_POWER_ITERS: usize = 2;

/// Seed of the power-iteration start vectors.
pub const DEFAULT_ORTH_SEED: u64 = 0x5eed;

/// Per-iteration loss breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// AE terms in slot order: image, levels 1–3, output.
    pub l_ae_terms: [f64; 5],
    pub l_ae: f64,
    pub l_orth: f64,
    pub lambda_orth: f64,
    pub l_a: f64,
}

impl LossReport {
    /// Elementwise mean of several reports (all sharing one `lambda_orth`).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport { lambda_orth: reports.first().map_or(0.0, |r| r.lambda_orth), ..Default::default() };
        for r in reports {
            for (o, t) in out.l_ae_terms.iter_mut().zip(r.l_ae_terms) {
                *o += t / n;
            }
            out.l_ae += r.l_ae / n;
            out.l_orth += r.l_orth / n;
            out.l_a += r.l_a / n;
        }
        out
    }
}

/// Scalar L_AE and its five per-AE terms.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionLoss {
    pub total: Var,
    pub terms: [Var; 5],
}

/// Mean squared error between each AE's input and its reconstruction,
/// summed over the five auto-encoders.
pub fn reconstruction_terms<T: Real>(g: &mut Graph<T>, r: &Reconstructions) -> Result<ReconstructionLoss> {
    let mut terms = [r.inputs[0]; 5];
    for (i, t) in terms.iter_mut().enumerate() {
        *t = g.mse(r.outputs[i], r.inputs[i])?;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(ReconstructionLoss { total, terms })
}

pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    bank: &AeBank<T>,
    bank_params: &Bound,
    bundle: &FeatureBundle,
) -> Result<ReconstructionLoss> {
    let r = bank.forward(g, bank_params, bundle)?;
    reconstruction_terms(g, &r)
}

/// Power-iteration vector for the spectral norm of `WᵀW − I`, computed on
/// values only.
pub fn power_iteration_vector(w: &Tensor<impl Real>, iters: usize, seed: u64) -> Result<Vec<f64>> {
    let n = square_extent(w)?;
    let mut v = seeded_unit_vector(n, seed);
    power_iterate(w, &mut v, iters)?;
    Ok(v)
}

fn seeded_unit_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// Runs `iters` power iterations of `WᵀW − I` starting from `v`, in place.
fn power_iterate(w: &Tensor<impl Real>, v: &mut Vec<f64>, iters: usize) -> Result<()> {
    let n = square_extent(w)?;
    if v.len() != n {
        return Err(Error::InvalidArgument(format!("power vector has length {}, matrix is {n}×{n}", v.len())));
    }
    let wd: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    // M = WᵀW − I, symmetric
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += wd[k * n + i] * wd[k * n + j];
            }
            m[i * n + j] = s - if i == j { 1.0 } else { 0.0 };
        }
    }
    for _ in 0..iters {
        let mut next: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect();
        // M = 0 leaves any unit vector as a valid maximizer
        if normalize(&mut next) {
            *v = next;
        }
    }
    Ok(())
}

/// Power-iteration vectors carried across optimizer steps, one per matrix.
/// Each call continues iterating from where the previous one stopped, so a
/// small per-step iteration count still converges to the top direction.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerVectors {
    vectors: Vec<Vec<f64>>,
}

impl PowerVectors {
    /// The same start vectors a fresh `srip_orth_loss(.., seed)` call uses.
    pub fn seeded(count: usize, dim: usize, seed: u64) -> Self {
        Self { vectors: (0..count).map(|i| seeded_unit_vector(dim, seed.wrapping_add(i as u64))).collect() }
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

fn square_extent<T: Real>(w: &Tensor<T>) -> Result<usize> {
    match w.dims() {
        [a, b] if a == b => Ok(*a),
        d => Err(Error::InvalidArgument(format!("orthogonality penalty needs square matrices, got {:?}", d))),
    }
}

/// Σ σ(WᵢᵀWᵢ − I) with σ estimated as ‖(WᵀW − I)v‖ for a power-iterated
/// unit vector v. Gradients flow through the final matrix products only;
/// v is a constant.
pub fn srip_orth_loss<T: Real>(g: &mut Graph<T>, ws: &[Var], power_iters: usize, seed: u64) -> Result<Var> {
    let n = match ws.first() {
        Some(&w) => square_extent(g.value(w))?,
        None => 0,
    };
    let mut pv = PowerVectors::seeded(ws.len(), n, seed);
    srip_orth_loss_warm(g, ws, power_iters, &mut pv)
}

/// [`srip_orth_loss`] continuing from, and updating, `state`.
pub fn srip_orth_loss_warm<T: Real>(
    g: &mut Graph<T>,
    ws: &[Var],
    power_iters: usize,
    state: &mut PowerVectors,
) -> Result<Var> {
    if power_iters == 0 {
        return Err(Error::InvalidArgument("power iteration count must be ≥ 1".into()));
    }
    if state.vectors.len() != ws.len() {
        return Err(Error::InvalidArgument(format!(
            "{} power vectors for {} matrices",
            state.vectors.len(),
            ws.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&w, v) in ws.iter().zip(state.vectors.iter_mut()) {
        let n = square_extent(g.value(w))?;
        power_iterate(g.value(w), v, power_iters)?;
        let wtw = g.matmul(w, w, true, false)?;
        let eye = g.constant(Tensor::eye(n));
        let m = g.sub(wtw, eye)?;
        let vv = g.constant(Tensor::new([n, 1], v.iter().map(|&x| T::of(x)).collect())?);
        let mv = g.matmul(m, vv, false, false)?;
        let s = g.norm2(mv);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Estimated σ(WᵀW − I) of one matrix, without a graph.
pub fn orth_deviation<T: Real>(w: &Tensor<T>, power_iters: usize, seed: u64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let wv = g.constant(w.cast());
    let s = srip_orth_loss(&mut g, &[wv], power_iters, seed)?;
    Ok(g.value(s).data()[0])
}

/// L_A = L_AE + λ·L_orth and its report.
#[derive(Clone, Copy, Debug)]
pub struct AdaptationLoss {
    pub total: Var,
    pub l_ae: Var,
    pub l_orth: Var,
    pub report: LossReport,
}

#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &FeatureBundle,
    bank: &AeBank<T>,
    bank_params: &Bound,
    adaptors: &AdaptorSet<T>,
    adaptor_params: &Bound,
    lambda_orth: f64,
    power_iters: usize,
) -> Result<AdaptationLoss> {
    let mut pv = PowerVectors::seeded(3, crate::nn::FEATURE_CHANNELS, DEFAULT_ORTH_SEED);
    adaptation_loss_warm(g, bundle, bank, bank_params, adaptors, adaptor_params, lambda_orth, power_iters, &mut pv)
}

/// [`adaptation_loss`] with power-iteration vectors carried in `power`.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_loss_warm<T: Real>(
    g: &mut Graph<T>,
    bundle: &FeatureBundle,
    bank: &AeBank<T>,
    bank_params: &Bound,
    adaptors: &AdaptorSet<T>,
    adaptor_params: &Bound,
    lambda_orth: f64,
    power_iters: usize,
    power: &mut PowerVectors,
) -> Result<AdaptationLoss> {
    if !(lambda_orth >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ_orth must be ≥ 0, got {lambda_orth}")));
    }
    let rec = reconstruction_loss(g, bank, bank_params, bundle)?;
    let ws = adaptors.feature_ids().map(|id| adaptor_params[id]);
    let l_orth = srip_orth_loss_warm(g, &ws, power_iters, power)?;
    let weighted = g.scale(l_orth, T::of(lambda_orth));
    let total = g.add(rec.total, weighted)?;
    let mut report = LossReport { lambda_orth, ..Default::default() };
    for (o, t) in report.l_ae_terms.iter_mut().zip(rec.terms) {
        *o = g.value(t).data()[0].as_f64();
    }
    report.l_ae = g.value(rec.total).data()[0].as_f64();
    report.l_orth = g.value(l_orth).data()[0].as_f64();
    report.l_a = g.value(total).data()[0].as_f64();
    Ok(AdaptationLoss { total, l_ae: rec.total, l_orth, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(w: Tensor<f64>, iters: usize) -> f64 {
        let mut g = Graph::new();
        let v = g.param(w);
        let l = srip_orth_loss(&mut g, &[v], iters, 1).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn identity_is_zero_and_scaled_identity_is_exact() {
        assert_eq!(loss_of(Tensor::eye(64), 2), 0.0);
        let two_i = Tensor::eye(64).map(|v| 2.0 * v);
        assert!((loss_of(two_i, 2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_identity_penalty_is_monotone() {
        let vals: Vec<f64> = [0.5, 1.0, 1.5, 2.0]
            .iter()
            .map(|&c| loss_of(Tensor::eye(8).map(|v| v * c), 2))
            .collect();
        for (v, c) in vals.iter().zip([0.5f64, 1.0, 1.5, 2.0]) {
            assert!((v - (c * c - 1.0).abs()).abs() < 1e-12);
        }
        // |c²−1| = 0.75, 0, 1.25, 3
        assert!(vals[1] < vals[0] && vals[0] < vals[2] && vals[2] < vals[3]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut g = Graph::<f64>::new();
        let v = g.param(Tensor::zeros([3, 4]));
        assert!(matches!(srip_orth_loss(&mut g, &[v], 2, 0), Err(Error::InvalidArgument(_))));
        let sq = g.param(Tensor::eye(3));
        assert!(matches!(srip_orth_loss(&mut g, &[sq], 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn report_mean() {
        let a = LossReport { l_ae_terms: [1.0; 5], l_ae: 5.0, l_orth: 1.0, lambda_orth: 2.0, l_a: 7.0 };
        let b = LossReport { l_ae_terms: [3.0; 5], l_ae: 15.0, l_orth: 0.0, lambda_orth: 2.0, l_a: 15.0 };
        let m = LossReport::mean(&[a, b]);
        assert_eq!(m.l_ae, 10.0);
        assert_eq!(m.l_a, 11.0);
        assert_eq!(m.l_ae_terms, [2.0; 5]);
    }
}

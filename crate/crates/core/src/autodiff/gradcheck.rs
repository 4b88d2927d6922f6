use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::graph::{Graph, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(|a|, |n|, s)`, where
    /// `s` is the gradient's scale (see [`GRAD_SCALE_FLOOR`]).
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

/// Default perturbation for the element type: 1e-2 in 32-bit, 1e-6 in 64-bit.
/// Smaller 32-bit steps let rounding in the forward pass dominate the
/// difference quotient.
pub fn default_step<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-2
    } else {
        1e-6
    }
}

fn eval_scalar<T: Real, F>(f: &F, x: &Tensor<T>, requires_grad: bool) -> Result<(Graph<T>, Var, Var)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), requires_grad);
    let out = f(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar function, got dims {:?}",
            g.value(out).dims()
        )));
    }
    Ok((g, xv, out))
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h` on every coordinate.
pub fn grad_check<T: Real, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &all)
}

fn analytic_gradient<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let (g, xv, out) = eval_scalar(f, x, true)?;
    match g.backward(out) {
        Ok(grads) => Ok(grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims().to_vec()))),
        // f does not depend on x at all
        Err(Error::Detached) => Ok(Tensor::zeros(x.dims().to_vec())),
        Err(e) => Err(e),
    }
}

fn value_at<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(eval_with_branches(f, x)?.0)
}

fn eval_with_branches<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let (g, _, out) = eval_scalar(f, x, false)?;
    Ok((g.value(out).data()[0].as_f64(), g.branch_signature()))
}

/// Times the step is divided by [`STEP_SHRINK`] when a perturbed input
/// leaves the smooth piece containing `x`.
const MAX_SHRINKS: usize = 4;
const STEP_SHRINK: f64 = 8.0;

/// Difference quotient with stencil `offsets`/`weights` (in units of the
/// step), shrinking the step while any stencil point takes a different
/// piecewise branch than `x` does.
fn stencil_derivative<T: Real, F>(
    f: &F,
    perturb: impl Fn(f64) -> Tensor<T>,
    h: f64,
    base_branches: u64,
    stencil: &[(f64, f64)],
) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut step = h;
    let mut last = 0.0;
    for attempt in 0..=MAX_SHRINKS {
        let mut acc = 0.0;
        let mut same_piece = true;
        let mut span = 0.0;
        for &(offset, weight) in stencil {
            let (v, b) = eval_with_branches(f, &perturb(offset * step))?;
            acc += weight * v;
            same_piece &= b == base_branches;
            span += weight * offset;
        }
        last = acc / (span * step);
        if same_piece || attempt == MAX_SHRINKS {
            break;
        }
        step /= STEP_SHRINK;
    }
    Ok(last)
}

/// Relative lower bound of the scale `s` in the relative error:
/// `s = max(‖∇f‖, GRAD_SCALE_FLOOR · max(1, |f(x)|))`, with ‖∇f‖∞ for
/// coordinate checks and ‖∇f‖₂ for a unit direction. Errors are thus
/// measured against the size of the whole gradient, and never below the
/// rounding floor set by the function's own magnitude; near-zero
/// coordinates and structurally zero gradients (a bias feeding an instance
/// norm) are not judged against their own noise.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

fn rel_err(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(scale)
}

fn floor_of(f0: f64) -> f64 {
    GRAD_SCALE_FLOOR * f0.abs().max(1.0)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<T: Real, F>(f: F, x: &Tensor<T>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::InvalidArgument(format!("coordinate {bad} out of range for {} values", x.numel())));
    }
    let analytic = analytic_gradient(&f, x)?;
    let scale = analytic.data().iter().map(|v| v.as_f64().abs()).fold(floor_of(value_at(&f, x)?), f64::max);
    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, coords: coords.len() };
    let base = eval_with_branches(&f, x)?.1;
    for (k, &i) in coords.iter().enumerate() {
        let perturb = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] = T::of(x.data()[i].as_f64() + d);
            xp
        };
        let numeric = stencil_derivative(&f, perturb, h, base, &[(1.0, 0.5), (-1.0, -0.5)])?;
        let a = analytic.data()[i].as_f64();
        let err = rel_err(a, numeric, scale);
        if err > report.max_rel_err || k == 0 {
            report = GradCheckReport { max_rel_err: err, worst_index: i, analytic: a, numeric, coords: coords.len() };
        }
    }
    Ok(report)
}

/// Compares `⟨∇f(x), d⟩` for a unit direction `d` with the fourth-order
/// central difference `(−f₊₂ + 8f₊₁ − 8f₋₁ + f₋₂) / 12h`. Every coordinate
/// contributes, which keeps the quotient well above rounding noise on
/// large inputs.
pub fn directional_check<T: Real, F>(f: F, x: &Tensor<T>, h: f64, direction: &Tensor<T>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    directional_check_against(&f, x, &f, x, h, direction)
}

/// [`directional_check`] with the difference quotient taken on `reference`
/// at `reference_x`, which must compute the same function as `f` at `x`,
/// possibly in another precision. Checks a 32-bit backward pass through
/// deep blocks, where 32-bit forward rounding swamps any usable step.
pub fn directional_check_against<T: Real, U: Real, F, G>(
    f: &F,
    x: &Tensor<T>,
    reference: &G,
    reference_x: &Tensor<U>,
    h: f64,
    direction: &Tensor<T>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
    G: Fn(&mut Graph<U>, Var) -> Result<Var>,
{
    if direction.dims() != x.dims() || reference_x.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "direction {:?} and reference point {:?} must match input {:?}",
            direction.dims(),
            reference_x.dims(),
            x.dims()
        )));
    }
    let norm = direction.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument("direction must be non-zero and finite".into()));
    }
    let d: Vec<f64> = direction.data().iter().map(|v| v.as_f64() / norm).collect();
    let analytic = analytic_gradient(f, x)?;
    let a: f64 = analytic.data().iter().zip(&d).map(|(g, d)| g.as_f64() * d).sum();
    let scale = analytic.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt().max(floor_of(value_at(f, x)?));
    let shifted =
        |s: f64| Tensor::from_fn(x.dims().to_vec(), |i| U::of(reference_x.data()[i].as_f64() + s * d[i]));
    let base = eval_with_branches(reference, reference_x)?.1;
    let stencil = [(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)];
    let numeric = stencil_derivative(reference, shifted, h, base, &stencil)?;
    Ok(GradCheckReport { max_rel_err: rel_err(a, numeric, scale), worst_index: 0, analytic: a, numeric, coords: x.numel() })
}

//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-7, 1e-3]`.
    pub step: f64,
    /// Pass threshold on the worst relative error.
    pub tolerance: f64,
    /// Denominator floor so coordinates with near-zero gradients are compared
    /// in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose stencil was shortened or made one-sided to stay off
    /// a kink.
    pub refined: usize,
    /// Coordinates left unchecked because a kink sits closer than the
    /// smallest step.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Smallest step tried before a coordinate is given up as sitting on a kink.
const MIN_STEP: f64 = 1e-9;

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<u64>), TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.scalar();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference evaluation".into()));
    }
    Ok((v, tape.branch_pattern()))
}

/// Difference quotient at coordinate `(i, j)` that stays on the branch of
/// the unperturbed point: central when both neighbours share its branch
/// pattern, second-order one-sided when only one side does, otherwise with a
/// shorter step. Returns `(estimate, refined)`, or `None` when no step down
/// to `MIN_STEP` avoids the kink.
fn stencil<F>(
    f: &F,
    work: &mut [Tensor],
    i: usize,
    j: usize,
    h0: f64,
    f0: f64,
    base: &[u64],
) -> Result<Option<(f64, bool)>, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let orig = work[i].data()[j];
    let at = |work: &mut [Tensor], d: f64| {
        work[i].data_mut()[j] = orig + d;
        let r = eval(f, work);
        work[i].data_mut()[j] = orig;
        r
    };
    let mut h = h0;
    while h >= MIN_STEP {
        let (fp, sp) = at(work, h)?;
        let (fm, sm) = at(work, -h)?;
        let (p_ok, m_ok) = (sp == base, sm == base);
        if p_ok && m_ok {
            return Ok(Some(((fp - fm) / (2.0 * h), h != h0)));
        }
        if p_ok {
            let (fpp, spp) = at(work, 2.0 * h)?;
            if spp == base {
                return Ok(Some(((-3.0 * f0 + 4.0 * fp - fpp) / (2.0 * h), true)));
            }
        } else if m_ok {
            let (fmm, smm) = at(work, -2.0 * h)?;
            if smm == base {
                return Ok(Some(((3.0 * f0 - 4.0 * fm + fmm) / (2.0 * h), true)));
            }
        }
        h /= 4.0;
    }
    Ok(None)
}

/// Compares the reverse-mode gradient of scalar `f` against central
/// differences at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_coords(f, inputs, &coords, opts)
}

/// As [`grad_check`], restricted to the listed coordinates of each input.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[Vec<usize>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(TensorError::Argument {
            op: "grad_check",
            msg: format!("step {} outside [1e-7, 1e-3]", opts.step),
        });
    }
    let (f0, base) = eval(&f, inputs)?;
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.shape() != [1, 1] {
            return Err(TensorError::Argument {
                op: "grad_check",
                msg: format!("function output has shape {:?}, expected [1, 1]", out.shape()),
            });
        }
        if !out.scalar().is_finite() {
            return Err(TensorError::NonFinite("gradient-check forward pass".into()));
        }
        let grads = tape.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("reverse-mode gradient".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        refined: 0,
        skipped: 0,
        tolerance: opts.tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let h = opts.step;
    for (i, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let Some((numeric, refined)) = stencil(&f, &mut work, i, j, h, f0, &base)? else {
                report.skipped += 1;
                continue;
            };
            report.refined += usize::from(refined);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, opts.floor);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |_, x| x[0].mul(x[0]),
            &[Tensor::scalar(3.0)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn stencil_stays_off_the_kink() {
        // Kink at 1e-6 from the point: a plain central difference with
        // step 1e-5 straddles it.
        let r = grad_check(
            |_, x| Ok(x[0].add_scalar(-1e-6).leaky_relu(0.01)?.scale(3.0).sum_all()),
            &[Tensor::scalar(0.0)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert!((r.analytic - 0.03).abs() < 1e-15);
        assert_eq!(r.refined, 1);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn step_range_enforced() {
        let opts = GradCheckOptions {
            step: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(|_, x| Ok(x[0].sum_all()), &[Tensor::scalar(1.0)], opts).is_err());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let err = grad_check(|_, x| Ok(x[0]), &[Tensor::zeros(2, 2)], GradCheckOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_reported() {
        let err = grad_check(
            |tape, x| {
                let inf = tape.constant(Tensor::scalar(f64::INFINITY));
                Ok(x[0].add(inf)?.sum_all())
            },
            &[Tensor::scalar(1.0)],
            GradCheckOptions::default(),
        );
        assert!(matches!(err, Err(TensorError::NonFinite(_))));
    }
}

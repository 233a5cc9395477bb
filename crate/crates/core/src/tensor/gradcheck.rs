use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst `|fd - grad| / (|grad| + 1e-8)` over coordinates.
    pub max_rel_error: f64,
    /// `max |fd - grad| / (max |grad| + 1e-8)`: error relative to the
    /// gradient scale of the whole tensor.
    pub norm_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` with the
/// five-point central stencil of step `eps`, whose O(eps^4) truncation error
/// allows steps large enough to keep roundoff small. The error per
/// coordinate is
/// `|fd - grad| / (|grad| + 1e-8)`; the maximum is returned.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarRoot(tape.shape(out).to_vec()));
        }
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let xv = tape.param(x);
    let root = f(&mut tape, xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(xv, x.len());

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            eval(&probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let err = (fd - analytic[i]).abs() / (analytic[i].abs() + 1e-8);
        if err > worst {
            worst = err;
            worst_index = i;
        }
        numeric.push(fd);
    }
    let abs_err = numeric.iter().zip(&analytic).fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    Ok(GradCheck {
        max_rel_error: worst,
        norm_rel_error: abs_err / (scale + 1e-8),
        worst_index,
        analytic,
        numeric,
    })
}

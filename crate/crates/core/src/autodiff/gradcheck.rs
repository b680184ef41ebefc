use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates with `|x_i|` below this are skipped (the point sits on a
    /// relu/abs kink where finite differences are meaningless).
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            kink_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` occurred.
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h`. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(
        f,
        x,
        GradCheckOptions {
            step: h,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let h = opts.step;
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    let analytic = tape.backward(loss)?.wrt(&tape, leaf);

    let eval = |point: Tensor, coordinate: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(point);
        let out = f(&mut t, v)?;
        let value = t.value(out).item();
        if !value.is_finite() {
            return Err(Error::Numeric {
                coordinate,
                detail: format!("objective evaluated to {value}"),
            });
        }
        Ok(value)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        skipped: 0,
    };
    let base = x.data();
    for i in 0..base.len() {
        if opts.kink_tolerance.is_some_and(|tol| base[i].abs() < tol) {
            report.skipped += 1;
            continue;
        }
        let mut plus = base.to_vec();
        plus[i] += h;
        let mut minus = base.to_vec();
        minus[i] -= h;
        let fp = eval(Tensor::from_vec(x.shape(), plus)?, i)?;
        let fm = eval(Tensor::from_vec(x.shape(), minus)?, i)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}

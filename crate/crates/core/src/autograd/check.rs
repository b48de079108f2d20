use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing the tape gradient with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` where the largest error occurred.
    pub worst: (usize, usize),
}

/// Compares analytic gradients of the scalar `f` at `points` against
/// `(f(x + eps) - f(x - eps)) / 2 eps`, one coordinate at a time.
///
/// The error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    let mut shifted = points.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; points[input].len()]);
        for coord in 0..points[input].len() {
            let orig = points[input].data()[coord];
            shifted[input].data_mut()[coord] = orig + eps;
            let up = eval(&shifted)?;
            shifted[input].data_mut()[coord] = orig - eps;
            let down = eval(&shifted)?;
            shifted[input].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[coord];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::GradCheck {
                    input,
                    coord,
                    analytic: a,
                    numeric,
                });
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > report.max_rel_error {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (input, coord),
                };
            }
        }
    }
    Ok(report)
}

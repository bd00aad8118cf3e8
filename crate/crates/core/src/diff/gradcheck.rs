use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates [`gradient_check_many`] probes.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// At most this many evenly strided coordinates per input tensor.
    Strided(usize),
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns `max |a − b| / max(1, |a|, |b|)` over all coordinates.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(
        |t, vars| f(t, vars[0]),
        std::slice::from_ref(point),
        step,
        CoordSelection::All,
    )
}

/// Multi-input variant of [`gradient_check`].
pub fn gradient_check_many<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    coords: CoordSelection,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric {
                stage: "gradient_check",
                detail: format!("function value {v} at probe point"),
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut probe = points.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, point) in points.iter().enumerate() {
        let n = point.numel();
        let picks: Vec<usize> = match coords {
            CoordSelection::All => (0..n).collect(),
            CoordSelection::Strided(k) if k >= n => (0..n).collect(),
            CoordSelection::Strided(k) => (0..k).map(|i| i * n / k).collect(),
        };
        for i in picks {
            let x0 = point.data()[i];
            probe[ti].data_mut()[i] = x0 + step;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[i] = x0 - step;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti].data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

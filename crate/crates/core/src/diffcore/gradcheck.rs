use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over smooth coordinates of `|analytic − numeric| / (|numeric| + 1e-8)`.
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates where one-sided slopes disagree by more than curvature explains.
    pub non_smooth: Vec<usize>,
}

impl GradCheckReport {
    pub fn is_smooth(&self) -> bool {
        self.non_smooth.is_empty()
    }
}

const REL_FLOOR: f64 = 1e-8;
/// One-sided slopes of a smooth function differ by about `eps·|f''|`; a kink
/// produces an O(1) jump. Flag anything above `KINK_FACTOR·eps·(1 + |f(x)|)`.
const KINK_FACTOR: f64 = 1e3;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let fp = f(&probe);
            probe[i] = orig - eps;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Sixth-order central-difference gradient (seven-point stencil),
/// `(45(f₁ − f₋₁) − 9(f₂ − f₋₂) + (f₃ − f₋₃)) / 60h` with `fₖ = f(x + kh)`.
///
/// Truncation error is O(h⁶), so `h` can be large enough that rounding in `f`
/// stays well below the 1e-8 floor of [`max_relative_error`] even for
/// coordinates whose true gradient is near zero.
pub fn numeric_gradient_high_order(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut diff = |k: f64| {
                probe[i] = orig + k * h;
                let p = f(&probe);
                probe[i] = orig - k * h;
                p - f(&probe)
            };
            let (d1, d2, d3) = (diff(1.0), diff(2.0), diff(3.0));
            probe[i] = orig;
            (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h)
        })
        .collect()
}

/// Max of `|a − n| / (|n| + 1e-8)` and the index where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + REL_FLOOR))
        .enumerate()
        .fold(
            (0.0, 0),
            |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) },
        )
}

/// Checks the tape gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh tape and a leaf holding the input; it must return a
/// `1 × 1` node. Coordinates where `f` has a kink within `eps` are reported in
/// `non_smooth` and left out of `max_rel_err`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, leaf)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic = grads
        .wrt(leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |data: &[f64]| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(x.rows(), x.cols(), data.to_vec())?, false);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut probe = x.data().to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut non_smooth = Vec::new();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(&probe)?;
        probe[i] = orig - eps;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        if (fwd - bwd).abs() > KINK_FACTOR * eps * (1.0 + f0.abs()) {
            non_smooth.push(i);
        }
        numeric.push((fp - fm) / (2.0 * eps));
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..x.len() {
        if non_smooth.contains(&i) {
            continue;
        }
        let e = (analytic[i] - numeric[i]).abs() / (numeric[i].abs() + REL_FLOOR);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        non_smooth,
    })
}

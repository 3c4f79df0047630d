//! Legendre polynomials on an affinely rescaled argument and least-squares
//! projection onto their span.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest polynomial order supported by [`legendre_eval`].
pub const MAX_ORDER: usize = 8;

/// Coefficients of a Legendre expansion evaluated at `(delta + shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub coefficients: Vec<f64>,
    pub shift: f64,
    pub scale: f64,
}

impl BasisSpec {
    pub fn new(coefficients: Vec<f64>, shift: f64, scale: f64) -> Result<Self> {
        let spec = Self {
            coefficients,
            shift,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All-zero expansion of the given order.
    pub fn zero(order: usize) -> Self {
        Self {
            coefficients: vec![0.0; order + 1],
            shift: 0.0,
            scale: 1.0,
        }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.is_empty() {
            return Err(Error::Config("basis needs at least one coefficient".into()));
        }
        if self.order() > MAX_ORDER {
            return Err(Error::Config(format!(
                "basis order {} exceeds {MAX_ORDER}",
                self.order()
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "basis scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.shift.is_finite() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("basis has non-finite entries".into()));
        }
        Ok(())
    }

    /// Rescaled argument `(delta + shift) / scale`.
    #[inline]
    pub fn argument(&self, delta: f64) -> f64 {
        (delta + self.shift) / self.scale
    }

    #[inline]
    pub fn eval(&self, delta: f64) -> f64 {
        basis_expansion(self, delta)
    }
}

/// `L_order(x)` by the three-term recurrence. Arguments outside `[-1, 1]`
/// are evaluated as-is.
pub fn legendre_eval(order: usize, x: f64) -> f64 {
    debug_assert!(order <= MAX_ORDER);
    match order {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for i in 1..order {
                let fi = i as f64;
                let next = ((2.0 * fi + 1.0) * x * cur - fi * prev) / (fi + 1.0);
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Fills `out[i] = L_i(x)` for `i < out.len()`.
pub fn legendre_all(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for i in 1..out.len().saturating_sub(1) {
        let fi = i as f64;
        out[i + 1] = ((2.0 * fi + 1.0) * x * out[i] - fi * out[i - 1]) / (fi + 1.0);
    }
}

/// `sum_i c_i L_i((delta + shift) / scale)`.
pub fn basis_expansion(spec: &BasisSpec, delta: f64) -> f64 {
    let x = spec.argument(delta);
    let mut values = [0.0; MAX_ORDER + 1];
    let n = spec.coefficients.len();
    legendre_all(x, &mut values[..n]);
    spec.coefficients
        .iter()
        .zip(&values[..n])
        .map(|(c, l)| c * l)
        .sum()
}

/// Least-squares fit of `y` on the Legendre basis of the given order.
///
/// Normal equations are solved by Cholesky; when the Gram matrix has a
/// condition estimate above 1e12 the design matrix is refactored with a
/// column-pivoted Householder QR instead.
pub fn project_conditional_mean(
    samples: &[(f64, f64)],
    order: usize,
    shift: f64,
    scale: f64,
) -> Result<BasisSpec> {
    if order > MAX_ORDER {
        return Err(Error::domain(format!("order {order} exceeds {MAX_ORDER}")));
    }
    if !(scale > 0.0) {
        return Err(Error::domain(format!("scale must be positive, got {scale}")));
    }
    let n = order + 1;
    if samples.len() < n {
        return Err(Error::DegenerateSample(format!(
            "{} samples for {n} unknowns",
            samples.len()
        )));
    }
    let first = samples[0].0;
    if samples.iter().all(|(d, _)| *d == first) && order > 0 {
        return Err(Error::DegenerateSample(
            "all spread values are identical".into(),
        ));
    }

    let m = samples.len();
    let mut design = vec![0.0; m * n];
    let mut rhs = Vec::with_capacity(m);
    for (row, (delta, y)) in samples.iter().enumerate() {
        legendre_all((delta + shift) / scale, &mut design[row * n..(row + 1) * n]);
        rhs.push(*y);
    }

    let coefficients = match solve_normal_equations(&design, &rhs, m, n) {
        Some(c) => c,
        None => solve_pivoted_qr(&design, &rhs, m, n)?,
    };
    Ok(BasisSpec {
        coefficients,
        shift,
        scale,
    })
}

/// Returns `None` when the Gram matrix is not numerically SPD or its condition
/// estimate exceeds 1e12.
fn solve_normal_equations(design: &[f64], rhs: &[f64], m: usize, n: usize) -> Option<Vec<f64>> {
    let mut gram = vec![0.0; n * n];
    let mut aty = vec![0.0; n];
    for r in 0..m {
        let row = &design[r * n..(r + 1) * n];
        for i in 0..n {
            aty[i] += row[i] * rhs[r];
            for j in 0..=i {
                gram[i * n + j] += row[i] * row[j];
            }
        }
    }

    // Cholesky, lower triangle in place.
    let mut chol = gram;
    for j in 0..n {
        let mut d = chol[j * n + j];
        for k in 0..j {
            d -= chol[j * n + k] * chol[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        chol[j * n + j] = d;
        for i in j + 1..n {
            let mut s = chol[i * n + j];
            for k in 0..j {
                s -= chol[i * n + k] * chol[j * n + k];
            }
            chol[i * n + j] = s / d;
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| chol[i * n + i]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if (max / min).powi(2) > 1e12 {
        return None;
    }

    let mut z = aty;
    for i in 0..n {
        for k in 0..i {
            z[i] -= chol[i * n + k] * z[k];
        }
        z[i] /= chol[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= chol[k * n + i] * z[k];
        }
        z[i] /= chol[i * n + i];
    }
    Some(z)
}

fn solve_pivoted_qr(design: &[f64], rhs: &[f64], m: usize, n: usize) -> Result<Vec<f64>> {
    let mut a = design.to_vec();
    let mut b = rhs.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j].powi(2)).sum())
        .collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max).sqrt();

    for k in 0..n {
        // Pivot on the largest remaining column.
        let p = (k..n)
            .max_by(|&x, &y| norms[x].total_cmp(&norms[y]))
            .unwrap_or(k);
        if p != k {
            for i in 0..m {
                a.swap(i * n + k, i * n + p);
            }
            norms.swap(k, p);
            perm.swap(k, p);
        }
        let alpha: f64 = (k..m).map(|i| a[i * n + k].powi(2)).sum::<f64>().sqrt();
        if alpha <= 1e-13 * scale {
            return Err(Error::DegenerateSample(format!(
                "design matrix has rank {k} < {n}"
            )));
        }
        let sign = if a[k * n + k] >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (k..m).map(|i| a[i * n + k]).collect();
        v[0] += sign * alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * a[i * n + j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                a[i * n + j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            b[i] -= f * v[i - k];
        }
        for j in k + 1..n {
            norms[j] = (k + 1..m).map(|i| a[i * n + j].powi(2)).sum();
        }
    }

    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s / a[i * n + i];
    }
    let mut out = vec![0.0; n];
    for (k, &col) in perm.iter().enumerate() {
        out[col] = x[k];
    }
    Ok(out)
}

/// Sum of squared residuals of `spec` on `samples`.
pub fn residual_sum_of_squares(spec: &BasisSpec, samples: &[(f64, f64)]) -> f64 {
    samples
        .iter()
        .map(|(d, y)| (spec.eval(*d) - y).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Explicit power forms, independent of the recurrence.
    fn legendre_explicit(i: usize, x: f64) -> f64 {
        match i {
            0 => 1.0,
            1 => x,
            2 => (3.0 * x * x - 1.0) / 2.0,
            3 => (5.0 * x.powi(3) - 3.0 * x) / 2.0,
            4 => (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0,
            5 => (63.0 * x.powi(5) - 70.0 * x.powi(3) + 15.0 * x) / 8.0,
            _ => unreachable!(),
        }
    }

    fn swap_column() -> BasisSpec {
        BasisSpec::new(vec![0.1154, -3.3510, 0.0010, 0.1123, -0.0717], 0.0153, 1.7635).unwrap()
    }

    #[test]
    fn legendre_small_cases() {
        assert_eq!(legendre_eval(0, 0.37), 1.0);
        assert_eq!(legendre_eval(3, 1.0), 1.0);
        assert!((legendre_eval(2, 0.5) + 0.125).abs() < 1e-15);
        for i in 0..=MAX_ORDER {
            assert!((legendre_eval(i, 1.0) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn legendre_matches_power_form() {
        for i in 0..=5 {
            for k in 0..=40 {
                let x = -2.0 + 0.1 * k as f64;
                let e = legendre_explicit(i, x);
                assert!((legendre_eval(i, x) - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn expansion_cases() {
        let only_const = BasisSpec::new(vec![1.0, 0.0, 0.0, 0.0, 0.0], 0.0, 1.0).unwrap();
        assert_eq!(basis_expansion(&only_const, 0.7), 1.0);

        let ident = BasisSpec::new(vec![0.0, 1.0, 0.0, 0.0, 0.0], 0.3, 2.5).unwrap();
        assert!((basis_expansion(&ident, 1.2) - (1.2 + 0.3) / 2.5).abs() < 1e-15);

        // Frozen from a direct five-term power-form evaluation at 0.0153/1.7635.
        let v = basis_expansion(&swap_column(), 0.0);
        assert!((v - 0.057_498_536_423_348_53).abs() < 1e-14, "{v}");
    }

    #[test]
    fn invalid_specs() {
        assert!(BasisSpec::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(BasisSpec::new(vec![], 0.0, 1.0).is_err());
        assert!(BasisSpec::new(vec![1.0], f64::NAN, 1.0).is_err());
    }

    #[test]
    fn projection_line_and_constant() {
        let line: Vec<_> = (0..11).map(|k| {
            let d = -1.0 + 0.2 * k as f64;
            (d, 2.0 * d)
        }).collect();
        let fit = project_conditional_mean(&line, 1, 0.0, 1.0).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);

        let flat: Vec<_> = (0..20).map(|k| (k as f64 * 0.05, 5.0)).collect();
        let fit = project_conditional_mean(&flat, 4, -0.5, 0.5).unwrap();
        assert!((fit.coefficients[0] - 5.0).abs() < 1e-10);
        for c in &fit.coefficients[1..] {
            assert!(c.abs() < 1e-10);
        }
    }

    #[test]
    fn projection_recovers_table_coefficients() {
        let truth = swap_column();
        let samples: Vec<_> = (0..200)
            .map(|k| {
                let d = -1.75 + 3.5 * k as f64 / 199.0;
                let x = truth.argument(d);
                let y: f64 = (0..5).map(|i| truth.coefficients[i] * legendre_explicit(i, x)).sum();
                (d, y)
            })
            .collect();
        let fit = project_conditional_mean(&samples, 4, truth.shift, truth.scale).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&truth.coefficients) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn projection_degenerate() {
        let same: Vec<_> = (0..10).map(|_| (0.3, 1.0)).collect();
        assert!(matches!(
            project_conditional_mean(&same, 2, 0.0, 1.0),
            Err(Error::DegenerateSample(_))
        ));
        let few = vec![(0.0, 1.0), (1.0, 2.0)];
        assert!(project_conditional_mean(&few, 4, 0.0, 1.0).is_err());
        // Two distinct abscissae cannot determine a cubic.
        let two: Vec<_> = (0..10).map(|k| ((k % 2) as f64, 1.0)).collect();
        assert!(matches!(
            project_conditional_mean(&two, 3, 0.0, 1.0),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn pivoted_qr_agrees_with_cholesky() {
        let samples: Vec<_> = (0..50)
            .map(|k| {
                let d = k as f64 / 49.0;
                (d, (3.0 * d).sin())
            })
            .collect();
        let n = 5;
        let mut design = vec![0.0; samples.len() * n];
        let rhs: Vec<f64> = samples.iter().map(|s| s.1).collect();
        for (r, (d, _)) in samples.iter().enumerate() {
            legendre_all(*d, &mut design[r * n..(r + 1) * n]);
        }
        let a = solve_normal_equations(&design, &rhs, samples.len(), n).unwrap();
        let b = solve_pivoted_qr(&design, &rhs, samples.len(), n).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn recurrence_consistency(x in -1.0f64..1.0, i in 1usize..6) {
            let fi = i as f64;
            let lhs = (fi + 1.0) * legendre_eval(i + 1, x);
            let rhs = (2.0 * fi + 1.0) * x * legendre_eval(i, x) - fi * legendre_eval(i - 1, x);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn projection_idempotent(coefs in proptest::collection::vec(-3.0f64..3.0, 1..6),
                                 shift in -0.5f64..0.5, scale in 0.5f64..3.0) {
            let order = coefs.len() - 1;
            let truth = BasisSpec::new(coefs, shift, scale).unwrap();
            let samples: Vec<_> = (0..60).map(|k| {
                let d = -2.0 + 4.0 * k as f64 / 59.0;
                (d, truth.eval(d))
            }).collect();
            let fit = project_conditional_mean(&samples, 5.max(order), shift, scale).unwrap();
            for (i, c) in fit.coefficients.iter().enumerate() {
                let t = truth.coefficients.get(i).copied().unwrap_or(0.0);
                prop_assert!((c - t).abs() < 1e-8);
            }
        }

        #[test]
        fn projection_beats_zero_baseline(ys in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let samples: Vec<_> = ys.iter().enumerate()
                .map(|(k, y)| (k as f64 * 0.1 - 0.6, *y)).collect();
            let fit = project_conditional_mean(&samples, 3, 0.0, 1.0).unwrap();
            let zero = BasisSpec::zero(3);
            prop_assert!(residual_sum_of_squares(&fit, &samples)
                <= residual_sum_of_squares(&zero, &samples) + 1e-9);
        }
    }
}

//! B-spline bases on uniform extended grids and the KAN edge activation
//! `w * (silu(x) + Σ c_s B_s(x))`.

use thiserror::Error;

use crate::autodiff::ADScalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("degenerate spline grid: domain [{lo}, {hi}] with {intervals} intervals")]
    DegenerateGrid { lo: f64, hi: f64, intervals: usize },
    #[error("spline order must be at least 1")]
    ZeroOrder,
    #[error("expected {expected} spline coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },
}

/// Uniform knot vector `a - k h, ..., b + k h` with `h = (b - a) / G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    lo: f64,
    hi: f64,
    intervals: usize,
    order: usize,
    step: f64,
    knots: Vec<f64>,
}

/// Nonzero basis functions at one point, with their first and second
/// derivatives. `values[j]` belongs to basis index `first + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub first: usize,
    pub values: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// The evaluation point was outside the domain and got clamped. `d1` and
    /// `d2` still describe the boundary; the slope in the point itself is zero.
    pub clamped: bool,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, intervals: usize, order: usize) -> Result<Self, SplineError> {
        if intervals == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(SplineError::DegenerateGrid { lo, hi, intervals });
        }
        if order == 0 {
            return Err(SplineError::ZeroOrder);
        }
        let step = (hi - lo) / intervals as f64;
        let knots = (0..intervals + 2 * order + 1)
            .map(|i| lo + (i as f64 - order as f64) * step)
            .collect();
        Ok(Self {
            lo,
            hi,
            intervals,
            order,
            step,
            knots,
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn basis_count(&self) -> usize {
        self.intervals + self.order
    }

    /// All `G + k` basis values at `t` (clamped to the domain).
    pub fn basis_values(&self, t: f64) -> Vec<f64> {
        let eval = self.evaluate(t);
        let mut out = vec![0.0; self.basis_count()];
        out[eval.first..eval.first + eval.values.len()].copy_from_slice(&eval.values);
        out
    }

    fn span(&self, x: f64) -> usize {
        let k = self.order;
        let cell = ((x - self.lo) / self.step).floor();
        let cell = if cell < 0.0 { 0 } else { cell as usize };
        k + cell.min(self.intervals - 1)
    }

    /// Triangular Cox-de Boor evaluation of the `k + 1` nonzero basis
    /// functions and their first two derivatives.
    pub fn evaluate(&self, t: f64) -> BasisEval {
        let p = self.order;
        let clamped = t < self.lo || t > self.hi;
        let x = t.clamp(self.lo, self.hi);
        let span = self.span(x);
        let u = &self.knots;

        // ndu: upper triangle holds basis values, lower triangle knot differences
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let n_ders = 2.min(p);
        let mut ders = vec![vec![0.0; p + 1]; 3];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n_ders {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if rk >= 0 {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize {
                    k - 1
                } else {
                    p - r
                };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=n_ders {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }

        let d2 = std::mem::take(&mut ders[2]);
        let d1 = std::mem::take(&mut ders[1]);
        let values = std::mem::take(&mut ders[0]);
        BasisEval {
            first: span - p,
            values,
            d1,
            d2,
            clamped,
        }
    }
}

/// One KAN edge: `w * (silu(x) + Σ c_s B_s(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeActivation {
    pub weight: f64,
    pub coefficients: Vec<f64>,
}

impl EdgeActivation {
    pub fn new(
        weight: f64,
        coefficients: Vec<f64>,
        grid: &SplineGrid,
    ) -> Result<Self, SplineError> {
        if coefficients.len() != grid.basis_count() {
            return Err(SplineError::CoefficientCount {
                expected: grid.basis_count(),
                got: coefficients.len(),
            });
        }
        Ok(Self {
            weight,
            coefficients,
        })
    }

    /// Plain evaluation without derivative tracking.
    pub fn value(&self, grid: &SplineGrid, x: f64) -> f64 {
        let basis = grid.evaluate(x);
        let spline: f64 = basis
            .values
            .iter()
            .zip(&self.coefficients[basis.first..])
            .map(|(b, c)| b * c)
            .sum();
        self.weight * (x * crate::autodiff::logistic(x) + spline)
    }

    /// Differentiable evaluation with constant parameters.
    pub fn eval<'r>(&self, grid: &SplineGrid, x: ADScalar<'r>) -> ADScalar<'r> {
        let coeffs: Vec<ADScalar<'r>> = self
            .coefficients
            .iter()
            .map(|&c| ADScalar::constant(c))
            .collect();
        edge_eval(
            ADScalar::constant(self.weight),
            &coeffs,
            &grid.evaluate(x.primal()),
            x,
        )
    }
}

/// `Σ c_s B_s(x)` as a single recorded node.
///
/// `basis` must be the evaluation of the grid at `x.primal()`.
pub fn spline_eval<'r>(
    coeffs: &[ADScalar<'r>],
    basis: &BasisEval,
    x: ADScalar<'r>,
) -> ADScalar<'r> {
    let active = &coeffs[basis.first..basis.first + basis.values.len()];
    let xt = x.tangent();
    let mut value = 0.0;
    let mut slope = 0.0;
    let mut curvature = 0.0;
    let mut coeff_tangent = 0.0;
    let mut coeff_tangent_slope = 0.0;
    for (j, c) in active.iter().enumerate() {
        value += c.primal() * basis.values[j];
        slope += c.primal() * basis.d1[j];
        curvature += c.primal() * basis.d2[j];
        coeff_tangent += c.tangent() * basis.values[j];
        coeff_tangent_slope += c.tangent() * basis.d1[j];
    }
    let live = if basis.clamped { 0.0 } else { 1.0 };
    let tangent = live * slope * xt + coeff_tangent;
    let x_partial = (
        x,
        live * slope,
        live * (curvature * xt + coeff_tangent_slope),
    );
    let parents = std::iter::once(x_partial).chain(
        active
            .iter()
            .enumerate()
            .map(|(j, &c)| (c, basis.values[j], live * basis.d1[j] * xt)),
    );
    ADScalar::fused(value, tangent, parents)
}

/// `w * (silu(x) + spline(x))` where `silu_x` is `x.silu()` (shared between
/// the edges leaving the same node).
pub fn edge_eval_with<'r>(
    weight: ADScalar<'r>,
    coeffs: &[ADScalar<'r>],
    basis: &BasisEval,
    x: ADScalar<'r>,
    silu_x: ADScalar<'r>,
) -> ADScalar<'r> {
    weight * (silu_x + spline_eval(coeffs, basis, x))
}

/// `w * (silu(x) + Σ c_s B_s(x))`.
pub fn edge_eval<'r>(
    weight: ADScalar<'r>,
    coeffs: &[ADScalar<'r>],
    basis: &BasisEval,
    x: ADScalar<'r>,
) -> ADScalar<'r> {
    edge_eval_with(weight, coeffs, basis, x, x.silu())
}

pub fn silu<'r>(x: ADScalar<'r>) -> ADScalar<'r> {
    x.silu()
}

//! Regularizers on the probability simplex.
//!
//! Dual points are always carried together with their primal image
//! ([`DualPoint`]) because coordinates of an entropic point can underflow
//! to zero while the dual coordinate stays finite and meaningful.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates below this are treated as boundary points.
pub const INTERIOR_FLOOR: f64 = 1e-300;
const SIMPLEX_TOLERANCE: f64 = 1e-12;
const BISECTION_TOLERANCE: f64 = 1e-12;
const BISECTION_MAX_ITER: usize = 200;

/// A probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    /// Validates nonnegativity and unit mass (within 1e-12).
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain(format!(
                "probability vector has a negative or non-finite entry: {probabilities:?}"
            )));
        }
        let mass: f64 = probabilities.iter().sum();
        if (mass - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain(format!("probabilities sum to {mass}")));
        }
        Ok(Self(probabilities))
    }

    /// Normalizes nonnegative weights with positive total.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Numerical(format!(
                "cannot normalize weights {weights:?}"
            )));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self(weights))
    }

    pub fn uniform(arms: usize) -> Self {
        Self(vec![1.0 / arms as f64; arms])
    }

    pub fn vertex(arms: usize, arm: usize) -> Self {
        let mut p = vec![0.0; arms];
        p[arm] = 1.0;
        Self(p)
    }

    /// `alpha * x + (1 - alpha) * y`.
    pub fn mix(alpha: f64, x: &SimplexPoint, y: &SimplexPoint) -> Self {
        debug_assert_eq!(x.len(), y.len());
        Self(
            x.0.iter()
                .zip(&y.0)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl std::ops::Index<usize> for SimplexPoint {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A primal point with a representative of its (normalized) mirror image.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub point: SimplexPoint,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    NegativeEntropy,
    TsallisHalf,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative-entropy" | "entropy" => Ok(Self::NegativeEntropy),
            "tsallis-half" | "tsallis" => Ok(Self::TsallisHalf),
            other => Err(Error::Config(format!("unknown regularizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NegativeEntropy => "negative-entropy",
            Self::TsallisHalf => "tsallis-half",
        })
    }
}

/// A regularizer on the `A`-simplex with comparator margin `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    kind: RegularizerKind,
    arms: usize,
    delta: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind, arms: usize, delta: f64) -> Result<Self> {
        if arms == 0 {
            return Err(Error::Config("need at least one arm".into()));
        }
        if !(delta > 0.0) || delta > 1.0 / arms as f64 + 1e-15 {
            return Err(Error::Config(format!(
                "delta = {delta} must lie in (0, 1/{arms}]"
            )));
        }
        Ok(Self { kind, arms, delta })
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Regularity constants `(C1, C2)`.
    pub fn constants(&self) -> (f64, f64) {
        let a = self.arms as f64;
        match self.kind {
            RegularizerKind::NegativeEntropy => (a.ln(), 1.0 / self.delta),
            RegularizerKind::TsallisHalf => (2.0 * (a.sqrt() - 1.0), 2.0 / self.delta),
        }
    }

    /// The uniform base point `x0`.
    pub fn base_point(&self) -> SimplexPoint {
        SimplexPoint::uniform(self.arms)
    }

    /// Base point together with its gradient.
    pub fn base_dual(&self) -> DualPoint {
        let point = self.base_point();
        let grad = self.grad_psi(&point).expect("uniform point is interior");
        DualPoint { point, grad }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == self.arms {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "vector of length {n}, expected {}",
                self.arms
            )))
        }
    }

    /// Value of the regularizer.
    pub fn psi(&self, x: &[f64]) -> f64 {
        match self.kind {
            RegularizerKind::NegativeEntropy => {
                x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
            }
            RegularizerKind::TsallisHalf => -2.0 * x.iter().map(|v| v.sqrt()).sum::<f64>(),
        }
    }

    /// Gradient at an interior point.
    pub fn grad_psi(&self, x: &SimplexPoint) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        if let Some(i) = x.as_slice().iter().position(|&v| v < INTERIOR_FLOOR) {
            return Err(Error::Domain(format!(
                "gradient undefined at boundary point (coordinate {i} is {})",
                x[i]
            )));
        }
        Ok(match self.kind {
            RegularizerKind::NegativeEntropy => x.as_slice().iter().map(|v| 1.0 + v.ln()).collect(),
            RegularizerKind::TsallisHalf => x.as_slice().iter().map(|v| -1.0 / v.sqrt()).collect(),
        })
    }

    /// Interior point paired with its gradient.
    pub fn dual_of(&self, x: &SimplexPoint) -> Result<DualPoint> {
        Ok(DualPoint {
            grad: self.grad_psi(x)?,
            point: x.clone(),
        })
    }

    /// Maximizer of `<theta, x> - psi(x)` over the simplex, with its gradient.
    ///
    /// The returned gradient equals `theta` up to a constant shift.
    pub fn conjugate(&self, theta: &[f64]) -> Result<DualPoint> {
        self.check_len(theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite dual vector {theta:?}"
            )));
        }
        let max = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match self.kind {
            RegularizerKind::NegativeEntropy => {
                let weights: Vec<f64> = theta.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let lse = max + total.ln();
                let point = SimplexPoint(weights.into_iter().map(|w| w / total).collect());
                let grad = theta.iter().map(|v| 1.0 + v - lse).collect();
                Ok(DualPoint { point, grad })
            }
            RegularizerKind::TsallisHalf => {
                let shifted: Vec<f64> = theta.iter().map(|v| v - max).collect();
                let lambda = tsallis_normalizer(&shifted)?;
                let raw: Vec<f64> = shifted.iter().map(|v| (lambda - v).powi(-2)).collect();
                let mass: f64 = raw.iter().sum();
                let scale = mass.sqrt();
                let point = SimplexPoint(raw.into_iter().map(|w| w / mass).collect());
                let grad = shifted.iter().map(|v| (v - lambda) * scale).collect();
                Ok(DualPoint { point, grad })
            }
        }
    }

    /// Primal part of [`Regularizer::conjugate`].
    pub fn grad_psi_star_constrained(&self, theta: &[f64]) -> Result<SimplexPoint> {
        Ok(self.conjugate(theta)?.point)
    }

    /// Bregman divergence `D(x, y)` for interior `y`.
    pub fn bregman(&self, x: &SimplexPoint, y: &SimplexPoint) -> Result<f64> {
        self.check_len(x.len())?;
        let y = self.dual_of(y)?;
        Ok(self.bregman_dual(x, &y))
    }

    /// Bregman divergence `D(x, y)` using the stored gradient of `y`.
    pub fn bregman_dual(&self, x: &SimplexPoint, y: &DualPoint) -> f64 {
        let x = x.as_slice();
        let value = match self.kind {
            RegularizerKind::NegativeEntropy => {
                // KL(x || y); the gradient representative may be shifted by a constant,
                // which cancels because both points have unit mass
                let psi_y = self.psi(y.point.as_slice());
                let linear: f64 = x
                    .iter()
                    .zip(y.point.as_slice())
                    .zip(&y.grad)
                    .map(|((xi, yi), g)| g * (xi - yi))
                    .sum();
                self.psi(x) - psi_y - linear
            }
            RegularizerKind::TsallisHalf => x
                .iter()
                .zip(y.point.as_slice())
                .map(|(xi, yi)| {
                    let ry = yi.sqrt();
                    (xi.sqrt() - ry).powi(2) / ry
                })
                .sum(),
        };
        value.max(0.0)
    }

    /// One mirror step `grad(x) - estimate / sigma` mapped back to the simplex.
    pub fn mirror_step(&self, x: &DualPoint, estimate: &[f64], sigma: f64) -> Result<DualPoint> {
        let theta: Vec<f64> = x
            .grad
            .iter()
            .zip(estimate)
            .map(|(g, l)| g - l / sigma)
            .collect();
        self.conjugate(&theta)
    }
}

/// Root `lambda > 0` of `sum 1/(lambda - theta_i)^2 = 1` for `max theta = 0`.
fn tsallis_normalizer(shifted: &[f64]) -> Result<f64> {
    let constraint = |lambda: f64| shifted.iter().map(|v| (lambda - v).powi(-2)).sum::<f64>() - 1.0;
    // the maximal coordinate alone contributes 1 at lambda = 1,
    // and every term is at most 1/A once lambda >= sqrt(A)
    let mut lo = 1.0;
    let mut hi = (shifted.len() as f64).sqrt().max(1.0);
    if constraint(hi) >= -BISECTION_TOLERANCE {
        return Ok(hi);
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let f = constraint(mid);
        if f.abs() <= BISECTION_TOLERANCE || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "normalizer bisection did not converge in {BISECTION_MAX_ITER} iterations"
    )))
}

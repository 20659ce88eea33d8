//! Classical data-driven uncertainty sets and order-statistic radius calibration.
//!
//! Box: `ξ̂min ≤ ξ ≤ ξ̂max`. Budget: `Σ_i |ξ_i − μ̂_i| / Σ̂_ii ≤ Γ`.
//! Ellipsoid: `(ξ − μ̂)ᵀ Σ̂⁻¹ (ξ − μ̂) ≤ Γ`.
//!
//! Γ is chosen as the ℓ-th smallest radius of a held-out calibration sample,
//! where ℓ is the smallest index whose Binomial(N₁, α) CDF at ℓ − 1 reaches
//! 1 − δ. Box sets carry no radius and are never calibrated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    backward_substitute_transpose, cholesky, forward_substitute, mean_and_covariance,
    symmetric_eigenvalues, DenseMatrix,
};
use crate::neuralgen::LatentBall;

/// Condition number above which an ellipsoid covariance is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Box,
    Budget,
    Ellipsoid,
}

impl std::str::FromStr for SetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(SetKind::Box),
            "budget" => Ok(SetKind::Budget),
            "ellipsoid" => Ok(SetKind::Ellipsoid),
            other => Err(Error::InvalidArgument(format!(
                "unknown set kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gamma: f64,
    /// 1-based order-statistic index.
    pub ell: usize,
    pub n_calibration: usize,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassicalRepr", into = "ClassicalRepr")]
pub struct ClassicalSet {
    pub kind: SetKind,
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub gamma: Option<f64>,
    pub calibration: Option<CalibrationResult>,
    chol: Option<DenseMatrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassicalRepr {
    kind: SetKind,
    mean: Vec<f64>,
    cov: DenseMatrix,
    min: Vec<f64>,
    max: Vec<f64>,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    calibration: Option<CalibrationResult>,
}

impl TryFrom<ClassicalRepr> for ClassicalSet {
    type Error = Error;
    fn try_from(r: ClassicalRepr) -> Result<Self> {
        let d = r.mean.len();
        if d == 0 || r.cov.rows() != d || r.cov.cols() != d || r.min.len() != d || r.max.len() != d
        {
            return Err(Error::Dimension(
                "set statistics disagree in dimension".into(),
            ));
        }
        let finite = r
            .mean
            .iter()
            .chain(&r.min)
            .chain(&r.max)
            .all(|v| v.is_finite())
            && r.cov.is_finite();
        if !finite || !r.cov.is_symmetric(1e-9) {
            return Err(Error::InvalidArgument(
                "set statistics must be finite with symmetric covariance".into(),
            ));
        }
        if r.min.iter().zip(&r.max).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("min exceeds max".into()));
        }
        if let Some(g) = r.gamma {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::InvalidArgument(
                    "gamma must be finite and nonnegative".into(),
                ));
            }
        }
        let mut set = ClassicalSet {
            kind: r.kind,
            mean: r.mean,
            cov: r.cov,
            min: r.min,
            max: r.max,
            gamma: r.gamma,
            calibration: r.calibration,
            chol: None,
        };
        set.prepare()?;
        Ok(set)
    }
}

impl From<ClassicalSet> for ClassicalRepr {
    fn from(s: ClassicalSet) -> Self {
        ClassicalRepr {
            kind: s.kind,
            mean: s.mean,
            cov: s.cov,
            min: s.min,
            max: s.max,
            gamma: s.gamma,
            calibration: s.calibration,
        }
    }
}

fn condition_number(cov: &DenseMatrix) -> f64 {
    let ev = symmetric_eigenvalues(cov);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

impl ClassicalSet {
    fn prepare(&mut self) -> Result<()> {
        match self.kind {
            SetKind::Ellipsoid => {
                let cond = condition_number(&self.cov);
                if !(cond <= MAX_CONDITION) {
                    return Err(Error::SingularCovariance { condition: cond });
                }
                self.chol = Some(
                    cholesky(&self.cov)
                        .map_err(|_| Error::SingularCovariance { condition: cond })?,
                );
            }
            SetKind::Budget => {
                if self.cov.diagonal().iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::SingularCovariance {
                        condition: f64::INFINITY,
                    });
                }
            }
            SetKind::Box => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Cholesky factor of `Σ̂`; present for ellipsoids.
    pub fn cov_factor(&self) -> Option<&DenseMatrix> {
        self.chol.as_ref()
    }

    /// Γ, with uncalibrated sets treated as Γ = 0.
    pub fn radius_bound(&self) -> f64 {
        self.gamma.unwrap_or(0.0)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }
}

/// Fit sample statistics of `data` (rows are observations). Γ is left unset.
pub fn fit_classical_set(kind: SetKind, data: &DenseMatrix) -> Result<ClassicalSet> {
    if data.rows() < 2 || data.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "fitting a set needs at least 2 rows, got {}",
            data.rows()
        )));
    }
    if !data.is_finite() {
        return Err(Error::InvalidArgument(
            "data contains non-finite values".into(),
        ));
    }
    let (mean, cov) = mean_and_covariance(data);
    let d = data.cols();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for i in 0..data.rows() {
        for (j, &v) in data.row(i).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    let mut set = ClassicalSet {
        kind,
        mean,
        cov,
        min,
        max,
        gamma: None,
        calibration: None,
        chol: None,
    };
    set.prepare()?;
    Ok(set)
}

/// Set-induced radius of `xi`.
///
/// For boxes this is the largest one-sided excess beyond the bounds, scaled by
/// the box width; it is `≤ 0` exactly on the box.
pub fn set_radius(set: &ClassicalSet, xi: &[f64]) -> f64 {
    debug_assert_eq!(xi.len(), set.dim());
    match set.kind {
        SetKind::Budget => xi
            .iter()
            .zip(&set.mean)
            .zip(set.cov.diagonal())
            .map(|((x, m), s)| (x - m).abs() / s)
            .sum(),
        SetKind::Ellipsoid => {
            let l = set.chol.as_ref().expect("ellipsoid sets carry a factor");
            let dev: Vec<f64> = xi.iter().zip(&set.mean).map(|(x, m)| x - m).collect();
            let v = forward_substitute(l, &dev);
            v.iter().map(|t| t * t).sum()
        }
        SetKind::Box => xi
            .iter()
            .zip(set.min.iter().zip(&set.max))
            .map(|(&x, (&lo, &hi))| {
                let width = if hi > lo { hi - lo } else { 1.0 };
                (x - hi).max(lo - x) / width
            })
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `Σ̂⁻¹ v` through the Cholesky factor (ellipsoids only).
pub fn precision_mul(set: &ClassicalSet, v: &[f64]) -> Option<Vec<f64>> {
    let l = set.chol.as_ref()?;
    Some(backward_substitute_transpose(l, &forward_substitute(l, v)))
}

pub fn membership(set: &ClassicalSet, xi: &[f64]) -> bool {
    let r = set_radius(set, xi);
    match set.kind {
        SetKind::Box => r <= 0.0,
        _ => r <= set.radius_bound(),
    }
}

/// Smallest calibration size with `α^N₁ ≤ δ`.
pub fn min_calibration_samples(alpha: f64, delta: f64) -> usize {
    let ratio = delta.ln() / alpha.ln();
    (ratio - 1e-9).ceil().max(1.0) as usize
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

/// Order-statistic index ℓ (1-based) for `n` calibration radii.
pub fn order_statistic_index(n: usize, alpha: f64, delta: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} and delta {delta} must lie in (0, 1)"
        )));
    }
    let required = min_calibration_samples(alpha, delta);
    if n < required {
        return Err(Error::InsufficientCalibration { got: n, required });
    }
    let lf = ln_factorials(n);
    let (la, l1a) = (alpha.ln(), (1.0 - alpha).ln());
    let target = 1.0 - delta;
    // Running log of the binomial CDF via log-sum-exp.
    let mut log_cdf = f64::NEG_INFINITY;
    for j in 1..=n {
        let k = j - 1;
        let log_pmf = lf[n] - lf[k] - lf[n - k] + k as f64 * la + (n - k) as f64 * l1a;
        log_cdf = if log_cdf == f64::NEG_INFINITY {
            log_pmf
        } else {
            let m = log_cdf.max(log_pmf);
            m + ((log_cdf - m).exp() + (log_pmf - m).exp()).ln()
        };
        if log_cdf.exp() >= target {
            return Ok(j);
        }
    }
    // Unreachable when n ≥ required, barring rounding at the boundary.
    Ok(n)
}

/// Γ = r_(ℓ), the ℓ-th smallest radius.
pub fn calibrate_gamma(radii: &[f64], alpha: f64, delta: f64) -> Result<CalibrationResult> {
    if radii.iter().any(|r| r.is_nan()) {
        return Err(Error::InvalidArgument("NaN calibration radius".into()));
    }
    let ell = order_statistic_index(radii.len(), alpha, delta)?;
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(CalibrationResult {
        gamma: sorted[ell - 1],
        ell,
        n_calibration: radii.len(),
        alpha,
        delta,
    })
}

/// Calibrate Γ of a budget or ellipsoid set on held-out rows. Boxes are
/// returned unchanged.
pub fn calibrate_set(
    set: ClassicalSet,
    calibration: &DenseMatrix,
    alpha: f64,
    delta: f64,
) -> Result<ClassicalSet> {
    if calibration.cols() != set.dim() {
        return Err(Error::Dimension(
            "calibration data dimension differs from set".into(),
        ));
    }
    if set.kind == SetKind::Box {
        return Ok(set);
    }
    let radii: Vec<f64> = (0..calibration.rows())
        .map(|i| set_radius(&set, calibration.row(i)))
        .collect();
    let cal = calibrate_gamma(&radii, alpha, delta)?;
    Ok(ClassicalSet {
        gamma: Some(cal.gamma),
        calibration: Some(cal),
        ..set
    })
}

/// Any uncertainty set the solvers accept, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UncertaintySet {
    Classical(ClassicalSet),
    Latent(LatentBall),
}

impl UncertaintySet {
    pub fn kind_name(&self) -> &'static str {
        match self {
            UncertaintySet::Classical(s) => match s.kind {
                SetKind::Box => "box",
                SetKind::Budget => "budget",
                SetKind::Ellipsoid => "ellipsoid",
            },
            UncertaintySet::Latent(_) => "latent_ball",
        }
    }
}

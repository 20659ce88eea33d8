use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::VaeModel;
use crate::error::{Error, Result};
use crate::linalg::{norm2, DenseMatrix};
use crate::probgen::sample_uniform_ball;
use crate::rng::stream;
use crate::uncertainty::{calibrate_gamma, CalibrationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LatentBallTag {
    LatentBall,
}

/// Euclidean ball of radius `gamma` around the origin of the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatentRepr", into = "LatentRepr")]
pub struct LatentBall {
    pub gamma: f64,
    pub latent_dim: usize,
    pub calibration: Option<CalibrationResult>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentRepr {
    kind: LatentBallTag,
    gamma: f64,
    latent_dim: usize,
    #[serde(default)]
    calibration: Option<CalibrationResult>,
}

impl TryFrom<LatentRepr> for LatentBall {
    type Error = Error;
    fn try_from(r: LatentRepr) -> Result<Self> {
        LatentBall::new(r.gamma, r.latent_dim).map(|b| LatentBall {
            calibration: r.calibration,
            ..b
        })
    }
}

impl From<LatentBall> for LatentRepr {
    fn from(b: LatentBall) -> Self {
        LatentRepr {
            kind: LatentBallTag::LatentBall,
            gamma: b.gamma,
            latent_dim: b.latent_dim,
            calibration: b.calibration,
        }
    }
}

impl LatentBall {
    pub fn new(gamma: f64, latent_dim: usize) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "latent radius must be finite and nonnegative, got {gamma}"
            )));
        }
        if latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "latent dimension must be positive".into(),
            ));
        }
        Ok(Self {
            gamma,
            latent_dim,
            calibration: None,
        })
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        z.len() == self.latent_dim && norm2(z) <= self.gamma + tol
    }
}

/// Γ = ℓ-th smallest `‖encode(ξ)‖₂` over the calibration rows.
pub fn calibrate_latent(
    model: &VaeModel,
    calibration: &DenseMatrix,
    alpha: f64,
    delta: f64,
) -> Result<LatentBall> {
    if calibration.cols() != model.input_dim() {
        return Err(Error::Dimension(
            "calibration data dimension differs from the model".into(),
        ));
    }
    let radii = (0..calibration.rows())
        .map(|i| model.encode(calibration.row(i)).map(|z| norm2(&z)))
        .collect::<Result<Vec<_>>>()?;
    let cal = calibrate_gamma(&radii, alpha, delta)?;
    Ok(LatentBall {
        gamma: cal.gamma,
        latent_dim: model.latent_dim(),
        calibration: Some(cal),
    })
}

pub fn sample_latent_ball_with<R: Rng + ?Sized>(ball: &LatentBall, rng: &mut R) -> Vec<f64> {
    sample_uniform_ball(rng, ball.latent_dim, ball.gamma)
}

pub fn sample_latent_ball(ball: &LatentBall, seed: u64) -> Vec<f64> {
    sample_latent_ball_with(ball, &mut stream(seed, "latent-ball", &[]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralgen::model::tests::{linear_layer, model_with_decoder};
    use crate::neuralgen::{Mlp, Standardizer};

    /// Encoder mean is the input itself; decoder is the identity.
    fn identity_model(d: usize) -> VaeModel {
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| f64::from(i == j)).collect())
            .collect();
        model_with_decoder(
            Mlp {
                layers: vec![linear_layer(eye, vec![0.0; d])],
            },
            Standardizer::identity(d),
        )
    }

    #[test]
    fn unit_norm_codes_give_unit_radius() {
        let m = identity_model(2);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|k| {
                let t = k as f64 * 0.37;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let ball =
            calibrate_latent(&m, &DenseMatrix::from_rows(&rows).unwrap(), 0.95, 0.05).unwrap();
        assert!((ball.gamma - 1.0).abs() < 1e-15);
        assert_eq!(ball.calibration.unwrap().ell, 99);
    }

    #[test]
    fn radius_is_exact_order_statistic() {
        let m = identity_model(1);
        // Radii 1..=500 in scrambled order.
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|k| vec![((k * 263) % 500 + 1) as f64 * if k % 2 == 0 { 1.0 } else { -1.0 }])
            .collect();
        let ball =
            calibrate_latent(&m, &DenseMatrix::from_rows(&rows).unwrap(), 0.95, 0.05).unwrap();
        assert_eq!(ball.calibration.unwrap().ell, 484);
        assert_eq!(ball.gamma, 484.0);
    }

    #[test]
    fn too_few_calibration_rows() {
        let m = identity_model(1);
        let rows = DenseMatrix::from_rows(&vec![vec![1.0]; 58]).unwrap();
        assert!(matches!(
            calibrate_latent(&m, &rows, 0.95, 0.05),
            Err(Error::InsufficientCalibration { .. })
        ));
    }

    #[test]
    fn samples_stay_inside_and_are_reproducible() {
        let ball = LatentBall::new(1.5, 3).unwrap();
        let mut rng = stream(1, "t", &[]);
        for _ in 0..2000 {
            assert!(ball.contains(&sample_latent_ball_with(&ball, &mut rng), 1e-12));
        }
        assert_eq!(sample_latent_ball(&ball, 8), sample_latent_ball(&ball, 8));
    }

    #[test]
    fn one_dimensional_samples_are_uniform() {
        let ball = LatentBall::new(2.0, 1).unwrap();
        let mut rng = stream(2, "t", &[]);
        let n = 40_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_latent_ball_with(&ball, &mut rng)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // Uniform on [−2, 2]: sd 2/√3, so the mean has sd ≈ 0.0058.
        assert!(mean.abs() < 0.03, "{mean}");
        let below = xs.iter().filter(|&&x| x < 1.0).count() as f64 / n as f64;
        assert!((below - 0.75).abs() < 0.01, "{below}");
    }

    #[test]
    fn json_carries_kind_marker() {
        let ball = LatentBall::new(0.8, 2).unwrap();
        let v = serde_json::to_value(&ball).unwrap();
        assert_eq!(v["kind"], "latent_ball");
        assert_eq!(serde_json::from_value::<LatentBall>(v).unwrap(), ball);
        assert!(serde_json::from_str::<LatentBall>(
            r#"{"kind":"latent_ball","gamma":-1.0,"latent_dim":2}"#
        )
        .is_err());
        assert!(serde_json::from_str::<LatentBall>(
            r#"{"kind":"budget","gamma":1.0,"latent_dim":2}"#
        )
        .is_err());
    }
}

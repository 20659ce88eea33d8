//! Robust optimization over the decoder image of a latent ball.
//!
//! The adversarial subproblem is solved by projected gradient ascent in the
//! latent space: the recourse-cost gradient (the demand duals) is pulled back
//! through the decoder, normalized, and the step is projected onto the ball.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccg::{outer_loop, CcgResult, Subsolution};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::lp::{recourse_value_and_grad, Instance};
use crate::neuralgen::{sample_latent_ball_with, LatentBall, VaeModel};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgaConfig {
    /// Step length in latent units.
    pub eta: f64,
    /// Stop when consecutive values differ by at most `step_tol·(1 + |q|)`.
    pub step_tol: f64,
    pub max_steps: usize,
    /// Parallel starts per subproblem.
    pub init_count: usize,
    /// Cap on the total number of starts per subproblem.
    pub max_extra_inits: usize,
    pub eps: f64,
    pub max_iter: usize,
    pub time_limit_secs: f64,
    pub seed: u64,
}

impl Default for PgaConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            step_tol: 1e-4,
            max_steps: 1000,
            init_count: 10,
            max_extra_inits: 200,
            eps: 1e-4,
            max_iter: 100,
            time_limit_secs: 900.0,
            seed: 0,
        }
    }
}

impl PgaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.eta >= 0.0 && self.eta.is_finite())
            || !positive(self.step_tol)
            || !positive(self.eps)
        {
            return Err(Error::InvalidArgument(
                "eta must be nonnegative; step_tol and eps positive".into(),
            ));
        }
        if self.max_steps == 0 || self.init_count == 0 || self.max_iter == 0 {
            return Err(Error::InvalidArgument(
                "max_steps, init_count and max_iter must be positive".into(),
            ));
        }
        if self.init_count > self.max_extra_inits {
            return Err(Error::InvalidArgument(
                "init_count may not exceed max_extra_inits".into(),
            ));
        }
        if !(self.time_limit_secs > 0.0) {
            return Err(Error::InvalidArgument("time limit must be positive".into()));
        }
        Ok(())
    }
}

/// `z` scaled back onto the ball of radius `gamma` when outside it. Points
/// within rounding of the sphere are left alone so projection is idempotent.
pub fn project_latent(z: &[f64], gamma: f64) -> Vec<f64> {
    let n = norm2(z);
    if n <= gamma * (1.0 + 1e-12) {
        z.to_vec()
    } else {
        z.iter().map(|v| v * gamma / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgaRun {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    pub value: f64,
    pub steps: usize,
    pub initial_value: f64,
    /// Value at every visited point, starting with `z₀`.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// Ascent from `z0`; returns the best visited point.
pub fn pga_ascend(
    inst: &Instance,
    x: &[f64],
    model: &VaeModel,
    ball: &LatentBall,
    z0: &[f64],
    cfg: &PgaConfig,
) -> Result<PgaRun> {
    let mut z = z0.to_vec();
    let (mut xi, mut cache) = model.decode_cached(&z)?;
    let (mut q, mut grad) = recourse_value_and_grad(inst, x, &xi)?;
    let mut best = PgaRun {
        z: z.clone(),
        xi: xi.clone(),
        value: q,
        steps: 0,
        initial_value: q,
        history: vec![q],
    };
    if cfg.eta == 0.0 {
        return Ok(best);
    }
    for step in 1..=cfg.max_steps {
        let dir = model.decoder_vjp(&cache, &grad)?;
        let n = norm2(&dir);
        if !(n > 0.0) {
            break;
        }
        let moved: Vec<f64> = z
            .iter()
            .zip(&dir)
            .map(|(zi, d)| zi + cfg.eta * d / n)
            .collect();
        z = project_latent(&moved, ball.gamma);
        (xi, cache) = model.decode_cached(&z)?;
        let (q_new, g_new) = recourse_value_and_grad(inst, x, &xi)?;
        best.steps = step;
        best.history.push(q_new);
        if q_new > best.value {
            best.z = z.clone();
            best.xi = xi.clone();
            best.value = q_new;
        }
        let done = (q_new - q).abs() <= cfg.step_tol * (1.0 + q.abs());
        q = q_new;
        grad = g_new;
        if done {
            break;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgroSubsolution {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    pub value: f64,
    pub starts_used: usize,
    pub steps: Vec<usize>,
    pub best_per_start: Vec<f64>,
}

fn run_start(
    inst: &Instance,
    x: &[f64],
    model: &VaeModel,
    ball: &LatentBall,
    cfg: &PgaConfig,
    seed: u64,
    k: usize,
) -> Result<PgaRun> {
    let z0 = sample_latent_ball_with(ball, &mut stream(seed, "pga-start", &[k as u64]));
    pga_ascend(inst, x, model, ball, &z0, cfg)
}

/// `init_count` parallel starts, then single extra starts while the best value
/// does not exceed `gamma_bound`, up to `max_extra_inits` starts in total.
pub fn agro_subproblem(
    inst: &Instance,
    x: &[f64],
    model: &VaeModel,
    ball: &LatentBall,
    cfg: &PgaConfig,
    gamma_bound: f64,
    seed: u64,
) -> Result<AgroSubsolution> {
    let mut runs = (0..cfg.init_count)
        .into_par_iter()
        .map(|k| run_start(inst, x, model, ball, cfg, seed, k))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, r) in runs.iter().enumerate() {
        if r.value > runs[best].value {
            best = k;
        }
    }
    while runs[best].value <= gamma_bound && runs.len() < cfg.max_extra_inits {
        let r = run_start(inst, x, model, ball, cfg, seed, runs.len())?;
        if r.value > runs[best].value {
            best = runs.len();
        }
        runs.push(r);
    }
    let steps = runs.iter().map(|r| r.steps).collect();
    let best_per_start = runs.iter().map(|r| r.value).collect();
    let starts_used = runs.len();
    let b = runs.swap_remove(best);
    Ok(AgroSubsolution {
        z: b.z,
        xi: b.xi,
        value: b.value,
        starts_used,
        steps,
        best_per_start,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgaDiagnostics {
    pub iteration: usize,
    pub starts_used: usize,
    pub steps: Vec<usize>,
    pub best_per_start: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgroResult {
    #[serde(flatten)]
    pub result: CcgResult,
    /// Latent code of every scenario in `result.scenarios`.
    pub latent_scenarios: Vec<Vec<f64>>,
    pub pga: Vec<PgaDiagnostics>,
    pub ball: LatentBall,
}

/// Outer loop starting from `decode(0)`.
pub fn run_agro(
    inst: &Instance,
    model: &VaeModel,
    ball: &LatentBall,
    cfg: &PgaConfig,
) -> Result<AgroResult> {
    cfg.validate()?;
    if model.input_dim() != inst.n_destinations() {
        return Err(Error::Dimension(format!(
            "model has dimension {}, instance has {} destinations",
            model.input_dim(),
            inst.n_destinations()
        )));
    }
    if ball.latent_dim != model.latent_dim() {
        return Err(Error::Dimension(
            "latent ball and model disagree on the latent dimension".into(),
        ));
    }
    let origin = vec![0.0; model.latent_dim()];
    let mut latent = vec![origin.clone()];
    let mut pga = Vec::new();
    let (main, scenarios, trace, status) = outer_loop(
        inst,
        model.decode(&origin)?,
        cfg.eps,
        cfg.max_iter,
        cfg.time_limit_secs,
        |main, iteration| {
            let seed = derive_seed(cfg.seed, "agro-iteration", &[iteration as u64]);
            let sub = agro_subproblem(inst, &main.x, model, ball, cfg, main.gamma, seed)?;
            pga.push(PgaDiagnostics {
                iteration,
                starts_used: sub.starts_used,
                steps: sub.steps,
                best_per_start: sub.best_per_start,
            });
            latent.push(sub.z);
            Ok(Subsolution {
                xi: sub.xi,
                value: sub.value,
            })
        },
    )?;
    latent.truncate(scenarios.len());
    Ok(AgroResult {
        result: CcgResult {
            method: "agro".into(),
            x: main.x,
            gamma: main.gamma,
            objective: main.objective,
            scenarios,
            trace,
            status,
            heuristic: true,
        },
        latent_scenarios: latent,
        pga,
        ball: ball.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccg::Status;
    use crate::linalg::DenseMatrix;
    use crate::lp::{recourse_value, solve_main};
    use crate::neuralgen::mlp::{Activation, Layer, Mlp};
    use crate::neuralgen::{calibrate_latent, train_vae, Standardizer, VaeConfig};
    use crate::probgen::generate_problem;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn unit_instance() -> Instance {
        Instance::new(
            vec![1.0],
            DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
            5.0,
            vec![10.0],
        )
        .unwrap()
    }

    fn affine(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Layer {
        Layer {
            weight: DenseMatrix::from_rows(&rows).unwrap(),
            bias,
            activation: Activation::Identity,
        }
    }

    /// Encoder copies its input; decoder is `decoder`.
    fn model(decoder: Mlp, standardizer: Standardizer) -> VaeModel {
        let d = standardizer.dim();
        let l = decoder.input_dim();
        let eye = |n: usize, m: usize| {
            (0..n)
                .map(|i| (0..m).map(|j| f64::from(i == j)).collect())
                .collect()
        };
        VaeModel::from_parts(
            Mlp {
                layers: vec![affine(eye(d, d), vec![0.0; d])],
            },
            affine(eye(l, d), vec![0.0; l]),
            affine(vec![vec![0.0; d]; l], vec![0.0; l]),
            decoder,
            standardizer,
        )
        .unwrap()
    }

    fn identity_1d(mean: f64) -> VaeModel {
        model(
            Mlp {
                layers: vec![affine(vec![vec![1.0]], vec![0.0])],
            },
            Standardizer {
                mean: vec![mean],
                std: vec![1.0],
            },
        )
    }

    fn constant_decoder(d: usize, l: usize, value: f64) -> VaeModel {
        model(
            Mlp {
                layers: vec![affine(vec![vec![0.0; l]; d], vec![0.0; d])],
            },
            Standardizer {
                mean: vec![value; d],
                std: vec![1.0; d],
            },
        )
    }

    #[test]
    fn projection_examples() {
        let p = project_latent(&[3.0, 4.0], 2.0);
        assert!((p[0] - 1.2).abs() < 1e-15 && (p[1] - 1.6).abs() < 1e-15);
        assert_eq!(project_latent(&[0.3, 0.4], 2.0), vec![0.3, 0.4]);
        assert_eq!(project_latent(&[0.0, 0.0], 0.0), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_idempotent(z in proptest::collection::vec(-10.0..10.0f64, 1..5), g in 0.0..5.0f64) {
            let p = project_latent(&z, g);
            prop_assert!(norm2(&p) <= g * (1.0 + 1e-12));
            prop_assert_eq!(project_latent(&p, g), p);
        }
    }

    #[test]
    fn identity_decoder_climbs_to_boundary() {
        // ξ = 5 + z on [3, 7]; with x = 0.1 the cost rises with demand throughout.
        let m = identity_1d(5.0);
        let ball = LatentBall::new(2.0, 1).unwrap();
        let r = pga_ascend(
            &unit_instance(),
            &[0.1],
            &m,
            &ball,
            &[-1.5],
            &PgaConfig::default(),
        )
        .unwrap();
        assert!((r.z[0] - 2.0).abs() < 1e-12, "{:?}", r.z);
        assert!((r.value - (1.0 + 5.0 * 6.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_step_stays_put() {
        let m = identity_1d(5.0);
        let ball = LatentBall::new(2.0, 1).unwrap();
        let cfg = PgaConfig {
            eta: 0.0,
            ..Default::default()
        };
        let r = pga_ascend(&unit_instance(), &[0.1], &m, &ball, &[0.7], &cfg).unwrap();
        assert_eq!(r.z, vec![0.7]);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn constant_decoder_exhausts_extra_starts() {
        let m = constant_decoder(1, 2, 4.0);
        let ball = LatentBall::new(1.0, 2).unwrap();
        let inst = unit_instance();
        let cfg = PgaConfig {
            max_extra_inits: 30,
            ..Default::default()
        };
        let q = recourse_value(&inst, &[1.0], &[4.0]).unwrap();
        let s = agro_subproblem(&inst, &[1.0], &m, &ball, &cfg, q, 1).unwrap();
        assert_eq!(s.starts_used, 30);
        assert_eq!(s.xi, vec![4.0]);
        let s = agro_subproblem(&inst, &[1.0], &m, &ball, &cfg, f64::NEG_INFINITY, 1).unwrap();
        assert_eq!(s.starts_used, cfg.init_count);
    }

    #[test]
    fn constant_decoder_converges_immediately() {
        let m = constant_decoder(1, 1, 4.0);
        let ball = LatentBall::new(1.0, 1).unwrap();
        let r = run_agro(&unit_instance(), &m, &ball, &PgaConfig::default()).unwrap();
        assert_eq!(r.result.status, Status::Converged);
        assert!(r.result.iterations() <= 2);
    }

    fn trained(
        seed: u64,
        latent: usize,
    ) -> (crate::probgen::GeneratedProblem, VaeModel, LatentBall) {
        let g = generate_problem(3, 2, 1500, seed).unwrap();
        let cfg = VaeConfig {
            latent_dim: latent,
            hidden_width: 16,
            epochs: 20,
            seed,
            ..Default::default()
        };
        let m = train_vae(&g.dataset.train(), &g.dataset.val(), &cfg).unwrap();
        let ball = calibrate_latent(&m, &g.dataset.calibration(), 0.95, 0.05).unwrap();
        (g, m, ball)
    }

    #[test]
    fn subproblem_returns_best_start_and_never_loses_to_its_start() {
        let (g, m, ball) = trained(3, 2);
        let x = vec![0.5; 3];
        let cfg = PgaConfig::default();
        let s = agro_subproblem(&g.instance, &x, &m, &ball, &cfg, f64::NEG_INFINITY, 9).unwrap();
        assert_eq!(
            s.value,
            s.best_per_start
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        );
        for k in 0..cfg.init_count {
            let r = run_start(&g.instance, &x, &m, &ball, &cfg, 9, k).unwrap();
            assert!(r.value >= r.initial_value);
            assert_eq!(r.value, s.best_per_start[k]);
            let mut best = f64::NEG_INFINITY;
            for v in &r.history {
                best = best.max(*v);
            }
            assert_eq!(best, r.value);
        }
    }

    #[test]
    fn zero_radius_is_deterministic_problem() {
        let (g, m, _) = trained(4, 1);
        let ball = LatentBall::new(0.0, 1).unwrap();
        let r = run_agro(&g.instance, &m, &ball, &PgaConfig::default()).unwrap();
        let det = solve_main(&g.instance, &[m.decode(&[0.0]).unwrap()]).unwrap();
        assert_eq!(r.result.status, Status::Converged);
        assert!((r.result.objective - det.objective).abs() < 1e-9);
    }

    #[test]
    fn scenarios_lie_in_decoded_ball_and_bounds_rise() {
        for seed in 0..3 {
            let (g, m, ball) = trained(10 + seed, 2);
            let cfg = PgaConfig {
                seed,
                ..Default::default()
            };
            let r = run_agro(&g.instance, &m, &ball, &cfg).unwrap();
            assert_eq!(r.result.status, Status::Converged);
            assert!(r.result.iterations() <= cfg.max_iter);
            assert_eq!(r.latent_scenarios.len(), r.result.scenarios.len());
            for (z, xi) in r.latent_scenarios.iter().zip(&r.result.scenarios) {
                assert!(norm2(z) <= ball.gamma + 1e-9);
                assert_eq!(&m.decode(z).unwrap(), xi);
            }
            let t = &r.result.trace;
            assert!(t
                .windows(2)
                .all(|w| w[1].lower_bound >= w[0].lower_bound - 1e-7));
            assert_eq!(r.pga.len(), t.len());
        }
    }

    #[test]
    fn mismatched_ball_rejected() {
        let m = identity_1d(5.0);
        assert!(run_agro(
            &unit_instance(),
            &m,
            &LatentBall::new(1.0, 2).unwrap(),
            &PgaConfig::default()
        )
        .is_err());
        assert!(PgaConfig {
            init_count: 300,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::lp::{recourse_value, Instance};

/// Out-of-sample cost of a first-stage decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub x: Vec<f64>,
    pub first_stage_cost: f64,
    /// Empirical α-quantile of the test recourse costs.
    pub var_estimate: f64,
    /// `first_stage_cost + var_estimate`.
    pub total: f64,
    pub alpha: f64,
    pub n_test: usize,
    /// `cᵀx + γ` of the robust solve, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aro_objective: Option<f64>,
    /// Fraction of test costs not exceeding the solver's γ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recourse_costs: Option<Vec<f64>>,
}

/// The `⌈α·N⌉`-th smallest value.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in quantile sample".into()));
    }
    let n = values.len();
    // Guard against α·N landing a rounding error above an integer.
    let k = ((alpha * n as f64) * (1.0 - 1e-12))
        .ceil()
        .clamp(1.0, n as f64) as usize;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

pub fn recourse_costs(inst: &Instance, x: &[f64], test: &DenseMatrix) -> Result<Vec<f64>> {
    (0..test.rows())
        .into_par_iter()
        .map(|r| {
            recourse_value(inst, x, test.row(r)).map_err(|e| Error::AtRow {
                row: r,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn evaluate_solution(
    inst: &Instance,
    x: &[f64],
    test: &DenseMatrix,
    alpha: f64,
) -> Result<EvalReport> {
    if x.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "first-stage decision must be nonnegative".into(),
        ));
    }
    let costs = recourse_costs(inst, x, test)?;
    let var_estimate = empirical_quantile(&costs, alpha)?;
    let first_stage_cost = inst.first_stage_cost(x);
    Ok(EvalReport {
        method: String::new(),
        x: x.to_vec(),
        first_stage_cost,
        var_estimate,
        total: first_stage_cost + var_estimate,
        alpha,
        n_test: costs.len(),
        aro_objective: None,
        gamma_coverage: None,
        recourse_costs: Some(costs),
    })
}

impl EvalReport {
    /// Attach the robust solve's γ and objective.
    pub fn with_robust(mut self, method: &str, gamma: f64, objective: f64) -> Self {
        self.method = method.to_string();
        self.aro_objective = Some(objective);
        if let Some(c) = &self.recourse_costs {
            let tol = 1e-7 * (1.0 + gamma.abs());
            self.gamma_coverage =
                Some(c.iter().filter(|&&v| v <= gamma + tol).count() as f64 / c.len() as f64);
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probgen::generate_problem;
    use crate::rng::stream;
    use rand::Rng;

    fn unit_instance() -> Instance {
        Instance::new(
            vec![1.0],
            DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
            5.0,
            vec![10.0],
        )
        .unwrap()
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(empirical_quantile(&v, 0.95).unwrap(), 95.0);
        assert_eq!(empirical_quantile(&[4.0; 7], 0.3).unwrap(), 4.0);
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
        // ⌈0.95·1000⌉ = 950 and ⌈0.95·2500⌉ = 2375 despite rounding in α·N.
        for n in [20usize, 1000, 2500, 59] {
            let v: Vec<f64> = (1..=n).map(|k| k as f64).collect();
            let k = (95 * n).div_ceil(100);
            assert_eq!(empirical_quantile(&v, 0.95).unwrap(), k as f64, "n={n}");
        }
    }

    #[test]
    fn two_row_hand_example() {
        let test = DenseMatrix::from_rows(&[vec![5.0], vec![15.0]]).unwrap();
        let r = evaluate_solution(&unit_instance(), &[1.0], &test, 0.95).unwrap();
        assert_eq!(r.recourse_costs.as_deref(), Some(&[5.0, 35.0][..]));
        assert_eq!(r.var_estimate, 35.0);
        assert_eq!(r.total, 36.0);
    }

    #[test]
    fn zero_capacity_closed_form() {
        let g = generate_problem(3, 2, 200, 1).unwrap();
        let test = g.dataset.test();
        let r = evaluate_solution(&g.instance, &[0.0; 3], &test, 0.9).unwrap();
        let costs = r.recourse_costs.clone().unwrap();
        for (k, c) in costs.iter().enumerate() {
            let expect: f64 = test.row(k).iter().map(|v| 5.0 * v.max(0.0)).sum();
            assert!((c - expect).abs() < 1e-9 * expect.max(1.0));
        }
        let expect: Vec<f64> = (0..test.rows())
            .map(|k| test.row(k).iter().map(|v| 5.0 * v.max(0.0)).sum())
            .collect();
        assert!((r.var_estimate - empirical_quantile(&expect, 0.9).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn more_capacity_never_raises_var() {
        let g = generate_problem(4, 3, 300, 2).unwrap();
        let test = g.dataset.test();
        let mut rng = stream(3, "pairs", &[]);
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            let bigger: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
            let a = evaluate_solution(&g.instance, &x, &test, 0.95).unwrap();
            let b = evaluate_solution(&g.instance, &bigger, &test, 0.95).unwrap();
            assert!(b.var_estimate <= a.var_estimate + 1e-9);
        }
    }

    #[test]
    fn coverage_of_gamma() {
        let test = DenseMatrix::from_rows(&[vec![5.0], vec![15.0]]).unwrap();
        let r = evaluate_solution(&unit_instance(), &[1.0], &test, 0.95)
            .unwrap()
            .with_robust("x", 10.0, 11.0);
        assert_eq!(r.gamma_coverage, Some(0.5));
        assert!(evaluate_solution(&unit_instance(), &[-1.0], &test, 0.95).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::{solve_lp, LpSpec, Sense};
use crate::error::{Error, Result};
use crate::linalg::{dist_inf, DenseMatrix};

/// Production-distribution problem data.
///
/// First stage produces `x_i` at unit cost `c_i`; after demands `ξ` are
/// revealed, facility `i` ships up to `p_i x_i` units at `d1[i][j]` per unit,
/// and unmet demand costs `d2` per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRepr", into = "InstanceRepr")]
pub struct Instance {
    pub c: Vec<f64>,
    pub d1: DenseMatrix,
    pub d2: f64,
    pub p: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRepr {
    c: Vec<f64>,
    d1: DenseMatrix,
    d2: f64,
    p: Vec<f64>,
}

impl TryFrom<InstanceRepr> for Instance {
    type Error = Error;
    fn try_from(r: InstanceRepr) -> Result<Self> {
        Instance::new(r.c, r.d1, r.d2, r.p)
    }
}

impl From<Instance> for InstanceRepr {
    fn from(i: Instance) -> Self {
        InstanceRepr {
            c: i.c,
            d1: i.d1,
            d2: i.d2,
            p: i.p,
        }
    }
}

impl Instance {
    pub fn new(c: Vec<f64>, d1: DenseMatrix, d2: f64, p: Vec<f64>) -> Result<Self> {
        let inst = Self { c, d1, d2, p };
        inst.validate()?;
        Ok(inst)
    }

    pub fn n_facilities(&self) -> usize {
        self.c.len()
    }

    pub fn n_destinations(&self) -> usize {
        self.d1.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let ni = self.c.len();
        if ni == 0 || self.d1.cols() == 0 {
            return Err(Error::Dimension(
                "instance needs at least one facility and destination".into(),
            ));
        }
        if self.p.len() != ni || self.d1.rows() != ni {
            return Err(Error::Dimension(format!(
                "c has {ni} entries, p {}, d1 {} rows",
                self.p.len(),
                self.d1.rows()
            )));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !(self.c.iter().all(positive)
            && self.p.iter().all(positive)
            && self.d1.as_slice().iter().all(positive)
            && positive(&self.d2))
        {
            return Err(Error::InvalidArgument(
                "instance costs and factors must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn first_stage_cost(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_facilities() {
            return Err(Error::Dimension(format!(
                "x has {} entries, expected {}",
                x.len(),
                self.n_facilities()
            )));
        }
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "x must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn check_xi(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.n_destinations() {
            return Err(Error::Dimension(format!(
                "scenario has {} entries, expected {}",
                xi.len(),
                self.n_destinations()
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scenario must be finite".into()));
        }
        Ok(())
    }
}

/// Recourse LP for fixed `x` and demand `ξ`.
///
/// Columns are `[y1 row-major (I·J), y2 (J)]`; rows are the `J` demand rows
/// (`≥ ξ_j`) followed by the `I` capacity rows (`≤ p_i x_i`).
pub fn build_recourse_lp(inst: &Instance, x: &[f64], xi: &[f64]) -> Result<LpSpec> {
    inst.check_x(x)?;
    inst.check_xi(xi)?;
    let (ni, nj) = (inst.n_facilities(), inst.n_destinations());
    let ncols = ni * nj + nj;
    let mut a = DenseMatrix::zeros(nj + ni, ncols);
    let mut objective = Vec::with_capacity(ncols);
    objective.extend_from_slice(inst.d1.as_slice());
    objective.extend(std::iter::repeat_n(inst.d2, nj));
    for j in 0..nj {
        for i in 0..ni {
            a[(j, i * nj + j)] = 1.0;
        }
        a[(j, ni * nj + j)] = 1.0;
    }
    for i in 0..ni {
        for j in 0..nj {
            a[(nj + i, i * nj + j)] = 1.0;
        }
    }
    let mut rhs = xi.to_vec();
    rhs.extend(inst.p.iter().zip(x).map(|(p, x)| p * x));
    let mut senses = vec![Sense::Ge; nj];
    senses.extend(std::iter::repeat_n(Sense::Le, ni));
    Ok(LpSpec::new(objective, a, rhs, senses))
}

pub fn recourse_value(inst: &Instance, x: &[f64], xi: &[f64]) -> Result<f64> {
    let spec = build_recourse_lp(inst, x, xi)?;
    Ok(solve_lp(&spec)?.require_optimal()?.objective)
}

/// Recourse cost `q(ξ, x)` and its gradient in `ξ`.
///
/// `ξ` only enters the demand-row right-hand sides, so the gradient is the
/// vector of demand-row duals. At dual-degenerate points this is the subgradient
/// of the terminating basis.
pub fn recourse_value_and_grad(inst: &Instance, x: &[f64], xi: &[f64]) -> Result<(f64, Vec<f64>)> {
    let spec = build_recourse_lp(inst, x, xi)?;
    let sol = solve_lp(&spec)?.require_optimal()?;
    let nj = inst.n_destinations();
    Ok((sol.objective, sol.dual[..nj].to_vec()))
}

/// Drop scenarios within `1e-9` (L∞) of an earlier one.
pub fn dedup_scenarios(scenarios: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        if !out.iter().any(|o| dist_inf(o, s) <= 1e-9) {
            out.push(s.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MainSolution {
    pub x: Vec<f64>,
    pub gamma: f64,
    pub objective: f64,
}

/// Main problem over a finite scenario set:
/// `min cᵀx + γ` with one recourse copy `y^s` per scenario and `γ ≥ dᵀy^s`.
///
/// Columns: `[x (I), y^1 .. y^S (I·J + J each), γ]`. Rows per scenario:
/// demand (J), capacity (I), epigraph (1).
pub fn build_main_lp(inst: &Instance, scenarios: &[Vec<f64>]) -> Result<LpSpec> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument(
            "main problem needs at least one scenario".into(),
        ));
    }
    for s in scenarios {
        inst.check_xi(s)?;
    }
    let (ni, nj) = (inst.n_facilities(), inst.n_destinations());
    let ny = ni * nj + nj;
    let ns = scenarios.len();
    let ncols = ni + ns * ny + 1;
    let rows_per = nj + ni + 1;
    let gamma_col = ncols - 1;
    let mut a = DenseMatrix::zeros(ns * rows_per, ncols);
    let mut rhs = Vec::with_capacity(ns * rows_per);
    let mut senses = Vec::with_capacity(ns * rows_per);

    let mut objective = vec![0.0; ncols];
    objective[..ni].copy_from_slice(&inst.c);
    objective[gamma_col] = 1.0;

    for (s, xi) in scenarios.iter().enumerate() {
        let y0 = ni + s * ny;
        let r0 = s * rows_per;
        for j in 0..nj {
            for i in 0..ni {
                a[(r0 + j, y0 + i * nj + j)] = 1.0;
            }
            a[(r0 + j, y0 + ni * nj + j)] = 1.0;
            rhs.push(xi[j]);
            senses.push(Sense::Ge);
        }
        for i in 0..ni {
            let r = r0 + nj + i;
            for j in 0..nj {
                a[(r, y0 + i * nj + j)] = 1.0;
            }
            a[(r, i)] = -inst.p[i];
            rhs.push(0.0);
            senses.push(Sense::Le);
        }
        let r = r0 + nj + ni;
        a[(r, gamma_col)] = 1.0;
        for k in 0..ni * nj {
            a[(r, y0 + k)] = -inst.d1.as_slice()[k];
        }
        for j in 0..nj {
            a[(r, y0 + ni * nj + j)] = -inst.d2;
        }
        rhs.push(0.0);
        senses.push(Sense::Ge);
    }
    Ok(LpSpec::new(objective, a, rhs, senses))
}

/// Solve the main problem after dropping duplicate scenarios.
pub fn solve_main(inst: &Instance, scenarios: &[Vec<f64>]) -> Result<MainSolution> {
    let unique = dedup_scenarios(scenarios);
    let spec = build_main_lp(inst, &unique)?;
    let sol = solve_lp(&spec)?.require_optimal()?;
    let ni = inst.n_facilities();
    let x: Vec<f64> = sol.primal[..ni].iter().map(|v| v.max(0.0)).collect();
    let gamma = sol.primal[spec.n_cols() - 1];
    Ok(MainSolution {
        x,
        gamma,
        objective: sol.objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::LpStatus;
    use proptest::prelude::*;

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
    fn recourse_lp_shape_one_by_one() {
        let spec = build_recourse_lp(&unit_instance(), &[1.0], &[5.0]).unwrap();
        assert_eq!(spec.n_rows(), 2);
        assert_eq!(spec.matrix.to_rows(), vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(spec.rhs, vec![5.0, 10.0]);
        assert_eq!(spec.senses, vec![Sense::Ge, Sense::Le]);
        assert_eq!(spec.objective, vec![1.0, 5.0]);
    }

    #[test]
    fn recourse_lp_shape_two_by_three() {
        let inst = Instance::new(
            vec![1.0, 2.0],
            DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
            5.0,
            vec![10.0, 12.0],
        )
        .unwrap();
        let spec = build_recourse_lp(&inst, &[1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((spec.n_cols(), spec.n_rows()), (9, 5));
        assert_eq!(spec.rhs[3..], [10.0, 12.0]);
    }

    #[test]
    fn negative_demand_is_feasible_at_zero() {
        let inst = unit_instance();
        let spec = build_recourse_lp(&inst, &[1.0], &[-1.0]).unwrap();
        assert_eq!(spec.rhs[0], -1.0);
        let sol = solve_lp(&spec).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn value_and_grad_examples() {
        let inst = unit_instance();
        let (q, g) = recourse_value_and_grad(&inst, &[1.0], &[5.0]).unwrap();
        assert!((q - 5.0).abs() < 1e-12 && (g[0] - 1.0).abs() < 1e-12);
        let (q, g) = recourse_value_and_grad(&inst, &[1.0], &[15.0]).unwrap();
        assert!((q - 35.0).abs() < 1e-12 && (g[0] - 5.0).abs() < 1e-12);
        let (q, g) = recourse_value_and_grad(&inst, &[1.0], &[-1.0]).unwrap();
        assert!(q.abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let inst = unit_instance();
        assert!(matches!(
            build_recourse_lp(&inst, &[1.0, 2.0], &[1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            build_recourse_lp(&inst, &[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        assert!(build_recourse_lp(&inst, &[-1.0], &[1.0]).is_err());
    }

    /// Grid oracle: `c x + q(ξ, x)` minimized over a fine grid of `x`.
    fn grid_oracle(inst: &Instance, scenarios: &[Vec<f64>]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=4000 {
            let x = k as f64 * 0.001;
            let worst = scenarios
                .iter()
                .map(|s| recourse_value(inst, &[x], s).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let v = inst.c[0] * x + worst;
            if v < best.0 {
                best = (v, x);
            }
        }
        best
    }

    #[test]
    fn main_problem_single_scenario() {
        let inst = unit_instance();
        let (oracle_obj, oracle_x) = grid_oracle(&inst, &[vec![15.0]]);
        assert!((oracle_x - 1.5).abs() < 1e-9 && (oracle_obj - 16.5).abs() < 1e-9);
        let m = solve_main(&inst, &[vec![15.0]]).unwrap();
        assert!((m.x[0] - 1.5).abs() < 1e-9);
        assert!((m.gamma - 15.0).abs() < 1e-9);
        assert!((m.objective - 16.5).abs() < 1e-9);
    }

    #[test]
    fn main_problem_inactive_demand() {
        let m = solve_main(&unit_instance(), &[vec![-1.0]]).unwrap();
        assert!(m.x[0].abs() < 1e-12 && m.gamma.abs() < 1e-12 && m.objective.abs() < 1e-12);
    }

    #[test]
    fn main_problem_dominated_scenario() {
        let inst = unit_instance();
        let (oracle_obj, _) = grid_oracle(&inst, &[vec![5.0], vec![15.0]]);
        let both = solve_main(&inst, &[vec![5.0], vec![15.0]]).unwrap();
        let single = solve_main(&inst, &[vec![15.0]]).unwrap();
        assert!((both.objective - single.objective).abs() < 1e-9);
        assert!((both.x[0] - single.x[0]).abs() < 1e-9);
        assert!((both.objective - oracle_obj).abs() < 1e-9);
    }

    #[test]
    fn main_requires_scenarios() {
        assert!(solve_main(&unit_instance(), &[]).is_err());
    }

    #[test]
    fn dedup_drops_near_duplicates() {
        let s = vec![vec![1.0, 2.0], vec![1.0 + 1e-12, 2.0], vec![1.0, 2.1]];
        assert_eq!(dedup_scenarios(&s).len(), 2);
    }

    #[test]
    fn instance_json_round_trip_and_validation() {
        let inst = unit_instance();
        let s = serde_json::to_string(&inst).unwrap();
        assert_eq!(s, r#"{"c":[1.0],"d1":[[1.0]],"d2":5.0,"p":[10.0]}"#);
        let back: Instance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, inst);
        assert!(serde_json::from_str::<Instance>(
            r#"{"c":[1.0],"d1":[[1.0]],"d2":-5.0,"p":[10.0]}"#
        )
        .is_err());
        assert!(serde_json::from_str::<Instance>(
            r#"{"c":[1.0,2.0],"d1":[[1.0]],"d2":5.0,"p":[10.0]}"#
        )
        .is_err());
    }

    fn small_instance() -> impl Strategy<Value = (Instance, Vec<f64>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(ni, nj)| {
            (
                prop::collection::vec(0.5f64..3.0, ni),
                prop::collection::vec(0.5f64..8.0, ni * nj),
                prop::collection::vec(5.0f64..15.0, ni),
                prop::collection::vec(0.0f64..2.0, ni),
            )
                .prop_map(move |(c, d1, p, x)| {
                    let d1 = DenseMatrix::from_row_major(ni, nj, d1).unwrap();
                    (Instance::new(c, d1, 5.0, p).unwrap(), x)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn recourse_is_convex_in_demand(
            (inst, x) in small_instance(),
            a in prop::collection::vec(-5.0f64..20.0, 3),
            b in prop::collection::vec(-5.0f64..20.0, 3),
            lambda in 0.01f64..0.99,
        ) {
            let nj = inst.n_destinations();
            let (a, b) = (&a[..nj], &b[..nj]);
            let mid: Vec<f64> = a.iter().zip(b).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect();
            let qa = recourse_value(&inst, &x, a).unwrap();
            let qb = recourse_value(&inst, &x, b).unwrap();
            let qm = recourse_value(&inst, &x, &mid).unwrap();
            prop_assert!(qm <= lambda * qa + (1.0 - lambda) * qb + 1e-8);
        }

        #[test]
        fn gradient_bounded_by_unmet_cost(
            (inst, x) in small_instance(),
            xi in prop::collection::vec(-5.0f64..20.0, 3),
        ) {
            let xi = &xi[..inst.n_destinations()];
            let (_, g) = recourse_value_and_grad(&inst, &x, xi).unwrap();
            for gj in g {
                prop_assert!((-1e-9..=inst.d2 + 1e-9).contains(&gj));
            }
        }

        #[test]
        fn strong_duality_on_recourse(
            (inst, x) in small_instance(),
            xi in prop::collection::vec(-5.0f64..20.0, 3),
        ) {
            let spec = build_recourse_lp(&inst, &x, &xi[..inst.n_destinations()]).unwrap();
            let sol = solve_lp(&spec).unwrap();
            prop_assert!(spec.primal_residual(&sol.primal) <= 1e-7);
            prop_assert!(spec.dual_residual(&sol.dual) <= 1e-7);
            prop_assert!((sol.objective - spec.dual_objective(&sol.dual)).abs() <= 1e-6 * (1.0 + sol.objective.abs()));
        }

        #[test]
        fn main_objective_monotone_in_scenarios(
            (inst, _x) in small_instance(),
            scen in prop::collection::vec(prop::collection::vec(-5.0f64..20.0, 3), 1..5),
        ) {
            let nj = inst.n_destinations();
            let scen: Vec<Vec<f64>> = scen.into_iter().map(|s| s[..nj].to_vec()).collect();
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=scen.len() {
                let m = solve_main(&inst, &scen[..k]).unwrap();
                prop_assert!(m.objective >= prev - 1e-9 * (1.0 + prev.abs()));
                let worst = scen[..k].iter().map(|s| recourse_value(&inst, &m.x, s).unwrap()).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.gamma >= worst - 1e-6);
                prev = m.objective;
            }
        }
    }
}

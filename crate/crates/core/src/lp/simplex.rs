//! Dense revised simplex with an explicitly maintained basis inverse.
//!
//! Two phases: artificial variables are added only for rows whose slack cannot
//! start in the basis. Pricing is Dantzig's rule with a Harris ratio test; after
//! a run of degenerate pivots the solver switches to Bland's rule, which cannot
//! cycle. Duals are read off the terminating basis, `y = c_Bᵀ B⁻¹`.

use super::{LpSolution, LpSpec, LpStatus, Sense, FEASIBILITY_TOL, OPTIMALITY_TOL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub pivot_tol: f64,
    /// Consecutive degenerate pivots tolerated before switching to Bland's rule.
    pub degenerate_switch: usize,
    pub refactor_every: usize,
    pub max_iterations: Option<usize>,
    /// Use Bland's rule from the first pivot.
    pub bland_only: bool,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: FEASIBILITY_TOL,
            optimality_tol: OPTIMALITY_TOL,
            pivot_tol: 1e-9,
            degenerate_switch: 50,
            refactor_every: 64,
            max_iterations: None,
            bland_only: false,
        }
    }
}

pub fn solve_lp(spec: &LpSpec) -> Result<LpSolution> {
    solve_lp_with(spec, &SimplexOptions::default())
}

pub fn solve_lp_with(spec: &LpSpec, opts: &SimplexOptions) -> Result<LpSolution> {
    spec.validate()?;
    let std = Standardized::new(spec);
    let mut solver = Solver::new(&std, opts);
    solver.solve()
}

/// How an original variable maps onto standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    Shifted { col: usize, lb: f64 },
    Split { plus: usize, minus: usize },
}

/// `A x = b, x ≥ 0, b ≥ 0` with sparse columns.
struct Standardized {
    m: usize,
    col_start: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    cost: Vec<f64>,
    artificial: Vec<bool>,
    row_sign: Vec<f64>,
    initial_basis: Vec<usize>,
    var_map: Vec<VarMap>,
    objective: Vec<f64>,
}

impl Standardized {
    fn new(spec: &LpSpec) -> Self {
        let m = spec.n_rows();
        let n = spec.n_cols();

        // Effective rhs after shifting finite lower bounds.
        let mut b = spec.rhs.clone();
        for (i, bi) in b.iter_mut().enumerate() {
            let row = spec.matrix.row(i);
            for j in 0..n {
                let lb = spec.lower_bounds[j];
                if lb.is_finite() && lb != 0.0 {
                    *bi -= row[j] * lb;
                }
            }
        }
        let row_sign: Vec<f64> = b
            .iter()
            .map(|&v| if v < 0.0 { -1.0 } else { 1.0 })
            .collect();
        for (bi, s) in b.iter_mut().zip(&row_sign) {
            *bi *= s;
        }

        let mut col_start = vec![0];
        let mut row_idx = Vec::new();
        let mut vals = Vec::new();
        let mut cost = Vec::new();
        let mut artificial = Vec::new();
        let mut var_map = Vec::with_capacity(n);

        let mut push_col = |entries: &mut dyn Iterator<Item = (usize, f64)>, c: f64, art: bool| {
            for (i, v) in entries {
                if v != 0.0 {
                    row_idx.push(i);
                    vals.push(v);
                }
            }
            col_start.push(row_idx.len());
            cost.push(c);
            artificial.push(art);
            cost.len() - 1
        };

        for j in 0..n {
            let lb = spec.lower_bounds[j];
            let c = spec.objective[j];
            let mut entries = (0..m).map(|i| (i, spec.matrix[(i, j)] * row_sign[i]));
            let plus = push_col(&mut entries, c, false);
            if lb.is_finite() {
                var_map.push(VarMap::Shifted { col: plus, lb });
            } else {
                let mut neg = (0..m).map(|i| (i, -spec.matrix[(i, j)] * row_sign[i]));
                let minus = push_col(&mut neg, -c, false);
                var_map.push(VarMap::Split { plus, minus });
            }
        }

        let mut initial_basis = vec![usize::MAX; m];
        for i in 0..m {
            let coef = match spec.senses[i] {
                Sense::Ge => -1.0,
                Sense::Le => 1.0,
                Sense::Eq => continue,
            } * row_sign[i];
            let col = push_col(&mut std::iter::once((i, coef)), 0.0, false);
            if coef > 0.0 {
                initial_basis[i] = col;
            }
        }
        for i in 0..m {
            if initial_basis[i] == usize::MAX {
                initial_basis[i] = push_col(&mut std::iter::once((i, 1.0)), 0.0, true);
            }
        }

        Self {
            m,
            col_start,
            row_idx,
            vals,
            b,
            cost,
            artificial,
            row_sign,
            initial_basis,
            var_map,
            objective: spec.objective.clone(),
        }
    }

    fn n(&self) -> usize {
        self.cost.len()
    }

    #[inline]
    fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_start[j]..self.col_start[j + 1];
        self.row_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }
}

enum PhaseEnd {
    Optimal,
    Unbounded,
}

struct Solver<'a> {
    lp: &'a Standardized,
    opts: &'a SimplexOptions,
    basis: Vec<usize>,
    position: Vec<usize>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
    since_refactor: usize,
    max_iterations: usize,
}

impl<'a> Solver<'a> {
    fn new(lp: &'a Standardized, opts: &'a SimplexOptions) -> Self {
        let m = lp.m;
        let n = lp.n();
        let mut position = vec![usize::MAX; n];
        for (i, &j) in lp.initial_basis.iter().enumerate() {
            position[j] = i;
        }
        // Every initial basic column is a unit vector, so B = I.
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        Self {
            lp,
            opts,
            basis: lp.initial_basis.clone(),
            position,
            binv,
            xb: lp.b.clone(),
            iterations: 0,
            since_refactor: 0,
            max_iterations: opts.max_iterations.unwrap_or(20_000 + 50 * (m + n)),
        }
    }

    fn solve(&mut self) -> Result<LpSolution> {
        let lp = self.lp;
        let has_artificial = lp.artificial.iter().any(|&a| a);
        if has_artificial {
            let phase1: Vec<f64> = lp
                .artificial
                .iter()
                .map(|&a| if a { 1.0 } else { 0.0 })
                .collect();
            self.run_phase(&phase1, true)?;
            self.refactor()?;
            let infeas: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .filter(|(&j, _)| lp.artificial[j])
                .map(|(_, &v)| v)
                .sum();
            let scale = 1.0 + lp.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if infeas > self.opts.feasibility_tol * scale {
                return Ok(self.terminal(LpStatus::Infeasible));
            }
            self.drive_out_artificials()?;
        }

        let cost = &lp.cost;
        for _ in 0..4 {
            match self.run_phase(cost, false)? {
                PhaseEnd::Unbounded => return Ok(self.terminal(LpStatus::Unbounded)),
                PhaseEnd::Optimal => {}
            }
            self.refactor()?;
            if self.entering(cost, false, false).is_none() {
                break;
            }
        }
        Ok(self.extract())
    }

    fn terminal(&self, status: LpStatus) -> LpSolution {
        LpSolution {
            status,
            primal: Vec::new(),
            dual: Vec::new(),
            objective: match status {
                LpStatus::Unbounded => f64::NEG_INFINITY,
                _ => f64::INFINITY,
            },
            degenerate: false,
            iterations: self.iterations,
        }
    }

    fn allowed(&self, j: usize, phase_one: bool) -> bool {
        self.position[j] == usize::MAX && (phase_one || !self.lp.artificial[j])
    }

    /// `c_Bᵀ B⁻¹`
    fn btran_costs(&self, cost: &[f64]) -> Vec<f64> {
        let m = self.lp.m;
        let mut y = vec![0.0; m];
        for (i, &j) in self.basis.iter().enumerate() {
            let cb = cost[j];
            if cb != 0.0 {
                let row = &self.binv[i * m..(i + 1) * m];
                for (yk, &bk) in y.iter_mut().zip(row) {
                    *yk += cb * bk;
                }
            }
        }
        y
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.lp.m;
        let mut w = vec![0.0; m];
        for (k, a) in self.lp.column(j) {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi += self.binv[i * m + k] * a;
            }
        }
        w
    }

    fn reduced_cost(&self, cost: &[f64], y: &[f64], j: usize) -> f64 {
        cost[j] - self.lp.column(j).map(|(i, a)| y[i] * a).sum::<f64>()
    }

    fn entering(&self, cost: &[f64], phase_one: bool, bland: bool) -> Option<usize> {
        let y = self.btran_costs(cost);
        let tol = self.opts.optimality_tol;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.lp.n() {
            if !self.allowed(j, phase_one) {
                continue;
            }
            let d = self.reduced_cost(cost, &y, j);
            let scaled = d / (1.0 + cost[j].abs());
            if scaled < -tol {
                if bland {
                    return Some(j);
                }
                if best.is_none_or(|(_, bd)| scaled < bd) {
                    best = Some((j, scaled));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    fn leaving(&self, w: &[f64], bland: bool) -> Option<usize> {
        let ptol = self.opts.pivot_tol;
        if bland {
            let mut best: Option<(usize, f64)> = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > ptol {
                    let ratio = self.xb[i].max(0.0) / wi;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-12
                                || (ratio <= br + 1e-12 && self.basis[i] < self.basis[bi])
                            {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            return best.map(|(i, _)| i);
        }
        // Harris two-pass ratio test.
        let ftol = self.opts.feasibility_tol;
        let mut theta_max = f64::INFINITY;
        for (i, &wi) in w.iter().enumerate() {
            if wi > ptol {
                theta_max = theta_max.min((self.xb[i].max(0.0) + ftol) / wi);
            }
        }
        if !theta_max.is_finite() {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi > ptol
                && self.xb[i].max(0.0) / wi <= theta_max
                && best.is_none_or(|(_, bw)| wi > bw)
            {
                best = Some((i, wi));
            }
        }
        best.map(|(i, _)| i)
    }

    fn pivot(&mut self, r: usize, q: usize, w: &[f64]) -> Result<()> {
        let m = self.lp.m;
        let piv = w[r];
        let theta = self.xb[r].max(0.0) / piv;
        for i in 0..m {
            if i != r && w[i] != 0.0 {
                self.xb[i] -= theta * w[i];
                if self.xb[i] < 0.0 {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;

        let (before, rest) = self.binv.split_at_mut(r * m);
        let (pivot_row, after) = rest.split_at_mut(m);
        pivot_row.iter_mut().for_each(|v| *v /= piv);
        for (i, row) in before
            .chunks_exact_mut(m)
            .chain(after.chunks_exact_mut(m))
            .enumerate()
        {
            let idx = if i < r { i } else { i + 1 };
            let f = w[idx];
            if f != 0.0 {
                for (v, &p) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * p;
                }
            }
        }

        let out = self.basis[r];
        self.position[out] = usize::MAX;
        self.position[q] = r;
        self.basis[r] = q;
        self.iterations += 1;
        self.since_refactor += 1;
        if self.since_refactor >= self.opts.refactor_every {
            self.refactor()?;
        }
        Ok(())
    }

    /// Recompute `B⁻¹` by Gauss-Jordan elimination and `x_B = B⁻¹ b`.
    fn refactor(&mut self) -> Result<()> {
        let m = self.lp.m;
        self.since_refactor = 0;
        if m == 0 {
            return Ok(());
        }
        let mut a = vec![0.0; m * m];
        for (c, &j) in self.basis.iter().enumerate() {
            for (i, v) in self.lp.column(j) {
                a[i * m + c] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let (p, pv) = (col..m)
                .map(|i| (i, a[i * m + col].abs()))
                .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pv < 1e-13 {
                return Err(Error::Lp("singular basis during refactorization".into()));
            }
            if p != col {
                for k in 0..m {
                    a.swap(p * m + k, col * m + k);
                    inv.swap(p * m + k, col * m + k);
                }
            }
            let d = a[col * m + col];
            for k in 0..m {
                a[col * m + k] /= d;
                inv[col * m + k] /= d;
            }
            for i in 0..m {
                if i != col {
                    let f = a[i * m + col];
                    if f != 0.0 {
                        for k in 0..m {
                            a[i * m + k] -= f * a[col * m + k];
                            inv[i * m + k] -= f * inv[col * m + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        for i in 0..m {
            self.xb[i] = (0..m).map(|k| self.binv[i * m + k] * self.lp.b[k]).sum();
        }
        Ok(())
    }

    fn run_phase(&mut self, cost: &[f64], phase_one: bool) -> Result<PhaseEnd> {
        let mut bland = self.opts.bland_only;
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iterations {
                return Err(Error::Lp(format!(
                    "iteration limit {} reached",
                    self.max_iterations
                )));
            }
            let Some(q) = self.entering(cost, phase_one, bland) else {
                return Ok(PhaseEnd::Optimal);
            };
            let w = self.ftran(q);
            let Some(r) = self.leaving(&w, bland) else {
                if phase_one {
                    // Phase one is bounded below; a missing ratio means numerical trouble.
                    self.refactor()?;
                    continue;
                }
                return Ok(PhaseEnd::Unbounded);
            };
            let step = self.xb[r].max(0.0) / w[r];
            if step <= 1e-12 {
                degenerate_run += 1;
                if degenerate_run > self.opts.degenerate_switch.max(self.lp.m) {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, q, &w)?;
        }
    }

    fn drive_out_artificials(&mut self) -> Result<()> {
        let m = self.lp.m;
        for r in 0..m {
            if !self.lp.artificial[self.basis[r]] {
                continue;
            }
            let mut replacement = None;
            for j in 0..self.lp.n() {
                if self.position[j] != usize::MAX || self.lp.artificial[j] {
                    continue;
                }
                let wr: f64 = self
                    .lp
                    .column(j)
                    .map(|(k, a)| self.binv[r * m + k] * a)
                    .sum();
                if wr.abs() > 1e-7 {
                    replacement = Some(j);
                    break;
                }
            }
            // No replacement means the row is redundant; the artificial stays basic at zero.
            if let Some(j) = replacement {
                let w = self.ftran(j);
                self.xb[r] = 0.0;
                self.pivot(r, j, &w)?;
            }
        }
        self.refactor()
    }

    fn extract(&self) -> LpSolution {
        let lp = self.lp;
        let mut xs = vec![0.0; lp.n()];
        for (i, &j) in self.basis.iter().enumerate() {
            xs[j] = self.xb[i];
        }
        let primal: Vec<f64> = lp
            .var_map
            .iter()
            .map(|vm| match *vm {
                VarMap::Shifted { col, lb } => lb + xs[col],
                VarMap::Split { plus, minus } => xs[plus] - xs[minus],
            })
            .collect();
        let y = self.btran_costs(&lp.cost);
        let dual: Vec<f64> = y.iter().zip(&lp.row_sign).map(|(v, s)| v * s).collect();
        let objective = primal.iter().zip(&lp.objective).map(|(x, c)| x * c).sum();
        let degenerate = self.xb.iter().any(|&v| v.abs() <= 1e-9);
        LpSolution {
            status: LpStatus::Optimal,
            primal,
            dual,
            objective,
            degenerate,
            iterations: self.iterations,
        }
    }
}

//! Bounded revised simplex for `min cᵀx` subject to `lo ≤ Ax ≤ hi` and
//! `l ≤ x ≤ u`. Rows become equalities with bounded logical variables; the
//! basis inverse is kept dense and updated by rank-one pivots.

use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl LpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
            LpStatus::IterationLimit => "iteration-limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coefs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.len() - 1
    }

    pub fn add_row(&mut self, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) -> usize {
        self.rows.push(Row { coefs, lo, hi });
        self.rows.len() - 1
    }

    pub fn var_count(&self) -> usize {
        self.cost.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn activity(&self, row: usize, x: &[f64]) -> f64 {
        self.rows[row].coefs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn solve(&self) -> LpSolution {
        self.solve_with(&SimplexOptions::default())
    }

    pub fn solve_with(&self, options: &SimplexOptions) -> LpSolution {
        Simplex::new(self, options).run()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iterations: usize,
    /// Primal feasibility tolerance.
    pub primal_tol: f64,
    /// Reduced-cost tolerance on the scaled objective.
    pub dual_tol: f64,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub stall_limit: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            primal_tol: 1e-9,
            dual_tol: 1e-10,
            stall_limit: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Row duals: sensitivity of the objective to each row's active bound.
    pub duals: Vec<f64>,
    /// `c_j − yᵀA_j` per structural variable.
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
    /// Largest bound or row violation of `x`.
    pub primal_residual: f64,
    /// Largest |reduced cost| × distance from the bound it pushes toward.
    pub complementarity: f64,
    /// Largest reduced cost with the wrong sign for its variable's position.
    pub dual_infeasibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    One,
    Two,
}

struct Simplex<'a> {
    lp: &'a LinearProgram,
    opts: SimplexOptions,
    m: usize,
    /// Columns: structurals, then one logical per row (−e_r), then artificials.
    cols: Vec<Vec<(usize, f64)>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    basis: Vec<usize>,
    /// Basis position of each column, or `usize::MAX` when nonbasic.
    pos: Vec<usize>,
    /// B⁻¹ in column-major order.
    binv: Vec<f64>,
    first_artificial: usize,
    scale: f64,
    iterations: usize,
}

const NONBASIC: usize = usize::MAX;
const PIVOT_TOL: f64 = 1e-9;

impl<'a> Simplex<'a> {
    fn new(lp: &'a LinearProgram, opts: &SimplexOptions) -> Self {
        let n = lp.var_count();
        let m = lp.rows.len();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, row) in lp.rows.iter().enumerate() {
            for &(j, a) in &row.coefs {
                if a != 0.0 {
                    cols[j].push((r, a));
                }
            }
        }
        let mut lo = lp.lower.clone();
        let mut hi = lp.upper.clone();
        for (r, row) in lp.rows.iter().enumerate() {
            cols.push(vec![(r, -1.0)]);
            lo.push(row.lo);
            hi.push(row.hi);
        }
        let scale = lp.cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1e-300);
        let mut cost: Vec<f64> = lp.cost.iter().map(|c| c / scale).collect();
        cost.extend(std::iter::repeat_n(0.0, m));
        // Nonbasic structurals start at the finite bound nearest zero.
        let mut x: Vec<f64> = (0..n + m)
            .map(|j| {
                if j >= n {
                    0.0
                } else if lo[j].is_finite() && hi[j].is_finite() {
                    if lo[j].abs() <= hi[j].abs() {
                        lo[j]
                    } else {
                        hi[j]
                    }
                } else if lo[j].is_finite() {
                    lo[j]
                } else if hi[j].is_finite() {
                    hi[j]
                } else {
                    0.0
                }
            })
            .collect();
        let mut basis = Vec::with_capacity(m);
        let mut binv = vec![0.0; m * m];
        let first_artificial = n + m;
        for (r, row) in lp.rows.iter().enumerate() {
            let act: f64 = row.coefs.iter().map(|&(j, a)| a * x[j]).sum();
            let s = n + r;
            if act >= row.lo - opts.primal_tol && act <= row.hi + opts.primal_tol {
                x[s] = act;
                basis.push(s);
                binv[r * m + r] = -1.0;
            } else {
                let bound = if act < row.lo { row.lo } else { row.hi };
                x[s] = bound;
                let rho = act - bound;
                let sigma = -rho.signum();
                cols.push(vec![(r, sigma)]);
                lo.push(0.0);
                hi.push(f64::INFINITY);
                cost.push(0.0);
                x.push(rho.abs());
                basis.push(cols.len() - 1);
                binv[r * m + r] = 1.0 / sigma;
            }
        }
        let mut pos = vec![NONBASIC; cols.len()];
        for (i, &b) in basis.iter().enumerate() {
            pos[b] = i;
        }
        Self {
            lp,
            opts: *opts,
            m,
            cols,
            lo,
            hi,
            cost,
            x,
            basis,
            pos,
            binv,
            first_artificial,
            scale,
            iterations: 0,
        }
    }

    fn n_struct(&self) -> usize {
        self.lp.var_count()
    }

    fn phase_cost(&self, phase: Phase, j: usize) -> f64 {
        match phase {
            Phase::One => f64::from(u8::from(j >= self.first_artificial)),
            Phase::Two => self.cost[j],
        }
    }

    fn duals(&self, phase: Phase) -> Vec<f64> {
        let m = self.m;
        let cb: Vec<(usize, f64)> = self
            .basis
            .iter()
            .enumerate()
            .map(|(i, &b)| (i, self.phase_cost(phase, b)))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        (0..m)
            .map(|j| {
                let col = &self.binv[j * m..(j + 1) * m];
                cb.iter().map(|&(i, c)| c * col[i]).sum()
            })
            .collect()
    }

    fn reduced_cost(&self, phase: Phase, y: &[f64], j: usize) -> f64 {
        self.phase_cost(phase, j) - self.cols[j].iter().map(|&(r, a)| y[r] * a).sum::<f64>()
    }

    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut w = vec![0.0; m];
        for &(r, a) in &self.cols[j] {
            let col = &self.binv[r * m..(r + 1) * m];
            for (wi, bi) in w.iter_mut().zip(col) {
                *wi += a * bi;
            }
        }
        w
    }

    fn pivot(&mut self, row: usize, w: &[f64]) {
        let m = self.m;
        let wr = w[row];
        let nz: Vec<(usize, f64)> = w
            .iter()
            .enumerate()
            .filter(|(i, v)| *i != row && **v != 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        for j in 0..m {
            let col = &mut self.binv[j * m..(j + 1) * m];
            let e = col[row];
            if e == 0.0 {
                continue;
            }
            let e = e / wr;
            col[row] = e;
            for &(i, wi) in &nz {
                col[i] -= wi * e;
            }
        }
    }

    /// Largest entry of `B⁻¹ B − I`.
    fn inverse_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for (i, &c) in self.basis.iter().enumerate() {
            let w = self.ftran(c);
            for (k, v) in w.iter().enumerate() {
                let target = if k == i { 1.0 } else { 0.0 };
                err = err.max((v - target).abs());
            }
        }
        err
    }

    /// Recomputes basic values, rebuilding B⁻¹ first if it has drifted.
    fn refresh(&mut self) -> bool {
        if self.inverse_error() > 1e-10 {
            return self.refactor();
        }
        self.recompute_basic();
        true
    }

    /// Rebuilds B⁻¹ from scratch and recomputes basic values.
    fn refactor(&mut self) -> bool {
        let m = self.m;
        if m == 0 {
            return true;
        }
        let mut b = DMatrix::zeros(m, m);
        for (i, &c) in self.basis.iter().enumerate() {
            for &(r, a) in &self.cols[c] {
                b[(r, i)] = a;
            }
        }
        let Some(inv) = b.try_inverse() else {
            return false;
        };
        for j in 0..m {
            for i in 0..m {
                self.binv[j * m + i] = inv[(i, j)];
            }
        }
        self.recompute_basic();
        true
    }

    fn recompute_basic(&mut self) {
        let m = self.m;
        let mut rhs = vec![0.0; m];
        for (j, col) in self.cols.iter().enumerate() {
            if self.pos[j] != NONBASIC || self.x[j] == 0.0 {
                continue;
            }
            for &(r, a) in col {
                rhs[r] -= a * self.x[j];
            }
        }
        for i in 0..m {
            let v: f64 = (0..m).map(|k| self.binv[k * m + i] * rhs[k]).sum();
            self.x[self.basis[i]] = v;
        }
    }

    fn eligible(&self, j: usize, d: f64, tol: f64) -> Option<f64> {
        if self.pos[j] != NONBASIC || self.lo[j] == self.hi[j] {
            return None;
        }
        let at_lo = self.x[j] <= self.lo[j];
        let at_hi = self.x[j] >= self.hi[j];
        if d < -tol && !at_hi {
            Some(1.0)
        } else if d > tol && !at_lo {
            Some(-1.0)
        } else {
            None
        }
    }

    fn iterate(&mut self, phase: Phase) -> LpStatus {
        let mut stalled = 0;
        let mut bland = false;
        let total = self.cols.len();
        loop {
            if self.iterations >= self.opts.max_iterations {
                return LpStatus::IterationLimit;
            }
            let y = self.duals(phase);
            let mut enter: Option<(usize, f64, f64)> = None;
            for j in 0..total {
                if phase == Phase::Two && j >= self.first_artificial {
                    continue;
                }
                let d = self.reduced_cost(phase, &y, j);
                if let Some(dir) = self.eligible(j, d, self.opts.dual_tol) {
                    if bland {
                        enter = Some((j, dir, d));
                        break;
                    }
                    if enter.is_none_or(|(_, _, best)| d.abs() > best.abs()) {
                        enter = Some((j, dir, d));
                    }
                }
            }
            let Some((q, dir, _)) = enter else {
                return LpStatus::Optimal;
            };
            let w = self.ftran(q);
            // Harris pass 1: largest step with bounds relaxed by the tolerance.
            let tol = self.opts.primal_tol;
            let limit = |s: &Self, i: usize, relax: f64| -> f64 {
                let b = s.basis[i];
                let delta = -dir * w[i];
                if delta < -PIVOT_TOL {
                    (s.x[b] - s.lo[b] + relax) / -delta
                } else if delta > PIVOT_TOL {
                    (s.hi[b] + relax - s.x[b]) / delta
                } else {
                    f64::INFINITY
                }
            };
            let mut theta_max = f64::INFINITY;
            for i in 0..self.m {
                theta_max = theta_max.min(limit(self, i, tol));
            }
            let flip = self.hi[q] - self.lo[q];
            if flip <= theta_max && flip.is_finite() {
                let step = flip;
                self.x[q] = if dir > 0.0 { self.hi[q] } else { self.lo[q] };
                for i in 0..self.m {
                    let b = self.basis[i];
                    self.x[b] -= dir * step * w[i];
                }
                self.iterations += 1;
                continue;
            }
            if theta_max.is_infinite() {
                return LpStatus::Unbounded;
            }
            // Pass 2: among rows that block within theta_max, take the largest pivot.
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                if w[i].abs() <= PIVOT_TOL {
                    continue;
                }
                let t = limit(self, i, 0.0);
                if t <= theta_max {
                    let better = match leave {
                        None => true,
                        Some((l, _)) if bland => self.basis[i] < self.basis[l],
                        Some((l, _)) => w[i].abs() > w[l].abs(),
                    };
                    if better {
                        leave = Some((i, t.max(0.0)));
                    }
                }
            }
            let (r, theta) = leave.expect("a blocking row exists when theta_max is finite");
            self.x[q] += dir * theta;
            for i in 0..self.m {
                let b = self.basis[i];
                self.x[b] -= dir * theta * w[i];
            }
            let out = self.basis[r];
            // Snap the leaving variable onto the bound it reached.
            self.x[out] = if -dir * w[r] < 0.0 { self.lo[out] } else { self.hi[out] };
            self.pivot(r, &w);
            self.pos[out] = NONBASIC;
            self.pos[q] = r;
            self.basis[r] = q;
            self.iterations += 1;
            if theta * w[r].abs() < 1e-12 {
                stalled += 1;
                if stalled >= self.opts.stall_limit {
                    bland = true;
                }
            } else {
                stalled = 0;
                bland = false;
            }
            if self.iterations % 2000 == 0 && !self.refresh() {
                return LpStatus::IterationLimit;
            }
        }
    }

    fn run(mut self) -> LpSolution {
        let has_art = self.cols.len() > self.first_artificial;
        if has_art {
            let status = self.iterate(Phase::One);
            let infeas: f64 = (self.first_artificial..self.cols.len()).map(|j| self.x[j]).sum();
            if status != LpStatus::Optimal || infeas > self.opts.primal_tol * (1 + self.m) as f64 {
                let status = if status == LpStatus::Optimal || status == LpStatus::Unbounded {
                    LpStatus::Infeasible
                } else {
                    status
                };
                return self.finish(status);
            }
            for j in self.first_artificial..self.cols.len() {
                self.hi[j] = 0.0;
                if self.pos[j] == NONBASIC {
                    self.x[j] = 0.0;
                }
            }
        }
        let status = self.iterate(Phase::Two);
        if status == LpStatus::Optimal {
            // Refinement: recompute basics (rebuilding a drifted inverse) and resume.
            if self.refresh() {
                let again = self.iterate(Phase::Two);
                return self.finish(again);
            }
        }
        self.finish(status)
    }

    fn finish(self, status: LpStatus) -> LpSolution {
        let n = self.n_struct();
        let y = self.duals(Phase::Two);
        let x: Vec<f64> = (0..n).map(|j| self.x[j].clamp(self.lo[j], self.hi[j])).collect();
        let reduced: Vec<f64> = (0..n).map(|j| self.reduced_cost(Phase::Two, &y, j) * self.scale).collect();
        let mut primal: f64 = 0.0;
        for (r, row) in self.lp.rows.iter().enumerate() {
            let a = self.lp.activity(r, &x);
            primal = primal.max(row.lo - a).max(a - row.hi);
        }
        for j in 0..n {
            primal = primal.max(self.lp.lower[j] - self.x[j]).max(self.x[j] - self.lp.upper[j]);
        }
        let mut comp: f64 = 0.0;
        let mut dual_inf: f64 = 0.0;
        // Logical columns carry reduced cost y_r (their column is −e_r).
        let logical_rc = |r: usize| y[r] * self.scale;
        let mut check = |d: f64, xv: f64, l: f64, u: f64| {
            if d > 0.0 {
                if l.is_finite() {
                    comp = comp.max(d * (xv - l).max(0.0));
                } else {
                    dual_inf = dual_inf.max(d);
                }
            } else if d < 0.0 {
                if u.is_finite() {
                    comp = comp.max(-d * (u - xv).max(0.0));
                } else {
                    dual_inf = dual_inf.max(-d);
                }
            }
        };
        for j in 0..n {
            check(reduced[j], x[j], self.lp.lower[j], self.lp.upper[j]);
        }
        for (r, row) in self.lp.rows.iter().enumerate() {
            check(logical_rc(r), self.lp.activity(r, &x), row.lo, row.hi);
        }
        LpSolution {
            status,
            objective: self.lp.objective(&x),
            duals: y.iter().map(|v| v * self.scale).collect(),
            reduced_costs: reduced,
            x,
            iterations: self.iterations,
            primal_residual: primal.max(0.0),
            complementarity: comp,
            dual_infeasibility: dual_inf,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn small_textbook_lp() {
        // max 3x + 5y  s.t. x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18  →  (2, 6), 36
        let mut lp = LinearProgram::default();
        let x = lp.add_var(-3.0, 0.0, INF);
        let y = lp.add_var(-5.0, 0.0, INF);
        lp.add_row(vec![(x, 1.0)], -INF, 4.0);
        lp.add_row(vec![(y, 2.0)], -INF, 12.0);
        lp.add_row(vec![(x, 3.0), (y, 2.0)], -INF, 18.0);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
        assert!((s.objective + 36.0).abs() < 1e-9);
        assert!(s.complementarity < 1e-9);
    }

    #[test]
    fn needs_phase_one() {
        // min x + y  s.t. x + y ≥ 2, x − y = 0.5
        let mut lp = LinearProgram::default();
        let x = lp.add_var(1.0, 0.0, 10.0);
        let y = lp.add_var(1.0, 0.0, 10.0);
        lp.add_row(vec![(x, 1.0), (y, 1.0)], 2.0, INF);
        lp.add_row(vec![(x, 1.0), (y, -1.0)], 0.5, 0.5);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 1.25).abs() < 1e-9 && (s.x[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut lp = LinearProgram::default();
        let x = lp.add_var(1.0, 0.0, 1.0);
        lp.add_row(vec![(x, 1.0)], 2.0, INF);
        assert_eq!(lp.solve().status, LpStatus::Infeasible);

        let mut lp = LinearProgram::default();
        let x = lp.add_var(-1.0, 0.0, INF);
        lp.add_row(vec![(x, 1.0)], 1.0, INF);
        assert_eq!(lp.solve().status, LpStatus::Unbounded);
    }

    #[test]
    fn free_variable_epigraph() {
        // min t  s.t. t ≥ 3 − x, t ≥ x − 1, x ∈ [0, 5]  →  t = 1 at x = 2
        let mut lp = LinearProgram::default();
        let t = lp.add_var(1.0, -INF, INF);
        let x = lp.add_var(0.0, 0.0, 5.0);
        lp.add_row(vec![(t, 1.0), (x, 1.0)], 3.0, INF);
        lp.add_row(vec![(t, 1.0), (x, -1.0)], -1.0, INF);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9 && (s.x[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_cycling_example() {
        // Beale's example cycles under textbook Dantzig pivoting without an
        // anti-cycling rule. Optimum −1/20 at x = (1/25, 0, 1, 0).
        let mut lp = LinearProgram::default();
        let c = [-0.75, 150.0, -0.02, 6.0];
        let v: Vec<usize> = c.iter().map(|&c| lp.add_var(c, 0.0, INF)).collect();
        lp.add_row(vec![(v[0], 0.25), (v[1], -60.0), (v[2], -0.04), (v[3], 9.0)], -INF, 0.0);
        lp.add_row(vec![(v[0], 0.5), (v[1], -90.0), (v[2], -0.02), (v[3], 3.0)], -INF, 0.0);
        lp.add_row(vec![(v[2], 1.0)], -INF, 1.0);
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 0.05).abs() < 1e-12, "{}", s.objective);
    }

    /// Best objective over every vertex of a 2-variable box-and-row polytope.
    fn vertex_oracle(lp: &LinearProgram) -> Option<f64> {
        let mut lines: Vec<(f64, f64, f64)> = vec![];
        for j in 0..2 {
            let mut a = [0.0; 2];
            a[j] = 1.0;
            lines.push((a[0], a[1], lp.lower[j]));
            lines.push((a[0], a[1], lp.upper[j]));
        }
        for r in &lp.rows {
            let mut a = [0.0; 2];
            for &(j, v) in &r.coefs {
                a[j] += v;
            }
            for b in [r.lo, r.hi] {
                if b.is_finite() {
                    lines.push((a[0], a[1], b));
                }
            }
        }
        let feasible = |p: [f64; 2]| {
            (0..2).all(|j| p[j] >= lp.lower[j] - 1e-7 && p[j] <= lp.upper[j] + 1e-7)
                && lp.rows.iter().all(|r| {
                    let a: f64 = r.coefs.iter().map(|&(j, v)| v * p[j]).sum();
                    a >= r.lo - 1e-7 && a <= r.hi + 1e-7
                })
        };
        let mut best: Option<f64> = None;
        for i in 0..lines.len() {
            for k in i + 1..lines.len() {
                let (a1, b1, c1) = lines[i];
                let (a2, b2, c2) = lines[k];
                let det = a1 * b2 - a2 * b1;
                if det.abs() < 1e-12 {
                    continue;
                }
                let p = [(c1 * b2 - c2 * b1) / det, (a1 * c2 - a2 * c1) / det];
                if feasible(p) {
                    let v = lp.cost[0] * p[0] + lp.cost[1] * p[1];
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn two_variable_lps_match_vertex_oracle(
            c in prop::collection::vec(-5.0f64..5.0, 2),
            rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -4.0f64..4.0, 0.0f64..6.0), 0..5),
        ) {
            let mut lp = LinearProgram::default();
            lp.add_var(c[0], -2.0, 3.0);
            lp.add_var(c[1], -1.0, 4.0);
            for (a, b, lo, width) in rows {
                lp.add_row(vec![(0, a), (1, b)], lo, lo + width);
            }
            let s = lp.solve();
            match vertex_oracle(&lp) {
                Some(best) => {
                    prop_assert_eq!(s.status, LpStatus::Optimal);
                    prop_assert!((s.objective - best).abs() < 1e-7, "{} vs {}", s.objective, best);
                    prop_assert!(s.primal_residual < 1e-8);
                    prop_assert!(s.complementarity < 1e-7 && s.dual_infeasibility < 1e-7);
                }
                None => prop_assert_eq!(s.status, LpStatus::Infeasible),
            }
        }

        #[test]
        fn random_lps_carry_kkt_certificate(
            seed in 0u64..10_000,
            n in 2usize..12,
            m in 1usize..10,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut lp = LinearProgram::default();
            for _ in 0..n {
                lp.add_var(rng.random_range(-3.0..3.0), rng.random_range(-2.0..0.0), rng.random_range(0.0..2.0));
            }
            for _ in 0..m {
                let mut coefs = vec![];
                for j in 0..n {
                    if rng.random_bool(0.6) {
                        coefs.push((j, rng.random_range(-2.0..2.0)));
                    }
                }
                let lo = rng.random_range(-3.0..0.0);
                lp.add_row(coefs, lo, lo + rng.random_range(0.0..4.0));
            }
            let s = lp.solve();
            if s.status == LpStatus::Optimal {
                prop_assert!(s.primal_residual < 1e-8);
                prop_assert!(s.complementarity < 1e-7, "{}", s.complementarity);
                prop_assert!(s.dual_infeasibility < 1e-9);
                // Weak duality from the certificate: the objective equals the dual bound.
                let mut dual_obj = 0.0;
                for (j, &d) in s.reduced_costs.iter().enumerate() {
                    if d > 0.0 { dual_obj += d * lp.lower[j] } else if d < 0.0 { dual_obj += d * lp.upper[j] }
                }
                for (r, row) in lp.rows.iter().enumerate() {
                    let y = s.duals[r];
                    if y > 0.0 { dual_obj += y * row.lo } else if y < 0.0 { dual_obj += y * row.hi }
                }
                prop_assert!((dual_obj - s.objective).abs() < 1e-7 * (1.0 + s.objective.abs()), "{} vs {}", dual_obj, s.objective);
            } else {
                prop_assert_eq!(s.status, LpStatus::Infeasible);
            }
        }
    }
}

//! Newton power flow for resistive DC networks and polar AC networks, with a
//! single slack bus absorbing the imbalance, plus operational limit checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::grid::{admittance_unchecked, NetworkKind, NetworkModel};

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("expected {expected} bus injections, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("power flow for a {0:?} network called on the wrong solver")]
    WrongKind(NetworkKind),
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Mismatch tolerance, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Use `Q = Σ V V (G sin + B cos)` instead of the standard
    /// `Q = Σ V V (G sin − B cos)`.
    pub flipped_q_sign: bool,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            flipped_q_sign: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    /// Voltage magnitude per bus, p.u. De-energized (islanded) buses read 0.
    pub v: Vec<f64>,
    /// Voltage angle per bus, rad. Zero for DC networks.
    pub theta: Vec<f64>,
    /// Net injection per bus computed from the solved voltages, MW / MVAr.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    /// Power drawn from the slack bus beyond its scheduled injection, MW.
    pub p_slack: f64,
    pub q_slack: f64,
    /// One entry per model line (zero for out-of-service lines), MW / MVAr.
    pub flows: Vec<BranchFlow>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest injection mismatch over the solved buses, p.u.
    pub max_mismatch: f64,
    /// Bus indices not connected to the slack bus.
    pub islanded: Vec<usize>,
}

impl PowerFlowSolution {
    pub fn line_p(&self) -> Vec<f64> {
        self.flows.iter().map(|f| f.p_from).collect()
    }

    pub fn line_q(&self) -> Vec<f64> {
        self.flows.iter().map(|f| f.q_from).collect()
    }
}

/// Precomputed network data for repeated solves on one (scenario-applied) model.
#[derive(Debug, Clone)]
pub struct PowerFlow {
    kind: NetworkKind,
    base: f64,
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    slack: usize,
    /// Non-slack buses connected to the slack bus, in index order.
    pv_free: Vec<usize>,
    islanded: Vec<usize>,
    lines: Vec<Option<LineData>>,
    options: PowerFlowOptions,
}

#[derive(Debug, Clone, Copy)]
struct LineData {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
    /// Half the charging susceptance, at each end.
    b_half: f64,
}

impl PowerFlow {
    pub fn new(model: &NetworkModel, options: PowerFlowOptions) -> Self {
        let y = admittance_unchecked(model);
        let slack = model.slack_index();
        let islanded = model.islanded_buses();
        let pv_free = (0..model.buses.len())
            .filter(|&i| i != slack && !islanded.contains(&i))
            .collect();
        let lines = model
            .lines
            .iter()
            .map(|l| {
                l.in_service.then(|| LineData {
                    from: model.bus_index(l.from_bus).expect("validated line"),
                    to: model.bus_index(l.to_bus).expect("validated line"),
                    g: l.g,
                    b: if model.kind == NetworkKind::Ac { l.b } else { 0.0 },
                    b_half: if model.kind == NetworkKind::Ac { 0.5 * l.b_charging } else { 0.0 },
                })
            })
            .collect();
        Self {
            kind: model.kind,
            base: model.base_mva,
            g: y.g,
            b: y.b,
            slack,
            pv_free,
            islanded,
            lines,
            options,
        }
    }

    pub fn bus_count(&self) -> usize {
        self.g.nrows()
    }

    pub fn islanded(&self) -> &[usize] {
        &self.islanded
    }

    /// Solves with the model's equations. `q_mvar` is ignored for DC networks.
    pub fn solve(&self, p_mw: &[f64], q_mvar: &[f64]) -> Result<PowerFlowSolution, PowerFlowError> {
        match self.kind {
            NetworkKind::Dc => self.solve_dc(p_mw),
            NetworkKind::Ac => self.solve_ac(p_mw, q_mvar),
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), PowerFlowError> {
        let expected = self.bus_count();
        if got != expected {
            return Err(PowerFlowError::Dimension { expected, got });
        }
        Ok(())
    }

    fn islanded_has_injection(&self, p: &[f64], q: &[f64]) -> bool {
        self.islanded
            .iter()
            .any(|&i| p[i].abs() > 1e-12 || q.get(i).is_some_and(|v| v.abs() > 1e-12))
    }

    pub fn solve_dc(&self, p_mw: &[f64]) -> Result<PowerFlowSolution, PowerFlowError> {
        if self.kind != NetworkKind::Dc {
            return Err(PowerFlowError::WrongKind(self.kind));
        }
        self.check_dim(p_mw.len())?;
        let n = self.bus_count();
        let spec: Vec<f64> = p_mw.iter().map(|p| p / self.base).collect();
        let mut v = vec![1.0; n];
        for &i in &self.islanded {
            v[i] = 0.0;
        }
        let free = &self.pv_free;
        let m = free.len();
        let p_calc = |v: &[f64], i: usize| -> f64 {
            v[i] * (0..n).map(|k| self.g[(i, k)] * v[k]).sum::<f64>()
        };
        let mut iterations = 0;
        let mut mismatch = DVector::zeros(m);
        let mut max_mismatch;
        let mut diverged = false;
        loop {
            for (r, &i) in free.iter().enumerate() {
                mismatch[r] = spec[i] - p_calc(&v, i);
            }
            max_mismatch = mismatch.amax();
            if max_mismatch < self.options.tolerance || iterations >= self.options.max_iterations {
                break;
            }
            if !max_mismatch.is_finite() || max_mismatch > 1e6 {
                diverged = true;
                break;
            }
            let mut jac = DMatrix::zeros(m, m);
            for (r, &i) in free.iter().enumerate() {
                let gv: f64 = (0..n).map(|k| self.g[(i, k)] * v[k]).sum();
                for (c, &k) in free.iter().enumerate() {
                    jac[(r, c)] = if i == k {
                        gv + self.g[(i, i)] * v[i]
                    } else {
                        v[i] * self.g[(i, k)]
                    };
                }
            }
            iterations += 1;
            let dx = jac
                .lu()
                .solve(&mismatch)
                .ok_or(PowerFlowError::SingularJacobian { iteration: iterations })?;
            for (r, &i) in free.iter().enumerate() {
                v[i] += dx[r];
            }
        }
        let converged = !diverged
            && max_mismatch < self.options.tolerance
            && !self.islanded_has_injection(p_mw, &[]);
        let p_inj: Vec<f64> = (0..n).map(|i| p_calc(&v, i) * self.base).collect();
        let flows = self
            .lines
            .iter()
            .map(|l| match l {
                None => BranchFlow { p_from: 0.0, q_from: 0.0, p_to: 0.0, q_to: 0.0 },
                Some(l) => {
                    let (vi, vk) = (v[l.from], v[l.to]);
                    BranchFlow {
                        p_from: vi * (vi - vk) * l.g * self.base,
                        q_from: 0.0,
                        p_to: vk * (vk - vi) * l.g * self.base,
                        q_to: 0.0,
                    }
                }
            })
            .collect();
        Ok(PowerFlowSolution {
            p_slack: p_inj[self.slack] - p_mw[self.slack],
            q_slack: 0.0,
            theta: vec![0.0; n],
            q_inj: vec![0.0; n],
            p_inj,
            v,
            flows,
            converged,
            iterations,
            max_mismatch,
            islanded: self.islanded.clone(),
        })
    }

    /// P and Q injections (p.u.) at bus `i` for the given polar state.
    fn pq_at(&self, v: &[f64], th: &[f64], i: usize) -> (f64, f64) {
        let sigma = if self.options.flipped_q_sign { -1.0 } else { 1.0 };
        let mut p = 0.0;
        let mut q = 0.0;
        for k in 0..v.len() {
            let (g, b) = (self.g[(i, k)], self.b[(i, k)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (th[i] - th[k]).sin_cos();
            p += v[i] * v[k] * (g * c + b * s);
            q += v[i] * v[k] * (g * s - sigma * b * c);
        }
        (p, q)
    }

    pub fn solve_ac(&self, p_mw: &[f64], q_mvar: &[f64]) -> Result<PowerFlowSolution, PowerFlowError> {
        if self.kind != NetworkKind::Ac {
            return Err(PowerFlowError::WrongKind(self.kind));
        }
        self.check_dim(p_mw.len())?;
        self.check_dim(q_mvar.len())?;
        let n = self.bus_count();
        let sigma = if self.options.flipped_q_sign { -1.0 } else { 1.0 };
        let p_spec: Vec<f64> = p_mw.iter().map(|p| p / self.base).collect();
        let q_spec: Vec<f64> = q_mvar.iter().map(|q| q / self.base).collect();
        let mut v = vec![1.0; n];
        let mut th = vec![0.0; n];
        for &i in &self.islanded {
            v[i] = 0.0;
        }
        let free = &self.pv_free;
        let m = free.len();
        // position of each bus among the free buses
        let mut pos = vec![usize::MAX; n];
        for (r, &i) in free.iter().enumerate() {
            pos[i] = r;
        }
        let mut mismatch = DVector::zeros(2 * m);
        let mut iterations = 0;
        let mut max_mismatch;
        let mut diverged = false;
        let mut pq = vec![(0.0, 0.0); n];
        loop {
            for &i in free {
                pq[i] = self.pq_at(&v, &th, i);
            }
            for (r, &i) in free.iter().enumerate() {
                mismatch[r] = p_spec[i] - pq[i].0;
                mismatch[m + r] = q_spec[i] - pq[i].1;
            }
            max_mismatch = mismatch.amax();
            if max_mismatch < self.options.tolerance || iterations >= self.options.max_iterations {
                break;
            }
            if !max_mismatch.is_finite() || max_mismatch > 1e6 {
                diverged = true;
                break;
            }
            // Jacobian blocks [dP/dθ dP/dV; dQ/dθ dQ/dV] over the free buses.
            let mut jac = DMatrix::zeros(2 * m, 2 * m);
            for (r, &i) in free.iter().enumerate() {
                let mut dp_dthi = 0.0;
                let mut dp_dvi = 2.0 * self.g[(i, i)] * v[i];
                let mut dq_dthi = 0.0;
                let mut dq_dvi = -2.0 * sigma * self.b[(i, i)] * v[i];
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    let (g, b) = (self.g[(i, k)], self.b[(i, k)]);
                    if g == 0.0 && b == 0.0 {
                        continue;
                    }
                    let bq = sigma * b;
                    let (s, c) = (th[i] - th[k]).sin_cos();
                    let vv = v[i] * v[k];
                    dp_dthi += vv * (-g * s + b * c);
                    dp_dvi += v[k] * (g * c + b * s);
                    dq_dthi += vv * (g * c + bq * s);
                    dq_dvi += v[k] * (g * s - bq * c);
                    let ck = pos[k];
                    if ck != usize::MAX {
                        jac[(r, ck)] = vv * (g * s - b * c);
                        jac[(r, m + ck)] = v[i] * (g * c + b * s);
                        jac[(m + r, ck)] = vv * (-g * c - bq * s);
                        jac[(m + r, m + ck)] = v[i] * (g * s - bq * c);
                    }
                }
                jac[(r, r)] = dp_dthi;
                jac[(r, m + r)] = dp_dvi;
                jac[(m + r, r)] = dq_dthi;
                jac[(m + r, m + r)] = dq_dvi;
            }
            iterations += 1;
            let dx = jac
                .lu()
                .solve(&mismatch)
                .ok_or(PowerFlowError::SingularJacobian { iteration: iterations })?;
            for (r, &i) in free.iter().enumerate() {
                th[i] += dx[r];
                v[i] += dx[m + r];
            }
        }
        let converged = !diverged
            && max_mismatch < self.options.tolerance
            && !self.islanded_has_injection(p_mw, q_mvar);
        let (p_inj, q_inj): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let (p, q) = self.pq_at(&v, &th, i);
                (p * self.base, q * self.base)
            })
            .unzip();
        let flows = self
            .lines
            .iter()
            .map(|l| match l {
                None => BranchFlow { p_from: 0.0, q_from: 0.0, p_to: 0.0, q_to: 0.0 },
                Some(l) => {
                    let end = |a: usize, z: usize| {
                        let (s, c) = (th[a] - th[z]).sin_cos();
                        let p = v[a] * v[a] * l.g - v[a] * v[z] * (l.g * c + l.b * s);
                        let q = -v[a] * v[a] * (l.b + l.b_half) - v[a] * v[z] * (l.g * s - l.b * c);
                        (p * self.base, q * self.base)
                    };
                    let (p_from, q_from) = end(l.from, l.to);
                    let (p_to, q_to) = end(l.to, l.from);
                    BranchFlow { p_from, q_from, p_to, q_to }
                }
            })
            .collect();
        Ok(PowerFlowSolution {
            p_slack: p_inj[self.slack] - p_mw[self.slack],
            q_slack: q_inj[self.slack] - q_mvar[self.slack],
            p_inj,
            q_inj,
            v,
            theta: th,
            flows,
            converged,
            iterations,
            max_mismatch,
            islanded: self.islanded.clone(),
        })
    }
}

/// DC power flow with default options (20 Newton iterations).
pub fn solve_dc(model: &NetworkModel, p_mw: &[f64]) -> Result<PowerFlowSolution, PowerFlowError> {
    let options = PowerFlowOptions {
        max_iterations: 20,
        ..PowerFlowOptions::default()
    };
    PowerFlow::new(model, options).solve_dc(p_mw)
}

/// AC power flow from a flat start with default options.
pub fn solve_ac(
    model: &NetworkModel,
    p_mw: &[f64],
    q_mvar: &[f64],
) -> Result<PowerFlowSolution, PowerFlowError> {
    PowerFlow::new(model, PowerFlowOptions::default()).solve_ac(p_mw, q_mvar)
}

/// Branch flows recomputed from the terminal voltages of a solution.
pub fn line_flows(model: &NetworkModel, solution: &PowerFlowSolution) -> Vec<BranchFlow> {
    let base = model.base_mva;
    let ac = model.kind == NetworkKind::Ac;
    model
        .lines
        .iter()
        .map(|l| {
            let (Some(i), Some(k), true) = (model.bus_index(l.from_bus), model.bus_index(l.to_bus), l.in_service)
            else {
                return BranchFlow { p_from: 0.0, q_from: 0.0, p_to: 0.0, q_to: 0.0 };
            };
            let (v, th) = (&solution.v, &solution.theta);
            let (b, b_half) = if ac { (l.b, 0.5 * l.b_charging) } else { (0.0, 0.0) };
            let end = |a: usize, z: usize| {
                let (s, c) = (th[a] - th[z]).sin_cos();
                let p = v[a] * v[a] * l.g - v[a] * v[z] * (l.g * c + b * s);
                let q = -v[a] * v[a] * (b + b_half) - v[a] * v[z] * (l.g * s - b * c);
                (p * base, q * base)
            };
            let (p_from, q_from) = end(i, k);
            let (p_to, q_to) = end(k, i);
            BranchFlow { p_from, q_from, p_to, q_to }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    V,
    Theta,
    LineP,
    LineQ,
    GenP,
    GenQ,
    Slack,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::V => "v",
            ViolationKind::Theta => "theta",
            ViolationKind::LineP => "line_p",
            ViolationKind::LineQ => "line_q",
            ViolationKind::GenP => "gen_p",
            ViolationKind::GenQ => "gen_q",
            ViolationKind::Slack => "slack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Bus, line or generator index; 0 for the slack entry.
    pub component: usize,
    /// Amount beyond the bound in natural units (p.u. for voltage, rad,
    /// MW, MVAr). Always positive.
    pub excess: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViolationSet {
    pub entries: Vec<Violation>,
}

impl ViolationSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self, kind: ViolationKind) -> f64 {
        self.entries.iter().filter(|v| v.kind == kind).map(|v| v.excess).sum()
    }
}

/// Generator setpoints for limit checking, MW / MVAr per generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenDispatch {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

const LIMIT_TOL: f64 = 1e-9;

fn excess(value: f64, lo: f64, hi: f64) -> Option<f64> {
    if value < lo - LIMIT_TOL {
        Some(lo - value)
    } else if value > hi + LIMIT_TOL {
        Some(value - hi)
    } else {
        None
    }
}

/// Lists every violated bound, ordered by (kind, component).
pub fn check_limits(model: &NetworkModel, solution: &PowerFlowSolution, dispatch: &GenDispatch) -> ViolationSet {
    let ac = model.kind == NetworkKind::Ac;
    let mut entries = Vec::new();
    let mut push = |kind, component, e: Option<f64>| {
        if let Some(excess) = e {
            entries.push(Violation { kind, component, excess });
        }
    };
    for (i, bus) in model.buses.iter().enumerate() {
        if solution.islanded.contains(&i) {
            continue;
        }
        push(ViolationKind::V, i, excess(solution.v[i], bus.v_min, bus.v_max));
        if ac {
            push(ViolationKind::Theta, i, excess(solution.theta[i], bus.theta_min, bus.theta_max));
        }
    }
    for (i, (line, flow)) in model.lines.iter().zip(&solution.flows).enumerate() {
        let p = flow.p_from.abs().max(flow.p_to.abs());
        push(ViolationKind::LineP, i, excess(p, -line.p_lim, line.p_lim));
        // q_lim = 0 means the line has no reactive limit
        if ac && line.q_lim > 0.0 {
            let q = flow.q_from.abs().max(flow.q_to.abs());
            push(ViolationKind::LineQ, i, excess(q, -line.q_lim, line.q_lim));
        }
    }
    for (i, g) in model.generators.iter().enumerate() {
        if let Some(&p) = dispatch.p.get(i) {
            push(ViolationKind::GenP, i, excess(p, g.p_min, g.p_max));
        }
        if ac {
            if let Some(&q) = dispatch.q.get(i) {
                push(ViolationKind::GenQ, i, excess(q, g.q_min, g.q_max));
            }
        }
    }
    let slack = model.slack_range();
    push(ViolationKind::Slack, 0, excess(solution.p_slack, slack.p_min, slack.p_max));
    entries.sort_by(|a, b| (a.kind, a.component).cmp(&(b.kind, b.component)));
    ViolationSet { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{bundled, testutil::dc_chain};
    use proptest::prelude::*;

    #[test]
    fn zero_injection_is_flat() {
        let m = dc_chain(4, 20.0);
        let s = solve_dc(&m, &[0.0; 4]).unwrap();
        assert!(s.converged);
        assert!(s.v.iter().all(|v| *v == 1.0));
        assert!(s.flows.iter().all(|f| f.p_from == 0.0 && f.p_to == 0.0));
        assert_eq!(s.p_slack, 0.0);
    }

    #[test]
    fn two_bus_dc_quadratic_root() {
        // 10 V2 (V2 - 1) = -0.1  =>  V2 = (1 + sqrt(0.96)) / 2
        let mut m = dc_chain(2, 10.0);
        m.base_mva = 1.0;
        let s = solve_dc(&m, &[0.0, -0.1]).unwrap();
        let expected = (1.0 + 0.96f64.sqrt()) / 2.0;
        assert!(s.converged);
        assert!((s.v[1] - expected).abs() < 1e-10, "{}", s.v[1]);
        assert!((s.v[1] - 0.98990).abs() < 1e-5);
        // Line flow from bus 1 carries the load plus the I^2 R loss.
        let loss = 10.0 * (1.0 - expected).powi(2);
        assert!((s.flows[0].p_from - (0.1 + loss)).abs() < 1e-9);
        assert!((s.p_slack - (0.1 + loss)).abs() < 1e-9);
        let recomputed = line_flows(&m, &s);
        assert!((recomputed[0].p_from - s.flows[0].p_from).abs() < 1e-12);
    }

    #[test]
    fn ac_zero_injection_flat() {
        let mut m = bundled::load("ieee30").unwrap();
        m.buses.iter_mut().for_each(|b| b.b_shunt = 0.0);
        m.lines.iter_mut().for_each(|l| l.b_charging = 0.0);
        let s = solve_ac(&m, &[0.0; 30], &[0.0; 30]).unwrap();
        assert!(s.converged);
        assert_eq!(s.iterations, 0);
        assert!(s.p_slack.abs() < 1e-10);
    }

    #[test]
    fn charging_raises_unloaded_voltage() {
        let m = bundled::load("ieee30").unwrap();
        let s = solve_ac(&m, &[0.0; 30], &[0.0; 30]).unwrap();
        assert!(s.converged);
        assert!(s.v.iter().all(|v| *v >= 1.0 - 1e-12));
        assert!(s.v.iter().any(|v| *v > 1.0 + 1e-4));
        // the slack bus absorbs the reactive power the capacitance produces
        assert!(s.q_slack < 0.0);
        let recomputed = line_flows(&m, &s);
        for (a, b) in recomputed.iter().zip(&s.flows) {
            assert!((a.q_from - b.q_from).abs() < 1e-9 && (a.q_to - b.q_to).abs() < 1e-9);
        }
    }

    #[test]
    fn islanded_load_does_not_converge() {
        let mut m = dc_chain(3, 10.0);
        m.lines[1].in_service = false;
        let s = solve_dc(&m, &[0.0, 0.0, -5.0]).unwrap();
        assert!(!s.converged);
        assert_eq!(s.islanded, vec![2]);
        assert_eq!(s.v[2], 0.0);
    }

    #[test]
    fn wrong_dimension() {
        let m = dc_chain(3, 10.0);
        assert_eq!(
            solve_dc(&m, &[0.0; 2]).unwrap_err(),
            PowerFlowError::Dimension { expected: 3, got: 2 }
        );
    }

    #[test]
    fn limits_flat_solution_empty() {
        let m = dc_chain(3, 10.0);
        let s = solve_dc(&m, &[0.0; 3]).unwrap();
        assert!(check_limits(&m, &s, &GenDispatch::default()).is_empty());
    }

    #[test]
    fn limits_voltage_and_slack() {
        let m = dc_chain(3, 10.0);
        let mut s = solve_dc(&m, &[0.0; 3]).unwrap();
        s.v[1] = 0.93;
        let set = check_limits(&m, &s, &GenDispatch::default());
        assert_eq!(set.entries.len(), 1);
        assert_eq!(set.entries[0].kind, ViolationKind::V);
        assert_eq!(set.entries[0].component, 1);
        assert!((set.entries[0].excess - 0.02).abs() < 1e-12);

        s.v[1] = 1.0;
        s.p_slack = m.slack_range().p_max + 1.0;
        let set = check_limits(&m, &s, &GenDispatch::default());
        assert_eq!(set.entries.len(), 1);
        assert_eq!(set.entries[0].kind, ViolationKind::Slack);
        assert!((set.entries[0].excess - 1.0).abs() < 1e-12);
    }

    /// Injections from a known state via complex phasor arithmetic, S = V conj(Y V).
    fn phasor_injections(model: &NetworkModel, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
        use nalgebra::Complex;
        let y = admittance_unchecked(model);
        let n = v.len();
        let phasor: Vec<Complex<f64>> = (0..n).map(|i| Complex::from_polar(v[i], th[i])).collect();
        (0..n)
            .map(|i| {
                let current: Complex<f64> = (0..n)
                    .map(|k| Complex::new(y.g[(i, k)], y.b[(i, k)]) * phasor[k])
                    .sum();
                let s = phasor[i] * current.conj() * model.base_mva;
                (s.re, s.im)
            })
            .unzip()
    }

    fn ring_ac(n: usize, g: &[f64], b: &[f64]) -> NetworkModel {
        let mut m = dc_chain(n, 1.0);
        m.kind = NetworkKind::Ac;
        m.base_mva = 1.0;
        for (i, line) in m.lines.iter_mut().enumerate() {
            line.g = g[i];
            line.b = b[i];
        }
        m.lines.push(crate::grid::Line {
            from_bus: n as u32,
            to_bus: 1,
            g: g[n - 1],
            b: b[n - 1],
            b_charging: 0.0,
            p_lim: 100.0,
            q_lim: 100.0,
            pof: 0.0,
            in_service: true,
        });
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ac_recovers_known_state(
            n in 3usize..=5,
            g in prop::collection::vec(1.0f64..10.0, 5),
            b in prop::collection::vec(-30.0f64..-3.0, 5),
            dv in prop::collection::vec(-0.05f64..0.05, 5),
            dth in prop::collection::vec(-0.1f64..0.1, 5),
        ) {
            let m = ring_ac(n, &g, &b);
            let mut v: Vec<f64> = dv[..n].iter().map(|d| 1.0 + d).collect();
            let mut th = dth[..n].to_vec();
            v[0] = 1.0;
            th[0] = 0.0;
            let (p, q) = phasor_injections(&m, &v, &th);
            let s = solve_ac(&m, &p, &q).unwrap();
            prop_assert!(s.converged);
            for i in 0..n {
                prop_assert!((s.v[i] - v[i]).abs() < 1e-7);
                prop_assert!((s.theta[i] - th[i]).abs() < 1e-7);
            }
            prop_assert!((s.p_inj[0] - p[0]).abs() < 1e-7);
            prop_assert!((s.q_inj[0] - q[0]).abs() < 1e-7);
            // Branch flows leaving each bus add up to its injection.
            for i in 0..n {
                let id = (i + 1) as u32;
                let (mut ps, mut qs) = (0.0, 0.0);
                for (line, f) in m.lines.iter().zip(&s.flows) {
                    if line.from_bus == id { ps += f.p_from; qs += f.q_from; }
                    if line.to_bus == id { ps += f.p_to; qs += f.q_to; }
                }
                prop_assert!((ps - p[i]).abs() < 1e-7 && (qs - q[i]).abs() < 1e-7);
            }
        }

        #[test]
        fn dc_recovers_known_state(
            n in 2usize..=6,
            g in prop::collection::vec(5.0f64..200.0, 6),
            dv in prop::collection::vec(-0.04f64..0.04, 6),
        ) {
            let mut m = dc_chain(n, 1.0);
            m.base_mva = 10.0;
            for (line, g) in m.lines.iter_mut().zip(&g) {
                line.g = *g;
            }
            let mut v: Vec<f64> = dv[..n].iter().map(|d| 1.0 + d).collect();
            v[0] = 1.0;
            let (p, _) = phasor_injections(&m, &v, &vec![0.0; n]);
            let s = solve_dc(&m, &p).unwrap();
            prop_assert!(s.converged);
            // The stopping mismatch maps to voltage through the chain's
            // resistance; the Jacobian is within a few percent of G here.
            let resistance: f64 = m.lines.iter().map(|l| 1.0 / l.g).sum();
            let tol = 2.0 * n as f64 * PowerFlowOptions::default().tolerance * resistance;
            for i in 0..n {
                prop_assert!((s.v[i] - v[i]).abs() < tol, "bus {} off by {:e}, bound {:e}", i, s.v[i] - v[i], tol);
            }
        }
    }
}

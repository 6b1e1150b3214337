//! LP dispatch baselines on a linearized network: the deterministic plan,
//! a base EMS with independent generator setpoints, a scenario-based plan
//! minimizing CVaR of weighted shortfall, and a brute-force oracle for tiny
//! single-interval cases.
//!
//! The network is linearized around the flat start. DC networks use
//! `ΔP = G ΔV`, AC networks use `P = −B θ` with voltage magnitudes held at 1.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{series_admittance, GridError, LoadClass, NetworkKind, NetworkModel, Scenario, Units};
use crate::lp::{LinearProgram, LpSolution, LpStatus, SimplexOptions};
use crate::risk::{cvar_alpha, risk_report_from_served, RiskError, RiskReport, ScenarioSet};

/// Largest grid the brute-force oracle will walk.
pub const ORACLE_MAX_POINTS: u128 = 2_000_000;

/// Weight of the expected-served tie-break in the scenario objective,
/// relative to the CVaR term.
const TIE_BREAK: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("line failures are not supported by the LP baseline")]
    LineFailures,
    #[error("scenario mask has {got} entries, model has {expected} generators")]
    MaskLength { expected: usize, got: usize },
    #[error("network sensitivity matrix is singular")]
    Singular,
    #[error("brute-force oracle needs a single-interval model, got horizon {0}")]
    OracleHorizon(usize),
    #[error("brute-force oracle needs at most 3 buses, got {0}")]
    OracleBuses(usize),
    #[error("brute-force grid has {0} points, limit is {ORACLE_MAX_POINTS}")]
    OracleSize(u128),
    #[error("resolution must be at least 1")]
    Resolution,
}

/// How generator outputs enter the LP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Generation {
    /// One scalar `c` per interval with `P_i = c / k_i` on every available unit.
    Ray,
    /// Each generator is its own variable within its bounds.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchPlan {
    pub generation: Generation,
    pub status: LpStatus,
    /// Objective in the plan's own sense; for dispatch plans the weighted
    /// served energy Σ w P Δt.
    pub objective: f64,
    /// MW per interval and load point.
    pub served: Vec<Vec<f64>>,
    /// MW per interval and generator.
    pub gen: Vec<Vec<f64>>,
    /// MW per interval and ESS unit, positive when discharging.
    pub ess: Vec<Vec<f64>>,
    /// Stored energy after each interval, MWh.
    pub energy: Vec<Vec<f64>>,
    /// Slack-bus injection per interval, MW.
    pub slack: Vec<f64>,
    pub weighted_served: f64,
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub primal_residual: f64,
    pub complementarity: f64,
    pub dual_infeasibility: f64,
    pub wall_clock_s: f64,
}

impl DispatchPlan {
    /// Served energy per load class, MWh.
    pub fn class_energy(&self, model: &NetworkModel) -> [f64; 3] {
        let mut out = [0.0; 3];
        for row in &self.served {
            for (load, p) in model.loads.iter().zip(row) {
                out[load.class.index()] += p * model.dt;
            }
        }
        out
    }

    /// Served fraction of each class's demand; 1 for classes without demand.
    pub fn served_fraction(&self, model: &NetworkModel) -> [f64; 3] {
        let served = self.class_energy(model);
        let mut out = [1.0; 3];
        for class in LoadClass::ALL {
            let demand: f64 = model.class_profile(class).iter().sum::<f64>() * model.dt;
            if demand > 0.0 {
                out[class.index()] = served[class.index()] / demand;
            }
        }
        out
    }
}

/// Generators sharing one value of the lost ray share, `φ = Σ_failed 1/k / Σ 1/k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioGroup {
    pub phi: f64,
    pub probability: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioPlan {
    pub plan: DispatchPlan,
    pub alpha: f64,
    pub groups: Vec<ScenarioGroup>,
    /// Optimal value of the epigraph form, `β + Σ p z / (1 − α)`.
    pub epigraph_cvar: f64,
    /// Σ_t Σ_i w_i P_i Δt of the full demand.
    pub full_demand: f64,
    /// Weighted served energy per retained scenario under priority recourse.
    pub served: Vec<f64>,
    /// CVaR of `full_demand − served` over the retained set.
    pub shortfall_cvar: f64,
    /// Centered-loss report for the same served values.
    pub report: RiskReport,
}

/// Linear sensitivities of line flows and bus states to bus injections.
struct Sensitivity {
    /// Per in-service line: model index and MW flow per MW injected at each bus.
    lines: Vec<(usize, Vec<f64>)>,
    /// Bus state (ΔV for DC, θ for AC) per MW injected; slack row and column are zero.
    state: DMatrix<f64>,
}

fn sensitivity(model: &NetworkModel) -> Result<Sensitivity, BaselineError> {
    let islanded = model.islanded_buses();
    if !islanded.is_empty() {
        return Err(GridError::Disconnected {
            islanded: islanded.iter().map(|&i| model.buses[i].id).collect(),
        }
        .into());
    }
    let n = model.buses.len();
    let slack = model.slack_index();
    let y = series_admittance(model);
    let m = match model.kind {
        NetworkKind::Dc => y.g,
        NetworkKind::Ac => -y.b,
    };
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let reduced = DMatrix::from_fn(keep.len(), keep.len(), |r, c| m[(keep[r], keep[c])]);
    let inv = if keep.is_empty() {
        reduced
    } else {
        reduced.try_inverse().ok_or(BaselineError::Singular)?
    };
    let mut state = DMatrix::zeros(n, n);
    for (r, &i) in keep.iter().enumerate() {
        for (c, &k) in keep.iter().enumerate() {
            state[(i, k)] = inv[(r, c)] / model.base_mva;
        }
    }
    let mut lines = Vec::new();
    for (l, line) in model.lines.iter().enumerate().filter(|(_, l)| l.in_service) {
        let (Some(i), Some(k)) = (model.bus_index(line.from_bus), model.bus_index(line.to_bus)) else {
            continue;
        };
        let y = match model.kind {
            NetworkKind::Dc => line.g,
            NetworkKind::Ac => -line.b,
        };
        let row = (0..n).map(|j| model.base_mva * y * (state[(i, j)] - state[(k, j)])).collect();
        lines.push((l, row));
    }
    Ok(Sensitivity { lines, state })
}

fn natural(model: &NetworkModel) -> NetworkModel {
    match model.units {
        Units::Natural => model.clone(),
        Units::PerUnit => model.to_natural(),
    }
}

/// Ray bounds `[max k p_min, min k p_max]` over available units, or `None`
/// when no unit is available.
fn ray_bounds(model: &NetworkModel) -> Option<(f64, f64)> {
    let avail = model.generators.iter().filter(|g| g.in_service);
    let mut out: Option<(f64, f64)> = None;
    for g in avail {
        let (lo, hi) = out.unwrap_or((0.0, f64::INFINITY));
        out = Some((lo.max(g.k_robust * g.p_min), hi.min(g.k_robust * g.p_max)));
    }
    out
}

/// Σ 1/k over available units.
fn ray_gain(model: &NetworkModel) -> f64 {
    model.generators.iter().filter(|g| g.in_service).map(|g| 1.0 / g.k_robust).sum()
}

enum GenVars {
    Ray(Vec<usize>),
    Free(Vec<Vec<usize>>),
}

struct Vars {
    served: Vec<Vec<usize>>,
    gen: GenVars,
    ess: Vec<Vec<usize>>,
    slack: Vec<usize>,
}

/// Builds the dispatch LP (objective: maximize weighted served energy,
/// written as a minimization with `cost_scale` on the served terms).
fn build_dispatch(
    model: &NetworkModel,
    sens: &Sensitivity,
    generation: Generation,
    cost_scale: f64,
) -> (LinearProgram, Vars) {
    let t_len = model.horizon;
    let dt = model.dt;
    let slack_range = model.slack_range();
    let ray = ray_bounds(model).unwrap_or((0.0, 0.0));
    let mut lp = LinearProgram::default();
    let mut vars = Vars {
        served: Vec::with_capacity(t_len),
        gen: match generation {
            Generation::Ray => GenVars::Ray(Vec::new()),
            Generation::Free => GenVars::Free(Vec::new()),
        },
        ess: Vec::with_capacity(t_len),
        slack: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let served = model
            .loads
            .iter()
            .map(|l| lp.add_var(-cost_scale * model.weights.weight(l.class) * dt, 0.0, l.p[t]))
            .collect();
        vars.served.push(served);
        match &mut vars.gen {
            GenVars::Ray(c) => {
                // an infeasible ray interval is left to the solver to report
                c.push(lp.add_var(0.0, ray.0, ray.1));
            }
            GenVars::Free(p) => p.push(
                model
                    .generators
                    .iter()
                    .map(|g| {
                        if g.in_service {
                            lp.add_var(0.0, g.p_min, g.p_max)
                        } else {
                            lp.add_var(0.0, 0.0, 0.0)
                        }
                    })
                    .collect(),
            ),
        }
        vars.ess.push(model.ess.iter().map(|u| lp.add_var(0.0, -u.c_max, u.d_max)).collect());
        vars.slack.push(lp.add_var(0.0, slack_range.p_min, slack_range.p_max));
    }

    let n = model.buses.len();
    for t in 0..t_len {
        // bus injection expressions
        let mut inj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, g) in model.generators.iter().enumerate() {
            let Some(b) = model.bus_index(g.bus) else { continue };
            match &vars.gen {
                GenVars::Ray(c) if g.in_service => inj[b].push((c[t], 1.0 / g.k_robust)),
                GenVars::Ray(_) => {}
                GenVars::Free(p) => inj[b].push((p[t][i], 1.0)),
            }
        }
        for (u, unit) in model.ess.iter().enumerate() {
            if let Some(b) = model.bus_index(unit.bus) {
                inj[b].push((vars.ess[t][u], 1.0));
            }
        }
        for (l, load) in model.loads.iter().enumerate() {
            if let Some(b) = model.bus_index(load.bus) {
                inj[b].push((vars.served[t][l], -1.0));
            }
        }

        let mut balance: Vec<(usize, f64)> = inj.iter().flatten().copied().collect();
        balance.push((vars.slack[t], 1.0));
        lp.add_row(merge(balance), 0.0, 0.0);

        let combine = |weights: &[f64]| {
            merge(
                inj.iter()
                    .zip(weights)
                    .filter(|(_, w)| w.abs() > 1e-14)
                    .flat_map(|(terms, &w)| terms.iter().map(move |&(v, c)| (v, c * w)))
                    .collect(),
            )
        };
        for (l, row) in &sens.lines {
            let lim = model.lines[*l].p_lim;
            add_if_binding(&mut lp, combine(row), -lim, lim);
        }
        for (b, bus) in model.buses.iter().enumerate() {
            if bus.is_slack() {
                continue;
            }
            let weights: Vec<f64> = (0..n).map(|j| sens.state[(b, j)]).collect();
            let (lo, hi) = match model.kind {
                NetworkKind::Dc => (bus.v_min - 1.0, bus.v_max - 1.0),
                NetworkKind::Ac => (bus.theta_min, bus.theta_max),
            };
            add_if_binding(&mut lp, combine(&weights), lo, hi);
        }
    }

    for (u, unit) in model.ess.iter().enumerate() {
        let step = unit.eta * dt;
        let mut terms = Vec::with_capacity(t_len);
        for t in 0..t_len {
            terms.push((vars.ess[t][u], step));
            // e_init − step Σ e ∈ [e_min, e_max]
            let (lo, hi) = (unit.e_init - unit.e_max, unit.e_init - unit.e_min);
            if t + 1 == t_len {
                lp.add_row(terms.clone(), 0.0, 0.0);
            } else {
                add_if_binding(&mut lp, terms.clone(), lo, hi);
            }
        }
    }
    (lp, vars)
}

fn merge(terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (v, c) in terms {
        *acc.entry(v).or_insert(0.0) += c;
    }
    acc.into_iter().filter(|(_, c)| c.abs() > 1e-12).collect()
}

/// Adds the row unless the variable bounds already keep it inside `[lo, hi]`.
fn add_if_binding(lp: &mut LinearProgram, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) {
    let (mut min, mut max) = (0.0, 0.0);
    for &(v, c) in &coefs {
        let (l, u) = (lp.lower[v], lp.upper[v]);
        if c > 0.0 {
            min += c * l;
            max += c * u;
        } else {
            min += c * u;
            max += c * l;
        }
    }
    let tol = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    if min >= lo - tol && max <= hi + tol {
        return;
    }
    lp.add_row(coefs, lo, hi);
}

fn extract(
    model: &NetworkModel,
    lp: &LinearProgram,
    vars: &Vars,
    sol: &LpSolution,
    generation: Generation,
    started: Instant,
) -> DispatchPlan {
    let x = &sol.x;
    let served: Vec<Vec<f64>> = vars.served.iter().map(|r| r.iter().map(|&v| x[v]).collect()).collect();
    let gen: Vec<Vec<f64>> = match &vars.gen {
        GenVars::Ray(c) => c
            .iter()
            .map(|&v| {
                model
                    .generators
                    .iter()
                    .map(|g| if g.in_service { x[v] / g.k_robust } else { 0.0 })
                    .collect()
            })
            .collect(),
        GenVars::Free(p) => p.iter().map(|r| r.iter().map(|&v| x[v]).collect()).collect(),
    };
    let ess: Vec<Vec<f64>> = vars.ess.iter().map(|r| r.iter().map(|&v| x[v]).collect()).collect();
    let mut energy = Vec::with_capacity(model.horizon);
    let mut e: Vec<f64> = model.ess.iter().map(|u| u.e_init).collect();
    for row in &ess {
        for ((e, unit), p) in e.iter_mut().zip(&model.ess).zip(row) {
            *e -= unit.eta * p * model.dt;
        }
        energy.push(e.clone());
    }
    let weighted_served = weighted(model, &served);
    DispatchPlan {
        generation,
        status: sol.status,
        objective: weighted_served,
        served,
        gen,
        ess,
        energy,
        slack: vars.slack.iter().map(|&v| x[v]).collect(),
        weighted_served,
        rows: lp.rows.len(),
        cols: lp.var_count(),
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        complementarity: sol.complementarity,
        dual_infeasibility: sol.dual_infeasibility,
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

fn weighted(model: &NetworkModel, served: &[Vec<f64>]) -> f64 {
    served
        .iter()
        .map(|row| {
            row.iter()
                .zip(&model.loads)
                .map(|(p, l)| model.weights.weight(l.class) * p * model.dt)
                .sum::<f64>()
        })
        .sum()
}

fn options() -> SimplexOptions {
    SimplexOptions::default()
}

/// Maximizes weighted served energy with generators tied to the ray.
pub fn solve_deterministic(model: &NetworkModel) -> Result<DispatchPlan, BaselineError> {
    solve_dispatch(model, Generation::Ray)
}

/// Same LP with every generator dispatched independently: the plan of an
/// EMS without resilience coupling.
pub fn solve_base_ems(model: &NetworkModel) -> Result<DispatchPlan, BaselineError> {
    solve_dispatch(model, Generation::Free)
}

pub fn solve_dispatch(model: &NetworkModel, generation: Generation) -> Result<DispatchPlan, BaselineError> {
    let started = Instant::now();
    let model = natural(model);
    let sens = sensitivity(&model)?;
    let (lp, vars) = build_dispatch(&model, &sens, generation, 1.0);
    let sol = lp.solve_with(&options());
    Ok(extract(&model, &lp, &vars, &sol, generation, started))
}

/// Groups retained scenarios by the share of ray capacity they lose.
pub fn scenario_groups(model: &NetworkModel, set: &ScenarioSet) -> Result<Vec<ScenarioGroup>, BaselineError> {
    if model.line_failures {
        return Err(BaselineError::LineFailures);
    }
    let total = ray_gain(model);
    let weights = set.weights();
    let mut groups: Vec<ScenarioGroup> = Vec::new();
    for (id, s) in set.scenarios.iter().enumerate() {
        if s.mask.len() != model.generators.len() {
            return Err(BaselineError::MaskLength {
                expected: model.generators.len(),
                got: s.mask.len(),
            });
        }
        let lost: f64 = model
            .generators
            .iter()
            .zip(&s.mask)
            .filter(|(g, &failed)| failed && g.in_service)
            .map(|(g, _)| 1.0 / g.k_robust)
            .sum();
        let phi = if total > 0.0 { lost / total } else { 0.0 };
        match groups.iter_mut().find(|g| (g.phi - phi).abs() <= 1e-12) {
            Some(g) => {
                g.probability += weights[id];
                g.members.push(id);
            }
            None => groups.push(ScenarioGroup {
                phi,
                probability: weights[id],
                members: vec![id],
            }),
        }
    }
    Ok(groups)
}

/// Dispatch that `plan` turns into when `scenario` hits: failed units drop
/// out, the slack bus runs up to its limit, and the remaining supply serves
/// classes in priority order up to the planned amounts. Within a class the
/// shortfall is shared in proportion to the planned service.
pub fn apply_recourse(model: &NetworkModel, plan: &DispatchPlan, scenario: &Scenario) -> Result<DispatchPlan, BaselineError> {
    if scenario.mask.len() != model.failable_count() {
        return Err(BaselineError::MaskLength {
            expected: model.failable_count(),
            got: scenario.mask.len(),
        });
    }
    let slack_max = model.slack_range().p_max;
    let mut out = plan.clone();
    for t in 0..plan.served.len() {
        for (p, &failed) in out.gen[t].iter_mut().zip(&scenario.mask) {
            if failed {
                *p = 0.0;
            }
        }
        let gen: f64 = out.gen[t].iter().sum();
        let ess: f64 = plan.ess[t].iter().sum();
        let mut supply = (gen + ess + slack_max).max(0.0);
        let mut by_class = [0.0; 3];
        for (p, l) in plan.served[t].iter().zip(&model.loads) {
            by_class[l.class.index()] += p;
        }
        let mut ratio = [1.0; 3];
        for class in LoadClass::ALL {
            let want = by_class[class.index()];
            let got = want.min(supply);
            supply -= got;
            ratio[class.index()] = if want > 0.0 { got / want } else { 1.0 };
        }
        for (p, l) in out.served[t].iter_mut().zip(&model.loads) {
            *p *= ratio[l.class.index()];
        }
        out.slack[t] = out.served[t].iter().sum::<f64>() - gen - ess;
    }
    out.weighted_served = weighted(model, &out.served);
    out.objective = out.weighted_served;
    Ok(out)
}

/// Weighted served energy of `plan` under `scenario` with priority recourse.
pub fn evaluate_plan(model: &NetworkModel, plan: &DispatchPlan, scenario: &Scenario) -> Result<f64, BaselineError> {
    Ok(apply_recourse(model, plan, scenario)?.weighted_served)
}

/// Here-and-now plan minimizing CVaR_α of weighted shortfall over the
/// retained set, with priority recourse per scenario group.
pub fn solve_scenario_based(model: &NetworkModel, set: &ScenarioSet, alpha: f64) -> Result<ScenarioPlan, BaselineError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::Alpha(alpha).into());
    }
    if set.is_empty() {
        return Err(RiskError::Empty.into());
    }
    let started = Instant::now();
    let model = natural(model);
    let groups = scenario_groups(&model, set)?;
    let sens = sensitivity(&model)?;
    let (mut lp, vars) = build_dispatch(&model, &sens, Generation::Ray, 0.0);
    let dt = model.dt;
    let full_demand = model.full_weighted_demand();
    let k_total = ray_gain(&model);
    let slack_max = model.slack_range().p_max;
    let GenVars::Ray(c) = &vars.gen else { unreachable!() };

    let beta = lp.add_var(1.0, f64::NEG_INFINITY, f64::INFINITY);
    for g in &groups {
        let mut served_terms = Vec::new();
        for t in 0..model.horizon {
            let mut supply = Vec::new();
            for class in LoadClass::ALL {
                let members: Vec<usize> = model
                    .loads
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.class == class)
                    .map(|(i, _)| vars.served[t][i])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let w = model.weights.weight(class) * dt;
                let y = lp.add_var(-TIE_BREAK * g.probability * w, 0.0, f64::INFINITY);
                let mut cap = vec![(y, 1.0)];
                cap.extend(members.iter().map(|&v| (v, -1.0)));
                lp.add_row(cap, f64::NEG_INFINITY, 0.0);
                supply.push((y, 1.0));
                served_terms.push((y, w));
            }
            if supply.is_empty() {
                continue;
            }
            if k_total > 0.0 {
                supply.push((c[t], -(1.0 - g.phi) * k_total));
            }
            supply.extend(vars.ess[t].iter().map(|&v| (v, -1.0)));
            lp.add_row(supply, f64::NEG_INFINITY, slack_max);
        }
        let z = lp.add_var(g.probability / (1.0 - alpha), 0.0, f64::INFINITY);
        let mut epi = vec![(z, 1.0), (beta, 1.0)];
        epi.extend(served_terms);
        lp.add_row(epi, full_demand, f64::INFINITY);
    }

    let sol = lp.solve_with(&options());
    let mut plan = extract(&model, &lp, &vars, &sol, Generation::Ray, started);
    let tie: f64 = (0..lp.var_count()).filter(|&v| v != beta).map(|v| 0.0f64.min(lp.cost[v]) * sol.x[v]).sum();
    let epigraph_cvar = sol.objective - tie;

    let served = set
        .scenarios
        .iter()
        .map(|s| evaluate_plan(&model, &plan, s))
        .collect::<Result<Vec<_>, _>>()?;
    let probs = set.weights();
    let shortfall: Vec<f64> = served.iter().map(|w| full_demand - w).collect();
    let shortfall_cvar = cvar_alpha(&shortfall, &probs, alpha)?;
    let report = risk_report_from_served(set, &served, alpha)?;
    plan.objective = epigraph_cvar;
    plan.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(ScenarioPlan {
        plan,
        alpha,
        groups,
        epigraph_cvar,
        full_demand,
        served,
        shortfall_cvar,
        report,
    })
}

/// Exhaustive search over served fractions `{0, 1/r, …, 1}` per load point
/// for a single-interval model of at most three buses. Generation follows
/// the ray; for each grid point the feasible ray values form an interval
/// that is computed exactly. Storage must end where it started, so it is
/// held at zero.
pub fn brute_force_oracle(model: &NetworkModel, resolution: usize) -> Result<DispatchPlan, BaselineError> {
    let started = Instant::now();
    let model = natural(model);
    if model.horizon != 1 {
        return Err(BaselineError::OracleHorizon(model.horizon));
    }
    if model.buses.len() > 3 {
        return Err(BaselineError::OracleBuses(model.buses.len()));
    }
    if resolution == 0 {
        return Err(BaselineError::Resolution);
    }
    let n_loads = model.loads.len();
    let points = (resolution as u128 + 1).checked_pow(n_loads as u32).unwrap_or(u128::MAX);
    if points > ORACLE_MAX_POINTS {
        return Err(BaselineError::OracleSize(points));
    }
    let sens = sensitivity(&model)?;
    let n = model.buses.len();
    let slack = model.slack_range();
    let k_total = ray_gain(&model);
    let (c_lo, c_hi) = ray_bounds(&model).unwrap_or((0.0, 0.0));
    // per-bus ray gain
    let mut bus_gain = vec![0.0; n];
    for g in model.generators.iter().filter(|g| g.in_service) {
        if let Some(b) = model.bus_index(g.bus) {
            bus_gain[b] += 1.0 / g.k_robust;
        }
    }
    let load_bus: Vec<usize> = model.loads.iter().map(|l| model.bus_index(l.bus).unwrap_or(0)).collect();
    // constraints of the form a + b c ∈ [lo, hi]
    let mut rows: Vec<(Vec<f64>, f64, f64)> = sens
        .lines
        .iter()
        .map(|(l, row)| (row.clone(), -model.lines[*l].p_lim, model.lines[*l].p_lim))
        .collect();
    for (b, bus) in model.buses.iter().enumerate().filter(|(_, b)| !b.is_slack()) {
        let w: Vec<f64> = (0..n).map(|j| sens.state[(b, j)]).collect();
        let (lo, hi) = match model.kind {
            NetworkKind::Dc => (bus.v_min - 1.0, bus.v_max - 1.0),
            NetworkKind::Ac => (bus.theta_min, bus.theta_max),
        };
        rows.push((w, lo, hi));
    }

    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut idx = vec![0usize; n_loads];
    loop {
        let served: Vec<f64> = idx
            .iter()
            .zip(&model.loads)
            .map(|(&i, l)| l.p[0] * i as f64 / resolution as f64)
            .collect();
        let total: f64 = served.iter().sum();
        let mut load_at = vec![0.0; n];
        for (p, &b) in served.iter().zip(&load_bus) {
            load_at[b] += p;
        }
        // balance: k_total c + s = total, s ∈ [slack.p_min, slack.p_max]
        let (mut lo, mut hi) = (c_lo, c_hi);
        if k_total > 0.0 {
            lo = lo.max((total - slack.p_max) / k_total);
            hi = hi.min((total - slack.p_min) / k_total);
        } else if total < slack.p_min || total > slack.p_max {
            hi = lo - 1.0;
        }
        for (w, rlo, rhi) in &rows {
            let a: f64 = -w.iter().zip(&load_at).map(|(w, p)| w * p).sum::<f64>();
            let b: f64 = w.iter().zip(&bus_gain).map(|(w, g)| w * g).sum();
            if b.abs() < 1e-14 {
                if a < rlo - 1e-9 || a > rhi + 1e-9 {
                    hi = lo - 1.0;
                }
            } else {
                let (x1, x2) = ((rlo - a) / b, (rhi - a) / b);
                lo = lo.max(x1.min(x2));
                hi = hi.min(x1.max(x2));
            }
        }
        if lo <= hi + 1e-12 {
            let value = weighted(&model, std::slice::from_ref(&served));
            if best.as_ref().is_none_or(|(v, _, _)| value > *v + 1e-12) {
                best = Some((value, served, lo.max(c_lo).min(hi)));
            }
        }
        // odometer
        let mut k = 0;
        while k < n_loads {
            idx[k] += 1;
            if idx[k] <= resolution {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n_loads {
            break;
        }
    }

    let ess = vec![vec![0.0; model.ess.len()]];
    let energy = vec![model.ess.iter().map(|u| u.e_init).collect()];
    let (status, objective, served, c) = match best {
        Some((v, s, c)) => (LpStatus::Optimal, v, s, c),
        None => (LpStatus::Infeasible, 0.0, vec![0.0; n_loads], 0.0),
    };
    let gen = vec![model
        .generators
        .iter()
        .map(|g| if g.in_service { c / g.k_robust } else { 0.0 })
        .collect::<Vec<f64>>()];
    let slack_mw = served.iter().sum::<f64>() - k_total * c;
    Ok(DispatchPlan {
        generation: Generation::Ray,
        status,
        objective,
        served: vec![served],
        gen,
        ess,
        energy,
        slack: vec![slack_mw],
        weighted_served: objective,
        rows: 0,
        cols: 0,
        iterations: points as usize,
        primal_residual: 0.0,
        complementarity: 0.0,
        dual_infeasibility: 0.0,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{bundled, testutil::dc_chain, EssUnit, Generator, LoadPoint, SlackRange};
    use crate::risk::enumerate_scenarios;
    use proptest::prelude::*;

    fn gen(name: &str, bus: u32, p_max: f64, k: f64, pof: f64) -> Generator {
        Generator {
            name: name.into(),
            bus,
            p_min: 0.0,
            p_max,
            q_min: 0.0,
            q_max: 0.0,
            pof,
            k_robust: k,
            in_service: true,
        }
    }

    fn load(bus: u32, class: LoadClass, p: f64) -> LoadPoint {
        LoadPoint {
            name: format!("{}-{bus}", class.as_str()),
            bus,
            class,
            p: vec![p],
            q: None,
        }
    }

    fn single_bus(slack: f64) -> NetworkModel {
        let mut m = dc_chain(1, 10.0);
        m.buses[0].slack = Some(SlackRange {
            p_min: -slack,
            p_max: slack,
        });
        m
    }

    #[test]
    fn uncongested_single_bus() {
        let mut m = single_bus(0.0);
        m.generators.push(gen("G", 1, 10.0, 1.0, 0.0));
        m.loads.push(load(1, LoadClass::Critical, 6.0));
        let plan = solve_deterministic(&m).unwrap();
        assert_eq!(plan.status, LpStatus::Optimal);
        assert!((plan.served[0][0] - 6.0).abs() < 1e-9);
        assert!((plan.objective - 100.0 * 6.0).abs() < 1e-7);
        let oracle = brute_force_oracle(&m, 10).unwrap();
        assert!((oracle.objective - plan.objective).abs() < 1e-9);
    }

    #[test]
    fn weights_force_priority() {
        let mut m = single_bus(0.0);
        m.generators.push(gen("G", 1, 5.0, 1.0, 0.0));
        m.loads.push(load(1, LoadClass::SemiCritical, 4.0));
        m.loads.push(load(1, LoadClass::Critical, 4.0));
        let plan = solve_deterministic(&m).unwrap();
        assert!((plan.served[0][1] - 4.0).abs() < 1e-9);
        assert!((plan.served[0][0] - 1.0).abs() < 1e-9);
        let oracle = brute_force_oracle(&m, 8).unwrap();
        assert!((oracle.objective - plan.objective).abs() < 1e-9);
    }

    #[test]
    fn ray_ratio_holds() {
        let mut m = dc_chain(2, 20.0);
        m.buses[0].slack = Some(SlackRange { p_min: -0.5, p_max: 0.5 });
        m.generators.push(gen("G1", 1, 10.0, 1.0, 0.0));
        m.generators.push(gen("G2", 2, 10.0, 2.0, 0.0));
        m.loads.push(load(2, LoadClass::Critical, 6.0));
        let plan = solve_deterministic(&m).unwrap();
        let (p1, p2) = (plan.gen[0][0], plan.gen[0][1]);
        assert!(p1 > 0.0 && p1 < 10.0 && p2 > 0.0 && p2 < 10.0);
        assert!((p1 - 2.0 * p2).abs() < 1e-9);
    }

    #[test]
    fn zero_load_and_infeasible() {
        let mut m = single_bus(1.0);
        m.generators.push(gen("G", 1, 10.0, 1.0, 0.0));
        let lp = solve_deterministic(&m).unwrap();
        let bf = brute_force_oracle(&m, 4).unwrap();
        assert_eq!(lp.objective, 0.0);
        assert_eq!(bf.objective, 0.0);
        assert!(bf.served[0].is_empty());

        m.generators[0].p_min = 5.0;
        m.loads.push(load(1, LoadClass::Critical, 2.0));
        assert_eq!(solve_deterministic(&m).unwrap().status, LpStatus::Infeasible);
        assert_eq!(brute_force_oracle(&m, 4).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn oracle_rejects_large_grids() {
        let mut m = single_bus(1.0);
        for _ in 0..8 {
            m.loads.push(load(1, LoadClass::NonCritical, 1.0));
        }
        assert!(matches!(brute_force_oracle(&m, 10), Err(BaselineError::OracleSize(_))));
    }

    fn hedging_case() -> NetworkModel {
        let mut m = dc_chain(2, 50.0);
        m.buses[0].slack = Some(SlackRange { p_min: -0.1, p_max: 0.1 });
        m.generators.push(gen("big", 1, 8.0, 1.0, 0.2));
        m.generators.push(gen("small", 2, 4.0, 2.0, 0.0));
        m.loads.push(load(2, LoadClass::Critical, 3.0));
        m.loads.push(load(2, LoadClass::NonCritical, 9.0));
        m
    }

    #[test]
    fn single_scenario_matches_deterministic() {
        let m = bundled::load("toy3").unwrap();
        let det = solve_deterministic(&m).unwrap();
        let set = ScenarioSet::single(Scenario::all_available(m.failable_count()));
        let sp = solve_scenario_based(&m, &set, 0.9).unwrap();
        assert_eq!(sp.plan.status, LpStatus::Optimal);
        assert!((sp.served[0] - det.weighted_served).abs() < 1e-6 * det.weighted_served);
        assert!((sp.epigraph_cvar - (sp.full_demand - det.weighted_served)).abs() < 1e-6 * sp.full_demand);
    }

    #[test]
    fn cvar_plan_hedges_against_failure() {
        let m = hedging_case();
        let set = enumerate_scenarios(&m.failable_pofs(), 0.0).unwrap();
        assert_eq!(set.len(), 2);
        let det = solve_deterministic(&m).unwrap();
        let sp = solve_scenario_based(&m, &set, 0.9).unwrap();
        let failing = set.scenarios.iter().position(|s| s.mask[0] && !s.mask[1]).unwrap();
        let det_failed = evaluate_plan(&m, &det, &set.scenarios[failing]).unwrap();
        assert!(sp.served[failing] >= det_failed - 1e-9);
        // the failure case keeps the critical load: the plan must not lean on the big unit
        assert!(sp.served[failing] >= 100.0 * 3.0 - 1e-6, "{}", sp.served[failing]);
        assert!((sp.epigraph_cvar - sp.shortfall_cvar).abs() < 1e-8 * sp.full_demand);
    }

    #[test]
    fn epigraph_matches_cvar_on_bundled_case() {
        let m = bundled::load("toy3").unwrap();
        let set = enumerate_scenarios(&m.failable_pofs(), 0.0005).unwrap();
        let sp = solve_scenario_based(&m, &set, 0.9).unwrap();
        assert_eq!(sp.plan.status, LpStatus::Optimal);
        assert!(sp.plan.complementarity < 1e-7);
        assert!((sp.epigraph_cvar - sp.shortfall_cvar).abs() < 1e-8 * sp.full_demand);
    }

    #[test]
    fn base_ems_serves_at_least_ray_plan() {
        let m = bundled::load("toy3").unwrap();
        let base = solve_base_ems(&m).unwrap();
        let ray = solve_deterministic(&m).unwrap();
        assert!(base.weighted_served >= ray.weighted_served - 1e-6);
        assert!(base.complementarity < 1e-7 && ray.complementarity < 1e-7);
    }

    #[test]
    fn ess_cycles_back() {
        let mut m = bundled::load("toy3").unwrap();
        m.ess = vec![EssUnit { e_init: 1.0, ..m.ess[0].clone() }];
        let plan = solve_deterministic(&m).unwrap();
        let last = plan.energy.last().unwrap()[0];
        assert!((last - 1.0).abs() < 1e-9);
        for row in &plan.energy {
            assert!(row[0] >= m.ess[0].e_min - 1e-9 && row[0] <= m.ess[0].e_max + 1e-9);
        }
    }

    #[test]
    fn line_failures_are_rejected() {
        let mut m = bundled::load("toy3").unwrap();
        m.line_failures = true;
        let set = enumerate_scenarios(&m.failable_pofs(), 0.01).unwrap();
        assert!(matches!(solve_scenario_based(&m, &set, 0.9), Err(BaselineError::LineFailures)));
    }

    /// Random 1-3 bus single-interval instance with up to three loads.
    fn tiny_instance() -> impl Strategy<Value = NetworkModel> {
        (
            1usize..=3,
            prop::collection::vec((1u32..=3, 0usize..3, 0.5f64..6.0), 1..=3),
            prop::collection::vec((1u32..=3, 1.0f64..8.0, 0.5f64..3.0), 1..=2),
            0.0f64..1.0,
            1.0f64..8.0,
        )
            .prop_map(|(n, loads, gens, slack, lim)| {
                let mut m = dc_chain(n, 30.0);
                m.buses[0].slack = Some(SlackRange { p_min: -slack, p_max: slack });
                for line in &mut m.lines {
                    line.p_lim = lim;
                }
                for (i, (bus, p_max, k)) in gens.into_iter().enumerate() {
                    m.generators.push(gen(&format!("G{i}"), bus.min(n as u32), p_max, k, 0.0));
                }
                for (bus, class, p) in loads {
                    m.loads.push(load(bus.min(n as u32), LoadClass::ALL[class], p));
                }
                m
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lp_agrees_with_oracle(m in tiny_instance()) {
            let res = 12;
            let lp = solve_deterministic(&m).unwrap();
            let bf = brute_force_oracle(&m, res).unwrap();
            prop_assert_eq!(lp.status, bf.status);
            if lp.status == LpStatus::Optimal {
                let cell: f64 = m.loads.iter().map(|l| m.weights.weight(l.class) * l.p[0] / res as f64).sum();
                prop_assert!(lp.objective <= bf.objective + cell + 1e-6, "lp {} oracle {} cell {}", lp.objective, bf.objective, cell);
                prop_assert!(lp.objective >= bf.objective - 1e-6, "lp {} oracle {}", lp.objective, bf.objective);
                prop_assert!(lp.complementarity < 1e-7);
            }
        }

        #[test]
        fn priority_dominance_when_uncongested(m in tiny_instance()) {
            let mut m = m;
            for line in &mut m.lines {
                line.p_lim = 1e3;
            }
            for bus in &mut m.buses {
                bus.v_min = 0.0;
                bus.v_max = 2.0;
            }
            let plan = solve_deterministic(&m).unwrap();
            prop_assume!(plan.status == LpStatus::Optimal);
            let slack = m.slack_range();
            let s = plan.slack[0];
            prop_assume!(s > slack.p_min + 1e-7 && s < slack.p_max - 1e-7);
            for (i, a) in m.loads.iter().enumerate() {
                for (j, b) in m.loads.iter().enumerate() {
                    if a.bus == b.bus && a.class < b.class {
                        let shed_a = plan.served[0][i] < a.p[0] - 1e-7;
                        let serves_b = plan.served[0][j] > 1e-7;
                        prop_assert!(!(shed_a && serves_b), "{:?}", plan.served);
                    }
                }
            }
        }
    }
}

//! Episodic EMS environment. One episode is one scenario over the model
//! horizon; each step dispatches one interval through the power flow.
//!
//! Intervals that violate limits are repeated with corrected setpoints (the
//! variable time step) up to `repair_cap` times before the hour advances.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{apply_scenario, EssUnit, Generator, GridError, LoadClass, NetworkKind, NetworkModel, Scenario};
use crate::power_flow::{
    check_limits, GenDispatch, PowerFlow, PowerFlowError, PowerFlowOptions, PowerFlowSolution, ViolationKind,
    ViolationSet,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("action has {got} {field} entries, expected {expected}")]
    ActionShape { field: &'static str, expected: usize, got: usize },
    #[error("action contains a non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("step called on a finished episode")]
    Finished,
    #[error("every generator has failed")]
    AllGeneratorsFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Penalty per p.u. of voltage (p.u.) or angle (rad) excess.
    pub lambda_v_theta: f64,
    /// Penalty per p.u. of line or generator power excess.
    pub lambda_pq: f64,
    /// Penalty per MW of slack output below its minimum.
    pub k1: f64,
    /// Penalty per MW of slack output above its maximum.
    pub k2: f64,
    pub repair_cap: usize,
    /// Restrict storage windows so the final interval can always return
    /// every unit to its initial energy.
    pub terminal_repair: bool,
    /// Penalty per MW of unrepaired storage cycle residual at episode end.
    pub cycle_penalty: f64,
    /// Penalty for an interval whose power flow cannot be solved. `None`
    /// uses the weighted value of the full critical load of one interval.
    pub infeasible_penalty: Option<f64>,
    pub flipped_q_sign: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            lambda_v_theta: 50.0,
            lambda_pq: 50.0,
            k1: 50.0,
            k2: 50.0,
            repair_cap: 50,
            terminal_repair: true,
            cycle_penalty: 50.0,
            infeasible_penalty: None,
            flipped_q_sign: false,
        }
    }
}

/// Setpoints for one interval in physical units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Action {
    /// Fraction of each load point's profile to serve.
    pub load_served: Vec<f64>,
    /// MW per ESS, positive discharging.
    pub ess_power: Vec<f64>,
    /// Requested MW per generator.
    pub gen_power: Vec<f64>,
}

impl Action {
    pub fn zeros(model: &NetworkModel) -> Self {
        Self {
            load_served: vec![0.0; model.loads.len()],
            ess_power: vec![0.0; model.ess.len()],
            gen_power: vec![0.0; model.generators.len()],
        }
    }

    pub fn dim(model: &NetworkModel) -> usize {
        model.loads.len() + model.ess.len() + model.generators.len()
    }

    /// Maps a vector in [-1, 1]^dim (loads, then ESS, then generators) onto
    /// physical setpoints. Values outside the box are clipped.
    pub fn from_normalized(a: &[f64], model: &NetworkModel) -> Self {
        let (nl, ne) = (model.loads.len(), model.ess.len());
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
        let load_served = a[..nl].iter().map(|&x| (c(x) + 1.0) / 2.0).collect();
        let ess_power = a[nl..nl + ne]
            .iter()
            .zip(&model.ess)
            .map(|(&x, e)| {
                let x = c(x);
                if x >= 0.0 {
                    x * e.d_max
                } else {
                    x * e.c_max
                }
            })
            .collect();
        let gen_power = a[nl + ne..]
            .iter()
            .zip(&model.generators)
            .map(|(&x, g)| g.p_min + (c(x) + 1.0) / 2.0 * (g.p_max - g.p_min))
            .collect();
        Self {
            load_served,
            ess_power,
            gen_power,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_slack: f64,
    pub line_p: Vec<f64>,
    pub line_q: Vec<f64>,
    pub ess_energy: Vec<f64>,
    pub hour: usize,
    pub mask: Vec<bool>,
    /// Normalized policy input; layout given by [`observation_layout`].
    pub features: Vec<f64>,
}

/// Names of the policy input features, in order.
pub fn observation_layout(model: &NetworkModel) -> Vec<String> {
    let ac = model.kind == NetworkKind::Ac;
    let mut names = Vec::new();
    names.extend(model.buses.iter().map(|b| format!("v[{}]", b.id)));
    if ac {
        names.extend(model.buses.iter().map(|b| format!("theta[{}]", b.id)));
    }
    names.push("p_slack".into());
    names.extend((0..model.lines.len()).map(|i| format!("line_p[{i}]")));
    if ac {
        names.extend((0..model.lines.len()).map(|i| format!("line_q[{i}]")));
    }
    names.extend(model.ess.iter().map(|e| format!("soc[{}]", e.name)));
    names.push("hour".into());
    names.extend(LoadClass::ALL.iter().map(|c| format!("demand[{}]", c.as_str())));
    names.push("available_capacity".into());
    names.extend((0..model.failable_count()).map(|i| format!("mask[{i}]")));
    names
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_obj: f64,
    pub r_v_theta: f64,
    pub r_p_q: f64,
    pub r_ineq: f64,
    pub r_slack: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn penalties(r_v_theta: f64, r_p_q: f64, r_slack: f64) -> Self {
        Self {
            r_obj: 0.0,
            r_v_theta,
            r_p_q,
            r_ineq: r_v_theta + r_p_q,
            r_slack,
            total: 0.0,
        }
    }

    fn finish(mut self, r_obj: f64) -> Self {
        self.r_obj = r_obj;
        self.r_ineq = self.r_v_theta + self.r_p_q;
        self.total = self.r_obj + self.r_ineq + self.r_slack;
        self
    }
}

/// Weighted served energy of one interval, Σ w_i P_i Δt.
pub fn objective_reward(model: &NetworkModel, served_mw: &[f64]) -> f64 {
    model
        .loads
        .iter()
        .zip(served_mw)
        .map(|(l, s)| model.weights.weight(l.class) * s * model.dt)
        .sum()
}

/// Reward of one interval: weighted served energy minus violation
/// penalties. Slack penalties use `solution.p_slack` to pick the arm.
pub fn compute_reward(
    model: &NetworkModel,
    config: &EnvConfig,
    solution: &PowerFlowSolution,
    violations: &ViolationSet,
    served_mw: &[f64],
) -> RewardBreakdown {
    let mut r = violation_penalties(model, config, solution.p_slack, violations);
    r = r.finish(objective_reward(model, served_mw));
    r
}

fn violation_penalties(model: &NetworkModel, config: &EnvConfig, p_slack: f64, violations: &ViolationSet) -> RewardBreakdown {
    let base = model.base_mva;
    let mut v_theta = 0.0;
    let mut p_q = 0.0;
    let mut slack = 0.0;
    for v in &violations.entries {
        match v.kind {
            ViolationKind::V | ViolationKind::Theta => v_theta += v.excess,
            ViolationKind::LineP | ViolationKind::LineQ | ViolationKind::GenP | ViolationKind::GenQ => {
                p_q += v.excess / base
            }
            ViolationKind::Slack => {
                let range = model.slack_range();
                slack += if p_slack < range.p_min {
                    config.k1 * v.excess
                } else {
                    config.k2 * v.excess
                };
            }
        }
    }
    RewardBreakdown::penalties(-config.lambda_v_theta * v_theta, -config.lambda_pq * p_q, -slack)
}

/// Allowed ESS power range for one interval, MW (positive discharging).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EssWindow {
    pub lo: f64,
    pub hi: f64,
}

impl EssWindow {
    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, p: f64, tol: f64) -> bool {
        p >= self.lo - tol && p <= self.hi + tol
    }
}

/// Power window for a unit holding `energy` with `steps_left` intervals to
/// go (including this one). Rate and energy limits always apply; with
/// `reachable` the next energy must also be able to return to `e_init` by
/// the end of the horizon.
pub fn ess_window(unit: &EssUnit, energy: f64, steps_left: usize, dt: f64, reachable: bool) -> EssWindow {
    let step = unit.eta * dt;
    let (mut e_lo, mut e_hi) = (unit.e_min, unit.e_max);
    if reachable && steps_left > 0 {
        let rest = (steps_left - 1) as f64 * step;
        e_lo = e_lo.max(unit.e_init - rest * unit.c_max);
        e_hi = e_hi.min(unit.e_init + rest * unit.d_max);
    }
    let hi = unit.d_max.min((energy - e_lo) / step);
    let lo = (-unit.c_max).max(-(e_hi - energy) / step);
    if lo > hi {
        let mid = 0.5 * (lo + hi);
        EssWindow { lo: mid, hi: mid }
    } else {
        EssWindow { lo, hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EssStep {
    pub energy: f64,
    pub applied: f64,
    pub window: EssWindow,
    pub next_window: EssWindow,
}

/// Clips the request to the window, updates energy by E − η P Δt, and
/// returns the window for the following interval.
pub fn ess_step(unit: &EssUnit, energy: f64, requested: f64, steps_left: usize, dt: f64, reachable: bool) -> EssStep {
    let window = ess_window(unit, energy, steps_left, dt, reachable);
    let applied = if requested.is_finite() { window.clamp(requested) } else { window.clamp(0.0) };
    let next = (energy - unit.eta * applied * dt).clamp(unit.e_min, unit.e_max);
    let next_window = ess_window(unit, next, steps_left.saturating_sub(1), dt, reachable);
    EssStep {
        energy: next,
        applied,
        window,
        next_window,
    }
}

/// Point on the ray `P_i = c / k_i` (available units only) clipped to unit
/// bounds, for a given `c`.
fn ray_point(gens: &[Generator], c: f64) -> Vec<f64> {
    gens.iter()
        .map(|g| if g.in_service { (c / g.k_robust).clamp(g.p_min, g.p_max) } else { 0.0 })
        .collect()
}

/// Spreads the requested total over available generators along the ray
/// `k_1 P_1 = k_2 P_2 = …`, then clips each to its bounds.
pub fn project_generation(request: &[f64], gens: &[Generator]) -> Result<Vec<f64>, EnvError> {
    let inv_k: f64 = gens.iter().filter(|g| g.in_service).map(|g| 1.0 / g.k_robust).sum();
    if inv_k == 0.0 {
        return Err(EnvError::AllGeneratorsFailed);
    }
    let total: f64 = request
        .iter()
        .zip(gens)
        .filter(|(r, g)| g.in_service && r.is_finite())
        .map(|(r, _)| *r)
        .sum();
    Ok(ray_point(gens, total.max(0.0) / inv_k))
}

/// Clipped ray point whose total output is closest to `target`.
pub fn ray_for_total(target: f64, gens: &[Generator]) -> Vec<f64> {
    let total = |c: f64| ray_point(gens, c).iter().sum::<f64>();
    let c_max = gens
        .iter()
        .filter(|g| g.in_service)
        .map(|g| g.p_max * g.k_robust)
        .fold(0.0, f64::max);
    if total(0.0) >= target {
        return ray_point(gens, 0.0);
    }
    if total(c_max) <= target {
        return ray_point(gens, c_max);
    }
    let (mut lo, mut hi) = (0.0, c_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ray_point(gens, 0.5 * (lo + hi))
}

/// Reactive output that shares `q_demand` among in-service generators in
/// proportion to their upper reactive limits, clipped to each unit's range.
pub fn reactive_for_demand(q_demand: f64, gens: &[Generator]) -> Vec<f64> {
    let q_cap: f64 = gens.iter().filter(|g| g.in_service).map(|g| g.q_max.max(0.0)).sum();
    gens.iter()
        .map(|g| {
            if g.in_service && q_cap > 0.0 {
                (q_demand * g.q_max.max(0.0) / q_cap).clamp(g.q_min, g.q_max)
            } else {
                0.0
            }
        })
        .collect()
}

/// True when no generator is held at a bound by the clip.
pub fn ray_unclipped(dispatch: &[f64], gens: &[Generator]) -> bool {
    dispatch.iter().zip(gens).filter(|(_, g)| g.in_service).all(|(p, g)| {
        let tol = 1e-12 * (1.0 + g.p_max);
        *p > g.p_min + tol && *p < g.p_max - tol
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub hour: usize,
    pub action: Action,
    pub served_mw: Vec<f64>,
    pub ess_mw: Vec<f64>,
    pub ess_window: Vec<EssWindow>,
    pub gen_mw: Vec<f64>,
    /// True when the generator dispatch sits strictly inside every bound.
    pub ray_unclipped: bool,
    pub energy_after: Vec<f64>,
    pub p_slack: f64,
    pub reward: RewardBreakdown,
    pub repairs: usize,
    /// Violations of the requested setpoints before any repair.
    pub violations: ViolationSet,
    /// Violations left after the last repair.
    pub final_violations: ViolationSet,
    pub infeasible: bool,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeTrace {
    pub scenario_mask: String,
    pub scenario_id: Option<usize>,
    pub intervals: Vec<IntervalRecord>,
    pub terminal: bool,
    /// Σ_t applied ESS MW per unit at episode end.
    pub cycle_residual: Vec<f64>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.intervals.iter().map(|r| r.reward.total).sum()
    }

    /// Weighted served energy over the episode.
    pub fn weighted_served(&self, model: &NetworkModel) -> f64 {
        self.intervals.iter().map(|r| objective_reward(model, &r.served_mw)).sum()
    }

    /// Served MW per class per interval.
    pub fn class_served(&self, model: &NetworkModel) -> [Vec<f64>; 3] {
        let mut out = [vec![], vec![], vec![]];
        for r in &self.intervals {
            let mut row = [0.0; 3];
            for (l, s) in model.loads.iter().zip(&r.served_mw) {
                row[l.class.index()] += s;
            }
            for c in 0..3 {
                out[c].push(row[c]);
            }
        }
        out
    }

    /// Served energy over demanded energy for one class.
    pub fn served_fraction(&self, model: &NetworkModel, class: LoadClass) -> f64 {
        let served: f64 = self.class_served(model)[class.index()].iter().sum();
        let demand: f64 = model.class_profile(class).iter().take(self.intervals.len()).sum();
        if demand > 0.0 {
            served / demand
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepInfo {
    pub repairs: usize,
    pub violations: ViolationSet,
    pub final_violations: ViolationSet,
    pub infeasible: bool,
    /// Present on the terminal step.
    pub cycle_residual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

struct Indices {
    load_bus: Vec<usize>,
    gen_bus: Vec<usize>,
    ess_bus: Vec<usize>,
}

/// Setpoints being worked on inside one interval.
#[derive(Clone)]
struct Setpoints {
    served: Vec<f64>,
    ess: Vec<f64>,
    gen: Vec<f64>,
}

pub struct EmsEnv {
    base: NetworkModel,
    config: EnvConfig,
    model: NetworkModel,
    pf: PowerFlow,
    idx: Indices,
    scenario: Scenario,
    scenario_id: Option<usize>,
    seed: u64,
    hour: usize,
    energy: Vec<f64>,
    ess_sum: Vec<f64>,
    load_live: Vec<bool>,
    observation: Observation,
    trace: Vec<IntervalRecord>,
    done: bool,
    infeasible_penalty: f64,
    class_peak: [f64; 3],
    installed: f64,
}

impl EmsEnv {
    /// Environment on `model`, reset to the all-available scenario.
    pub fn new(model: &NetworkModel, config: EnvConfig) -> Result<Self, EnvError> {
        let scenario = Scenario::all_available(model.failable_count());
        let index = |id: u32| model.bus_index(id).expect("validated bus reference");
        let idx = Indices {
            load_bus: model.loads.iter().map(|l| index(l.bus)).collect(),
            gen_bus: model.generators.iter().map(|g| index(g.bus)).collect(),
            ess_bus: model.ess.iter().map(|e| index(e.bus)).collect(),
        };
        let critical: f64 = (0..model.horizon)
            .map(|t| {
                model
                    .loads
                    .iter()
                    .filter(|l| l.class == LoadClass::Critical)
                    .map(|l| l.p[t])
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        let infeasible_penalty = config
            .infeasible_penalty
            .unwrap_or(model.weights.critical * critical.max(1.0) * model.dt);
        let class_peak = LoadClass::ALL.map(|c| model.class_profile(c).into_iter().fold(0.0, f64::max));
        let pf_options = PowerFlowOptions {
            flipped_q_sign: config.flipped_q_sign,
            max_iterations: if model.kind == NetworkKind::Dc { 20 } else { 50 },
            ..PowerFlowOptions::default()
        };
        let mut env = Self {
            pf: PowerFlow::new(model, pf_options),
            base: model.clone(),
            model: model.clone(),
            config,
            idx,
            scenario,
            scenario_id: None,
            seed: 0,
            hour: 0,
            energy: vec![],
            ess_sum: vec![],
            load_live: vec![],
            observation: Observation {
                v: vec![],
                theta: vec![],
                p_slack: 0.0,
                line_p: vec![],
                line_q: vec![],
                ess_energy: vec![],
                hour: 0,
                mask: vec![],
                features: vec![],
            },
            trace: vec![],
            done: false,
            infeasible_penalty,
            class_peak,
            installed: model.installed_capacity(),
        };
        let s = env.scenario.clone();
        env.reset(&s, 0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn base_model(&self) -> &NetworkModel {
        &self.base
    }

    /// Model with the current scenario applied.
    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn hour(&self) -> usize {
        self.hour
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn energy(&self) -> &[f64] {
        &self.energy
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn observation_dim(&self) -> usize {
        self.observation.features.len()
    }

    pub fn action_dim(&self) -> usize {
        Action::dim(&self.base)
    }

    /// Largest single-interval objective reward (all load served at peak).
    pub fn max_interval_reward(&self) -> f64 {
        (0..self.base.horizon)
            .map(|t| {
                let served: Vec<f64> = self.base.loads.iter().map(|l| l.p[t]).collect();
                objective_reward(&self.base, &served)
            })
            .fold(0.0, f64::max)
    }

    pub fn reset(&mut self, scenario: &Scenario, seed: u64) -> Result<&Observation, EnvError> {
        self.reset_with_id(scenario, None, seed)
    }

    pub fn reset_with_id(&mut self, scenario: &Scenario, id: Option<usize>, seed: u64) -> Result<&Observation, EnvError> {
        let applied = apply_scenario(&self.base, scenario)?;
        if applied.model != self.model {
            self.pf = PowerFlow::new(
                &applied.model,
                PowerFlowOptions {
                    flipped_q_sign: self.config.flipped_q_sign,
                    max_iterations: if self.base.kind == NetworkKind::Dc { 20 } else { 50 },
                    ..PowerFlowOptions::default()
                },
            );
        }
        self.model = applied.model;
        self.scenario = scenario.clone();
        self.scenario_id = id;
        self.seed = seed;
        self.hour = 0;
        self.done = false;
        self.trace.clear();
        self.energy = self.model.ess.iter().map(|e| e.e_init).collect();
        self.ess_sum = vec![0.0; self.model.ess.len()];
        let islanded = self.pf.islanded().to_vec();
        self.load_live = self.idx.load_bus.iter().map(|b| !islanded.contains(b)).collect();
        let n = self.model.buses.len();
        let flat = PowerFlowSolution {
            v: (0..n).map(|i| if islanded.contains(&i) { 0.0 } else { 1.0 }).collect(),
            theta: vec![0.0; n],
            p_inj: vec![0.0; n],
            q_inj: vec![0.0; n],
            p_slack: 0.0,
            q_slack: 0.0,
            flows: vec![Default::default(); self.model.lines.len()],
            converged: true,
            iterations: 0,
            max_mismatch: 0.0,
            islanded,
        };
        self.observation = self.observe(&flat);
        Ok(&self.observation)
    }

    fn observe(&self, s: &PowerFlowSolution) -> Observation {
        let m = &self.model;
        let ac = m.kind == NetworkKind::Ac;
        let clip = |x: f64| if x.is_finite() { x.clamp(-5.0, 5.0) } else { 0.0 };
        let mut f = Vec::new();
        f.extend(s.v.iter().map(|v| clip((v - 1.0) / 0.05)));
        if ac {
            f.extend(s.theta.iter().map(|t| clip(t / 0.5)));
        }
        let range = m.slack_range();
        f.push(clip(s.p_slack / range.p_max.abs().max(range.p_min.abs()).max(1e-9)));
        f.extend(s.flows.iter().zip(&m.lines).map(|(fl, l)| clip(fl.p_from / l.p_lim)));
        if ac {
            f.extend(
                s.flows
                    .iter()
                    .zip(&m.lines)
                    .map(|(fl, l)| if l.q_lim > 0.0 { clip(fl.q_from / l.q_lim) } else { 0.0 }),
            );
        }
        f.extend(
            self.energy
                .iter()
                .zip(&m.ess)
                .map(|(e, u)| (e - u.e_min) / (u.e_max - u.e_min)),
        );
        let t = self.hour.min(m.horizon - 1);
        f.push(self.hour as f64 / m.horizon as f64);
        for c in LoadClass::ALL {
            let d: f64 = m.loads.iter().filter(|l| l.class == c).map(|l| l.p[t]).sum();
            let peak = self.class_peak[c.index()];
            f.push(if peak > 0.0 { d / peak } else { 0.0 });
        }
        f.push(if self.installed > 0.0 { m.installed_capacity() / self.installed } else { 0.0 });
        f.extend(self.scenario.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        Observation {
            v: s.v.clone(),
            theta: s.theta.clone(),
            p_slack: s.p_slack,
            line_p: s.line_p(),
            line_q: s.line_q(),
            ess_energy: self.energy.clone(),
            hour: self.hour,
            mask: self.scenario.mask.clone(),
            features: f,
        }
    }

    fn check_action(&self, a: &Action) -> Result<(), EnvError> {
        let m = &self.base;
        for (field, expected, got) in [
            ("load_served", m.loads.len(), a.load_served.len()),
            ("ess_power", m.ess.len(), a.ess_power.len()),
            ("gen_power", m.generators.len(), a.gen_power.len()),
        ] {
            if expected != got {
                return Err(EnvError::ActionShape { field, expected, got });
            }
        }
        for (field, v) in [
            ("load_served", &a.load_served),
            ("ess_power", &a.ess_power),
            ("gen_power", &a.gen_power),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EnvError::NonFinite(field));
            }
        }
        Ok(())
    }

    fn solve(&self, sp: &Setpoints) -> Result<(PowerFlowSolution, ViolationSet, GenDispatch), EnvError> {
        let m = &self.model;
        let n = m.buses.len();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let t = self.hour;
        let mut q_demand = 0.0;
        for (i, l) in m.loads.iter().enumerate() {
            let b = self.idx.load_bus[i];
            p[b] -= sp.served[i];
            if let Some(lq) = &l.q {
                let share = if l.p[t] > 0.0 { sp.served[i] / l.p[t] } else { 0.0 };
                let qi = lq[t] * share;
                q[b] -= qi;
                q_demand += qi;
            }
        }
        for (u, &b) in self.idx.ess_bus.iter().enumerate() {
            p[b] += sp.ess[u];
        }
        let gen_q = if m.kind == NetworkKind::Ac {
            reactive_for_demand(q_demand, &m.generators)
        } else {
            vec![0.0; m.generators.len()]
        };
        for (k, &b) in self.idx.gen_bus.iter().enumerate() {
            p[b] += sp.gen[k];
            q[b] += gen_q[k];
        }
        let sol = self.pf.solve(&p, &q)?;
        let dispatch = GenDispatch {
            p: sp.gen.clone(),
            q: gen_q,
        };
        let viol = if sol.converged {
            check_limits(m, &sol, &dispatch)
        } else {
            ViolationSet::default()
        };
        Ok((sol, viol, dispatch))
    }

    /// Removes `amount` MW of served load, lowest priority class first,
    /// proportionally within a class. Returns the MW actually removed.
    fn shed(&self, served: &mut [f64], mut amount: f64) -> f64 {
        let start = amount;
        for class in LoadClass::ALL.iter().rev() {
            if amount <= 0.0 {
                break;
            }
            let members: Vec<usize> = (0..served.len())
                .filter(|&i| self.model.loads[i].class == *class && served[i] > 0.0)
                .collect();
            let total: f64 = members.iter().map(|&i| served[i]).sum();
            if total <= 0.0 {
                continue;
            }
            let cut = amount.min(total);
            for &i in &members {
                served[i] = (served[i] - cut * served[i] / total).max(0.0);
            }
            amount -= cut;
        }
        start - amount.max(0.0)
    }

    /// One corrective pass on the setpoints given the last solution.
    fn repair(&self, sp: &mut Setpoints, sol: &PowerFlowSolution, viol: &ViolationSet, windows: &[EssWindow]) {
        let served_total: f64 = sp.served.iter().sum();
        if !sol.converged {
            let cut = 0.25 * served_total;
            self.shed(&mut sp.served, cut);
            let gen_total: f64 = sp.gen.iter().sum();
            sp.gen = ray_for_total(gen_total - cut, &self.model.generators);
            return;
        }
        let mut shed_mw = 0.0;
        let network: Vec<_> = viol.entries.iter().filter(|v| v.kind != ViolationKind::Slack).collect();
        if !network.is_empty() {
            let line_mw: f64 = network
                .iter()
                .filter(|v| matches!(v.kind, ViolationKind::LineP | ViolationKind::LineQ))
                .map(|v| v.excess)
                .sum();
            let want = line_mw.max(0.05 * served_total);
            shed_mw = self.shed(&mut sp.served, want);
            if shed_mw < want {
                // Nothing left to shed; back generation off instead.
                let gen_total: f64 = sp.gen.iter().sum();
                sp.gen = ray_for_total(gen_total - (want - shed_mw), &self.model.generators);
            }
        }
        let range = self.model.slack_range();
        let margin = 0.05 * (range.p_max - range.p_min);
        let predicted = sol.p_slack - shed_mw;
        if predicted > range.p_max - margin * 0.5 {
            let mut need = predicted - (range.p_max - margin);
            let before: f64 = sp.gen.iter().sum();
            sp.gen = ray_for_total(before + need, &self.model.generators);
            need -= sp.gen.iter().sum::<f64>() - before;
            if need > 0.0 {
                let head: Vec<f64> = sp.ess.iter().zip(windows).map(|(p, w)| (w.hi - p).max(0.0)).collect();
                let room: f64 = head.iter().sum();
                if room > 0.0 {
                    let take = need.min(room);
                    for (p, h) in sp.ess.iter_mut().zip(&head) {
                        *p += take * h / room;
                    }
                    need -= take;
                }
            }
            if need > 0.0 {
                self.shed(&mut sp.served, need);
            }
        } else if predicted < range.p_min + margin * 0.5 {
            let mut need = (range.p_min + margin) - predicted;
            let before: f64 = sp.gen.iter().sum();
            sp.gen = ray_for_total(before - need, &self.model.generators);
            need -= before - sp.gen.iter().sum::<f64>();
            if need > 0.0 {
                let head: Vec<f64> = sp.ess.iter().zip(windows).map(|(p, w)| (p - w.lo).max(0.0)).collect();
                let room: f64 = head.iter().sum();
                if room > 0.0 {
                    let take = need.min(room);
                    for (p, h) in sp.ess.iter_mut().zip(&head) {
                        *p -= take * h / room;
                    }
                }
            }
        }
        for (p, w) in sp.ess.iter_mut().zip(windows) {
            *p = w.clamp(*p);
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::Finished);
        }
        self.check_action(action)?;
        let t = self.hour;
        let steps_left = self.model.horizon - t;
        let reachable = self.config.terminal_repair;
        let windows: Vec<EssWindow> = self
            .model
            .ess
            .iter()
            .zip(&self.energy)
            .map(|(u, &e)| ess_window(u, e, steps_left, self.model.dt, reachable))
            .collect();
        let served: Vec<f64> = self
            .model
            .loads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if self.load_live[i] {
                    action.load_served[i].clamp(0.0, 1.0) * l.p[t]
                } else {
                    0.0
                }
            })
            .collect();
        let ess: Vec<f64> = action.ess_power.iter().zip(&windows).map(|(p, w)| w.clamp(*p)).collect();
        let gen = match project_generation(&action.gen_power, &self.model.generators) {
            Ok(g) => g,
            Err(EnvError::AllGeneratorsFailed) => vec![0.0; self.model.generators.len()],
            Err(e) => return Err(e),
        };
        let mut sp = Setpoints { served, ess, gen };
        let (mut sol, mut viol, _) = self.solve(&sp)?;
        let first_viol = viol.clone();
        let first_converged = sol.converged;
        let first_slack = sol.p_slack;
        let mut repairs = 0;
        while (!sol.converged || !viol.is_empty()) && repairs < self.config.repair_cap {
            self.repair(&mut sp, &sol, &viol, &windows);
            repairs += 1;
            (sol, viol, _) = self.solve(&sp)?;
        }
        let infeasible = !sol.converged;
        if infeasible {
            sp.served.iter_mut().for_each(|s| *s = 0.0);
        }

        let mut r = violation_penalties(&self.model, &self.config, first_slack, &first_viol);
        if repairs > 0 {
            let tail = violation_penalties(&self.model, &self.config, sol.p_slack, &viol);
            r.r_v_theta += tail.r_v_theta;
            r.r_p_q += tail.r_p_q;
            r.r_slack += tail.r_slack;
        }
        if !first_converged {
            r.r_p_q -= self.infeasible_penalty;
        }
        if infeasible && repairs > 0 {
            r.r_p_q -= self.infeasible_penalty;
        }

        let mut energy_after = Vec::with_capacity(self.energy.len());
        for (u, unit) in self.model.ess.iter().enumerate() {
            let st = ess_step(unit, self.energy[u], sp.ess[u], steps_left, self.model.dt, reachable);
            sp.ess[u] = st.applied;
            self.energy[u] = st.energy;
            self.ess_sum[u] += st.applied;
            energy_after.push(st.energy);
        }
        self.hour += 1;
        let done = self.hour >= self.model.horizon;
        let mut cycle_residual = None;
        if done {
            self.done = true;
            let residual: f64 = self.ess_sum.iter().map(|s| s.abs()).sum();
            if residual > 1e-6 {
                r.r_p_q -= self.config.cycle_penalty * residual;
            }
            cycle_residual = Some(self.ess_sum.clone());
        }
        let reward = r.finish(objective_reward(&self.model, &sp.served));
        self.observation = self.observe(&sol);
        let ray_ok = ray_unclipped(&sp.gen, &self.model.generators);
        self.trace.push(IntervalRecord {
            hour: t,
            action: action.clone(),
            served_mw: sp.served.clone(),
            ess_mw: sp.ess.clone(),
            ess_window: windows,
            gen_mw: sp.gen.clone(),
            ray_unclipped: ray_ok,
            energy_after,
            p_slack: sol.p_slack,
            reward,
            repairs,
            violations: first_viol.clone(),
            final_violations: viol.clone(),
            infeasible,
            observation: self.observation.clone(),
        });
        Ok(Step {
            observation: self.observation.clone(),
            reward,
            done,
            info: StepInfo {
                repairs,
                violations: first_viol,
                final_violations: viol,
                infeasible,
                cycle_residual,
            },
        })
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace {
            scenario_mask: self.scenario.mask_hex(),
            scenario_id: self.scenario_id,
            intervals: self.trace.clone(),
            terminal: self.done,
            cycle_residual: self.ess_sum.clone(),
        }
    }

    /// Runs a whole episode with `policy` choosing normalized actions.
    pub fn rollout<F>(&mut self, scenario: &Scenario, seed: u64, mut policy: F) -> Result<EpisodeTrace, EnvError>
    where
        F: FnMut(&Observation) -> Vec<f64>,
    {
        self.reset(scenario, seed)?;
        loop {
            let a = policy(&self.observation);
            let action = Action::from_normalized(&a, &self.model);
            if self.step(&action)?.done {
                return Ok(self.trace());
            }
        }
    }
}

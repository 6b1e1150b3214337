//! Browser bindings for three small interactive views over the bundled
//! cases: the failure-scenario risk profile, the power-flow voltage profile
//! under a load scale, and a storage state-of-charge trajectory.
//!
//! Each exported function returns a JSON string; the plain functions below
//! them are what the native tests call.

use ems_core::env::{ess_step, ray_for_total, reactive_for_demand};
use ems_core::grid::{bundled, NetworkKind, NetworkModel};
use ems_core::power_flow::{PowerFlow, PowerFlowOptions};
use ems_core::risk::{cvar_alpha, enumerate_scenarios, var_alpha};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn model(case: &str) -> Result<NetworkModel, String> {
    bundled::load(case).map_err(|e| e.to_string())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[derive(Debug, Serialize)]
pub struct ScenarioRow {
    pub mask: String,
    pub failed: Vec<String>,
    pub probability: f64,
    pub lost_mw: f64,
}

#[derive(Debug, Serialize)]
pub struct RiskView {
    pub components: usize,
    pub retained: usize,
    pub dropped_mass: f64,
    pub var: f64,
    pub cvar: f64,
    pub expected: f64,
    /// Most probable scenarios first.
    pub scenarios: Vec<ScenarioRow>,
}

/// Scenario set for `case` with the generating capacity each scenario loses
/// as its loss, and VaR/CVaR of that loss at `alpha`.
pub fn risk_view(case: &str, threshold: f64, alpha: f64, top: usize) -> Result<RiskView, String> {
    let m = model(case)?;
    let set = enumerate_scenarios(&m.failable_pofs(), threshold).map_err(|e| e.to_string())?;
    if set.is_empty() {
        return Err(format!("no scenario reaches probability {threshold}"));
    }
    let lost: Vec<f64> = set
        .scenarios
        .iter()
        .map(|s| {
            m.generators
                .iter()
                .zip(&s.mask)
                .filter(|(_, f)| **f)
                .map(|(g, _)| g.p_max)
                .sum()
        })
        .collect();
    let w = set.weights();
    let var = var_alpha(&lost, &w, alpha).map_err(|e| e.to_string())?;
    let cvar = cvar_alpha(&lost, &w, alpha).map_err(|e| e.to_string())?;
    let expected = lost.iter().zip(&w).map(|(l, p)| l * p).sum();
    let names: Vec<String> = m
        .generators
        .iter()
        .map(|g| g.name.clone())
        .chain(m.lines.iter().map(|l| format!("line {}-{}", l.from_bus, l.to_bus)))
        .collect();
    let scenarios = set
        .scenarios
        .iter()
        .zip(&lost)
        .take(top)
        .map(|(s, l)| ScenarioRow {
            mask: s.mask_hex(),
            failed: s.mask.iter().zip(&names).filter(|(f, _)| **f).map(|(_, n)| n.clone()).collect(),
            probability: s.probability,
            lost_mw: *l,
        })
        .collect();
    Ok(RiskView {
        components: set.components,
        retained: set.len(),
        dropped_mass: set.dropped_mass,
        var,
        cvar,
        expected,
        scenarios,
    })
}

#[derive(Debug, Serialize)]
pub struct VoltageView {
    pub kind: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub bus: Vec<u32>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub load_mw: f64,
    pub p_slack: f64,
    /// Per line |P| over its limit.
    pub line_loading: Vec<f64>,
}

/// Power flow at hour `hour` with every load scaled by `scale` and the
/// generators following their robustness ray for the scaled total and
/// sharing the reactive demand.
pub fn voltage_view(case: &str, scale: f64, hour: usize) -> Result<VoltageView, String> {
    let m = model(case)?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(format!("load scale must be non-negative, got {scale}"));
    }
    let t = hour % m.horizon;
    let n = m.buses.len();
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    let (mut total, mut q_total) = (0.0, 0.0);
    for l in &m.loads {
        let i = m.bus_index(l.bus).ok_or("load on unknown bus")?;
        p[i] -= scale * l.p[t];
        total += scale * l.p[t];
        if let Some(lq) = &l.q {
            q[i] -= scale * lq[t];
            q_total += scale * lq[t];
        }
    }
    let gen_q = reactive_for_demand(q_total, &m.generators);
    for ((g, pg), qg) in m.generators.iter().zip(ray_for_total(total, &m.generators)).zip(gen_q) {
        let i = m.bus_index(g.bus).ok_or("generator on unknown bus")?;
        p[i] += pg;
        q[i] += qg;
    }
    let sol = PowerFlow::new(&m, PowerFlowOptions::default())
        .solve(&p, &q)
        .map_err(|e| e.to_string())?;
    Ok(VoltageView {
        kind: match m.kind {
            NetworkKind::Dc => "dc",
            NetworkKind::Ac => "ac",
        },
        converged: sol.converged,
        iterations: sol.iterations,
        bus: m.buses.iter().map(|b| b.id).collect(),
        v_min: m.buses.iter().map(|b| b.v_min).collect(),
        v_max: m.buses.iter().map(|b| b.v_max).collect(),
        load_mw: total,
        p_slack: sol.p_slack,
        line_loading: m
            .lines
            .iter()
            .zip(&sol.flows)
            .map(|(l, f)| f.p_from.abs().max(f.p_to.abs()) / l.p_lim)
            .collect(),
        v: sol.v,
        theta: sol.theta,
    })
}

#[derive(Debug, Serialize)]
pub struct SocView {
    pub unit: String,
    pub capacity: f64,
    pub requested: Vec<f64>,
    pub applied: Vec<f64>,
    pub window_lo: Vec<f64>,
    pub window_hi: Vec<f64>,
    /// State of charge at the start of each hour and after the last.
    pub soc: Vec<f64>,
    pub cycle_residual: f64,
}

/// Steps storage unit `unit` of `case` through the horizon with the given
/// requests (MW, positive discharging), repeated to fill the horizon.
pub fn soc_view(case: &str, unit: usize, requests: &[f64], reachable: bool) -> Result<SocView, String> {
    let m = model(case)?;
    let u = m.ess.get(unit).ok_or_else(|| format!("{case} has {} storage units", m.ess.len()))?;
    if requests.is_empty() {
        return Err("at least one request is needed".into());
    }
    let mut energy = u.e_init;
    let mut view = SocView {
        unit: u.name.clone(),
        capacity: u.capacity,
        requested: vec![],
        applied: vec![],
        window_lo: vec![],
        window_hi: vec![],
        soc: vec![energy / u.capacity],
        cycle_residual: 0.0,
    };
    for t in 0..m.horizon {
        let r = requests[t % requests.len()];
        let st = ess_step(u, energy, r, m.horizon - t, m.dt, reachable);
        energy = st.energy;
        view.requested.push(r);
        view.applied.push(st.applied);
        view.window_lo.push(st.window.lo);
        view.window_hi.push(st.window.hi);
        view.soc.push(energy / u.capacity);
    }
    view.cycle_residual = view.applied.iter().sum();
    Ok(view)
}

/// Names of the bundled cases with their storage unit names.
#[wasm_bindgen]
pub fn cases() -> Result<String, JsValue> {
    let out: Result<Vec<(String, Vec<String>)>, String> = ["mvdc12", "ieee30", "toy3"]
        .iter()
        .map(|c| Ok((c.to_string(), model(c)?.ess.iter().map(|u| u.name.clone()).collect())))
        .collect();
    to_js(out)
}

#[wasm_bindgen]
pub fn risk(case: &str, threshold: f64, alpha: f64, top: usize) -> Result<String, JsValue> {
    to_js(risk_view(case, threshold, alpha, top))
}

#[wasm_bindgen]
pub fn voltage_profile(case: &str, scale: f64, hour: usize) -> Result<String, JsValue> {
    to_js(voltage_view(case, scale, hour))
}

#[wasm_bindgen]
pub fn soc_trajectory(case: &str, unit: usize, requests: &[f64], reachable: bool) -> Result<String, JsValue> {
    to_js(soc_view(case, unit, requests, reachable))
}

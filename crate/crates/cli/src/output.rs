//! CSV and JSON writers. Every file written here has a fixed header and
//! contains no timings, so reruns with the same inputs are byte-identical.

use std::path::Path;

use anyhow::{Context, Result};
use ems_core::baseline::DispatchPlan;
use ems_core::env::EpisodeTrace;
use ems_core::grid::{LoadClass, NetworkModel};
use ems_core::risk::RiskReport;
use serde::Serialize;

pub const SERVED_HEADER: [&str; 7] = ["method", "scenario", "hour", "load", "class", "demand_mw", "served_mw"];
pub const CLASS_HEADER: [&str; 6] = ["method", "scenario", "hour", "class", "demand_mw", "served_mw"];
pub const GEN_HEADER: [&str; 6] = ["method", "scenario", "hour", "generator", "p_mw", "share"];
pub const STORAGE_HEADER: [&str; 7] = ["method", "scenario", "hour", "unit", "p_mw", "energy_mwh", "soc"];
pub const LOSS_HEADER: [&str; 7] = ["method", "scenario_id", "mask", "probability", "served", "loss", "shortfall"];

/// One interval of a dispatch, whichever method produced it.
#[derive(Clone)]
pub struct Interval {
    pub served: Vec<f64>,
    pub gen: Vec<f64>,
    pub ess: Vec<f64>,
    pub energy: Vec<f64>,
}

/// A labelled dispatch for one scenario.
#[derive(Clone)]
pub struct DispatchView {
    pub method: String,
    /// Scenario label, e.g. `nominal` or `worst`, followed by the mask.
    pub scenario: String,
    pub intervals: Vec<Interval>,
}

impl DispatchView {
    pub fn from_trace(method: &str, scenario: &str, trace: &EpisodeTrace) -> Self {
        Self {
            method: method.into(),
            scenario: scenario.into(),
            intervals: trace
                .intervals
                .iter()
                .map(|r| Interval {
                    served: r.served_mw.clone(),
                    gen: r.gen_mw.clone(),
                    ess: r.ess_mw.clone(),
                    energy: r.energy_after.clone(),
                })
                .collect(),
        }
    }

    pub fn from_plan(method: &str, scenario: &str, plan: &DispatchPlan) -> Self {
        Self {
            method: method.into(),
            scenario: scenario.into(),
            intervals: (0..plan.served.len())
                .map(|t| Interval {
                    served: plan.served[t].clone(),
                    gen: plan.gen[t].clone(),
                    ess: plan.ess[t].clone(),
                    energy: plan.energy[t].clone(),
                })
                .collect(),
        }
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn num(x: f64) -> String {
    // normalise negative zero so reruns and platforms agree
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x}")
    }
}

/// Writes `served.csv`, `class_served.csv`, `generation.csv` and `storage.csv`.
pub fn write_dispatch(dir: &Path, model: &NetworkModel, views: &[DispatchView]) -> Result<()> {
    let mut served = writer(&dir.join("served.csv"))?;
    let mut class = writer(&dir.join("class_served.csv"))?;
    let mut gen = writer(&dir.join("generation.csv"))?;
    let mut storage = writer(&dir.join("storage.csv"))?;
    served.write_record(SERVED_HEADER)?;
    class.write_record(CLASS_HEADER)?;
    gen.write_record(GEN_HEADER)?;
    storage.write_record(STORAGE_HEADER)?;
    for v in views {
        for (t, iv) in v.intervals.iter().enumerate() {
            let hour = t.to_string();
            let mut by_class = [(0.0, 0.0); 3];
            for (load, p) in model.loads.iter().zip(&iv.served) {
                let demand = load.p[t];
                served.write_record([
                    v.method.as_str(),
                    &v.scenario,
                    &hour,
                    &load.name,
                    load.class.as_str(),
                    &num(demand),
                    &num(*p),
                ])?;
                let c = &mut by_class[load.class.index()];
                c.0 += demand;
                c.1 += p;
            }
            for c in LoadClass::ALL {
                let (d, s) = by_class[c.index()];
                class.write_record([v.method.as_str(), &v.scenario, &hour, c.as_str(), &num(d), &num(s)])?;
            }
            let total: f64 = iv.gen.iter().sum();
            for (g, p) in model.generators.iter().zip(&iv.gen) {
                let share = if total > 0.0 { p / total } else { 0.0 };
                gen.write_record([v.method.as_str(), &v.scenario, &hour, &g.name, &num(*p), &num(share)])?;
            }
            for ((u, p), e) in model.ess.iter().zip(&iv.ess).zip(&iv.energy) {
                storage.write_record([
                    v.method.as_str(),
                    &v.scenario,
                    &hour,
                    &u.name,
                    &num(*p),
                    &num(*e),
                    &num(e / u.capacity),
                ])?;
            }
        }
    }
    for w in [&mut served, &mut class, &mut gen, &mut storage] {
        w.flush()?;
    }
    Ok(())
}

/// Per-scenario losses for several methods, in `scenario_losses.csv`.
pub fn write_losses(dir: &Path, rows: &[(&str, &RiskReport, f64)]) -> Result<()> {
    let mut w = writer(&dir.join("scenario_losses.csv"))?;
    w.write_record(LOSS_HEADER)?;
    for (method, report, full_demand) in rows {
        for s in &report.per_scenario {
            w.write_record([
                method.to_string(),
                s.id.to_string(),
                s.mask_hex.clone(),
                num(s.probability),
                num(s.served),
                num(s.loss),
                num(full_demand - s.served),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt(x: f64) -> String {
    num(x)
}

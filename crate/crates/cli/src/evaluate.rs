//! `evaluate` and `benchmark`: the three dispatch methods on one scenario set.

use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Result};
use ems_core::baseline::{apply_recourse, solve_base_ems, solve_scenario_based, DispatchPlan};
use ems_core::grid::{LoadClass, NetworkModel};
use ems_core::lp::LpStatus;
use ems_core::ppo::{evaluate, load_checkpoint, worst_retained};
use ems_core::risk::{risk_report_from_served, RiskReport, ScenarioSet};

use crate::config::{Mode, RunConfig};
use crate::output::{fmt, write_dispatch, write_json, write_losses, write_rows, DispatchView};

pub const SUMMARY_HEADER: [&str; 14] = [
    "method",
    "status",
    "nominal_served",
    "expected_served",
    "var",
    "cvar",
    "shortfall_cvar",
    "nominal_critical",
    "nominal_semi_critical",
    "nominal_non_critical",
    "worst_critical",
    "worst_semi_critical",
    "worst_non_critical",
    "worst_mask",
];

pub const TIMING_HEADER: [&str; 5] = ["case", "method", "phase", "wall_clock_s", "source"];

/// Table III reference timings, seconds on the original hardware.
const REFERENCE_TIMINGS: [(&str, &str, &str, f64); 4] = [
    ("mvdc12", "rl", "rollout", 1.43),
    ("mvdc12", "opt", "solve", 7.12),
    ("ieee30", "rl", "rollout", 1.91),
    ("ieee30", "opt", "solve", 15.2),
];

pub struct MethodResult {
    pub method: &'static str,
    pub status: String,
    pub report: RiskReport,
    pub full_demand: f64,
    pub nominal_served: f64,
    pub nominal_fraction: [f64; 3],
    pub worst_fraction: [f64; 3],
    pub worst_mask: String,
    pub views: Vec<DispatchView>,
    /// (phase, seconds)
    pub timings: Vec<(&'static str, f64)>,
}

impl MethodResult {
    fn summary_row(&self) -> Vec<String> {
        let mut row = vec![
            self.method.to_string(),
            self.status.clone(),
            fmt(self.nominal_served),
            fmt(self.report.expected_served),
            fmt(self.report.var),
            fmt(self.report.cvar),
            fmt(shortfall_cvar(&self.report, self.full_demand)),
        ];
        row.extend(self.nominal_fraction.iter().map(|f| fmt(*f)));
        row.extend(self.worst_fraction.iter().map(|f| fmt(*f)));
        row.push(self.worst_mask.clone());
        row
    }
}

/// CVaR of `full_demand − served`: centered losses shifted back.
fn shortfall_cvar(report: &RiskReport, full_demand: f64) -> f64 {
    report.cvar + full_demand - report.expected_served
}

/// Index of the all-available scenario, or the most probable one.
pub fn nominal_index(set: &ScenarioSet) -> usize {
    set.scenarios
        .iter()
        .position(|s| s.mask.iter().all(|f| !f))
        .unwrap_or(0)
}

fn labels(set: &ScenarioSet, model: &NetworkModel) -> (usize, usize, String, String) {
    let nominal = nominal_index(set);
    let worst = worst_retained(model, set).unwrap_or(nominal);
    (
        nominal,
        worst,
        format!("nominal-{}", set.scenarios[nominal].mask_hex()),
        format!("worst-{}", set.scenarios[worst].mask_hex()),
    )
}

fn plan_method(
    method: &'static str,
    model: &NetworkModel,
    set: &ScenarioSet,
    alpha: f64,
    plan: &DispatchPlan,
    solve_s: f64,
) -> Result<MethodResult> {
    let (nominal, worst, nominal_label, worst_label) = labels(set, model);
    let mut served = Vec::with_capacity(set.len());
    let mut views = Vec::new();
    let (mut nominal_fraction, mut worst_fraction, mut nominal_served) = ([0.0; 3], [0.0; 3], 0.0);
    for (id, s) in set.scenarios.iter().enumerate() {
        let r = apply_recourse(model, plan, s)?;
        served.push(r.weighted_served);
        if id == nominal {
            nominal_fraction = r.served_fraction(model);
            nominal_served = r.weighted_served;
            views.insert(0, DispatchView::from_plan(method, &nominal_label, &r));
        }
        if id == worst && worst != nominal {
            views.push(DispatchView::from_plan(method, &worst_label, &r));
        }
        if id == worst {
            worst_fraction = r.served_fraction(model);
        }
    }
    Ok(MethodResult {
        method,
        status: plan.status.as_str().to_string(),
        report: risk_report_from_served(set, &served, alpha)?,
        full_demand: model.full_weighted_demand(),
        nominal_served,
        nominal_fraction,
        worst_fraction,
        worst_mask: set.scenarios[worst].mask_hex(),
        views,
        timings: vec![("solve", solve_s)],
    })
}

pub fn run_base(model: &NetworkModel, set: &ScenarioSet, alpha: f64) -> Result<MethodResult> {
    let started = Instant::now();
    let plan = solve_base_ems(model)?;
    let secs = started.elapsed().as_secs_f64();
    plan_method("base", model, set, alpha, &plan, secs)
}

pub fn run_opt(model: &NetworkModel, set: &ScenarioSet, alpha: f64) -> Result<MethodResult> {
    let started = Instant::now();
    let sp = solve_scenario_based(model, set, alpha)?;
    let secs = started.elapsed().as_secs_f64();
    if sp.plan.status != LpStatus::Optimal {
        return Err(anyhow!("scenario LP ended with status {}", sp.plan.status.as_str()));
    }
    plan_method("opt", model, set, alpha, &sp.plan, secs)
}

pub fn run_rl(model: &NetworkModel, cfg: &RunConfig, set: &ScenarioSet, checkpoint: &Path) -> Result<MethodResult> {
    let ckpt = load_checkpoint(checkpoint).map_err(|e| anyhow!("{}: {e}", checkpoint.display()))?;
    let started = Instant::now();
    let eval = evaluate(&ckpt.params, model, cfg.env, set, cfg.alpha)?;
    let total = started.elapsed().as_secs_f64();
    let (nominal, worst, nominal_label, worst_label) = labels(set, model);
    let fractions = |id: usize| LoadClass::ALL.map(|c| eval.served_fraction(model, id, c));
    let mut views = Vec::new();
    for (id, label) in [(nominal, &nominal_label), (worst, &worst_label)] {
        if id == worst && worst == nominal && !views.is_empty() {
            continue;
        }
        if let Some(trace) = &eval.outcomes[id].trace {
            views.push(DispatchView::from_trace("rl", label, trace));
        }
    }
    let failed = eval.outcomes.iter().filter(|o| o.error.is_some()).count();
    Ok(MethodResult {
        method: "rl",
        status: if failed == 0 { "ok".into() } else { format!("{failed}-rollouts-failed") },
        report: eval.report.clone(),
        full_demand: model.full_weighted_demand(),
        nominal_served: eval.outcomes[nominal].served_weighted,
        nominal_fraction: fractions(nominal),
        worst_fraction: fractions(worst),
        worst_mask: set.scenarios[worst].mask_hex(),
        views,
        timings: vec![("rollout", eval.outcomes[nominal].wall_clock_s), ("evaluation", total)],
    })
}

fn scenario_set(cfg: &RunConfig, model: &NetworkModel) -> Result<ScenarioSet> {
    Ok(ems_core::risk::enumerate_scenarios(&model.failable_pofs(), cfg.threshold)?)
}

fn write_results(cfg: &RunConfig, model: &NetworkModel, results: &[MethodResult], summary: &str) -> Result<()> {
    let views: Vec<DispatchView> = results.iter().flat_map(|r| r.views.iter().cloned()).collect();
    write_dispatch(&cfg.out, model, &views)?;
    let losses: Vec<(&str, &RiskReport, f64)> = results.iter().map(|r| (r.method, &r.report, r.full_demand)).collect();
    write_losses(&cfg.out, &losses)?;
    let rows: Vec<Vec<String>> = results.iter().map(MethodResult::summary_row).collect();
    write_rows(&cfg.out.join(summary), &SUMMARY_HEADER, &rows)?;
    Ok(())
}

fn print_result(r: &MethodResult) {
    println!(
        "{:<4} status={} nominal_served={:.3} expected_served={:.3} cvar={:.3} critical={:.4} worst_critical={:.4} worst_non_critical={:.4}",
        r.method,
        r.status,
        r.nominal_served,
        r.report.expected_served,
        r.report.cvar,
        r.nominal_fraction[0],
        r.worst_fraction[0],
        r.worst_fraction[2]
    );
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model()?;
    let set = scenario_set(cfg, &model)?;
    let result = match cfg.mode {
        Mode::Base => run_base(&model, &set, cfg.alpha)?,
        Mode::ResilientOpt => run_opt(&model, &set, cfg.alpha)?,
        Mode::ResilientRl => run_rl(&model, cfg, &set, &cfg.checkpoint_path())?,
    };
    cfg.create_out()?;
    write_results(cfg, &model, std::slice::from_ref(&result), "evaluation_summary.csv")?;
    write_json(&cfg.out.join("risk.json"), &result.report)?;
    print_result(&result);
    Ok(())
}

/// Runs all three methods. A failing method is noted and skipped; the
/// command still writes what it has and then reports the failure.
pub fn benchmark(cfg: &RunConfig) -> Result<Vec<String>> {
    let model = cfg.model()?;
    let set = scenario_set(cfg, &model)?;
    cfg.create_out()?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for mode in [Mode::Base, Mode::ResilientOpt, Mode::ResilientRl] {
        let r = match mode {
            Mode::Base => run_base(&model, &set, cfg.alpha),
            Mode::ResilientOpt => run_opt(&model, &set, cfg.alpha),
            Mode::ResilientRl => run_rl(&model, cfg, &set, &cfg.checkpoint_path()),
        };
        match r {
            Ok(r) => {
                print_result(&r);
                results.push(r);
            }
            Err(e) => {
                eprintln!("{}: failed: {e:#}", mode.method());
                failures.push(format!("{}: {e:#}", mode.method()));
            }
        }
    }
    write_results(cfg, &model, &results, "benchmark_summary.csv")?;
    let failure_rows: Vec<Vec<String>> = failures
        .iter()
        .map(|f| {
            let (m, msg) = f.split_once(": ").unwrap_or((f, ""));
            vec![m.to_string(), msg.to_string()]
        })
        .collect();
    write_rows(&cfg.out.join("benchmark_failures.csv"), &["method", "error"], &failure_rows)?;

    let mut timing = Vec::new();
    for r in &results {
        for (phase, secs) in &r.timings {
            timing.push(vec![model.name.clone(), r.method.into(), phase.to_string(), format!("{secs:.6}"), "measured".into()]);
        }
    }
    for (case, method, phase, secs) in REFERENCE_TIMINGS {
        timing.push(vec![case.into(), method.into(), phase.into(), fmt(secs), "paper-reference".into()]);
    }
    write_rows(&cfg.out.join("timing.csv"), &TIMING_HEADER, &timing)?;
    Ok(failures)
}

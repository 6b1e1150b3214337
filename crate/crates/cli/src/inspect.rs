//! `validate`, `powerflow` and `scenarios`.

use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ems_core::env::{ray_for_total, reactive_for_demand};
use ems_core::grid::{bundled, load_case, parse_case, GridError, NetworkKind, NetworkModel};
use ems_core::power_flow::{PowerFlow, PowerFlowOptions};
use ems_core::risk::enumerate_scenarios;

use crate::config::RunConfig;
use crate::output::{fmt, write_rows};

pub fn validate(case: &str) -> ExitCode {
    let loaded = if Path::new(case).exists() {
        load_case(case)
    } else if let Some(src) = bundled::source(case) {
        parse_case(src)
    } else {
        load_case(case)
    };
    match loaded {
        Ok(model) => {
            println!("{}: valid ({} buses, {} lines, {} generators, {} ESS, {} loads)",
                model.name, model.buses.len(), model.lines.len(), model.generators.len(), model.ess.len(), model.loads.len());
            ExitCode::SUCCESS
        }
        Err(GridError::Invalid(report)) => {
            print!("{report}");
            ExitCode::from(1)
        }
        Err(e @ GridError::Io { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            println!("{e}");
            ExitCode::from(1)
        }
    }
}

/// Bus injections in MW / MVAr: from a CSV with `bus,p_mw[,q_mvar]`, or the
/// nominal dispatch of `hour` (loads at profile, generation on the ray,
/// storage idle).
fn injections(model: &NetworkModel, file: Option<&Path>, hour: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.buses.len();
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    if let Some(path) = file {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(bus_col), Some(p_col)) = (col("bus"), col("p_mw")) else {
            bail!("{}: expected columns bus,p_mw[,q_mvar]", path.display());
        };
        let q_col = col("q_mvar");
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
            let id: u32 = field(bus_col).parse().with_context(|| format!("row {}: bus", line + 2))?;
            let b = model.bus_index(id).with_context(|| format!("row {}: unknown bus {id}", line + 2))?;
            p[b] += field(p_col).parse::<f64>().with_context(|| format!("row {}: p_mw", line + 2))?;
            if let Some(c) = q_col {
                let s = field(c);
                if !s.is_empty() {
                    q[b] += s.parse::<f64>().with_context(|| format!("row {}: q_mvar", line + 2))?;
                }
            }
        }
        return Ok((p, q));
    }
    if hour >= model.horizon {
        bail!("hour {hour} outside horizon {}", model.horizon);
    }
    let total: f64 = model.loads.iter().map(|l| l.p[hour]).sum();
    let q_total: f64 = model.loads.iter().map(|l| l.q.as_ref().map_or(0.0, |q| q[hour])).sum();
    for l in &model.loads {
        let b = model.bus_index(l.bus).expect("validated load bus");
        p[b] -= l.p[hour];
        q[b] -= l.q.as_ref().map_or(0.0, |q| q[hour]);
    }
    let gen_p = ray_for_total(total, &model.generators);
    let gen_q = reactive_for_demand(q_total, &model.generators);
    for (k, g) in model.generators.iter().enumerate() {
        let b = model.bus_index(g.bus).expect("validated generator bus");
        p[b] += gen_p[k];
        q[b] += gen_q[k];
    }
    Ok((p, q))
}

pub fn powerflow(cfg: &RunConfig, file: Option<&Path>, hour: usize) -> Result<ExitCode> {
    let model = cfg.model()?;
    let (p, q) = injections(&model, file, hour)?;
    let pf = PowerFlow::new(&model, PowerFlowOptions::default());
    let sol = pf.solve(&p, &q)?;
    cfg.create_out()?;
    let ac = model.kind == NetworkKind::Ac;
    let buses: Vec<Vec<String>> = model
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| {
            vec![
                b.id.to_string(),
                fmt(sol.v[i]),
                fmt(sol.theta[i]),
                fmt(sol.p_inj[i]),
                fmt(if ac { sol.q_inj[i] } else { 0.0 }),
                sol.islanded.contains(&i).to_string(),
            ]
        })
        .collect();
    write_rows(
        &cfg.out.join("pf_buses.csv"),
        &["bus", "v_pu", "theta_rad", "p_mw", "q_mvar", "islanded"],
        &buses,
    )?;
    let lines: Vec<Vec<String>> = model
        .lines
        .iter()
        .zip(&sol.flows)
        .enumerate()
        .map(|(i, (l, f))| {
            vec![
                i.to_string(),
                l.from_bus.to_string(),
                l.to_bus.to_string(),
                fmt(f.p_from),
                fmt(f.q_from),
                fmt(f.p_to),
                fmt(f.q_to),
            ]
        })
        .collect();
    write_rows(
        &cfg.out.join("pf_lines.csv"),
        &["line", "from", "to", "p_from_mw", "q_from_mvar", "p_to_mw", "q_to_mvar"],
        &lines,
    )?;
    println!("converged={} iters={} mismatch={:e}", sol.converged, sol.iterations, sol.max_mismatch);
    println!("p_slack_mw={} q_slack_mvar={}", fmt(sol.p_slack), fmt(sol.q_slack));
    if !sol.islanded.is_empty() {
        let ids: Vec<u32> = sol.islanded.iter().map(|&i| model.buses[i].id).collect();
        println!("islanded buses: {ids:?}");
    }
    Ok(if sol.converged && sol.islanded.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn scenarios(cfg: &RunConfig) -> Result<()> {
    let model = cfg.model()?;
    let pofs = model.failable_pofs();
    let set = enumerate_scenarios(&pofs, cfg.threshold)?;
    cfg.create_out()?;
    let rows: Vec<Vec<String>> = set
        .scenarios
        .iter()
        .enumerate()
        .map(|(id, s)| {
            vec![
                id.to_string(),
                s.mask_hex(),
                s.failed_count().to_string(),
                fmt(s.probability),
            ]
        })
        .collect();
    write_rows(&cfg.out.join("scenarios.csv"), &["id", "mask", "failed", "probability"], &rows)?;
    println!("components n={}", pofs.len());
    println!("possible 2^n={}", 1u64 << pofs.len());
    println!("threshold={}", cfg.threshold);
    println!("retained={}", set.len());
    println!("retained_mass={}", set.retained_mass());
    println!("dropped_mass={}", set.dropped_mass);
    Ok(())
}

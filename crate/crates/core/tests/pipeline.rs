//! End-to-end checks through the public API: case files, power flow on the
//! bundled AC case, the LP plan's risk report, environment episodes and
//! training determinism.

use ems_core::baseline::{evaluate_plan, solve_scenario_based};
use ems_core::env::{ray_for_total, reactive_for_demand, EmsEnv, EnvConfig};
use ems_core::grid::{bundled, load_case, parse_case, NetworkModel};
use ems_core::power_flow::{PowerFlow, PowerFlowOptions, PowerFlowSolution};
use ems_core::ppo::{PpoConfig, Trainer};
use ems_core::risk::{enumerate_scenarios, risk_report_from_served};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nominal_solve(m: &NetworkModel, hour: usize) -> PowerFlowSolution {
    let n = m.buses.len();
    let (mut p, mut q) = (vec![0.0; n], vec![0.0; n]);
    let (mut total, mut q_total) = (0.0, 0.0);
    for l in &m.loads {
        let i = m.bus_index(l.bus).unwrap();
        p[i] -= l.p[hour];
        total += l.p[hour];
        let lq = l.q.as_ref().map_or(0.0, |q| q[hour]);
        q[i] -= lq;
        q_total += lq;
    }
    let gp = ray_for_total(total, &m.generators);
    let gq = reactive_for_demand(q_total, &m.generators);
    for (k, g) in m.generators.iter().enumerate() {
        let i = m.bus_index(g.bus).unwrap();
        p[i] += gp[k];
        q[i] += gq[k];
    }
    PowerFlow::new(m, PowerFlowOptions::default()).solve(&p, &q).unwrap()
}

/// Drops a named column from one section of a case file.
fn drop_column(text: &str, section: &str, column: &str) -> String {
    let mut out = Vec::new();
    let mut current = "";
    let mut col = None;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t;
            col = None;
            out.push(line.to_string());
            continue;
        }
        if current != section || t.is_empty() || t.starts_with('#') {
            out.push(line.to_string());
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        match col {
            None => {
                let c = fields.iter().position(|f| f.trim() == column).expect("column present");
                col = Some(c);
                fields.remove(c);
            }
            Some(c) => {
                fields.remove(c);
            }
        }
        out.push(fields.join(","));
    }
    out.join("\n")
}

#[test]
fn case_file_matches_bundled_source() {
    for name in ["toy3", "mvdc12", "ieee30"] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("{name}.case"));
        std::fs::write(&path, bundled::source(name).unwrap()).unwrap();
        assert_eq!(load_case(&path).unwrap(), bundled::load(name).unwrap(), "{name}");
    }
}

#[test]
fn shunt_columns_are_optional_and_support_voltage() {
    let src = bundled::source("ieee30").unwrap();
    let bare = drop_column(&drop_column(src, "[buses]", "b_shunt"), "[lines]", "b_charging");
    let plain = parse_case(&bare).unwrap();
    let full = bundled::load("ieee30").unwrap();
    assert!(plain.buses.iter().all(|b| b.b_shunt == 0.0));
    assert!(plain.lines.iter().all(|l| l.b_charging == 0.0));
    // everything else is unchanged
    let mut stripped = full.clone();
    stripped.buses.iter_mut().for_each(|b| b.b_shunt = 0.0);
    stripped.lines.iter_mut().for_each(|l| l.b_charging = 0.0);
    assert_eq!(plain, stripped);

    for hour in [0, 12, 17] {
        let with = nominal_solve(&full, hour);
        let without = nominal_solve(&plain, hour);
        assert!(with.converged && without.converged);
        let low = |s: &PowerFlowSolution| s.v.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(low(&with) > low(&without) + 0.01, "hour {hour}");
        // capacitive support means less reactive power from the slack bus
        assert!(with.q_slack < without.q_slack);
    }
}

#[test]
fn ieee30_bus_balance_includes_shunts() {
    let m = bundled::load("ieee30").unwrap();
    let s = nominal_solve(&m, 17);
    assert!(s.converged);
    for (i, bus) in m.buses.iter().enumerate() {
        let (mut p, mut q) = (0.0, 0.0);
        for (l, f) in m.lines.iter().zip(&s.flows) {
            if l.from_bus == bus.id {
                p += f.p_from;
                q += f.q_from;
            }
            if l.to_bus == bus.id {
                p += f.p_to;
                q += f.q_to;
            }
        }
        // a shunt capacitor injects b V^2 into the bus
        q -= bus.b_shunt * s.v[i] * s.v[i] * m.base_mva;
        assert!((p - s.p_inj[i]).abs() < 1e-6, "bus {} p {p} vs {}", bus.id, s.p_inj[i]);
        assert!((q - s.q_inj[i]).abs() < 1e-6, "bus {} q {q} vs {}", bus.id, s.q_inj[i]);
    }
}

#[test]
fn lp_plan_risk_report_matches_sorted_tail() {
    let m = bundled::load("mvdc12").unwrap();
    let set = enumerate_scenarios(&m.failable_pofs(), 0.0005).unwrap();
    let alpha = 0.95;
    let sp = solve_scenario_based(&m, &set, alpha).unwrap();
    let served: Vec<f64> = set.scenarios.iter().map(|s| evaluate_plan(&m, &sp.plan, s).unwrap()).collect();
    for (a, b) in served.iter().zip(&sp.served) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
    let report = risk_report_from_served(&set, &served, alpha).unwrap();

    // Oracle: sort losses worst first and average the top 1 − α of mass.
    let w = set.weights();
    let expected: f64 = served.iter().zip(&w).map(|(s, p)| s * p).sum();
    let mut tail: Vec<(f64, f64)> = served.iter().zip(&w).map(|(s, p)| (expected - s, *p)).collect();
    tail.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut left, mut acc) = (1.0 - alpha, 0.0);
    for (l, p) in tail {
        let take = p.min(left);
        acc += take * l;
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    let cvar = acc / (1.0 - alpha);
    let scale = expected.abs().max(1.0);
    assert!((report.cvar - cvar).abs() <= 1e-10 * scale, "{} vs {cvar}", report.cvar);
    assert!((report.expected_served - expected).abs() <= 1e-10 * scale);
    assert!(report.cvar >= report.var - 1e-9 * scale);
}

#[test]
fn random_episodes_keep_reward_and_energy_accounting() {
    let m = bundled::load("mvdc12").unwrap();
    let set = enumerate_scenarios(&m.failable_pofs(), 0.0005).unwrap();
    let mut env = EmsEnv::new(&m, EnvConfig::default()).unwrap();
    let dim = env.action_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for episode in 0..20 {
        let scenario = &set.scenarios[rng.random_range(0..set.len())];
        let mut draw = ChaCha8Rng::seed_from_u64(episode);
        let trace = env
            .rollout(scenario, episode, |_| (0..dim).map(|_| draw.random_range(-1.0..=1.0)).collect())
            .unwrap();
        assert_eq!(trace.intervals.len(), m.horizon);
        assert!(trace.terminal);
        for r in &trace.intervals {
            let b = r.reward;
            assert_eq!(b.total, b.r_obj + b.r_ineq + b.r_slack);
            assert!(b.r_ineq <= 0.0 && b.r_slack <= 0.0);
            for ((u, e), p) in m.ess.iter().zip(&r.energy_after).zip(&r.ess_mw) {
                assert!(*e >= u.e_min - 1e-9 && *e <= u.e_max + 1e-9);
                assert!(*p <= u.d_max + 1e-9 && *p >= -u.c_max - 1e-9);
            }
            for (l, s) in m.loads.iter().zip(&r.served_mw) {
                assert!(*s >= -1e-12 && *s <= l.p[r.hour] + 1e-9);
            }
        }
        let last = &trace.intervals.last().unwrap().energy_after;
        for (u, e) in m.ess.iter().zip(last) {
            assert!((e - u.e_init).abs() < 1e-6, "{}: {e} vs {}", u.name, u.e_init);
        }
        assert!(trace.cycle_residual.iter().all(|r| r.abs() < 1e-6));
    }
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let m = bundled::load("toy3").unwrap();
    let set = enumerate_scenarios(&m.failable_pofs(), 0.0005).unwrap();
    let run = |threads| {
        let config = PpoConfig {
            total_episodes: 32,
            episodes_per_update: 8,
            minibatch_size: 32,
            epochs: 2,
            hidden: vec![16, 16],
            seed: 5,
            threads: Some(threads),
            ..PpoConfig::default()
        };
        let mut t = Trainer::new(&m, EnvConfig::default(), set.clone(), config).unwrap();
        t.run(|_| Ok(())).unwrap();
        (t.params.flat(), t.log.to_csv())
    };
    let (p1, log1) = run(1);
    let (p3, log3) = run(3);
    assert_eq!(p1, p3);
    assert_eq!(log1, log3);
    assert_eq!(log1.lines().count(), 5);
}

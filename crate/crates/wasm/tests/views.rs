use ems_core::grid::bundled;
use ems_wasm::{risk_view, soc_view, voltage_view};

#[test]
fn risk_view_matches_sorted_tail() {
    let alpha = 0.9;
    let r = risk_view("mvdc12", 0.0005, alpha, usize::MAX).unwrap();
    assert_eq!(r.scenarios.len(), r.retained);
    let mass: f64 = r.scenarios.iter().map(|s| s.probability).sum();
    assert!((mass + r.dropped_mass - 1.0).abs() < 1e-9);

    let mut tail: Vec<(f64, f64)> = r.scenarios.iter().map(|s| (s.lost_mw, s.probability / mass)).collect();
    tail.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut left, mut acc) = (1.0 - alpha, 0.0);
    for (l, p) in &tail {
        let take = p.min(left);
        acc += take * l;
        left -= take;
    }
    assert!((r.cvar - acc / (1.0 - alpha)).abs() < 1e-9);
    let expected: f64 = tail.iter().map(|(l, p)| l * p).sum();
    assert!((r.expected - expected).abs() < 1e-9);

    // lost capacity is the rating of the failed units
    let m = bundled::load("mvdc12").unwrap();
    for s in &r.scenarios {
        let lost: f64 = m.generators.iter().filter(|g| s.failed.contains(&g.name)).map(|g| g.p_max).sum();
        assert_eq!(lost, s.lost_mw);
    }
}

#[test]
fn soc_view_follows_energy_accounting() {
    let m = bundled::load("ieee30").unwrap();
    let requests = [3.0, -2.0, 5.0, 0.0, -5.0];
    for (unit, u) in m.ess.iter().enumerate() {
        let s = soc_view("ieee30", unit, &requests, true).unwrap();
        assert_eq!(s.applied.len(), m.horizon);
        let mut e = u.e_init;
        for t in 0..m.horizon {
            let p = s.applied[t];
            assert!(p >= s.window_lo[t] - 1e-12 && p <= s.window_hi[t] + 1e-12);
            // the request is honoured whenever the window allows it
            let r = requests[t % requests.len()];
            if r >= s.window_lo[t] && r <= s.window_hi[t] {
                assert_eq!(p, r);
            }
            e -= u.eta * p * m.dt;
            assert!((s.soc[t + 1] * u.capacity - e).abs() < 1e-9);
        }
        assert!((e - u.e_init).abs() < 1e-9);
    }
}

#[test]
fn voltage_view_reports_the_slack_balance() {
    let v = voltage_view("ieee30", 1.0, 17).unwrap();
    assert!(v.converged);
    assert_eq!(v.kind, "ac");
    assert_eq!(v.v.len(), 30);
    assert_eq!(v.v[0], 1.0);
    assert!(v.line_loading.iter().all(|x| x.is_finite() && *x >= 0.0));
    // generation follows the load, so the slack only covers losses
    assert!(v.p_slack > 0.0 && v.p_slack < 0.1 * v.load_mw);
}

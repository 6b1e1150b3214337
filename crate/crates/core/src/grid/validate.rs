use std::fmt;

use serde::Serialize;

use super::{NetworkKind, NetworkModel};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    /// Field path, e.g. `ess[2].e_init`.
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.findings.push(Finding {
            path: path.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "{}: {}", finding.path, finding.message)?;
        }
        Ok(())
    }
}

const E_TOL: f64 = 1e-9;

/// Checks every model invariant; the report is empty iff the model is valid.
pub fn validate(model: &NetworkModel) -> ValidationReport {
    let mut r = ValidationReport::default();
    let has_bus = |id: u32| model.bus_index(id).is_some();

    if model.horizon == 0 {
        r.push("meta.horizon", "must be positive");
    }
    if !(model.dt > 0.0) {
        r.push("meta.dt_hours", "must be positive");
    }
    if !(model.base_mva > 0.0) {
        r.push("meta.base_mva", "must be positive");
    }
    let w = model.weights;
    if !(w.critical > w.semi_critical && w.semi_critical > w.non_critical && w.non_critical > 0.0) {
        r.push(
            "meta.weights",
            format!(
                "class weights must satisfy k_critical > k_semi_critical > k_non_critical > 0 (got {}, {}, {})",
                w.critical, w.semi_critical, w.non_critical
            ),
        );
    }

    let mut seen = std::collections::HashSet::new();
    let mut slack_count = 0;
    for (i, bus) in model.buses.iter().enumerate() {
        if !seen.insert(bus.id) {
            r.push(format!("buses[{i}].id"), format!("duplicate bus id {}", bus.id));
        }
        if !(bus.v_min < bus.v_max) {
            r.push(format!("buses[{i}].v_min"), "v_min must be below v_max");
        }
        if !(bus.theta_min < bus.theta_max) {
            r.push(format!("buses[{i}].theta_min"), "theta_min must be below theta_max");
        }
        if !bus.b_shunt.is_finite() {
            r.push(format!("buses[{i}].b_shunt"), "b_shunt must be finite");
        }
        if let Some(s) = bus.slack {
            slack_count += 1;
            if slack_count > 1 {
                r.push(format!("buses[{i}].is_slack"), "more than one bus is marked slack");
            }
            if !(s.p_min < s.p_max) {
                r.push(format!("buses[{i}].slack_p_min"), "slack_p_min must be below slack_p_max");
            }
        }
    }
    if model.buses.is_empty() {
        r.push("buses", "no buses defined");
    } else if slack_count == 0 {
        r.push("buses.is_slack", "no slack bus defined");
    }

    for (i, line) in model.lines.iter().enumerate() {
        if line.from_bus == line.to_bus {
            r.push(format!("lines[{i}].to"), "line connects a bus to itself");
        }
        for (field, id) in [("from", line.from_bus), ("to", line.to_bus)] {
            if !has_bus(id) {
                r.push(format!("lines[{i}].{field}"), format!("unknown bus {id}"));
            }
        }
        if !(line.p_lim > 0.0) {
            r.push(format!("lines[{i}].p_lim"), "p_lim must be positive");
        }
        if !(line.q_lim >= 0.0) {
            r.push(format!("lines[{i}].q_lim"), "q_lim must be nonnegative");
        }
        if !line.b_charging.is_finite() {
            r.push(format!("lines[{i}].b_charging"), "b_charging must be finite");
        }
        if model.kind == NetworkKind::Ac && line.g == 0.0 && line.b == 0.0 {
            r.push(format!("lines[{i}].b"), "line has zero admittance");
        }
        if model.kind == NetworkKind::Dc && !(line.g > 0.0) {
            r.push(format!("lines[{i}].g"), "DC line conductance must be positive");
        }
        if !(0.0..1.0).contains(&line.pof) {
            r.push(format!("lines[{i}].pof"), "pof must lie in [0, 1)");
        }
    }

    for (i, g) in model.generators.iter().enumerate() {
        if !has_bus(g.bus) {
            r.push(format!("generators[{i}].bus"), format!("unknown bus {}", g.bus));
        }
        if !(0.0 <= g.p_min && g.p_min <= g.p_max) {
            r.push(format!("generators[{i}].p_min"), "requires 0 <= p_min <= p_max");
        }
        if !(g.q_min <= g.q_max) {
            r.push(format!("generators[{i}].q_min"), "requires q_min <= q_max");
        }
        if !(0.0..1.0).contains(&g.pof) {
            r.push(format!("generators[{i}].pof"), "pof must lie in [0, 1)");
        }
        if !(g.k_robust > 0.0) {
            r.push(format!("generators[{i}].k_robust"), "k_robust must be positive");
        }
    }

    for (i, e) in model.ess.iter().enumerate() {
        if !has_bus(e.bus) {
            r.push(format!("ess[{i}].bus"), format!("unknown bus {}", e.bus));
        }
        if !(0.0 < e.e_min && e.e_min < e.e_max && e.e_max <= e.capacity + E_TOL) {
            r.push(format!("ess[{i}].e_min"), "requires 0 < e_min < e_max <= capacity");
        }
        if (e.e_min - e.soc_min * e.capacity).abs() > E_TOL * (1.0 + e.capacity) {
            r.push(format!("ess[{i}].e_min"), "e_min must equal soc_min * capacity");
        }
        if !(0.0 < e.eta && e.eta <= 1.0) {
            r.push(format!("ess[{i}].eta"), "eta must lie in (0, 1]");
        }
        if !(e.c_max >= 0.0 && e.d_max >= 0.0) {
            r.push(format!("ess[{i}].c_max"), "rates must be nonnegative");
        }
        if e.e_init < e.e_min - E_TOL || e.e_init > e.e_max + E_TOL {
            r.push(format!("ess[{i}].e_init"), "e_init must lie within [e_min, e_max]");
        }
    }

    for (i, l) in model.loads.iter().enumerate() {
        if !has_bus(l.bus) {
            r.push(format!("loads[{i}].bus"), format!("unknown bus {}", l.bus));
        }
        if l.p.len() != model.horizon {
            r.push(
                format!("loads[{i}].profile"),
                format!("has {} values, horizon is {}", l.p.len(), model.horizon),
            );
        }
        if l.p.iter().any(|v| !(*v >= 0.0)) {
            r.push(format!("loads[{i}].profile"), "values must be nonnegative");
        }
        if let Some(q) = &l.q {
            if q.len() != model.horizon {
                r.push(format!("loads[{i}].q"), "reactive profile length differs from horizon");
            }
        } else if model.kind == NetworkKind::Ac {
            r.push(format!("loads[{i}].q"), "AC cases need a reactive profile");
        }
    }

    if slack_count == 1 && r.findings.iter().all(|f| !f.path.starts_with("lines")) {
        let islanded = model.islanded_buses();
        if !islanded.is_empty() {
            let ids: Vec<u32> = islanded.iter().map(|&i| model.buses[i].id).collect();
            r.push("lines", format!("buses {ids:?} are not connected to the slack bus"));
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bundled;

    #[test]
    fn bundled_cases_are_valid() {
        for name in ["mvdc12", "ieee30", "toy3"] {
            let m = bundled::load(name).unwrap();
            assert!(validate(&m).is_empty(), "{name}");
        }
    }

    #[test]
    fn e_init_below_e_min_is_one_finding() {
        let mut m = bundled::load("toy3").unwrap();
        m.ess[0].e_init = m.ess[0].e_min * 0.5;
        let report = validate(&m);
        assert_eq!(report.findings.len(), 1, "{report}");
        assert_eq!(report.findings[0].path, "ess[0].e_init");
    }

    #[test]
    fn non_finite_shunts_are_findings() {
        let mut m = bundled::load("ieee30").unwrap();
        m.buses[9].b_shunt = f64::NAN;
        m.lines[0].b_charging = f64::INFINITY;
        let report = validate(&m);
        let paths: Vec<&str> = report.findings.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["buses[9].b_shunt", "lines[0].b_charging"], "{report}");
    }

    #[test]
    fn weight_ordering_is_one_finding() {
        let mut m = bundled::load("toy3").unwrap();
        m.weights.semi_critical = m.weights.critical;
        let report = validate(&m);
        assert_eq!(report.findings.len(), 1, "{report}");
        assert_eq!(report.findings[0].path, "meta.weights");
    }
}

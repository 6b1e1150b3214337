//! Network data model: buses, lines, generators, storage and classified loads.
//!
//! All power quantities are stored in natural units (MW, MVAr, MWh). Line
//! admittances are stored in per-unit on the model's `base_mva`. Use
//! [`NetworkModel::to_per_unit`] when a fully normalized copy is needed.

mod admittance;
mod case;
mod scenario;
mod validate;

pub use admittance::{admittance, admittance_unchecked, series_admittance, BusAdmittance};
pub use case::{load_case, parse_case};
pub use scenario::{apply_scenario, mask_probability, AppliedScenario, Scenario};
pub use validate::{validate, Finding, ValidationReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid case:\n{0}")]
    Invalid(ValidationReport),
    #[error("scenario mask has {got} entries, model has {expected} failable components")]
    MaskLength { expected: usize, got: usize },
    #[error("network graph is disconnected: buses {islanded:?} cannot reach the slack bus")]
    Disconnected { islanded: Vec<u32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Dc,
    Ac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    Natural,
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackRange {
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub v_min: f64,
    pub v_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Present only on the slack bus.
    pub slack: Option<SlackRange>,
    /// Shunt susceptance to ground, p.u. (positive for capacitors). AC only.
    #[serde(default)]
    pub b_shunt: f64,
}

impl Bus {
    pub fn is_slack(&self) -> bool {
        self.slack.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series conductance, p.u.
    pub g: f64,
    /// Series susceptance, p.u. (negative for inductive branches).
    pub b: f64,
    /// Total line charging susceptance, p.u., half at each end. AC only.
    #[serde(default)]
    pub b_charging: f64,
    pub p_lim: f64,
    pub q_lim: f64,
    pub pof: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub name: String,
    pub bus: u32,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub pof: f64,
    pub k_robust: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssUnit {
    pub name: String,
    pub bus: u32,
    pub capacity: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub c_max: f64,
    pub d_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta: f64,
    pub e_init: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadClass {
    Critical,
    SemiCritical,
    NonCritical,
}

impl LoadClass {
    pub const ALL: [LoadClass; 3] = [
        LoadClass::Critical,
        LoadClass::SemiCritical,
        LoadClass::NonCritical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoadClass::Critical => "critical",
            LoadClass::SemiCritical => "semi_critical",
            LoadClass::NonCritical => "non_critical",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "critical" | "c" => Some(LoadClass::Critical),
            "semi_critical" | "sc" => Some(LoadClass::SemiCritical),
            "non_critical" | "nc" => Some(LoadClass::NonCritical),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPoint {
    pub name: String,
    pub bus: u32,
    pub class: LoadClass,
    /// MW per interval.
    pub p: Vec<f64>,
    /// MVAr per interval, AC cases only.
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub critical: f64,
    pub semi_critical: f64,
    pub non_critical: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            critical: 100.0,
            semi_critical: 10.0,
            non_critical: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn weight(&self, class: LoadClass) -> f64 {
        match class {
            LoadClass::Critical => self.critical,
            LoadClass::SemiCritical => self.semi_critical,
            LoadClass::NonCritical => self.non_critical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub name: String,
    pub kind: NetworkKind,
    pub units: Units,
    pub base_mva: f64,
    pub horizon: usize,
    pub dt: f64,
    pub weights: ClassWeights,
    /// Whether line outages are part of the failure scenario space.
    pub line_failures: bool,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub ess: Vec<EssUnit>,
    pub loads: Vec<LoadPoint>,
}

impl NetworkModel {
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Index of the (single) slack bus. Panics on an unvalidated model without one.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(Bus::is_slack)
            .expect("validated model has a slack bus")
    }

    pub fn slack_range(&self) -> SlackRange {
        self.buses[self.slack_index()].slack.expect("slack bus carries a range")
    }

    /// Number of components that may fail in a scenario: generators, then
    /// lines when line failures are enabled.
    pub fn failable_count(&self) -> usize {
        self.generators.len() + if self.line_failures { self.lines.len() } else { 0 }
    }

    /// Failure probabilities in mask order.
    pub fn failable_pofs(&self) -> Vec<f64> {
        let mut pofs: Vec<f64> = self.generators.iter().map(|g| g.pof).collect();
        if self.line_failures {
            pofs.extend(self.lines.iter().map(|l| l.pof));
        }
        pofs
    }

    pub fn installed_capacity(&self) -> f64 {
        self.generators
            .iter()
            .filter(|g| g.in_service)
            .map(|g| g.p_max)
            .sum()
    }

    pub fn class_profile(&self, class: LoadClass) -> Vec<f64> {
        let mut out = vec![0.0; self.horizon];
        for load in self.loads.iter().filter(|l| l.class == class) {
            for (o, p) in out.iter_mut().zip(&load.p) {
                *o += p;
            }
        }
        out
    }

    /// Weighted energy of the full load profile, Σ_t Σ_i w_i P_i Δt.
    pub fn full_weighted_demand(&self) -> f64 {
        self.loads
            .iter()
            .map(|l| self.weights.weight(l.class) * l.p.iter().sum::<f64>() * self.dt)
            .sum()
    }

    /// Peak of the summed load profile, MW.
    pub fn peak_load(&self) -> f64 {
        (0..self.horizon)
            .map(|t| self.loads.iter().map(|l| l.p[t]).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Bus indices grouped into connected components over in-service lines.
    /// Components are ordered by their smallest bus index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for line in self.lines.iter().filter(|l| l.in_service) {
            if let (Some(a), Some(b)) = (self.bus_index(line.from_bus), self.bus_index(line.to_bus)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_slot: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let r = find(&mut parent, i);
            match root_slot[r] {
                Some(slot) => groups[slot].push(i),
                None => {
                    root_slot[r] = Some(groups.len());
                    groups.push(vec![i]);
                }
            }
        }
        groups
    }

    /// Buses that have no path to the slack bus.
    pub fn islanded_buses(&self) -> Vec<usize> {
        let slack = self.slack_index();
        self.components()
            .into_iter()
            .filter(|c| !c.contains(&slack))
            .flatten()
            .collect()
    }

    fn scaled(&self, factor: f64, units: Units) -> NetworkModel {
        let mut m = self.clone();
        m.units = units;
        for bus in &mut m.buses {
            if let Some(s) = bus.slack.as_mut() {
                s.p_min *= factor;
                s.p_max *= factor;
            }
        }
        for line in &mut m.lines {
            line.p_lim *= factor;
            line.q_lim *= factor;
        }
        for g in &mut m.generators {
            g.p_min *= factor;
            g.p_max *= factor;
            g.q_min *= factor;
            g.q_max *= factor;
        }
        for e in &mut m.ess {
            e.capacity *= factor;
            e.e_min *= factor;
            e.e_max *= factor;
            e.e_init *= factor;
            e.c_max *= factor;
            e.d_max *= factor;
        }
        for l in &mut m.loads {
            l.p.iter_mut().for_each(|v| *v *= factor);
            if let Some(q) = l.q.as_mut() {
                q.iter_mut().for_each(|v| *v *= factor);
            }
        }
        m
    }

    /// Copy with every MW/MVAr/MWh field divided by `base_mva`.
    pub fn to_per_unit(&self) -> NetworkModel {
        match self.units {
            Units::PerUnit => self.clone(),
            Units::Natural => self.scaled(1.0 / self.base_mva, Units::PerUnit),
        }
    }

    pub fn to_natural(&self) -> NetworkModel {
        match self.units {
            Units::Natural => self.clone(),
            Units::PerUnit => self.scaled(self.base_mva, Units::Natural),
        }
    }
}

/// Case files shipped with the crate.
pub mod bundled {
    pub const MVDC12: &str = include_str!("../../cases/mvdc12.case");
    pub const IEEE30: &str = include_str!("../../cases/ieee30.case");
    pub const TOY3: &str = include_str!("../../cases/toy3.case");

    pub fn source(name: &str) -> Option<&'static str> {
        match name {
            "mvdc12" => Some(MVDC12),
            "ieee30" => Some(IEEE30),
            "toy3" => Some(TOY3),
            _ => None,
        }
    }

    pub fn load(name: &str) -> Result<super::NetworkModel, super::GridError> {
        let src = source(name).ok_or_else(|| super::GridError::Parse {
            line: 0,
            message: format!("no bundled case named {name:?}"),
        })?;
        super::parse_case(src)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn components_split_on_out_of_service_line() {
        let mut m = testutil::dc_chain(3, 10.0);
        assert_eq!(m.components().len(), 1);
        m.lines[1].in_service = false;
        assert_eq!(m.components(), vec![vec![0, 1], vec![2]]);
        assert_eq!(m.islanded_buses(), vec![2]);
    }

    proptest! {
        #[test]
        fn per_unit_round_trip(base in 1.0f64..500.0, name in prop::sample::select(vec!["mvdc12", "ieee30", "toy3"])) {
            let mut m = bundled::load(name).unwrap();
            m.base_mva = base;
            let back = m.to_per_unit().to_natural();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
            for (a, b) in m.generators.iter().zip(&back.generators) {
                prop_assert!(close(a.p_max, b.p_max) && close(a.q_min, b.q_min));
            }
            for (a, b) in m.loads.iter().zip(&back.loads) {
                for (x, y) in a.p.iter().zip(&b.p) {
                    prop_assert!(close(*x, *y));
                }
            }
            for (a, b) in m.ess.iter().zip(&back.ess) {
                prop_assert!(close(a.e_init, b.e_init) && close(a.d_max, b.d_max));
            }
            for (a, b) in m.lines.iter().zip(&back.lines) {
                prop_assert!(close(a.p_lim, b.p_lim));
            }
        }
    }
}

use nalgebra::DMatrix;

use super::{GridError, NetworkKind, NetworkModel};

/// Bus admittance split into conductance and susceptance, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BusAdmittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl BusAdmittance {
    pub fn dim(&self) -> usize {
        self.g.nrows()
    }
}

/// Builds G and B from the in-service lines; fails if any bus is cut off
/// from the slack bus.
pub fn admittance(model: &NetworkModel) -> Result<BusAdmittance, GridError> {
    let islanded = model.islanded_buses();
    if !islanded.is_empty() {
        return Err(GridError::Disconnected {
            islanded: islanded.iter().map(|&i| model.buses[i].id).collect(),
        });
    }
    Ok(admittance_unchecked(model))
}

/// Same stamp as [`admittance`] without the connectivity check.
pub fn admittance_unchecked(model: &NetworkModel) -> BusAdmittance {
    let mut y = series_admittance(model);
    if model.kind == NetworkKind::Ac {
        for line in model.lines.iter().filter(|l| l.in_service) {
            if let (Some(i), Some(k)) = (model.bus_index(line.from_bus), model.bus_index(line.to_bus)) {
                y.b[(i, i)] += 0.5 * line.b_charging;
                y.b[(k, k)] += 0.5 * line.b_charging;
            }
        }
        for (i, bus) in model.buses.iter().enumerate() {
            y.b[(i, i)] += bus.b_shunt;
        }
    }
    y
}

/// Series branch admittances only, without line charging or bus shunts.
pub fn series_admittance(model: &NetworkModel) -> BusAdmittance {
    let n = model.buses.len();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let use_b = model.kind == NetworkKind::Ac;
    for line in model.lines.iter().filter(|l| l.in_service) {
        let (Some(i), Some(k)) = (model.bus_index(line.from_bus), model.bus_index(line.to_bus)) else {
            continue;
        };
        g[(i, i)] += line.g;
        g[(k, k)] += line.g;
        g[(i, k)] -= line.g;
        g[(k, i)] -= line.g;
        if use_b {
            b[(i, i)] += line.b;
            b[(k, k)] += line.b;
            b[(i, k)] -= line.b;
            b[(k, i)] -= line.b;
        }
    }
    BusAdmittance { g, b }
}

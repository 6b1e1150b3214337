use serde::{Deserialize, Serialize};

use super::{GridError, NetworkModel};

/// Joint availability outcome over the failable components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// `mask[i]` is true when failable component `i` has failed.
    pub mask: Vec<bool>,
    pub probability: f64,
}

impl Scenario {
    pub fn all_available(n: usize) -> Self {
        Self {
            mask: vec![false; n],
            probability: 1.0,
        }
    }

    /// Scenario for a mask with its probability computed from `pofs`.
    pub fn from_mask(mask: Vec<bool>, pofs: &[f64]) -> Self {
        let probability = mask_probability(&mask, pofs);
        Self { mask, probability }
    }

    pub fn failed_count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    /// Hex encoding with component 0 in the least significant bit.
    pub fn mask_hex(&self) -> String {
        let digits = self.mask.len().div_ceil(4).max(1);
        (0..digits)
            .rev()
            .map(|d| {
                let nibble = (0..4).fold(0u32, |acc, b| {
                    let i = d * 4 + b;
                    acc | (u32::from(self.mask.get(i).copied().unwrap_or(false)) << b)
                });
                char::from_digit(nibble, 16).expect("nibble < 16")
            })
            .collect()
    }

    pub fn parse_hex(hex: &str, n: usize) -> Option<Vec<bool>> {
        let mut mask = vec![false; n];
        for (d, c) in hex.chars().rev().enumerate() {
            let nibble = c.to_digit(16)?;
            for b in 0..4 {
                let i = d * 4 + b;
                let bit = nibble & (1 << b) != 0;
                if i < n {
                    mask[i] = bit;
                } else if bit {
                    return None;
                }
            }
        }
        Some(mask)
    }
}

/// Π (pof if failed else 1 − pof), multiplied in component order.
pub fn mask_probability(mask: &[bool], pofs: &[f64]) -> f64 {
    mask.iter()
        .zip(pofs)
        .fold(1.0, |p, (&failed, &pof)| p * if failed { pof } else { 1.0 - pof })
}

#[derive(Debug, Clone)]
pub struct AppliedScenario {
    pub model: NetworkModel,
    /// Bus ids carrying load that lost their path to the slack bus.
    pub islanded_load_buses: Vec<u32>,
}

/// Removes failed components: generators get zero output bounds, lines are
/// taken out of service. Everything else is untouched.
pub fn apply_scenario(model: &NetworkModel, scenario: &Scenario) -> Result<AppliedScenario, GridError> {
    let expected = model.failable_count();
    if scenario.mask.len() != expected {
        return Err(GridError::MaskLength {
            expected,
            got: scenario.mask.len(),
        });
    }
    let mut out = model.clone();
    let n_gen = out.generators.len();
    for (g, _) in out
        .generators
        .iter_mut()
        .zip(&scenario.mask)
        .filter(|(_, failed)| **failed)
    {
        g.p_min = 0.0;
        g.p_max = 0.0;
        g.q_min = 0.0;
        g.q_max = 0.0;
        g.in_service = false;
    }
    if out.line_failures {
        for (line, _) in out
            .lines
            .iter_mut()
            .zip(&scenario.mask[n_gen..])
            .filter(|(_, failed)| **failed)
        {
            line.in_service = false;
        }
    }
    let islanded = out.islanded_buses();
    let mut islanded_load_buses: Vec<u32> = out
        .loads
        .iter()
        .filter(|l| out.bus_index(l.bus).is_some_and(|i| islanded.contains(&i)))
        .map(|l| l.bus)
        .collect();
    islanded_load_buses.sort_unstable();
    islanded_load_buses.dedup();
    Ok(AppliedScenario {
        model: out,
        islanded_load_buses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{admittance_unchecked, bundled, testutil::dc_chain, LoadClass, LoadPoint};
    use proptest::prelude::*;

    #[test]
    fn all_available_is_identity() {
        let m = bundled::load("mvdc12").unwrap();
        let s = Scenario::all_available(m.failable_count());
        let applied = apply_scenario(&m, &s).unwrap();
        assert_eq!(applied.model, m);
        assert!(applied.islanded_load_buses.is_empty());
    }

    #[test]
    fn failing_both_atg1_drops_5_2_mw() {
        let m = bundled::load("mvdc12").unwrap();
        let mut mask = vec![false; m.failable_count()];
        for (i, g) in m.generators.iter().enumerate() {
            mask[i] = g.name.starts_with("ATG-1");
        }
        let applied = apply_scenario(&m, &Scenario::from_mask(mask, &m.failable_pofs())).unwrap();
        let atg1: Vec<_> = applied
            .model
            .generators
            .iter()
            .filter(|g| g.name.starts_with("ATG-1"))
            .collect();
        assert_eq!(atg1.len(), 2);
        assert!(atg1.iter().all(|g| g.p_max == 0.0 && !g.in_service));
        let drop = m.installed_capacity() - applied.model.installed_capacity();
        assert!((drop - 5.2).abs() < 1e-9, "{drop}");
    }

    #[test]
    fn cut_line_islands_far_bus() {
        let mut m = dc_chain(3, 10.0);
        m.line_failures = true;
        m.loads.push(LoadPoint {
            name: "far".into(),
            bus: 3,
            class: LoadClass::Critical,
            p: vec![1.0],
            q: None,
        });
        let applied = apply_scenario(&m, &Scenario::from_mask(vec![false, true], &[0.0, 0.1])).unwrap();
        assert_eq!(applied.islanded_load_buses, vec![3]);
    }

    #[test]
    fn mask_length_mismatch() {
        let m = bundled::load("toy3").unwrap();
        let s = Scenario::all_available(m.failable_count() + 1);
        assert!(matches!(apply_scenario(&m, &s), Err(GridError::MaskLength { .. })));
    }

    #[test]
    fn hex_encoding() {
        let s = Scenario::from_mask(vec![true, false, false, false, true], &[0.1; 5]);
        assert_eq!(s.mask_hex(), "11");
        assert_eq!(Scenario::parse_hex("11", 5).unwrap(), s.mask);
        assert_eq!(Scenario::parse_hex("21", 5), None);
    }

    proptest! {
        #[test]
        fn apply_is_idempotent_and_commutes_with_admittance(bits in prop::collection::vec(any::<bool>(), 14 + 14)) {
            let mut m = bundled::load("mvdc12").unwrap();
            m.line_failures = true;
            let s = Scenario::from_mask(bits, &m.failable_pofs());
            let once = apply_scenario(&m, &s).unwrap().model;
            let twice = apply_scenario(&once, &s).unwrap().model;
            prop_assert_eq!(&once, &twice);
            let direct = admittance_unchecked(&once);
            let mut manual = m.clone();
            for (line, failed) in manual.lines.iter_mut().zip(&s.mask[14..]) {
                line.in_service = !failed;
            }
            prop_assert_eq!(direct, admittance_unchecked(&manual));
        }

        #[test]
        fn enumeration_sums_to_one(pofs in prop::collection::vec(0.0f64..0.99, 1..=12)) {
            let n = pofs.len();
            let total: f64 = (0u32..1 << n)
                .map(|bits| {
                    let mask: Vec<bool> = (0..n).map(|i| bits & (1 << i) != 0).collect();
                    mask_probability(&mask, &pofs)
                })
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

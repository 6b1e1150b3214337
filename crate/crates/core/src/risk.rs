//! Failure-scenario enumeration with probability pruning, and the loss,
//! VaR and CVaR measures evaluated over a retained scenario set.

use serde::Serialize;
use thiserror::Error;

use crate::grid::Scenario;

/// Largest component count accepted for exhaustive enumeration.
pub const MAX_COMPONENTS: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("{0} components exceed the enumeration limit of {MAX_COMPONENTS}")]
    TooManyComponents(usize),
    #[error("pof {value} of component {index} is outside [0, 1)")]
    BadPof { index: usize, value: f64 },
    #[error("empty loss distribution")]
    Empty,
    #[error("{losses} losses but {probs} probabilities")]
    Length { losses: usize, probs: usize },
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("scenario {id} ({mask}): {message}")]
    Dispatch { id: usize, mask: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSet {
    /// Retained scenarios, most probable first (ties by mask value).
    pub scenarios: Vec<Scenario>,
    pub threshold: f64,
    /// Total probability of the pruned scenarios.
    pub dropped_mass: f64,
    /// Whether [`ScenarioSet::weights`] rescales retained probabilities to sum to one.
    pub normalized: bool,
    pub components: usize,
}

impl ScenarioSet {
    pub fn single(scenario: Scenario) -> Self {
        let components = scenario.mask.len();
        let dropped_mass = 1.0 - scenario.probability;
        Self {
            scenarios: vec![scenario],
            threshold: 0.0,
            dropped_mass,
            normalized: true,
            components,
        }
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn retained_mass(&self) -> f64 {
        self.scenarios.iter().map(|s| s.probability).sum()
    }

    /// Probability weights used for expectations and risk measures.
    pub fn weights(&self) -> Vec<f64> {
        let raw = self.scenarios.iter().map(|s| s.probability);
        if self.normalized {
            let total = self.retained_mass();
            raw.map(|p| p / total).collect()
        } else {
            raw.collect()
        }
    }
}

/// Enumerates all 2^n availability masks, keeping those with probability at
/// least `threshold`. Subtrees that cannot reach the threshold are skipped
/// and their mass added to `dropped_mass`; retained probabilities are the
/// same component-order products as [`crate::grid::mask_probability`].
pub fn enumerate_scenarios(pofs: &[f64], threshold: f64) -> Result<ScenarioSet, RiskError> {
    let n = pofs.len();
    if n > MAX_COMPONENTS {
        return Err(RiskError::TooManyComponents(n));
    }
    if let Some((index, &value)) = pofs.iter().enumerate().find(|(_, p)| !(0.0..1.0).contains(*p)) {
        return Err(RiskError::BadPof { index, value });
    }
    // best[i] = largest achievable product over components i..n
    let mut best = vec![1.0; n + 1];
    for i in (0..n).rev() {
        best[i] = best[i + 1] * pofs[i].max(1.0 - pofs[i]);
    }
    let mut kept: Vec<(u32, f64)> = Vec::new();
    let mut dropped = 0.0;
    let mut stack = vec![(0usize, 0u32, 1.0f64)];
    while let Some((depth, bits, p)) = stack.pop() {
        if p <= 0.0 || p * best[depth] < threshold {
            dropped += p;
            continue;
        }
        if depth == n {
            kept.push((bits, p));
            continue;
        }
        let pof = pofs[depth];
        stack.push((depth + 1, bits | (1 << depth), p * pof));
        stack.push((depth + 1, bits, p * (1.0 - pof)));
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let scenarios = kept
        .into_iter()
        .map(|(bits, probability)| Scenario {
            mask: (0..n).map(|i| bits & (1 << i) != 0).collect(),
            probability,
        })
        .collect();
    Ok(ScenarioSet {
        scenarios,
        threshold,
        dropped_mass: dropped,
        normalized: true,
        components: n,
    })
}

/// Loss of one scenario: expected minus served. Negative when the scenario
/// outperforms the expectation.
pub fn loss(served_weighted: f64, expected_weighted: f64) -> f64 {
    expected_weighted - served_weighted
}

fn check(losses: &[f64], probs: &[f64], alpha: f64) -> Result<(), RiskError> {
    if losses.is_empty() {
        return Err(RiskError::Empty);
    }
    if losses.len() != probs.len() {
        return Err(RiskError::Length {
            losses: losses.len(),
            probs: probs.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::Alpha(alpha));
    }
    Ok(())
}

fn sorted_atoms(losses: &[f64], probs: &[f64]) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = losses.iter().copied().zip(probs.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// Smallest loss whose cumulative probability reaches `alpha`.
pub fn var_alpha(losses: &[f64], probs: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check(losses, probs, alpha)?;
    let atoms = sorted_atoms(losses, probs);
    let mut cum = 0.0;
    for &(l, p) in &atoms {
        cum += p;
        if cum >= alpha - 1e-12 {
            return Ok(l);
        }
    }
    Ok(atoms.last().expect("non-empty").0)
}

/// Mean of the worst `1 − alpha` probability tail, splitting the atom at
/// the VaR: `VaR + E[(L − VaR)+] / (1 − alpha)`.
pub fn cvar_alpha(losses: &[f64], probs: &[f64], alpha: f64) -> Result<f64, RiskError> {
    let var = var_alpha(losses, probs, alpha)?;
    let excess: f64 = losses
        .iter()
        .zip(probs)
        .map(|(&l, &p)| p * (l - var).max(0.0))
        .sum();
    Ok(var + excess / (1.0 - alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioLoss {
    pub id: usize,
    pub mask_hex: String,
    pub probability: f64,
    pub served: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub alpha: f64,
    pub var: f64,
    pub cvar: f64,
    pub expected_served: f64,
    pub dropped_mass: f64,
    pub per_scenario: Vec<ScenarioLoss>,
}

/// Centered losses `E[served] − served(s)` over the retained set, with VaR
/// and CVaR at `alpha`. `served` is indexed like `set.scenarios`.
pub fn risk_report_from_served(set: &ScenarioSet, served: &[f64], alpha: f64) -> Result<RiskReport, RiskError> {
    let probs = set.weights();
    check(served, &probs, alpha)?;
    let expected: f64 = served.iter().zip(&probs).map(|(s, p)| s * p).sum();
    let losses: Vec<f64> = served.iter().map(|&s| loss(s, expected)).collect();
    let var = var_alpha(&losses, &probs, alpha)?;
    let cvar = cvar_alpha(&losses, &probs, alpha)?;
    let per_scenario = set
        .scenarios
        .iter()
        .enumerate()
        .map(|(id, s)| ScenarioLoss {
            id,
            mask_hex: s.mask_hex(),
            probability: probs[id],
            served: served[id],
            loss: losses[id],
        })
        .collect();
    Ok(RiskReport {
        alpha,
        var,
        cvar,
        expected_served: expected,
        dropped_mass: set.dropped_mass,
        per_scenario,
    })
}

/// Evaluates `dispatch` on every retained scenario and builds the report.
pub fn risk_report<F, E>(set: &ScenarioSet, alpha: f64, mut dispatch: F) -> Result<RiskReport, RiskError>
where
    F: FnMut(usize, &Scenario) -> Result<f64, E>,
    E: std::fmt::Display,
{
    let served = set
        .scenarios
        .iter()
        .enumerate()
        .map(|(id, s)| {
            dispatch(id, s).map_err(|e| RiskError::Dispatch {
                id,
                mask: s.mask_hex(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    risk_report_from_served(set, &served, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::mask_probability;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn two_component_enumeration() {
        let set = enumerate_scenarios(&[0.05, 0.075], 0.0).unwrap();
        let probs: Vec<f64> = set.scenarios.iter().map(|s| s.probability).collect();
        let expected = [0.87875, 0.07125, 0.04625, 0.00375];
        assert_eq!(probs.len(), 4);
        for (p, e) in probs.iter().zip(expected) {
            assert!(close(*p, e), "{p} vs {e}");
        }
        assert_eq!(set.scenarios[1].mask, vec![false, true]);
        assert_eq!(set.dropped_mass, 0.0);
    }

    #[test]
    fn zero_pofs_single_scenario() {
        let set = enumerate_scenarios(&[0.0; 6], 0.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.scenarios[0].probability, 1.0);
        assert!(set.scenarios[0].mask.iter().all(|b| !b));
    }

    #[test]
    fn threshold_one_keeps_nothing() {
        let set = enumerate_scenarios(&[0.1, 0.2], 1.0).unwrap();
        assert!(set.is_empty());
        assert!((set.dropped_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_guard() {
        assert_eq!(
            enumerate_scenarios(&[0.1; 26], 0.0).unwrap_err(),
            RiskError::TooManyComponents(26)
        );
        assert!(matches!(
            enumerate_scenarios(&[0.1, 1.0], 0.0),
            Err(RiskError::BadPof { index: 1, .. })
        ));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(100.0, 100.0), 0.0);
        assert_eq!(loss(80.0, 100.0), 20.0);
        assert_eq!(loss(110.0, 100.0), -10.0);
    }

    #[test]
    fn var_cvar_examples() {
        assert_eq!(var_alpha(&[0.0, 10.0], &[0.9, 0.1], 0.9).unwrap(), 0.0);
        assert!(close(cvar_alpha(&[0.0, 10.0], &[0.9, 0.1], 0.9).unwrap(), 10.0));
        assert_eq!(var_alpha(&[5.0], &[1.0], 0.37).unwrap(), 5.0);
        let third = 1.0 / 3.0;
        assert_eq!(var_alpha(&[1.0, 2.0, 3.0], &[third; 3], 0.5).unwrap(), 2.0);
        assert!(close(cvar_alpha(&[4.0; 3], &[third; 3], 0.95).unwrap(), 4.0));
        assert_eq!(var_alpha(&[], &[], 0.9), Err(RiskError::Empty));
        assert_eq!(cvar_alpha(&[1.0], &[1.0], 1.0), Err(RiskError::Alpha(1.0)));
    }

    #[test]
    fn report_examples() {
        let set = ScenarioSet {
            scenarios: vec![
                Scenario { mask: vec![false], probability: 0.9 },
                Scenario { mask: vec![true], probability: 0.1 },
            ],
            threshold: 0.0,
            dropped_mass: 0.0,
            normalized: true,
            components: 1,
        };
        let r = risk_report_from_served(&set, &[100.0, 80.0], 0.9).unwrap();
        assert!(close(r.expected_served, 98.0));
        assert!(close(r.per_scenario[0].loss, -2.0));
        assert!(close(r.per_scenario[1].loss, 18.0));
        assert!(close(r.cvar, 18.0));

        let r = risk_report(&set, 0.9, |_, _| Ok::<_, String>(42.0)).unwrap();
        assert!(r.per_scenario.iter().all(|s| close(s.loss, 0.0)));
        assert!(close(r.cvar, 0.0));

        let err = risk_report(&set, 0.9, |id, _| if id == 1 { Err("boom") } else { Ok(1.0) }).unwrap_err();
        assert!(matches!(err, RiskError::Dispatch { id: 1, .. }));
    }

    /// Worst `1 − alpha` mass taken atom by atom from the top.
    fn tail_oracle(losses: &[f64], probs: &[f64], alpha: f64) -> f64 {
        let mut atoms: Vec<(f64, f64)> = losses.iter().copied().zip(probs.iter().copied()).collect();
        atoms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut need = 1.0 - alpha;
        let mut acc = 0.0;
        for (l, p) in atoms {
            let take = p.min(need);
            acc += take * l;
            need -= take;
            if need <= 0.0 {
                break;
            }
        }
        acc / (1.0 - alpha)
    }

    fn distribution() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..=16).prop_flat_map(|n| {
            (
                prop::collection::vec(-50.0f64..50.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(l, w)| {
                    let total: f64 = w.iter().sum();
                    (l, w.iter().map(|x| x / total).collect())
                })
        })
    }

    proptest! {
        #[test]
        fn cvar_matches_tail_oracle((losses, probs) in distribution(), alpha in 0.5f64..0.995) {
            let cvar = cvar_alpha(&losses, &probs, alpha).unwrap();
            let oracle = tail_oracle(&losses, &probs, alpha);
            prop_assert!((cvar - oracle).abs() < 1e-9 * (1.0 + oracle.abs()), "{} vs {}", cvar, oracle);
            let var = var_alpha(&losses, &probs, alpha).unwrap();
            let mean: f64 = losses.iter().zip(&probs).map(|(l, p)| l * p).sum();
            prop_assert!(cvar >= var - 1e-12);
            prop_assert!(cvar >= mean - 1e-9);
        }

        #[test]
        fn cvar_monotone_and_translation((losses, probs) in distribution(), a in 0.01f64..0.98, b in 0.01f64..0.98, c in -20.0f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cvar_alpha(&losses, &probs, lo).unwrap() <= cvar_alpha(&losses, &probs, hi).unwrap() + 1e-12);
            let shifted: Vec<f64> = losses.iter().map(|l| l + c).collect();
            let v0 = var_alpha(&losses, &probs, hi).unwrap();
            prop_assert_eq!(var_alpha(&shifted, &probs, hi).unwrap(), v0 + c);
            let c0 = cvar_alpha(&losses, &probs, hi).unwrap();
            prop_assert!((cvar_alpha(&shifted, &probs, hi).unwrap() - (c0 + c)).abs() < 1e-9);
        }

        #[test]
        fn pruning_matches_full_enumeration(pofs in prop::collection::vec(0.0f64..0.5, 1..=10), threshold in 0.0f64..0.05) {
            let set = enumerate_scenarios(&pofs, threshold).unwrap();
            let n = pofs.len();
            let mut oracle: Vec<(Vec<bool>, f64)> = (0u32..1 << n)
                .map(|bits| {
                    let mask: Vec<bool> = (0..n).map(|i| bits & (1 << i) != 0).collect();
                    let p = mask_probability(&mask, &pofs);
                    (mask, p)
                })
                .filter(|(_, p)| *p >= threshold && *p > 0.0)
                .collect();
            oracle.sort_by(|a, b| a.0.cmp(&b.0));
            let mut got: Vec<(Vec<bool>, f64)> = set.scenarios.iter().map(|s| (s.mask.clone(), s.probability)).collect();
            got.sort_by(|a, b| a.0.cmp(&b.0));
            prop_assert_eq!(&got, &oracle);
            prop_assert!((set.retained_mass() + set.dropped_mass - 1.0).abs() < 1e-9);
        }

        #[test]
        fn retained_cvar_close_to_full(pofs in prop::collection::vec(0.01f64..0.3, 10), served in prop::collection::vec(0.0f64..100.0, 1024), threshold in 0.0f64..0.01) {
            let full = enumerate_scenarios(&pofs, 0.0).unwrap();
            let kept = enumerate_scenarios(&pofs, threshold).unwrap();
            let served_of = |m: &[bool]| {
                let idx = m.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (usize::from(b) << i));
                served[idx]
            };
            let serve_full: Vec<f64> = full.scenarios.iter().map(|s| served_of(&s.mask)).collect();
            let serve_kept: Vec<f64> = kept.scenarios.iter().map(|s| served_of(&s.mask)).collect();
            let max_loss = 100.0;
            // Loss against a fixed reference so both sets share one scale.
            let shortfall = |set: &ScenarioSet, s: &[f64]| {
                let losses: Vec<f64> = s.iter().map(|x| max_loss - x).collect();
                cvar_alpha(&losses, &set.weights(), 0.5).unwrap()
            };
            let diff = (shortfall(&full, &serve_full) - shortfall(&kept, &serve_kept)).abs();
            // Renormalized pruning is a total-variation move of dropped_mass; the tail
            // average of losses in [0, max_loss] shifts by at most that over 1 - alpha.
            prop_assert!(diff <= kept.dropped_mass * max_loss / 0.5 + 1e-9, "{} {}", diff, kept.dropped_mass);
        }
    }
}

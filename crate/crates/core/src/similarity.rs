//! Per-client similarity bookkeeping and the adaptive sampling distribution.
//!
//! Similarity of client `i` to client `k` is the inverse of the loss of `i`'s
//! model on `k`'s training data. Scores go through a temperature softmax to
//! give the probability of picking each peer. Peers never measured directly
//! can inherit a score through a two-hop neighbour.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::scalar::Scalar;

/// Losses below this are treated as this value before inversion.
pub const LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Unknown,
    Measured,
    Estimated,
}

/// Clamps a loss to [`LOSS_FLOOR`]; the flag reports whether clamping happened.
pub fn clamp_loss<F: Scalar>(loss: F) -> (F, bool) {
    let floor = F::lit(LOSS_FLOOR);
    if loss.is_nan() || loss < floor {
        (floor, true)
    } else {
        (loss, false)
    }
}

/// `1 / loss`, with the loss floored at [`LOSS_FLOOR`].
pub fn similarity_score<F: Scalar>(loss: F) -> F {
    let (loss, clamped) = clamp_loss(loss);
    if clamped {
        log::warn!("similarity loss clamped to floor {LOSS_FLOOR:e}; model is saturated");
    }
    loss.recip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityState<F> {
    pub owner: usize,
    pub scores: Vec<F>,
    pub provenance: Vec<Provenance>,
    /// Every peer this client has ever sampled.
    pub history: BTreeSet<usize>,
    pub last_measured_round: Vec<Option<usize>>,
}

impl<F: Scalar> SimilarityState<F> {
    pub fn new(owner: usize, k: usize) -> Self {
        Self {
            owner,
            scores: vec![F::zero(); k],
            provenance: vec![Provenance::Unknown; k],
            history: BTreeSet::new(),
            last_measured_round: vec![None; k],
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_measured(&self, peer: usize) -> bool {
        self.provenance[peer] == Provenance::Measured
    }

    /// Records a direct measurement; replaces any previous value for `peer`.
    pub fn update_measured(&mut self, peer: usize, loss: F, round: usize) -> Result<()> {
        if peer == self.owner {
            return Err(Error::contract(format!(
                "client {} cannot measure similarity to itself",
                self.owner
            )));
        }
        if peer >= self.len() {
            return Err(Error::contract(format!(
                "peer {peer} out of range for {} clients",
                self.len()
            )));
        }
        self.scores[peer] = similarity_score(loss);
        self.provenance[peer] = Provenance::Measured;
        self.history.insert(peer);
        self.last_measured_round[peer] = Some(round);
        Ok(())
    }

    /// Mean over non-owner measured or estimated scores.
    pub fn known_mean(&self) -> Option<F> {
        let (sum, n) = self
            .scores
            .iter()
            .zip(&self.provenance)
            .enumerate()
            .filter(|&(j, (_, p))| j != self.owner && *p != Provenance::Unknown)
            .fold((F::zero(), 0usize), |(s, n), (_, (&v, _))| (s + v, n + 1));
        (n > 0).then(|| sum / F::from_usize_lossy(n))
    }
}

/// Temperature softmax over the owner's scores.
///
/// Unknown entries take the mean of the known ones, so an un-scored peer keeps
/// a middling weight. The owner always gets probability zero and every other
/// peer gets a strictly positive probability unless it underflows.
pub fn sampling_probabilities<F: Scalar>(state: &SimilarityState<F>, tau: F) -> Result<Vec<F>> {
    let k = state.len();
    if k < 2 {
        return Err(Error::config(format!("sampling needs at least 2 clients, got {k}")));
    }
    let fill = state.known_mean().unwrap_or_else(F::zero);
    let effective: Vec<F> = state
        .scores
        .iter()
        .zip(&state.provenance)
        .map(|(&s, p)| if *p == Provenance::Unknown { fill } else { s })
        .collect();
    let owner = state.owner;
    let max = effective
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != owner)
        .map(|(_, &s)| tau * s)
        .fold(F::neg_infinity(), F::max);
    let mut probs: Vec<F> = effective
        .iter()
        .enumerate()
        .map(|(j, &s)| if j == owner { F::zero() } else { (tau * s - max).exp() })
        .collect();
    let total: F = probs.iter().copied().sum();
    for (j, p) in probs.iter_mut().enumerate() {
        *p = *p / total;
        // Keep every peer reachable when exp underflows.
        if j != owner && *p < F::min_positive_value() {
            *p = F::min_positive_value();
        }
    }
    Ok(probs)
}

/// Which intermediary supplies a two-hop estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoHopRule {
    /// The sampled peer the owner finds most similar.
    #[default]
    MostSimilar,
    /// The sampled peer the owner finds least similar.
    LeastSimilar,
}

/// Fills non-measured entries of `own` from the peers in its history.
///
/// For each peer `j` the owner has not measured, the intermediary `k` is
/// chosen among the owner's history entries whose own (snapshot) state has a
/// measured score for `j`; `own.scores[j]` becomes `snapshot[k].scores[j]`.
/// Ties go to the lowest client id. Entries with no eligible intermediary keep
/// whatever they had.
pub fn propagate_two_hop<F: Scalar>(own: &mut SimilarityState<F>, snapshot: &[&SimilarityState<F>], rule: TwoHopRule) {
    let owner = own.owner;
    // Intermediaries ordered best-first according to the rule.
    let mut ranked: Vec<usize> = own
        .history
        .iter()
        .copied()
        .filter(|&k| k != owner && k < snapshot.len())
        .collect();
    ranked.sort_by(|&a, &b| {
        let (sa, sb) = (own.scores[a], own.scores[b]);
        let ord = match rule {
            TwoHopRule::MostSimilar => sb.partial_cmp(&sa),
            TwoHopRule::LeastSimilar => sa.partial_cmp(&sb),
        };
        ord.unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });

    for j in 0..own.len() {
        if j == owner || own.provenance[j] == Provenance::Measured {
            continue;
        }
        if let Some(&k) = ranked
            .iter()
            .find(|&&k| k != j && snapshot[k].provenance.get(j) == Some(&Provenance::Measured))
        {
            own.scores[j] = snapshot[k].scores[j];
            own.provenance[j] = Provenance::Estimated;
        }
    }
}

/// Sequential weighted draw without replacement: pick one id in proportion to
/// its weight, drop it, renormalise, repeat. Returned in draw order.
pub fn weighted_sample_without_replacement<F: Scalar>(
    probabilities: &[F],
    m: usize,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let mut weights: Vec<f64> = probabilities
        .iter()
        .map(|p| {
            let p = p.as_f64();
            if p.is_finite() && p > 0.0 {
                p
            } else {
                0.0
            }
        })
        .collect();
    let available = weights.iter().filter(|&&w| w > 0.0).count();
    if m > available {
        return Err(Error::config(format!(
            "cannot draw {m} distinct ids from {available} with positive probability"
        )));
    }
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (j, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            choice = Some(j);
            if target < acc {
                break;
            }
        }
        let j = choice.expect("positive weight remains");
        picked.push(j);
        weights[j] = 0.0;
    }
    Ok(picked)
}

/// Temperature over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSchedule {
    Constant {
        tau: f64,
    },
    /// Logistic ramp rescaled to run exactly from 1 at round 0 to
    /// `tau_max` at `total_rounds`.
    Sigmoid {
        tau_max: f64,
        midpoint_round: f64,
        steepness: f64,
        total_rounds: usize,
    },
}

impl TauSchedule {
    pub fn constant(tau: f64) -> Self {
        TauSchedule::Constant { tau }
    }

    /// Sigmoid ramp centred on the middle of the run with steepness `10 / T`.
    pub fn sigmoid(tau_max: f64, total_rounds: usize) -> Self {
        let t = total_rounds.max(1) as f64;
        TauSchedule::Sigmoid {
            tau_max,
            midpoint_round: t / 2.0,
            steepness: 10.0 / t,
            total_rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TauSchedule::Constant { tau } if !(tau.is_finite() && tau > 0.0) => {
                Err(Error::config(format!("tau must be positive, got {tau}")))
            }
            TauSchedule::Sigmoid { tau_max, steepness, .. }
                if !(tau_max.is_finite() && tau_max >= 1.0 && steepness > 0.0) =>
            {
                Err(Error::config(format!(
                    "tau_max must be >= 1 and steepness > 0 (got {tau_max}, {steepness})"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn tau_at(&self, round: usize) -> f64 {
        match *self {
            TauSchedule::Constant { tau } => tau,
            TauSchedule::Sigmoid {
                tau_max,
                midpoint_round,
                steepness,
                total_rounds,
            } => {
                let logistic = |t: f64| 1.0 / (1.0 + (-steepness * (t - midpoint_round)).exp());
                let start = logistic(0.0);
                let end = logistic(total_rounds as f64);
                if end <= start {
                    return tau_max;
                }
                let t = round.min(total_rounds) as f64;
                let frac = ((logistic(t) - start) / (end - start)).clamp(0.0, 1.0);
                1.0 + (tau_max - 1.0) * frac
            }
        }
    }
}

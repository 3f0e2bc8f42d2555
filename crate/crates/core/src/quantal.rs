//! Runtime quantal policies and belief machinery.
//!
//! A driver's hidden profile is an (intelligence level, rationality) pair.
//! Intelligence selects which pre-trained table predicts the driver;
//! rationality scales the softmax sharpness. Beliefs are per-driver
//! categorical distributions over a finite profile support, updated by
//! Bayes' rule on observed actions with a small likelihood floor so that a
//! single off-model action can never eliminate a profile outright.
//!
//! Everything here is a pure function over immutable values.

use crate::grid::{HumanAction, NUM_HUMAN_ACTIONS};
use crate::levelk::{QTable, QTableSet};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Floor applied to action likelihoods during belief updates.
pub const LIKELIHOOD_FLOOR: f64 = 1e-6;

/// Hidden driver profile: intelligence level and rationality coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenProfile {
    pub k: u32,
    pub lambda: f64,
}

/// Ordered, duplicate-free list of candidate profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSupport {
    pub profiles: Vec<HiddenProfile>,
}

impl ProfileSupport {
    /// Default support: k in {1, 2} crossed with rationality in {1, 3, 5}.
    pub fn default_support() -> ProfileSupport {
        let mut profiles = Vec::new();
        for k in [1u32, 2] {
            for lambda in [1.0, 3.0, 5.0] {
                profiles.push(HiddenProfile { k, lambda });
            }
        }
        ProfileSupport { profiles }
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn validate(&self) -> Result<(), QuantalError> {
        if self.profiles.is_empty() {
            return Err(QuantalError::EmptySupport);
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.k < 1 {
                return Err(QuantalError::BadProfile { index: i });
            }
            if !(p.lambda > 0.0 && p.lambda.is_finite()) {
                return Err(QuantalError::BadProfile { index: i });
            }
            if self.profiles[..i]
                .iter()
                .any(|q| q.k == p.k && q.lambda == p.lambda)
            {
                return Err(QuantalError::DuplicateProfile { index: i });
            }
        }
        Ok(())
    }

    /// Highest level referenced by the support.
    pub fn max_level(&self) -> u32 {
        self.profiles.iter().map(|p| p.k).max().unwrap_or(0)
    }
}

/// Categorical belief over a profile support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub support: Arc<ProfileSupport>,
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn uniform(support: Arc<ProfileSupport>) -> Belief {
        let n = support.len();
        Belief {
            support,
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Probability mass on a single profile index.
    pub fn point_mass(support: Arc<ProfileSupport>, index: usize) -> Belief {
        let n = support.len();
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Belief { support, probs }
    }

    pub fn validate(&self) -> Result<(), QuantalError> {
        if self.probs.len() != self.support.len() {
            return Err(QuantalError::BeliefShape);
        }
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(QuantalError::BeliefShape);
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(QuantalError::BeliefNotNormalized { sum });
        }
        Ok(())
    }

    /// Marginal probability that the driver's intelligence level is `k`.
    pub fn marginal_k(&self, k: u32) -> f64 {
        self.support
            .profiles
            .iter()
            .zip(&self.probs)
            .filter(|(p, _)| p.k == k)
            .map(|(_, &pr)| pr)
            .sum()
    }
}

/// Distribution over the three human actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDist {
    pub probs: [f64; NUM_HUMAN_ACTIONS],
}

impl PolicyDist {
    pub fn uniform() -> PolicyDist {
        PolicyDist {
            probs: [1.0 / NUM_HUMAN_ACTIONS as f64; NUM_HUMAN_ACTIONS],
        }
    }

    pub fn prob(&self, a: HumanAction) -> f64 {
        self.probs[a.ordinal()]
    }

    /// Samples an action; consumes exactly one `f64` from the RNG.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> HumanAction {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for a in HumanAction::ALL {
            acc += self.prob(a);
            if u < acc {
                return a;
            }
        }
        HumanAction::Maintain
    }
}

#[derive(Debug, Error)]
pub enum QuantalError {
    #[error("non-finite action value in table row")]
    NonFiniteQ,
    #[error("rationality must be >= 0 and finite, got {0}")]
    BadLambda(f64),
    #[error("profile support is empty")]
    EmptySupport,
    #[error("profile {index} is invalid (k >= 1 and lambda > 0 required)")]
    BadProfile { index: usize },
    #[error("profile {index} duplicates an earlier one")]
    DuplicateProfile { index: usize },
    #[error("support references level {level} but tables stop at {k_max}")]
    UnsupportedLevel { level: u32, k_max: u32 },
    #[error("belief probabilities malformed")]
    BeliefShape,
    #[error("belief probabilities sum to {sum}, not 1")]
    BeliefNotNormalized { sum: f64 },
}

/// Softmax over a Q row scaled by `lambda`, computed with max-subtraction.
/// `lambda = 0` yields the uniform distribution; probabilities are strictly
/// positive for any finite `lambda`.
pub fn quantal_policy_row(
    row: &[f64; NUM_HUMAN_ACTIONS],
    lambda: f64,
) -> Result<PolicyDist, QuantalError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(QuantalError::BadLambda(lambda));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(QuantalError::NonFiniteQ);
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; NUM_HUMAN_ACTIONS];
    let mut sum = 0.0;
    for (p, &q) in probs.iter_mut().zip(row) {
        *p = (lambda * (q - max)).exp();
        sum += *p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    Ok(PolicyDist { probs })
}

/// Quantal policy of a driver with rationality `lambda` at a table state.
pub fn quantal_policy(
    table: &QTable,
    state_index: usize,
    lambda: f64,
) -> Result<PolicyDist, QuantalError> {
    quantal_policy_row(&table.row(state_index), lambda)
}

/// Belief-weighted mixture of the per-profile quantal policies.
pub fn predictive_policy(
    belief: &Belief,
    tables: &QTableSet,
    state_index: usize,
) -> Result<PolicyDist, QuantalError> {
    let mut probs = [0.0; NUM_HUMAN_ACTIONS];
    for (profile, &weight) in belief.support.profiles.iter().zip(&belief.probs) {
        if profile.k > tables.k_max {
            return Err(QuantalError::UnsupportedLevel {
                level: profile.k,
                k_max: tables.k_max,
            });
        }
        if weight == 0.0 {
            continue;
        }
        let pd = quantal_policy(tables.table(profile.k), state_index, profile.lambda)?;
        for (acc, p) in probs.iter_mut().zip(pd.probs) {
            *acc += weight * p;
        }
    }
    Ok(PolicyDist { probs })
}

/// Bayes update of a belief given an observed action at a table state.
/// Likelihoods are floored at [`LIKELIHOOD_FLOOR`] so the posterior always
/// normalizes and no profile is eliminated by one off-model action.
///
/// # Panics
///
/// Panics if the support references a level above the table set's `k_max`;
/// validate the support against the tables once at construction.
pub fn belief_update(
    belief: &Belief,
    state_index: usize,
    observed: HumanAction,
    tables: &QTableSet,
) -> Belief {
    let mut posterior = Vec::with_capacity(belief.probs.len());
    let mut sum = 0.0;
    for (profile, &prior) in belief.support.profiles.iter().zip(&belief.probs) {
        let pd = quantal_policy(tables.table(profile.k), state_index, profile.lambda)
            .expect("support validated against tables");
        let like = pd.prob(observed).max(LIKELIHOOD_FLOOR);
        let w = prior * like;
        posterior.push(w);
        sum += w;
    }
    for w in &mut posterior {
        *w /= sum;
    }
    Belief {
        support: belief.support.clone(),
        probs: posterior,
    }
}

/// Shannon entropy in nats, with `0 ln 0 := 0`.
pub fn entropy(belief: &Belief) -> f64 {
    belief
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Total entropy reduction between aligned parent and child belief lists.
/// May be negative: a surprising action can raise entropy.
///
/// # Panics
///
/// Panics if the lists have different lengths.
pub fn info_gain(parents: &[Belief], children: &[Belief]) -> f64 {
    assert_eq!(
        parents.len(),
        children.len(),
        "belief lists must align by opponent"
    );
    parents
        .iter()
        .zip(children)
        .map(|(p, c)| entropy(p) - entropy(c))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_row_tables(row: [f64; 3]) -> QTableSet {
        let params = crate::grid::GridParams::default();
        let n = crate::grid::num_states(&params, 1);
        let mut q = vec![0.0; n * 3];
        q[0] = row[0];
        q[1] = row[1];
        q[2] = row[2];
        let t = |level| QTable {
            level,
            q: q.clone(),
        };
        QTableSet {
            params,
            rewards: crate::grid::RewardParams::default(),
            k_max: 2,
            tables: vec![t(0), t(1), t(2)],
        }
    }

    #[test]
    fn hand_evaluated_softmax() {
        // q = [1, 0, 0], lambda = 1: e / (e + 2) and 1 / (e + 2).
        let pd = quantal_policy_row(&[1.0, 0.0, 0.0], 1.0).unwrap();
        let e = 1.0f64.exp();
        assert!((pd.probs[0] - e / (e + 2.0)).abs() < 1e-12);
        assert!((pd.probs[1] - 1.0 / (e + 2.0)).abs() < 1e-12);
        assert!((pd.probs[0] - 0.5761).abs() < 1e-4);
        assert!((pd.probs[1] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn zero_rationality_is_uniform() {
        let pd = quantal_policy_row(&[3.0, -7.0, 100.0], 0.0).unwrap();
        for p in pd.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_values_are_uniform() {
        let pd = quantal_policy_row(&[2.5, 2.5, 2.5], 17.0).unwrap();
        for p in pd.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_lambda_concentrates_on_argmax() {
        // Gap 0.1 at lambda 1000: competitor weight exp(-100) is negligible.
        let pd = quantal_policy_row(&[0.6, 0.5, 0.4], 1000.0).unwrap();
        assert!(pd.probs[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn non_finite_q_is_rejected() {
        assert!(matches!(
            quantal_policy_row(&[f64::NAN, 0.0, 0.0], 1.0),
            Err(QuantalError::NonFiniteQ)
        ));
        assert!(matches!(
            quantal_policy_row(&[0.0, 0.0, 0.0], f64::INFINITY),
            Err(QuantalError::BadLambda(_))
        ));
    }

    #[test]
    fn point_mass_belief_predictive_equals_single_profile() {
        let tables = single_row_tables([1.0, 0.5, 0.0]);
        let support = Arc::new(ProfileSupport::default_support());
        let b = Belief::point_mass(support.clone(), 2); // k=1, lambda=5
        let mix = predictive_policy(&b, &tables, 0).unwrap();
        let single = quantal_policy(tables.table(1), 0, 5.0).unwrap();
        assert_eq!(mix, single);
    }

    #[test]
    fn fifty_fifty_mixture_by_hand() {
        // Policies [0.8, 0.1, 0.1] and [0.2, 0.4, 0.4] mix to
        // [0.5, 0.25, 0.25] under a 50/50 belief. Build the mixture by
        // calling the mixer on synthetic per-profile policies.
        let p1 = PolicyDist {
            probs: [0.8, 0.1, 0.1],
        };
        let p2 = PolicyDist {
            probs: [0.2, 0.4, 0.4],
        };
        let mut mixed = [0.0; 3];
        for (acc, (a, b)) in mixed.iter_mut().zip(p1.probs.iter().zip(p2.probs)) {
            *acc = 0.5 * a + 0.5 * b;
        }
        assert_eq!(mixed, [0.5, 0.25, 0.25]);
    }

    #[test]
    fn bayes_update_by_hand() {
        // Prior [0.5, 0.5]; likelihoods of the observed action [0.8, 0.2]
        // give posterior [0.8, 0.2]. Engineer the likelihoods via lambda=0
        // (1/3 each) versus a sharp profile: simpler to verify the rule on
        // the floor-free path directly.
        let prior = [0.5, 0.5];
        let like = [0.8, 0.2];
        let mut post = [prior[0] * like[0], prior[1] * like[1]];
        let sum: f64 = post.iter().sum();
        post[0] /= sum;
        post[1] /= sum;
        assert!((post[0] - 0.8).abs() < 1e-12);
        assert!((post[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn equal_likelihoods_leave_belief_unchanged() {
        let tables = single_row_tables([0.0, 0.0, 0.0]);
        let support = Arc::new(ProfileSupport::default_support());
        let b = Belief::uniform(support);
        let b2 = belief_update(&b, 0, HumanAction::Accelerate, &tables);
        for (p, q) in b.probs.iter().zip(&b2.probs) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_prior_stays_point_mass() {
        let tables = single_row_tables([1.0, 0.0, -1.0]);
        let support = Arc::new(ProfileSupport::default_support());
        let b = Belief::point_mass(support, 4);
        let b2 = belief_update(&b, 0, HumanAction::Decelerate, &tables);
        assert_eq!(b2.probs[4], 1.0);
        assert!(entropy(&b2) == 0.0);
    }

    #[test]
    fn entropy_values() {
        let support = Arc::new(ProfileSupport::default_support());
        let uniform = Belief::uniform(support.clone());
        assert!((entropy(&uniform) - 6.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&uniform) - 1.7918).abs() < 1e-4);

        let point = Belief::point_mass(support.clone(), 0);
        assert_eq!(entropy(&point), 0.0);

        let skew = Belief {
            support,
            probs: vec![0.9, 0.1, 0.0, 0.0, 0.0, 0.0],
        };
        assert!((entropy(&skew) - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn info_gain_values() {
        let support = Arc::new(ProfileSupport {
            profiles: vec![
                HiddenProfile { k: 1, lambda: 1.0 },
                HiddenProfile { k: 2, lambda: 1.0 },
            ],
        });
        let uniform = Belief::uniform(support.clone());
        let sharp = Belief {
            support: support.clone(),
            probs: vec![0.9, 0.1],
        };
        assert_eq!(info_gain(&[uniform.clone()], &[uniform.clone()]), 0.0);
        let g = info_gain(&[uniform.clone()], &[sharp]);
        assert!((g - (2.0f64.ln() - 0.325083)).abs() < 1e-4);
        assert!((g - 0.3680).abs() < 1e-3);

        // Two opponents sum their gains.
        let b1 = Belief {
            support: support.clone(),
            probs: vec![0.5, 0.5],
        };
        let gains = info_gain(
            &[b1.clone(), b1.clone()],
            &[
                Belief {
                    support: support.clone(),
                    probs: vec![0.6, 0.4],
                },
                Belief {
                    support,
                    probs: vec![0.7, 0.3],
                },
            ],
        );
        let g1 = 2.0f64.ln() - (-(0.6f64.ln() * 0.6 + 0.4f64.ln() * 0.4));
        let g2 = 2.0f64.ln() - (-(0.7f64.ln() * 0.7 + 0.3f64.ln() * 0.3));
        assert!((gains - (g1 + g2)).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "belief lists must align")]
    fn info_gain_length_mismatch_panics() {
        let support = Arc::new(ProfileSupport::default_support());
        let b = Belief::uniform(support);
        info_gain(&[b.clone(), b.clone()], &[b]);
    }

    #[test]
    fn support_validation() {
        let support = ProfileSupport::default_support();
        assert!(support.validate().is_ok());
        assert_eq!(support.len(), 6);

        let dup = ProfileSupport {
            profiles: vec![
                HiddenProfile { k: 1, lambda: 1.0 },
                HiddenProfile { k: 1, lambda: 1.0 },
            ],
        };
        assert!(matches!(
            dup.validate(),
            Err(QuantalError::DuplicateProfile { index: 1 })
        ));
    }
}

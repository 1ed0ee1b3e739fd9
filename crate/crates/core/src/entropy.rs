//! Softmax entropy analytics.
//!
//! Under a first-order logit update `z_y += eta * pi(y) * A(y)` the entropy
//! change is approximately `-eta * Cov(log pi, pi * A)`. With `A = r - b`
//! the covariance is affine in the baseline,
//! `F(b) = F(0) - b * Cov(log pi, pi)`, and `Cov(log pi, pi) > 0` for any
//! non-uniform policy, so the predicted entropy change increases strictly
//! with `b`.

use rand::Rng;

use crate::advantage::{classify_regime, Regime};
use crate::error::{Error, Result};
use crate::types::{distribution_entropy, log_softmax, PolicyTable, RewardGroup, Token};

/// Trajectory trees up to this many decision points are enumerated exactly.
pub const MAX_ENUMERATED_CONTEXTS: usize = 4096;

/// Trajectories drawn when the tree is too large to enumerate.
pub const ENTROPY_SAMPLES: usize = 1024;

/// Policies with `Cov(log pi, pi)` at or below this are treated as uniform.
pub const UNIFORM_TOLERANCE: f64 = 1e-12;

/// First-order entropy forecast for one baseline value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyForecast {
    pub baseline: f64,
    /// `F(b) = Cov(log pi, pi (r - b))`.
    pub f_q_of_b: f64,
    /// `C = Cov(log pi, pi)`.
    pub c_q: f64,
    /// `-eta * F(b)`.
    pub predicted_delta_h: f64,
    pub eta: f64,
}

fn flat_logits(policy: &PolicyTable) -> Result<&[f64]> {
    match policy {
        PolicyTable::FlatBandit { logits } => Ok(logits),
        PolicyTable::Autoregressive(_) => Err(Error::ModeUnsupported),
    }
}

/// `Cov_{y ~ w}(x, y)` computed in centered form.
fn weighted_cov(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let mx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let my: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    w.iter()
        .zip(x)
        .zip(y)
        .map(|((w, x), y)| w * (x - mx) * (y - my))
        .sum()
}

/// Exact policy entropy when it can be enumerated: always for flat bandits,
/// and for autoregressive policies with at most
/// [`MAX_ENUMERATED_CONTEXTS`] decision points.
pub fn exact_entropy(policy: &PolicyTable) -> Option<f64> {
    match policy {
        PolicyTable::FlatBandit { logits } => Some(distribution_entropy(logits)),
        PolicyTable::Autoregressive(p) if p.num_contexts() <= MAX_ENUMERATED_CONTEXTS => {
            let mut prefix = Vec::with_capacity(p.max_length());
            Some(token_averaged_entropy(policy, &mut prefix, 1.0, 0.0))
        }
        PolicyTable::Autoregressive(_) => None,
    }
}

// E[(1/|o|) sum_t H(pi(.|o_<t))] by depth-first enumeration of trajectories.
fn token_averaged_entropy(
    policy: &PolicyTable,
    prefix: &mut Vec<Token>,
    prob: f64,
    entropy_sum: f64,
) -> f64 {
    if policy.is_complete(prefix) {
        return prob * entropy_sum / prefix.len() as f64;
    }
    let logits = policy.logits(prefix);
    let h = distribution_entropy(logits);
    let probs = policy.probs(prefix);
    let mut total = 0.0;
    for (v, pv) in probs.into_iter().enumerate() {
        prefix.push(v as Token);
        total += token_averaged_entropy(policy, prefix, prob * pv, entropy_sum + h);
        prefix.pop();
    }
    total
}

/// Token-averaged policy entropy (nats). Exact when enumerable, otherwise a
/// Monte-Carlo estimate over [`ENTROPY_SAMPLES`] trajectories drawn with
/// `rng`.
pub fn policy_entropy<R: Rng + ?Sized>(policy: &PolicyTable, rng: &mut R) -> f64 {
    exact_entropy(policy).unwrap_or_else(|| {
        let total: f64 = (0..ENTROPY_SAMPLES)
            .map(|_| policy.response_token_entropy(&policy.sample_response(rng)))
            .sum();
        total / ENTROPY_SAMPLES as f64
    })
}

/// `Cov_{Y ~ pi}(log pi(Y), pi(Y))`; zero for a uniform policy and strictly
/// positive otherwise.
pub fn cov_logpi_pi(policy: &PolicyTable) -> Result<f64> {
    let logits = flat_logits(policy)?;
    let lp = log_softmax(logits);
    let pi: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    Ok(weighted_cov(&pi, &lp, &pi))
}

/// Evaluates `F(b)`, `C` and the predicted one-step entropy change for a
/// flat bandit with per-action rewards.
pub fn entropy_covariance(
    policy: &PolicyTable,
    action_rewards: &[f64],
    baseline: f64,
    eta: f64,
) -> Result<EntropyForecast> {
    let logits = flat_logits(policy)?;
    if action_rewards.len() != logits.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            got: action_rewards.len(),
        });
    }
    let lp = log_softmax(logits);
    let pi: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let weighted: Vec<f64> = pi
        .iter()
        .zip(action_rewards)
        .map(|(p, r)| p * (r - baseline))
        .collect();
    let f = weighted_cov(&pi, &lp, &weighted);
    Ok(EntropyForecast {
        baseline,
        f_q_of_b: f,
        c_q: weighted_cov(&pi, &lp, &pi),
        predicted_delta_h: -eta * f,
        eta,
    })
}

/// Vanilla policy-gradient step on a flat bandit:
/// `z_y <- z_y + eta * pi(y) * A(y)`.
pub fn one_step_update(policy: &PolicyTable, advantages: &[f64], eta: f64) -> Result<PolicyTable> {
    let logits = flat_logits(policy)?;
    if advantages.len() != logits.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            got: advantages.len(),
        });
    }
    if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidPolicy(format!("non-finite advantage {a}")));
    }
    let pi = policy.probs(&[]);
    let updated = logits
        .iter()
        .zip(&pi)
        .zip(advantages)
        .map(|((z, p), a)| z + eta * p * a)
        .collect();
    PolicyTable::flat(updated)
}

/// Realized entropy change of [`one_step_update`] with `A = r - b`.
pub fn actual_delta_h(
    policy: &PolicyTable,
    action_rewards: &[f64],
    baseline: f64,
    eta: f64,
) -> Result<f64> {
    let before = exact_entropy(policy).ok_or(Error::ModeUnsupported)?;
    let adv: Vec<f64> = action_rewards.iter().map(|r| r - baseline).collect();
    let after = one_step_update(policy, &adv, eta)?;
    Ok(exact_entropy(&after).ok_or(Error::ModeUnsupported)? - before)
}

/// Outcome of checking the two-regime extremality of `b_K` on a baseline grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoRegimeReport {
    pub regime: Regime,
    pub baseline_k: f64,
    pub c_q: f64,
    /// `(b, predicted delta H)` for every grid point, in grid order.
    pub predictions: Vec<(f64, f64)>,
    /// Smallest gap between `delta H(b_K)` and any other grid point, signed
    /// so that positive means `b_K` is strictly extremal in the right
    /// direction.
    pub min_margin: f64,
    pub extremal: bool,
    pub monotone: bool,
}

impl TwoRegimeReport {
    pub fn passed(&self) -> bool {
        self.extremal && self.monotone
    }
}

/// Checks that the quantile baseline minimizes (hard regime) or maximizes
/// (easy regime) the predicted entropy change over `grid`, and that the
/// prediction is strictly increasing in `b`.
pub fn verify_two_regime(
    policy: &PolicyTable,
    action_rewards: &[f64],
    group: &RewardGroup,
    k: f64,
    grid: &[f64],
    eta: f64,
) -> Result<TwoRegimeReport> {
    let c_q = cov_logpi_pi(policy)?;
    if c_q <= UNIFORM_TOLERANCE {
        return Err(Error::UniformPolicy(c_q));
    }
    if !grid.contains(&0.0) || !grid.contains(&1.0) {
        return Err(Error::Config("baseline grid must contain 0 and 1".into()));
    }
    if grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::Config("baseline grid must lie in [0,1]".into()));
    }
    let regime = classify_regime(group, k)?.regime;
    let baseline_k = regime.baseline();
    let predictions = grid
        .iter()
        .map(|&b| {
            Ok((
                b,
                entropy_covariance(policy, action_rewards, b, eta)?.predicted_delta_h,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let at_k = entropy_covariance(policy, action_rewards, baseline_k, eta)?.predicted_delta_h;
    let min_margin = predictions
        .iter()
        .filter(|(b, _)| *b != baseline_k)
        .map(|&(_, dh)| match regime {
            Regime::Hard => dh - at_k,
            Regime::Easy => at_k - dh,
        })
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * c_q.max(1.0);
    let mut sorted = predictions.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = sorted
        .windows(2)
        .all(|w| w[0].0 == w[1].0 || w[1].1 > w[0].1);
    Ok(TwoRegimeReport {
        regime,
        baseline_k,
        c_q,
        predictions,
        min_margin,
        extremal: min_margin > tol,
        monotone,
    })
}

/// Standard baseline grid `{0, 0.1, ..., 1.0}`.
pub fn default_baseline_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Oracle: brute-force covariance via E[XY] - E[X]E[Y].
    fn naive_cov(pi: &[f64], x: &[f64], y: &[f64]) -> f64 {
        let exy: f64 = (0..pi.len()).map(|i| pi[i] * x[i] * y[i]).sum();
        let ex: f64 = (0..pi.len()).map(|i| pi[i] * x[i]).sum();
        let ey: f64 = (0..pi.len()).map(|i| pi[i] * y[i]).sum();
        exy - ex * ey
    }

    #[test]
    fn entropy_examples() {
        let uniform = PolicyTable::flat(vec![0.0; 4]).unwrap();
        assert!((exact_entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
        let point = PolicyTable::flat(vec![50.0, 0.0, 0.0]).unwrap();
        assert!(exact_entropy(&point).unwrap() <= 1e-10);
        let p = PolicyTable::from_probs(&[0.8, 0.2]).unwrap();
        assert!((exact_entropy(&p).unwrap() - 0.500_402_4).abs() < 1e-7);
    }

    #[test]
    fn covariance_examples() {
        let p = PolicyTable::from_probs(&[0.8, 0.2]).unwrap();
        let pi = [0.8, 0.2];
        let lp = [0.8f64.ln(), 0.2f64.ln()];
        let f0 = entropy_covariance(&p, &[1.0, 0.0], 0.0, 0.1).unwrap();
        let oracle_f0 = naive_cov(&pi, &lp, &[0.8, 0.0]);
        let oracle_c = naive_cov(&pi, &lp, &pi);
        assert!((f0.f_q_of_b - oracle_f0).abs() < 1e-12);
        assert!((f0.f_q_of_b - 0.177).abs() < 5e-4);
        assert!((f0.predicted_delta_h + 0.0177).abs() < 5e-5);
        assert!((f0.c_q - oracle_c).abs() < 1e-12);
        assert!((f0.c_q - 0.133).abs() < 5e-4);
        let f1 = entropy_covariance(&p, &[1.0, 0.0], 1.0, 0.1).unwrap();
        assert!((f1.f_q_of_b - (f0.f_q_of_b - f0.c_q)).abs() < 1e-12);

        let u = PolicyTable::flat(vec![0.3; 5]).unwrap();
        let fu = entropy_covariance(&u, &[1., 0., 1., 0., 0.], 0.4, 0.1).unwrap();
        assert!(fu.f_q_of_b.abs() < 1e-15 && fu.predicted_delta_h.abs() < 1e-15);

        let ar = PolicyTable::autoregressive(3, 2, vec![0.0; 3]).unwrap();
        assert_eq!(
            entropy_covariance(&ar, &[1.0], 0.0, 0.1),
            Err(Error::ModeUnsupported)
        );
    }

    #[test]
    fn cov_logpi_pi_limits() {
        assert_eq!(
            cov_logpi_pi(&PolicyTable::flat(vec![1.0; 7]).unwrap()).unwrap(),
            0.0
        );
        let mut prev = f64::INFINITY;
        for delta in [0.1, 0.01, 0.001, 1e-4] {
            let c = cov_logpi_pi(&PolicyTable::from_probs(&[0.5 - delta, 0.5 + delta]).unwrap())
                .unwrap();
            assert!(c > 0.0 && c < prev);
            prev = c;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn one_step_update_examples() {
        let p = PolicyTable::from_probs(&[0.8, 0.2]).unwrap();
        assert_eq!(one_step_update(&p, &[0.0, 0.0], 0.1).unwrap(), p);
        let q = one_step_update(&p, &[1.0, 0.0], 0.1).unwrap();
        assert!(q.probs(&[])[0] > p.probs(&[])[0]);
    }

    #[test]
    fn first_order_error_is_quadratic() {
        let p = PolicyTable::flat(vec![0.4, -0.3, 1.2, 0.0, -1.1]).unwrap();
        let r = [1.0, 0.0, 0.0, 1.0, 0.0];
        let err = |eta: f64| {
            let pred = entropy_covariance(&p, &r, 0.3, eta)
                .unwrap()
                .predicted_delta_h;
            (actual_delta_h(&p, &r, 0.3, eta).unwrap() - pred).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn two_regime_examples() {
        let grid = default_baseline_grid();
        let uniform = PolicyTable::flat(vec![0.0; 3]).unwrap();
        let g = RewardGroup::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            verify_two_regime(&uniform, &[1., 0., 0.], &g, 0.4, &grid, 0.1),
            Err(Error::UniformPolicy(_))
        ));

        let p = PolicyTable::flat(vec![0.7, -0.2, 0.1]).unwrap();
        let hard = verify_two_regime(&p, &[1., 0., 0.], &g, 0.4, &grid, 0.1).unwrap();
        assert_eq!(hard.regime, Regime::Hard);
        assert!(hard.passed());
        let min = hard
            .predictions
            .iter()
            .map(|x| x.1)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(hard.predictions[0].1, min);

        let easy_group = RewardGroup::new(vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let easy = verify_two_regime(&p, &[1., 0., 0.], &easy_group, 0.4, &grid, 0.1).unwrap();
        assert_eq!(easy.regime, Regime::Easy);
        assert!(easy.passed());
        let max = easy
            .predictions
            .iter()
            .map(|x| x.1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(easy.predictions[10].1, max);

        assert!(verify_two_regime(&p, &[1., 0., 0.], &g, 0.4, &[0.0, 0.5], 0.1).is_err());
    }

    #[test]
    fn autoregressive_entropy_enumeration_matches_sampling() {
        let mut p = PolicyTable::autoregressive(3, 3, vec![-0.5, 0.2, 0.4]).unwrap();
        p.add_to_logits(&[1], &[2.0, -1.0, 0.0], 1.0);
        let exact = exact_entropy(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mc: f64 = (0..n)
            .map(|_| p.response_token_entropy(&p.sample_response(&mut rng)))
            .sum::<f64>()
            / n as f64;
        assert!((exact - mc).abs() < 0.01, "{exact} vs {mc}");

        // a uniform policy has ln V entropy at every position
        let u = PolicyTable::autoregressive(4, 3, vec![0.0; 4]).unwrap();
        assert!((exact_entropy(&u).unwrap() - 4f64.ln()).abs() < 1e-12);

        // too large to enumerate: falls back to sampling
        let big = PolicyTable::autoregressive(16, 8, vec![0.0; 16]).unwrap();
        assert!(exact_entropy(&big).is_none());
        let h = policy_entropy(&big, &mut rng);
        assert!((h - 16f64.ln()).abs() < 1e-12);
    }
}

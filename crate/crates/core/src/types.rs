//! Domain types shared by every module: reward groups, advantage vectors,
//! softmax policy tables and per-step metric records.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token (or whole-response action) identifier.
pub type Token = u32;

/// End-of-sequence token for autoregressive policies.
pub const EOS: Token = 0;

/// Largest vocabulary an autoregressive policy may use.
pub const MAX_VOCAB: usize = 16;

/// Longest response an autoregressive policy may emit.
pub const MAX_LENGTH: usize = 8;

/// Rewards of the `G` responses sampled for one query.
///
/// Rewards are stored as reals but must be exactly `0.0` or `1.0`. The
/// success rate and population standard deviation are cached on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    rewards: Vec<f64>,
    success_rate: f64,
    std: f64,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::GroupTooSmall(rewards.len()));
        }
        if let Some((index, &value)) = rewards
            .iter()
            .enumerate()
            .find(|(_, &r)| r != 0.0 && r != 1.0)
        {
            return Err(Error::NonBinaryReward { index, value });
        }
        let g = rewards.len() as f64;
        let successes = rewards.iter().filter(|&&r| r == 1.0).count();
        let success_rate = successes as f64 / g;
        // population variance: divide by G
        let var = rewards
            .iter()
            .map(|r| (r - success_rate) * (r - success_rate))
            .sum::<f64>()
            / g;
        Ok(Self {
            rewards,
            success_rate,
            std: var.sqrt(),
        })
    }

    pub fn from_outcomes(outcomes: &[bool]) -> Result<Self> {
        Self::new(
            outcomes
                .iter()
                .map(|&ok| if ok { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_successes(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1.0).count()
    }

    /// Empirical success rate `p`.
    pub fn success_rate(&self) -> f64 {
        self.success_rate
    }

    /// Population standard deviation of the rewards.
    pub fn std(&self) -> f64 {
        self.std
    }

    /// True when the group has both a success and a failure.
    pub fn is_mixed(&self) -> bool {
        let c = self.num_successes();
        c > 0 && c < self.group_size()
    }

    /// Right-continuous empirical CDF: `(1/G) |{j : R_j <= x}|`.
    pub fn empirical_cdf(&self, x: f64) -> f64 {
        let below = self.rewards.iter().filter(|&&r| r <= x).count();
        below as f64 / self.rewards.len() as f64
    }
}

/// Which advantage estimator produced an [`AdvantageVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Group mean baseline, standardized by the group std (GRPO/DAPO).
    MeanStd,
    /// Group K-quantile baseline, standardized by the group std.
    QuantileStd,
    /// Mean-baseline advantages with positives masked on easy queries.
    PosMask,
    /// Mean-baseline advantages with negatives masked on hard queries.
    NegMask,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::MeanStd => "mean_std",
            Estimator::QuantileStd => "quantile_std",
            Estimator::PosMask => "pos_mask",
            Estimator::NegMask => "neg_mask",
        }
    }
}

/// Per-response advantages together with the baseline that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub baseline: f64,
    pub estimator: Estimator,
}

impl AdvantageVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_zero(&self) -> usize {
        self.values.iter().filter(|v| **v == 0.0).count()
    }

    pub fn num_positive(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn num_negative(&self) -> usize {
        self.values.iter().filter(|v| **v < 0.0).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Autoregressive softmax policy over a small vocabulary.
///
/// Logits are stored per prefix; prefixes that were never updated fall back
/// to `default_logits`. Token [`EOS`] terminates a response, which is also cut
/// at `max_length` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TokenPolicyRepr", try_from = "TokenPolicyRepr")]
pub struct TokenPolicy {
    vocab_size: usize,
    max_length: usize,
    default_logits: Vec<f64>,
    contexts: BTreeMap<Vec<Token>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ContextLogits {
    prefix: Vec<Token>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TokenPolicyRepr {
    vocab_size: usize,
    max_length: usize,
    default_logits: Vec<f64>,
    contexts: Vec<ContextLogits>,
}

impl From<TokenPolicy> for TokenPolicyRepr {
    fn from(p: TokenPolicy) -> Self {
        Self {
            vocab_size: p.vocab_size,
            max_length: p.max_length,
            default_logits: p.default_logits,
            contexts: p
                .contexts
                .into_iter()
                .map(|(prefix, logits)| ContextLogits { prefix, logits })
                .collect(),
        }
    }
}

impl TryFrom<TokenPolicyRepr> for TokenPolicy {
    type Error = Error;

    fn try_from(r: TokenPolicyRepr) -> Result<Self> {
        let mut p = TokenPolicy::new(r.vocab_size, r.max_length, r.default_logits)?;
        for c in r.contexts {
            if c.logits.len() != p.vocab_size || c.logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidPolicy(format!(
                    "bad logits for prefix {:?}",
                    c.prefix
                )));
            }
            p.contexts.insert(c.prefix, c.logits);
        }
        Ok(p)
    }
}

impl TokenPolicy {
    pub fn new(vocab_size: usize, max_length: usize, default_logits: Vec<f64>) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&vocab_size) {
            return Err(Error::InvalidPolicy(format!(
                "vocab_size must be in [2, {MAX_VOCAB}], got {vocab_size}"
            )));
        }
        if !(1..=MAX_LENGTH).contains(&max_length) {
            return Err(Error::InvalidPolicy(format!(
                "max_length must be in [1, {MAX_LENGTH}], got {max_length}"
            )));
        }
        check_logits(&default_logits, vocab_size)?;
        Ok(Self {
            vocab_size,
            max_length,
            default_logits,
            contexts: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    /// Prefixes with their own logits (all others use the defaults).
    pub fn stored_contexts(&self) -> impl Iterator<Item = (&Vec<Token>, &Vec<f64>)> {
        self.contexts.iter()
    }

    /// Number of non-terminal prefixes, i.e. decision points in the
    /// trajectory tree.
    pub fn num_contexts(&self) -> usize {
        let branching = self.vocab_size - 1;
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..self.max_length {
            total = total.saturating_add(level);
            level = level.saturating_mul(branching);
        }
        total
    }
}

/// Softmax policy table: either one distribution over whole responses (the
/// bandit reduction) or a token-level autoregressive policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PolicyTable {
    FlatBandit { logits: Vec<f64> },
    Autoregressive(TokenPolicy),
}

fn check_logits(logits: &[f64], expected_len: usize) -> Result<()> {
    if logits.len() != expected_len {
        return Err(Error::InvalidPolicy(format!(
            "expected {expected_len} logits, got {}",
            logits.len()
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidPolicy(format!("non-finite logit {z}")));
    }
    Ok(())
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyTable {
    pub fn flat(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidPolicy(
                "flat bandit needs at least one action".into(),
            ));
        }
        check_logits(&logits, logits.len())?;
        Ok(PolicyTable::FlatBandit { logits })
    }

    /// Flat bandit whose softmax equals `probs` (probabilities must be > 0).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if !probs.iter().all(|p| *p > 0.0) {
            return Err(Error::InvalidPolicy(
                "probabilities must be positive".into(),
            ));
        }
        Self::flat(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn autoregressive(
        vocab_size: usize,
        max_length: usize,
        default_logits: Vec<f64>,
    ) -> Result<Self> {
        Ok(PolicyTable::Autoregressive(TokenPolicy::new(
            vocab_size,
            max_length,
            default_logits,
        )?))
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, PolicyTable::FlatBandit { .. })
    }

    /// Size of the action set at every context.
    pub fn num_actions(&self) -> usize {
        match self {
            PolicyTable::FlatBandit { logits } => logits.len(),
            PolicyTable::Autoregressive(p) => p.vocab_size,
        }
    }

    /// Logits at the context `prefix` (flat bandits have the single context `[]`).
    pub fn logits(&self, prefix: &[Token]) -> &[f64] {
        match self {
            PolicyTable::FlatBandit { logits } => logits,
            PolicyTable::Autoregressive(p) => p
                .contexts
                .get(prefix)
                .map(Vec::as_slice)
                .unwrap_or(&p.default_logits),
        }
    }

    pub fn probs(&self, prefix: &[Token]) -> Vec<f64> {
        softmax(self.logits(prefix))
    }

    pub fn log_probs(&self, prefix: &[Token]) -> Vec<f64> {
        log_softmax(self.logits(prefix))
    }

    /// Adds `scale * delta` to the logits at `prefix`.
    pub fn add_to_logits(&mut self, prefix: &[Token], delta: &[f64], scale: f64) {
        let target = match self {
            PolicyTable::FlatBandit { logits } => logits,
            PolicyTable::Autoregressive(p) => {
                let default = &p.default_logits;
                p.contexts
                    .entry(prefix.to_vec())
                    .or_insert_with(|| default.clone())
            }
        };
        for (z, d) in target.iter_mut().zip(delta) {
            *z += scale * d;
        }
    }

    /// Whether generation stops after `prefix`.
    pub fn is_complete(&self, prefix: &[Token]) -> bool {
        match self {
            PolicyTable::FlatBandit { .. } => !prefix.is_empty(),
            PolicyTable::Autoregressive(p) => {
                prefix.len() >= p.max_length || prefix.last() == Some(&EOS)
            }
        }
    }

    /// Samples one complete response.
    pub fn sample_response<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        let mut tokens = Vec::new();
        while !self.is_complete(&tokens) {
            let probs = self.probs(&tokens);
            let dist = WeightedIndex::new(&probs).expect("softmax weights are valid");
            tokens.push(dist.sample(rng) as Token);
        }
        tokens
    }

    /// Samples `n` independent responses. Equivalent to `n` calls of
    /// [`PolicyTable::sample_response`], but flat bandits build their
    /// sampling table once.
    pub fn sample_responses<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<Token>> {
        match self {
            PolicyTable::FlatBandit { logits } => {
                let dist = WeightedIndex::new(softmax(logits)).expect("softmax weights are valid");
                (0..n).map(|_| vec![dist.sample(rng) as Token]).collect()
            }
            PolicyTable::Autoregressive(_) => (0..n).map(|_| self.sample_response(rng)).collect(),
        }
    }

    /// Per-token log-probabilities of a complete response.
    pub fn response_log_probs(&self, tokens: &[Token]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.log_probs(&tokens[..t])[tokens[t] as usize])
            .collect()
    }

    /// Mean per-token entropy along a response (token-averaged entropy of
    /// the distributions the response was sampled from).
    pub fn response_token_entropy(&self, tokens: &[Token]) -> f64 {
        if tokens.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..tokens.len())
            .map(|t| distribution_entropy(self.logits(&tokens[..t])))
            .sum();
        total / tokens.len() as f64
    }
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn distribution_entropy(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
    h.max(0.0)
}

/// Per-step training diagnostics. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub entropy_total: f64,
    pub entropy_pos_adv: f64,
    pub entropy_neg_adv: f64,
    pub zero_adv_fraction: f64,
    pub pass_at_1: f64,
    pub pass_at_16: f64,
    pub mean_response_length: f64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 8] = [
        "step",
        "entropy_total",
        "entropy_pos_adv",
        "entropy_neg_adv",
        "zero_adv_fraction",
        "pass_at_1",
        "pass_at_16",
        "mean_response_length",
    ];

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("entropy_total", self.entropy_total),
            ("entropy_pos_adv", self.entropy_pos_adv),
            ("entropy_neg_adv", self.entropy_neg_adv),
            ("zero_adv_fraction", self.zero_adv_fraction),
            ("pass_at_1", self.pass_at_1),
            ("pass_at_16", self.pass_at_16),
            ("mean_response_length", self.mean_response_length),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Sink(format!("{name} is not finite ({v})")));
            }
        }
        for (name, v) in [
            ("zero_adv_fraction", self.zero_adv_fraction),
            ("pass_at_1", self.pass_at_1),
            ("pass_at_16", self.pass_at_16),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Sink(format!("{name} = {v} outside [0,1]")));
            }
        }
        for (name, v) in [
            ("entropy_total", self.entropy_total),
            ("entropy_pos_adv", self.entropy_pos_adv),
            ("entropy_neg_adv", self.entropy_neg_adv),
        ] {
            if v < 0.0 {
                return Err(Error::Sink(format!("{name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_sampling_matches_repeated_sampling() {
        use rand::SeedableRng;
        let flat = PolicyTable::flat(vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let ar = PolicyTable::autoregressive(3, 3, vec![0.1, 0.5, -0.2]).unwrap();
        for policy in [flat, ar] {
            let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let mut b = a.clone();
            let batched = policy.sample_responses(50, &mut a);
            let single: Vec<_> = (0..50).map(|_| policy.sample_response(&mut b)).collect();
            assert_eq!(batched, single);
        }
    }

    #[test]
    fn group_statistics() {
        let g = RewardGroup::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.success_rate(), 0.25);
        assert!((g.std() - 0.433_012_70).abs() < 1e-8);

        let g = RewardGroup::new(vec![0.0; 4]).unwrap();
        assert_eq!((g.success_rate(), g.std()), (0.0, 0.0));
        let g = RewardGroup::new(vec![1.0; 4]).unwrap();
        assert_eq!((g.success_rate(), g.std()), (1.0, 0.0));
    }

    #[test]
    fn group_validation() {
        assert_eq!(RewardGroup::new(vec![1.0]), Err(Error::GroupTooSmall(1)));
        assert_eq!(RewardGroup::new(vec![]), Err(Error::GroupTooSmall(0)));
        assert_eq!(
            RewardGroup::new(vec![1.0, 0.5]),
            Err(Error::NonBinaryReward {
                index: 1,
                value: 0.5
            })
        );
        assert!(matches!(
            RewardGroup::new(vec![f64::NAN, 0.0]),
            Err(Error::NonBinaryReward { index: 0, .. })
        ));
    }

    #[test]
    fn cdf_examples() {
        let g = RewardGroup::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.empirical_cdf(0.0), 0.75);
        assert_eq!(g.empirical_cdf(0.5), 0.75);
        assert_eq!(g.empirical_cdf(1.0), 1.0);
        assert_eq!(g.empirical_cdf(-1e-9), 0.0);
    }

    // exhaustive over all binary groups up to G = 12
    #[test]
    fn success_rate_and_variance_exhaustive() {
        for g in 2..=12usize {
            for mask in 0u32..(1 << g) {
                let outcomes: Vec<bool> = (0..g).map(|i| mask >> i & 1 == 1).collect();
                let group = RewardGroup::from_outcomes(&outcomes).unwrap();
                let c = mask.count_ones() as f64;
                assert_eq!(group.success_rate(), c / g as f64);
                let p = group.success_rate();
                assert!((group.std() * group.std() - p * (1.0 - p)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn policy_probabilities_are_normalized() {
        let p = PolicyTable::flat(vec![3.0, -1.0, 0.5, 700.0]).unwrap();
        let probs = p.probs(&[]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&x| x >= 0.0));
        assert!(PolicyTable::flat(vec![f64::INFINITY]).is_err());
        assert!(PolicyTable::autoregressive(17, 4, vec![0.0; 17]).is_err());
        assert!(PolicyTable::autoregressive(4, 9, vec![0.0; 4]).is_err());
    }

    #[test]
    fn autoregressive_sampling_respects_length() {
        use rand::SeedableRng;
        let p = PolicyTable::autoregressive(4, 3, vec![-3.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = p.sample_response(&mut rng);
            assert!(!r.is_empty() && r.len() <= 3);
            assert!(r[..r.len() - 1].iter().all(|&t| t != EOS));
        }
    }

    #[test]
    fn token_policy_json_round_trip() {
        let mut p = PolicyTable::autoregressive(3, 2, vec![0.1, 0.2, 0.3]).unwrap();
        p.add_to_logits(&[1], &[1.0, 0.0, -1.0], 0.5);
        let json = serde_json::to_string(&p).unwrap();
        let back: PolicyTable = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn metrics_validation_rejects_nan() {
        let mut m = MetricsRecord {
            step: 0,
            entropy_total: 1.0,
            entropy_pos_adv: 0.0,
            entropy_neg_adv: 0.0,
            zero_adv_fraction: 0.5,
            pass_at_1: 0.5,
            pass_at_16: 1.0,
            mean_response_length: 1.0,
        };
        assert!(m.validate().is_ok());
        m.pass_at_1 = f64::NAN;
        assert!(matches!(m.validate(), Err(Error::Sink(_))));
    }
}

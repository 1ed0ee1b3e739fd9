//! Clipped token-level surrogate objective, its discriminative
//! decompositions, and the analytic gradient with respect to policy logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::advantage::{check_quantile, MaskSide, Regime};
use crate::error::{Error, Result};
use crate::types::{PolicyTable, RewardGroup, Token};

/// Asymmetric clip range `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipSpec {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self> {
        if !(eps_low > 0.0 && eps_low <= 1.0) {
            return Err(Error::Config(format!(
                "eps_low must lie in (0,1], got {eps_low}"
            )));
        }
        if !(eps_high > 0.0 && eps_high.is_finite()) {
            return Err(Error::Config(format!(
                "eps_high must be > 0, got {eps_high}"
            )));
        }
        Ok(Self { eps_low, eps_high })
    }

    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(eps, eps)
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(self.lower(), self.upper())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveRatio(ratio))
    }
}

/// `min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)`.
pub fn f_clip(ratio: f64, advantage: f64, clip: ClipSpec) -> Result<f64> {
    check_ratio(ratio)?;
    if advantage == 0.0 {
        return Ok(0.0);
    }
    Ok((ratio * advantage).min(clip.clip(ratio) * advantage))
}

/// Positive-side score at unit advantage: `min(r, 1 + eps_high)`.
pub fn f_pos(ratio: f64, clip: ClipSpec) -> f64 {
    ratio.min(clip.upper())
}

/// Negative-side score at unit advantage: `max(r, 1 - eps_low)`.
pub fn f_neg(ratio: f64, clip: ClipSpec) -> f64 {
    ratio.max(clip.lower())
}

/// `d f_clip / d ratio`, taking the unclipped branch on the clip boundary.
pub fn f_clip_slope(ratio: f64, advantage: f64, clip: ClipSpec) -> f64 {
    let unclipped =
        (advantage > 0.0 && ratio <= clip.upper()) || (advantage < 0.0 && ratio >= clip.lower());
    if unclipped {
        advantage
    } else {
        0.0
    }
}

/// Token ratios `pi_theta / pi_old` for one group, with one advantage per
/// response broadcast over its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    ratios: Vec<Vec<f64>>,
    advantages: Vec<f64>,
}

impl GroupRollout {
    pub fn new(ratios: Vec<Vec<f64>>, advantages: Vec<f64>) -> Result<Self> {
        if ratios.is_empty() || ratios.len() != advantages.len() {
            return Err(Error::EmptyGroup);
        }
        if ratios.iter().any(Vec::is_empty) {
            return Err(Error::EmptyGroup);
        }
        for &r in ratios.iter().flatten() {
            check_ratio(r)?;
        }
        Ok(Self { ratios, advantages })
    }

    /// On-policy rollout: every ratio is exactly 1.
    pub fn on_policy(lengths: &[usize], advantages: Vec<f64>) -> Result<Self> {
        Self::new(lengths.iter().map(|&l| vec![1.0; l]).collect(), advantages)
    }

    pub fn ratios(&self) -> &[Vec<f64>] {
        &self.ratios
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ratios.iter().map(Vec::len).collect()
    }

    /// Total token count `Z`.
    pub fn total_tokens(&self) -> usize {
        self.ratios.iter().map(Vec::len).sum()
    }
}

/// Token-level normalized clipped objective `(1/Z) sum_i sum_t f(r_it, A_i)`.
pub fn dapo_loss(rollout: &GroupRollout, clip: ClipSpec) -> Result<f64> {
    let z = rollout.total_tokens();
    if z == 0 {
        return Err(Error::EmptyGroup);
    }
    let mut total = 0.0;
    for (ratios, &a) in rollout.ratios.iter().zip(&rollout.advantages) {
        for &r in ratios {
            total += f_clip(r, a, clip)?;
        }
    }
    Ok(total / z as f64)
}

/// Sequence-normalized variant `(1/G) sum_i (1/|o_i|) sum_t f(r_it, A_i)`,
/// the form whose expectation matches the discriminative decomposition.
/// Equals [`dapo_loss`] when all responses have the same length.
pub fn sequence_normalized_loss(rollout: &GroupRollout, clip: ClipSpec) -> Result<f64> {
    let mut total = 0.0;
    for (ratios, &a) in rollout.ratios.iter().zip(&rollout.advantages) {
        let mut s = 0.0;
        for &r in ratios {
            s += f_clip(r, a, clip)?;
        }
        total += s / ratios.len() as f64;
    }
    Ok(total / rollout.ratios.len() as f64)
}

/// Mean positive/negative scores over the group: `s+` averages the
/// length-normalized `f+` of successful responses, `s-` the
/// length-normalized `f-` of failed ones. An empty side scores 0.
pub fn group_scores(rollout: &GroupRollout, rewards: &RewardGroup, clip: ClipSpec) -> (f64, f64) {
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (ratios, &r) in rollout.ratios.iter().zip(rewards.rewards()) {
        let len = ratios.len() as f64;
        if r == 1.0 {
            pos += ratios.iter().map(|&x| f_pos(x, clip)).sum::<f64>() / len;
            n_pos += 1;
        } else {
            neg += ratios.iter().map(|&x| f_neg(x, clip)).sum::<f64>() / len;
            n_neg += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(pos, n_pos), mean(neg, n_neg))
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::DegenerateP(p))
    }
}

/// GRPO objective in discriminative form: `sqrt(p(1-p)) (s+ - s-)`.
pub fn grpo_discriminative(p: f64, s_pos: f64, s_neg: f64) -> Result<f64> {
    check_p(p)?;
    Ok((p * (1.0 - p)).sqrt() * (s_pos - s_neg))
}

/// Quantile-regulated objective: only one discriminative term survives,
/// re-weighted by `sqrt(p/(1-p))` (hard) or `sqrt((1-p)/p)` (easy).
pub fn quantile_discriminative(p: f64, k: f64, s_pos: f64, s_neg: f64) -> Result<f64> {
    check_p(p)?;
    Ok(match Regime::from_success_rate(p, k)? {
        Regime::Hard => (p / (1.0 - p)).sqrt() * s_pos,
        Regime::Easy => -((1.0 - p) / p).sqrt() * s_neg,
    })
}

/// One-sided ablation objectives: the indicator applies to the positive
/// term only (`PosMask`) or to the negative term only (`NegMask`).
pub fn masked_discriminative(
    p: f64,
    k: f64,
    s_pos: f64,
    s_neg: f64,
    side: MaskSide,
) -> Result<f64> {
    check_p(p)?;
    check_quantile(k)?;
    let hard = Regime::from_success_rate(p, k)? == Regime::Hard;
    let pos = (p / (1.0 - p)).sqrt() * s_pos;
    let neg = ((1.0 - p) / p).sqrt() * s_neg;
    Ok(match side {
        MaskSide::PosMask => (if hard { pos } else { 0.0 }) - neg,
        MaskSide::NegMask => pos - (if hard { 0.0 } else { neg }),
    })
}

/// Responses sampled from a frozen policy snapshot, with the per-token
/// log-probabilities under that snapshot and one advantage per response.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub responses: Vec<Vec<Token>>,
    pub old_log_probs: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

impl SampledGroup {
    pub fn new(old_policy: &PolicyTable, responses: Vec<Vec<Token>>, advantages: Vec<f64>) -> Self {
        let old_log_probs = responses
            .iter()
            .map(|r| old_policy.response_log_probs(r))
            .collect();
        Self {
            responses,
            old_log_probs,
            advantages,
        }
    }

    /// Ratios of `policy` against the snapshot.
    pub fn rollout(&self, policy: &PolicyTable) -> Result<GroupRollout> {
        let ratios = self
            .responses
            .iter()
            .zip(&self.old_log_probs)
            .map(|(resp, old)| {
                policy
                    .response_log_probs(resp)
                    .iter()
                    .zip(old)
                    .map(|(new, old)| (new - old).exp())
                    .collect()
            })
            .collect();
        GroupRollout::new(ratios, self.advantages.clone())
    }

    pub fn loss(&self, policy: &PolicyTable, clip: ClipSpec) -> Result<f64> {
        dapo_loss(&self.rollout(policy)?, clip)
    }
}

/// Gradient with respect to the logits of every touched context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitGradient {
    entries: BTreeMap<Vec<Token>, Vec<f64>>,
}

impl LogitGradient {
    pub fn get(&self, prefix: &[Token]) -> Option<&[f64]> {
        self.entries.get(prefix).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Token>, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().flatten().all(|g| *g == 0.0)
    }

    /// Gradient-ascent step `z += eta * g`.
    pub fn apply(&self, policy: &mut PolicyTable, eta: f64) {
        for (prefix, g) in &self.entries {
            policy.add_to_logits(prefix, g, eta);
        }
    }
}

/// Analytic gradient of [`dapo_loss`] with respect to the logits of
/// `policy`, where ratios are measured against the group's snapshot.
///
/// `d r / d z_ctx = r (e_token - pi(.|ctx))`, and tokens sitting in the
/// flat part of the clipped objective contribute nothing.
pub fn surrogate_gradient(
    policy: &PolicyTable,
    group: &SampledGroup,
    clip: ClipSpec,
) -> Result<LogitGradient> {
    let rollout = group.rollout(policy)?;
    let z = rollout.total_tokens() as f64;
    let mut grad = LogitGradient::default();
    for ((resp, ratios), &a) in group
        .responses
        .iter()
        .zip(rollout.ratios())
        .zip(&group.advantages)
    {
        for (t, &r) in ratios.iter().enumerate() {
            let slope = f_clip_slope(r, a, clip);
            if slope == 0.0 {
                continue;
            }
            let ctx = &resp[..t];
            let probs = policy.probs(ctx);
            let coeff = slope * r / z;
            let entry = grad
                .entries
                .entry(ctx.to_vec())
                .or_insert_with(|| vec![0.0; probs.len()]);
            for (j, (e, pj)) in entry.iter_mut().zip(&probs).enumerate() {
                let onehot = if j == resp[t] as usize { 1.0 } else { 0.0 };
                *e += coeff * (onehot - pj);
            }
        }
    }
    Ok(grad)
}

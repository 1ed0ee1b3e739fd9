//! Randomized property suites behind `qae verify`.
//!
//! Instance `i` of a suite draws everything from a ChaCha stream seeded
//! with `s_i`, where `s_0` is the user seed and `s_{i+1} = splitmix(s_i)`.
//! Rerunning with `--seed s_i --trials 1` therefore reproduces instance `i`
//! on its own.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advantage::{advantage_mean, advantage_quantile};
use crate::entropy::{
    actual_delta_h, cov_logpi_pi, default_baseline_grid, entropy_covariance, verify_two_regime,
};
use crate::error::{Error, Result};
use crate::surrogate::{
    dapo_loss, group_scores, grpo_discriminative, quantile_discriminative, surrogate_gradient,
    ClipSpec, GroupRollout, SampledGroup,
};
use crate::types::{PolicyTable, RewardGroup, Token, TokenPolicy};

/// Which property suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Discriminative-form equivalence of the token-level surrogate.
    Prop1,
    /// Two-regime extremality and baseline monotonicity of the entropy
    /// forecast.
    Prop2,
    /// Analytic surrogate gradients against central finite differences.
    Gradients,
    /// Second-order convergence of the entropy-covariance forecast.
    Identity,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Prop1,
        Suite::Prop2,
        Suite::Gradients,
        Suite::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Prop1 => "prop1",
            Suite::Prop2 => "prop2",
            Suite::Gradients => "gradients",
            Suite::Identity => "identity",
        }
    }
}

/// Tolerance on the relative error of the discriminative forms.
pub const PROP1_TOLERANCE: f64 = 1e-10;
/// Tolerance on the relative error of analytic gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Window for successive error ratios under step halving.
pub const IDENTITY_RATIO_WINDOW: (f64, f64) = (3.5, 4.5);
/// Instances with `|F(b)|` below this are redrawn in the identity suite.
pub const IDENTITY_MIN_F: f64 = 1e-4;
/// Fraction of identity instances that must land in the ratio window.
pub const IDENTITY_PASS_FRACTION: f64 = 0.95;
/// Step sizes of the identity suite.
pub const IDENTITY_ETAS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];
/// Minimum distance of every ratio from the clip edges in the gradient suite.
pub const CLIP_MARGIN: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// SplitMix64 step used to chain instance seeds.
pub fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The first `trials` instance seeds starting from `seed`.
pub fn instance_seeds(seed: u64, trials: usize) -> Vec<u64> {
    std::iter::successors(Some(seed), |&s| Some(splitmix(s)))
        .take(trials)
        .collect()
}

/// Per-instance outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceResult {
    pub seed: u64,
    pub passed: bool,
    /// Suite-specific error statistic (larger is worse).
    pub error: f64,
}

/// Aggregated suite outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub passed: usize,
    /// Worst error statistic over all instances.
    pub worst_error: f64,
    pub worst_seed: u64,
    /// Seed of the first failing instance, if any.
    pub first_failure: Option<u64>,
    /// Extra named statistics (e.g. the smallest extremality margin).
    pub stats: BTreeMap<String, f64>,
}

impl SuiteReport {
    /// Suite verdict. The identity suite tolerates a small fraction of
    /// instances outside the ratio window; every other suite needs all.
    pub fn ok(&self) -> bool {
        match self.suite {
            Suite::Identity => self.passed as f64 >= IDENTITY_PASS_FRACTION * self.trials as f64,
            _ => self.passed == self.trials,
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<9} {} {}/{} passed, worst error {:.3e} (seed {})",
            self.suite.name(),
            if self.ok() { "PASS" } else { "FAIL" },
            self.passed,
            self.trials,
            self.worst_error,
            self.worst_seed
        )?;
        for (k, v) in &self.stats {
            write!(f, ", {k} {v:.3e}")?;
        }
        if let Some(s) = self.first_failure {
            write!(f, "; reproduce with --seed {s} --trials 1")?;
        }
        Ok(())
    }
}

fn collect(
    suite: Suite,
    results: Vec<InstanceResult>,
    stats: BTreeMap<String, f64>,
) -> SuiteReport {
    let worst = results
        .iter()
        .copied()
        .max_by(|a, b| a.error.total_cmp(&b.error))
        .unwrap_or(InstanceResult {
            seed: 0,
            passed: true,
            error: 0.0,
        });
    SuiteReport {
        suite,
        trials: results.len(),
        passed: results.iter().filter(|r| r.passed).count(),
        worst_error: worst.error,
        worst_seed: worst.seed,
        first_failure: results.iter().find(|r| !r.passed).map(|r| r.seed),
        stats,
    }
}

/// Runs one suite over `trials` chained instances.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let seeds = instance_seeds(seed, trials);
    match suite {
        Suite::Prop1 => {
            let results = seeds
                .iter()
                .map(|&s| prop1_instance(s))
                .collect::<Result<_>>()?;
            Ok(collect(suite, results, BTreeMap::new()))
        }
        Suite::Prop2 => {
            let mut min_margin = f64::INFINITY;
            let mut max_lin = 0.0f64;
            let mut results = Vec::with_capacity(trials);
            for &s in &seeds {
                let out = prop2_instance(s)?;
                min_margin = min_margin.min(out.margin);
                max_lin = max_lin.max(out.linearity_error);
                results.push(out.result);
            }
            let stats = BTreeMap::from([
                ("min_margin".to_string(), min_margin),
                ("max_linearity_error".to_string(), max_lin),
            ]);
            Ok(collect(suite, results, stats))
        }
        Suite::Gradients => {
            let results = seeds
                .iter()
                .map(|&s| gradient_instance(s))
                .collect::<Result<_>>()?;
            Ok(collect(suite, results, BTreeMap::new()))
        }
        Suite::Identity => {
            let results: Vec<InstanceResult> = seeds
                .iter()
                .map(|&s| identity_instance(s))
                .collect::<Result<_>>()?;
            let frac = results.iter().filter(|r| r.passed).count() as f64 / trials as f64;
            let stats = BTreeMap::from([("window_fraction".to_string(), frac)]);
            Ok(collect(suite, results, stats))
        }
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mixed_group<R: Rng + ?Sized>(rng: &mut R, g: usize) -> RewardGroup {
    let c = rng.random_range(1..g);
    let mut outcomes: Vec<bool> = (0..g).map(|i| i < c).collect();
    rand::seq::SliceRandom::shuffle(outcomes.as_mut_slice(), rng);
    RewardGroup::from_outcomes(&outcomes).expect("g >= 2")
}

/// One discriminative-form check. The error statistic is the worst of the
/// quantile and GRPO relative errors, each scaled by the magnitude of the
/// discriminative terms so that near-cancelling GRPO groups stay
/// well-conditioned.
pub fn prop1_instance(seed: u64) -> Result<InstanceResult> {
    let mut rng = rng_for(seed);
    let g = rng.random_range(2..=16);
    let len = rng.random_range(1..=8);
    let k = rng.random_range(0.05..0.95);
    let clip = ClipSpec::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.5))?;
    let group = random_mixed_group(&mut rng, g);
    let ratios: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..len).map(|_| rng.random_range(0.5..1.6)).collect())
        .collect();
    let p = group.success_rate();
    let mut worst = 0.0f64;
    for quantile in [true, false] {
        let adv = if quantile {
            advantage_quantile(&group, k, 0.0)?
        } else {
            advantage_mean(&group, 0.0)?
        };
        let rollout = GroupRollout::new(ratios.clone(), adv.values)?;
        let token_level = dapo_loss(&rollout, clip)?;
        let (sp, sn) = group_scores(&rollout, &group, clip);
        let (disc, scale) = if quantile {
            let d = quantile_discriminative(p, k, sp, sn)?;
            (d, d.abs())
        } else {
            let w = (p * (1.0 - p)).sqrt();
            (grpo_discriminative(p, sp, sn)?, w * (sp.abs() + sn.abs()))
        };
        let rel = (token_level - disc).abs() / scale.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(InstanceResult {
        seed,
        passed: worst <= PROP1_TOLERANCE,
        error: worst,
    })
}

/// Random non-uniform flat-bandit logits over `n` actions whose spread
/// (max minus min) is at least `0.01`.
pub fn random_flat_logits<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let spread = 10f64.powf(rng.random_range(-2.0..1.0));
    let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..spread)).collect();
    // pin the extremes so the spread is exact
    let lo = rng.random_range(0..n);
    let hi = (lo + rng.random_range(1..n)) % n;
    z[lo] = 0.0;
    z[hi] = spread;
    z
}

struct Prop2Outcome {
    result: InstanceResult,
    margin: f64,
    linearity_error: f64,
}

/// A random non-uniform flat bandit with per-action rewards, a mixed
/// reward group and a quantile level.
#[derive(Debug, Clone)]
pub struct Prop2Instance {
    pub policy: PolicyTable,
    pub action_rewards: Vec<f64>,
    pub group: RewardGroup,
    pub k: f64,
}

/// Draws the two-regime instance for `seed` (`n` in `[2, 64]`, logit
/// spread in `[0.01, 10]`).
pub fn prop2_instance_for(seed: u64) -> Result<Prop2Instance> {
    let mut rng = rng_for(seed);
    let n = rng.random_range(2..=64);
    let policy = PolicyTable::flat(random_flat_logits(&mut rng, n))?;
    let action_rewards: Vec<f64> = (0..n)
        .map(|_| f64::from(rng.random_bool(0.5) as u8))
        .collect();
    let g = rng.random_range(2..=16);
    let group = random_mixed_group(&mut rng, g);
    let k = rng.random_range(0.05..0.95);
    Ok(Prop2Instance {
        policy,
        action_rewards,
        group,
        k,
    })
}

fn prop2_instance(seed: u64) -> Result<Prop2Outcome> {
    let Prop2Instance {
        policy,
        action_rewards,
        group,
        k,
    } = prop2_instance_for(seed)?;
    let grid = default_baseline_grid();
    let report = verify_two_regime(&policy, &action_rewards, &group, k, &grid, 1.0)?;
    let f0 = entropy_covariance(&policy, &action_rewards, 0.0, 1.0)?.f_q_of_b;
    let c = cov_logpi_pi(&policy)?;
    let mut lin = 0.0f64;
    let mut decreasing = true;
    let mut prev = f64::INFINITY;
    for &b in &grid {
        let fb = entropy_covariance(&policy, &action_rewards, b, 1.0)?.f_q_of_b;
        lin = lin.max((fb - (f0 - b * c)).abs() / f0.abs().max(1.0));
        decreasing &= fb < prev;
        prev = fb;
    }
    let linear = lin <= 1e-12;
    Ok(Prop2Outcome {
        result: InstanceResult {
            seed,
            passed: report.passed() && decreasing && linear,
            error: lin,
        },
        margin: report.min_margin / report.c_q.max(1.0),
        linearity_error: lin,
    })
}

/// Baseline-monotonicity and extremality outcome of one random instance,
/// for callers that want the raw numbers.
pub fn prop2_check(seed: u64) -> Result<(bool, f64, f64)> {
    let out = prop2_instance(seed)?;
    Ok((out.result.passed, out.margin, out.linearity_error))
}

/// One step-halving check of the entropy forecast. The error statistic is
/// the distance of the worse ratio from 4.
pub fn identity_instance(seed: u64) -> Result<InstanceResult> {
    let mut rng = rng_for(seed);
    loop {
        let n = rng.random_range(2..=64);
        let mut logits = random_flat_logits(&mut rng, n);
        let scale = rng.random_range(0.1..3.0) / logits.iter().cloned().fold(0.0, f64::max);
        logits.iter_mut().for_each(|z| *z *= scale);
        let policy = PolicyTable::flat(logits)?;
        let rewards: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_bool(0.5) as u8))
            .collect();
        let b = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        let f = entropy_covariance(&policy, &rewards, b, 1.0)?.f_q_of_b;
        if f.abs() < IDENTITY_MIN_F {
            continue;
        }
        let errors = IDENTITY_ETAS
            .iter()
            .map(|&eta| {
                let pred = entropy_covariance(&policy, &rewards, b, eta)?.predicted_delta_h;
                Ok((actual_delta_h(&policy, &rewards, b, eta)? - pred).abs())
            })
            .collect::<Result<Vec<f64>>>()?;
        let (lo, hi) = IDENTITY_RATIO_WINDOW;
        let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
        let passed = ratios.iter().all(|r| (lo..=hi).contains(r));
        let error = ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max);
        return Ok(InstanceResult {
            seed,
            passed,
            error: if error.is_nan() { f64::INFINITY } else { error },
        });
    }
}

/// A random gradient-check instance: a snapshot policy, a perturbed
/// current policy and a sampled group whose ratios avoid the clip edges.
pub struct GradientInstance {
    pub current: PolicyTable,
    pub group: SampledGroup,
    pub clip: ClipSpec,
}

fn random_policy<R: Rng + ?Sized>(rng: &mut R, flat: bool) -> Result<PolicyTable> {
    if flat {
        let n = rng.random_range(2..=12);
        PolicyTable::flat((0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
    } else {
        let v = rng.random_range(2..=4);
        let l = rng.random_range(1..=3);
        let defaults = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(PolicyTable::Autoregressive(TokenPolicy::new(
            v, l, defaults,
        )?))
    }
}

fn perturb<R: Rng + ?Sized>(
    policy: &PolicyTable,
    responses: &[Vec<Token>],
    rng: &mut R,
) -> PolicyTable {
    let mut out = policy.clone();
    for ctx in contexts_of(responses) {
        let delta: Vec<f64> = (0..out.num_actions())
            .map(|_| rng.random_range(-0.15..0.15))
            .collect();
        out.add_to_logits(&ctx, &delta, 1.0);
    }
    out
}

fn contexts_of(responses: &[Vec<Token>]) -> Vec<Vec<Token>> {
    let mut ctxs: Vec<Vec<Token>> = responses
        .iter()
        .flat_map(|r| (0..r.len()).map(move |t| r[..t].to_vec()))
        .collect();
    ctxs.sort();
    ctxs.dedup();
    ctxs
}

/// Draws a gradient-check instance, redrawing until at least one token is
/// active and no ratio sits within [`CLIP_MARGIN`] of a clip edge.
pub fn gradient_instance_for(seed: u64) -> Result<GradientInstance> {
    let mut rng = rng_for(seed);
    let flat = rng.random_bool(0.5);
    loop {
        let old = random_policy(&mut rng, flat)?;
        let clip = ClipSpec::new(rng.random_range(0.1..0.3), rng.random_range(0.1..0.4))?;
        let g = rng.random_range(2..=8);
        let responses: Vec<Vec<Token>> = (0..g).map(|_| old.sample_response(&mut rng)).collect();
        let advantages: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let current = perturb(&old, &responses, &mut rng);
        let group = SampledGroup::new(&old, responses, advantages);
        let rollout = group.rollout(&current)?;
        let near_edge = rollout.ratios().iter().flatten().any(|&r| {
            (r - clip.lower()).abs() < CLIP_MARGIN || (r - clip.upper()).abs() < CLIP_MARGIN
        });
        if near_edge {
            continue;
        }
        if surrogate_gradient(&current, &group, clip)?.is_zero() {
            continue;
        }
        return Ok(GradientInstance {
            current,
            group,
            clip,
        });
    }
}

/// Central finite-difference gradient of the surrogate over every context
/// visited by the group.
pub fn finite_difference_gradient(
    inst: &GradientInstance,
) -> Result<BTreeMap<Vec<Token>, Vec<f64>>> {
    let mut out = BTreeMap::new();
    let n = inst.current.num_actions();
    for ctx in contexts_of(&inst.group.responses) {
        let mut row = vec![0.0; n];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let mut plus = inst.current.clone();
            plus.add_to_logits(&ctx, &e, FD_STEP);
            let mut minus = inst.current.clone();
            minus.add_to_logits(&ctx, &e, -FD_STEP);
            *slot = (inst.group.loss(&plus, inst.clip)? - inst.group.loss(&minus, inst.clip)?)
                / (2.0 * FD_STEP);
        }
        out.insert(ctx, row);
    }
    Ok(out)
}

fn gradient_instance(seed: u64) -> Result<InstanceResult> {
    let inst = gradient_instance_for(seed)?;
    let analytic = surrogate_gradient(&inst.current, &inst.group, inst.clip)?;
    let fd = finite_difference_gradient(&inst)?;
    let n = inst.current.num_actions();
    let zeros = vec![0.0; n];
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (ctx, fd_row) in &fd {
        let a_row = analytic.get(ctx).unwrap_or(&zeros);
        for (a, f) in a_row.iter().zip(fd_row) {
            diff += (a - f) * (a - f);
            na += a * a;
            nf += f * f;
        }
    }
    // analytic entries outside the visited contexts would be a bug
    for (ctx, row) in analytic.iter() {
        if !fd.contains_key(ctx) {
            diff += row.iter().map(|a| a * a).sum::<f64>();
        }
    }
    let rel = diff.sqrt() / f64::max(na, nf).sqrt();
    Ok(InstanceResult {
        seed,
        passed: rel <= GRADIENT_TOLERANCE,
        error: rel,
    })
}

//! Synthetic verifiable-reward training loop.
//!
//! Every query owns an independent policy. Each step takes a snapshot of
//! all policies, evaluates them, rolls out groups for the batch, computes
//! advantages with the configured estimator and applies gradient steps of
//! the clipped token-level surrogate. All randomness comes from per-query
//! ChaCha streams derived from the run seed, so results do not depend on
//! thread scheduling.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::compute_advantages;
use crate::config::{Placement, SyntheticTaskSpec, TaskMode, TrainConfig};
use crate::entropy::policy_entropy;
use crate::error::{Error, Result};
use crate::metrics::{entropy_by_sign, pass_at_k};
use crate::surrogate::{surrogate_gradient, ClipSpec, GroupRollout, SampledGroup};
use crate::types::{
    softmax, AdvantageVector, MetricsRecord, PolicyTable, RewardGroup, Token, TokenPolicy, EOS,
};

const TASK_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A generated task: per-query correct sets and initial policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub mode: TaskMode,
    /// Flat bandit: correct action ids. Autoregressive: answer tokens.
    pub correct: Vec<BTreeSet<Token>>,
    pub initial_policies: Vec<PolicyTable>,
}

impl Task {
    /// Draws a task from a `SyntheticTaskSpec`. Deterministic in `rng`.
    pub fn generate<R: Rng + ?Sized>(spec: &SyntheticTaskSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let weights: Vec<f64> = spec.difficulty.iter().map(|c| c.weight).collect();
        let mixture = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        let normal =
            Normal::new(0.0, spec.init_logit_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut correct = Vec::with_capacity(spec.num_queries);
        let mut initial_policies = Vec::with_capacity(spec.num_queries);
        for q in 0..spec.num_queries {
            let comp = spec.difficulty[mixture.sample(rng)];
            let target = if comp.low < comp.high {
                Uniform::new_inclusive(comp.low, comp.high)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(rng)
            } else {
                comp.low
            };
            let override_set = spec.correct_sets.as_ref().map(|s| &s[q]);
            match spec.mode {
                TaskMode::FlatBandit => {
                    let n = spec.responses_per_query.unwrap_or(2);
                    let logits: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
                    let set = match override_set {
                        Some(s) => s.iter().copied().collect(),
                        None => {
                            let order = placement_order(&logits, 0, spec.placement, rng);
                            flat_correct_set(&softmax(&logits), &order, target)
                        }
                    };
                    correct.push(set);
                    initial_policies.push(PolicyTable::flat(logits)?);
                }
                TaskMode::Autoregressive => {
                    let v = spec.vocab_size.unwrap_or(2);
                    let l = spec.max_length.unwrap_or(1);
                    let mut logits: Vec<f64> = (0..v).map(|_| normal.sample(rng)).collect();
                    logits[EOS as usize] += spec.eos_bias;
                    let set = match override_set {
                        Some(s) => s.iter().copied().collect(),
                        None => {
                            let order = placement_order(&logits, 1, spec.placement, rng);
                            let size = ((target * (v - 1) as f64).round() as usize)
                                .clamp(1, (v.saturating_sub(2)).max(1));
                            order.into_iter().take(size).map(|t| t as Token).collect()
                        }
                    };
                    correct.push(set);
                    initial_policies
                        .push(PolicyTable::Autoregressive(TokenPolicy::new(v, l, logits)?));
                }
            }
        }
        Ok(Self {
            mode: spec.mode,
            correct,
            initial_policies,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.correct.len()
    }

    /// Binary verifier. Autoregressive responses are judged by their last
    /// non-end-of-sequence token; an empty answer is wrong.
    pub fn is_correct(&self, query: usize, response: &[Token]) -> bool {
        let answer = match self.mode {
            TaskMode::FlatBandit => response.first(),
            TaskMode::Autoregressive => response.iter().rev().find(|&&t| t != EOS),
        };
        answer.is_some_and(|a| self.correct[query].contains(a))
    }

    /// Exact probability that `policy` answers `query` correctly. Only
    /// available for flat bandits.
    pub fn success_probability(&self, query: usize, policy: &PolicyTable) -> Result<f64> {
        if !policy.is_flat() {
            return Err(Error::ModeUnsupported);
        }
        let probs = policy.probs(&[]);
        Ok(self.correct[query].iter().map(|&a| probs[a as usize]).sum())
    }
}

// Candidate tokens `first..len` ordered so that the leading ones become the
// correct set.
fn placement_order<R: Rng + ?Sized>(
    logits: &[f64],
    first: usize,
    placement: Placement,
    rng: &mut R,
) -> Vec<usize> {
    let mut order: Vec<usize> = (first..logits.len()).collect();
    match placement {
        Placement::Random => order.shuffle(rng),
        Placement::Tail => order.sort_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(a.cmp(&b))),
        Placement::Head => order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b))),
    }
    order
}

// Takes responses in `order` while doing so moves the correct mass closer to
// `target`, keeping at least one correct and one incorrect response.
fn flat_correct_set(probs: &[f64], order: &[usize], target: f64) -> BTreeSet<Token> {
    let mut set = BTreeSet::new();
    let mut mass = 0.0;
    for &a in order.iter().take(probs.len() - 1) {
        if !set.is_empty() && (mass + probs[a] - target).abs() >= (mass - target).abs() {
            break;
        }
        mass += probs[a];
        set.insert(a as Token);
    }
    set
}

/// One sampled group with its verified rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub responses: Vec<Vec<Token>>,
    pub rewards: RewardGroup,
}

impl Rollout {
    pub fn lengths(&self) -> Vec<usize> {
        self.responses.iter().map(Vec::len).collect()
    }

    /// On-policy view (all ratios 1) with the given advantages.
    pub fn on_policy(&self, advantages: Vec<f64>) -> Result<GroupRollout> {
        GroupRollout::on_policy(&self.lengths(), advantages)
    }
}

/// Outcome of dynamic sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum DynamicSample {
    Accepted { rollout: Rollout, attempts: usize },
    Skip,
}

/// Samples `g` i.i.d. responses for `query` from `policy` and verifies them.
pub fn rollout_group<R: Rng + ?Sized>(
    task: &Task,
    query: usize,
    policy: &PolicyTable,
    g: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let responses = policy.sample_responses(g, rng);
    let outcomes: Vec<bool> = responses
        .iter()
        .map(|r| task.is_correct(query, r))
        .collect();
    Ok(Rollout {
        responses,
        rewards: RewardGroup::from_outcomes(&outcomes)?,
    })
}

/// Redraws until the group holds both a success and a failure, giving up
/// after `max_resample` draws.
pub fn dynamic_sample<R: Rng + ?Sized>(
    task: &Task,
    query: usize,
    policy: &PolicyTable,
    g: usize,
    max_resample: usize,
    rng: &mut R,
) -> Result<DynamicSample> {
    for attempt in 1..=max_resample {
        let rollout = rollout_group(task, query, policy, g, rng)?;
        if rollout.rewards.is_mixed() {
            return Ok(DynamicSample::Accepted {
                rollout,
                attempts: attempt,
            });
        }
    }
    Ok(DynamicSample::Skip)
}

/// Everything a run carries between steps.
#[derive(Debug, Clone)]
pub struct RunState {
    pub task: Task,
    pub policies: Vec<PolicyTable>,
    pub step: u64,
    pub history: Vec<MetricsRecord>,
    batch_rng: ChaCha8Rng,
    train_rngs: Vec<ChaCha8Rng>,
    eval_rngs: Vec<ChaCha8Rng>,
}

impl RunState {
    /// Generates the task and seeds every stream from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let task = Task::generate(&config.task, &mut stream_rng(config.seed, TASK_STREAM))?;
        Ok(Self::with_task(task, config.seed))
    }

    /// Starts a run on an explicit task.
    pub fn with_task(task: Task, seed: u64) -> Self {
        let n = task.num_queries() as u64;
        Self {
            policies: task.initial_policies.clone(),
            step: 0,
            history: Vec::new(),
            batch_rng: stream_rng(seed, BATCH_STREAM),
            train_rngs: (0..n).map(|q| stream_rng(seed, 2 + 2 * q)).collect(),
            eval_rngs: (0..n).map(|q| stream_rng(seed, 3 + 2 * q)).collect(),
            task,
        }
    }

    /// Mutable access to one query's rollout stream.
    pub fn train_rng(&mut self, query: usize) -> &mut ChaCha8Rng {
        &mut self.train_rngs[query]
    }
}

/// Per-query result of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryUpdate {
    pub query: usize,
    pub rollout: Rollout,
    pub advantages: AdvantageVector,
    /// Token-averaged entropy of each response under the snapshot.
    pub response_entropies: Vec<f64>,
    pub policy: PolicyTable,
}

/// Samples, scores and updates one query against its snapshot policy.
/// Returns `None` when dynamic sampling skips the query.
pub fn update_query<R: Rng + ?Sized>(
    task: &Task,
    query: usize,
    snapshot: &PolicyTable,
    config: &TrainConfig,
    clip: ClipSpec,
    rng: &mut R,
) -> Result<Option<QueryUpdate>> {
    let rollout = if config.dynamic_sampling {
        match dynamic_sample(
            task,
            query,
            snapshot,
            config.group_size,
            config.max_resample,
            rng,
        )? {
            DynamicSample::Accepted { rollout, .. } => rollout,
            DynamicSample::Skip => return Ok(None),
        }
    } else {
        rollout_group(task, query, snapshot, config.group_size, rng)?
    };
    let advantages =
        compute_advantages(&rollout.rewards, config.estimator, config.k, config.eps_std)?;
    let group = SampledGroup::new(
        snapshot,
        rollout.responses.clone(),
        advantages.values.clone(),
    );
    let mut policy = snapshot.clone();
    if !advantages.is_all_zero() {
        for _ in 0..config.updates_per_rollout {
            surrogate_gradient(&policy, &group, clip)?.apply(&mut policy, config.eta);
        }
    }
    let response_entropies = rollout
        .responses
        .iter()
        .map(|r| snapshot.response_token_entropy(r))
        .collect();
    Ok(Some(QueryUpdate {
        query,
        rollout,
        advantages,
        response_entropies,
        policy,
    }))
}

struct Evaluation {
    entropy: f64,
    pass_at_1: f64,
    pass_at_16: f64,
}

fn evaluate<R: Rng + ?Sized>(
    task: &Task,
    query: usize,
    policy: &PolicyTable,
    samples: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    let entropy = policy_entropy(policy, rng);
    let c = policy
        .sample_responses(samples, rng)
        .iter()
        .filter(|r| task.is_correct(query, r))
        .count() as u64;
    let n = samples as u64;
    Ok(Evaluation {
        entropy,
        pass_at_1: pass_at_k(n, c, 1)?,
        pass_at_16: pass_at_k(n, c, 16)?,
    })
}

/// Runs one step: evaluate the snapshot, update the batch, record metrics.
pub fn train_step(state: &mut RunState, config: &TrainConfig) -> Result<MetricsRecord> {
    let clip = config.clip()?;
    let nq = state.task.num_queries();
    let batch: Vec<usize> = if config.batch_size() >= nq {
        (0..nq).collect()
    } else {
        let mut b =
            rand::seq::index::sample(&mut state.batch_rng, nq, config.batch_size()).into_vec();
        b.sort_unstable();
        b
    };

    let task = &state.task;
    let snapshot = &state.policies;
    let evals: Vec<Evaluation> = state
        .eval_rngs
        .par_iter_mut()
        .enumerate()
        .map(|(q, rng)| evaluate(task, q, &snapshot[q], config.eval_samples, rng))
        .collect::<Result<_>>()?;

    let mut in_batch = vec![false; nq];
    for &q in &batch {
        in_batch[q] = true;
    }
    let updates: Vec<Option<QueryUpdate>> = state
        .train_rngs
        .par_iter_mut()
        .enumerate()
        .filter(|(q, _)| in_batch[*q])
        .map(|(q, rng)| update_query(task, q, &snapshot[q], config, clip, rng))
        .collect::<Result<_>>()?;
    let accepted: Vec<QueryUpdate> = updates.into_iter().flatten().collect();
    if accepted.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let mut all_adv = Vec::new();
    let mut all_ent = Vec::new();
    let mut zeros = 0usize;
    let mut length_sum = 0usize;
    for u in &accepted {
        all_adv.extend_from_slice(&u.advantages.values);
        all_ent.extend_from_slice(&u.response_entropies);
        zeros += u.advantages.num_zero();
        length_sum += u.rollout.responses.iter().map(Vec::len).sum::<usize>();
    }
    let by_sign = entropy_by_sign(&all_adv, &all_ent)?;
    let n_resp = all_adv.len() as f64;
    let nqf = nq as f64;
    let record = MetricsRecord {
        step: state.step,
        entropy_total: evals.iter().map(|e| e.entropy).sum::<f64>() / nqf,
        entropy_pos_adv: by_sign.positive.mean,
        entropy_neg_adv: by_sign.negative.mean,
        zero_adv_fraction: zeros as f64 / n_resp,
        pass_at_1: evals.iter().map(|e| e.pass_at_1).sum::<f64>() / nqf,
        pass_at_16: evals.iter().map(|e| e.pass_at_16).sum::<f64>() / nqf,
        mean_response_length: length_sum as f64 / n_resp,
    };
    record.validate()?;

    for u in accepted {
        state.policies[u.query] = u.policy;
    }
    state.step += 1;
    state.history.push(record.clone());
    Ok(record)
}

/// Runs `config.num_steps` steps, handing each record to `on_record` as
/// soon as it is produced.
pub fn run_experiment_with<F>(config: &TrainConfig, mut on_record: F) -> Result<RunState>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let mut state = RunState::new(config)?;
    for _ in 0..config.num_steps {
        let record = train_step(&mut state, config)?;
        on_record(&record)?;
    }
    Ok(state)
}

/// Runs a full experiment and returns the final state with its history.
pub fn run_experiment(config: &TrainConfig) -> Result<RunState> {
    run_experiment_with(config, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Estimator;

    fn flat_task(probs: &[f64], correct: &[Token]) -> Task {
        Task {
            mode: TaskMode::FlatBandit,
            correct: vec![correct.iter().copied().collect()],
            initial_policies: vec![PolicyTable::from_probs(probs).unwrap()],
        }
    }

    #[test]
    fn uniform_policy_success_rate_within_binomial_bounds() {
        // 3 of 8 correct under a uniform policy: E[p] = 3/8
        let task = flat_task(&[0.125; 8], &[1, 4, 6]);
        let mut rng = stream_rng(11, 0);
        let (groups, g) = (10_000, 8);
        let total: usize = (0..groups)
            .map(|_| {
                rollout_group(&task, 0, &task.initial_policies[0], g, &mut rng)
                    .unwrap()
                    .rewards
                    .num_successes()
            })
            .sum();
        let trials = (groups * g) as f64;
        let mean = total as f64 / trials;
        let sigma = (0.375f64 * 0.625 / trials).sqrt();
        assert!((mean - 0.375).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn concentrated_policies_give_extreme_groups() {
        let task = flat_task(&[0.999_999, 0.000_001], &[0]);
        let mut rng = stream_rng(1, 0);
        let r = rollout_group(&task, 0, &task.initial_policies[0], 8, &mut rng).unwrap();
        assert_eq!(r.rewards.num_successes(), 8);
        let s = dynamic_sample(&task, 0, &task.initial_policies[0], 8, 5, &mut rng).unwrap();
        assert_eq!(s, DynamicSample::Skip);
        let task = flat_task(&[0.999_999, 0.000_001], &[1]);
        let r = rollout_group(&task, 0, &task.initial_policies[0], 8, &mut rng).unwrap();
        assert_eq!(r.rewards.num_successes(), 0);
    }

    #[test]
    fn dynamic_sampling_acceptance_rate_at_half() {
        // acceptance per draw is 1 - 2 (1/2)^G
        let task = flat_task(&[0.5, 0.5], &[0]);
        let g = 4;
        let mut rng = stream_rng(5, 0);
        let n = 20_000;
        let first_try = (0..n)
            .filter(|_| {
                matches!(
                    dynamic_sample(&task, 0, &task.initial_policies[0], g, 1, &mut rng).unwrap(),
                    DynamicSample::Accepted { .. }
                )
            })
            .count() as f64
            / n as f64;
        let p = 1.0 - 2.0 * 0.5f64.powi(g as i32);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((first_try - p).abs() <= 3.0 * sigma, "{first_try} vs {p}");
    }

    #[test]
    fn autoregressive_verifier_reads_last_answer_token() {
        let task = Task {
            mode: TaskMode::Autoregressive,
            correct: vec![[3].into_iter().collect()],
            initial_policies: vec![PolicyTable::Autoregressive(
                TokenPolicy::new(5, 4, vec![0.0; 5]).unwrap(),
            )],
        };
        assert!(task.is_correct(0, &[1, 3, EOS]));
        assert!(task.is_correct(0, &[2, 2, 1, 3]));
        assert!(!task.is_correct(0, &[3, 1, EOS]));
        assert!(!task.is_correct(0, &[EOS]));
    }

    #[test]
    fn generated_tasks_have_correct_and_incorrect_responses() {
        for mode in [TaskMode::FlatBandit, TaskMode::Autoregressive] {
            for placement in [Placement::Random, Placement::Tail, Placement::Head] {
                let mut spec = match mode {
                    TaskMode::FlatBandit => SyntheticTaskSpec::flat(50, 6),
                    TaskMode::Autoregressive => SyntheticTaskSpec::autoregressive(50, 4, 3),
                };
                spec.placement = placement;
                spec.init_logit_scale = 3.0;
                let task = Task::generate(&spec, &mut stream_rng(3, 0)).unwrap();
                for q in 0..task.num_queries() {
                    let set = &task.correct[q];
                    assert!(!set.is_empty());
                    match mode {
                        TaskMode::FlatBandit => assert!(set.len() < 6),
                        TaskMode::Autoregressive => {
                            assert!(!set.contains(&EOS));
                            assert!(!task.is_correct(q, &[EOS]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tail_placement_picks_least_likely_responses() {
        let mut spec = SyntheticTaskSpec::flat(20, 8);
        spec.placement = Placement::Tail;
        let task = Task::generate(&spec, &mut stream_rng(9, 0)).unwrap();
        for (q, set) in task.correct.iter().enumerate() {
            let probs = task.initial_policies[q].probs(&[]);
            let max_correct = set.iter().map(|&a| probs[a as usize]).fold(0.0, f64::max);
            let min_wrong = (0..8)
                .filter(|a| !set.contains(&(*a as Token)))
                .map(|a| probs[a])
                .fold(1.0, f64::min);
            assert!(max_correct <= min_wrong);
        }
    }

    fn single_query_config(estimator: Estimator, k: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(SyntheticTaskSpec::flat(1, 4), 1, 0);
        cfg.estimator = estimator;
        cfg.k = k;
        cfg.eta = 1e-2;
        cfg
    }

    #[test]
    fn all_zero_advantages_leave_policy_unchanged() {
        let task = flat_task(&[0.999_999_9, 1e-7], &[0]);
        let mut cfg = single_query_config(Estimator::QuantileStd, 0.4);
        cfg.dynamic_sampling = false;
        let mut state = RunState::with_task(task, 4);
        let before = state.policies.clone();
        let rec = train_step(&mut state, &cfg).unwrap();
        assert_eq!(rec.zero_adv_fraction, 1.0);
        assert_eq!(state.policies, before);
    }

    #[test]
    fn num_steps_zero_returns_initial_state() {
        let cfg = TrainConfig::new(SyntheticTaskSpec::flat(3, 4), 0, 1);
        let state = run_experiment(&cfg).unwrap();
        assert!(state.history.is_empty());
        assert_eq!(state.policies, state.task.initial_policies);
    }

    #[test]
    fn every_query_skipped_is_an_empty_batch() {
        let task = flat_task(&[0.999_999_9, 1e-7], &[0]);
        let mut cfg = single_query_config(Estimator::QuantileStd, 0.4);
        cfg.max_resample = 2;
        let mut state = RunState::with_task(task, 4);
        assert_eq!(train_step(&mut state, &cfg), Err(Error::EmptyBatch));
    }
}

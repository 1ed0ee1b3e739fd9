//! Named run configurations.

use crate::config::{DifficultyComponent, Placement, SyntheticTaskSpec, TrainConfig};
use crate::types::Estimator;

/// Entropy band for the exploration-prone preset, as fractions of the
/// initial policy entropy. The quantile run at `K = 0.4` is expected to
/// finish inside it: no collapse below half the starting entropy and no
/// net growth above it.
pub const EXPLORATION_BAND: (f64, f64) = (0.5, 1.0);

/// Quantile levels of the standard K sweep.
pub const K_SWEEP: [f64; 3] = [0.2, 0.4, 0.8];

/// A task where exploration pays off and entropy is easy to inflate.
///
/// Every query starts from a peaked policy over 64 responses whose correct
/// responses are the least likely ones, with an initial success rate of
/// 1-10%. Learning first spreads mass from the wrong head toward the tail
/// (entropy rises) and later concentrates it on the correct responses.
/// Two gradient steps per rollout make the clip range matter.
pub fn exploration_prone(seed: u64) -> TrainConfig {
    let mut task = SyntheticTaskSpec::flat(512, 64);
    task.init_logit_scale = 3.0;
    task.placement = Placement::Tail;
    task.difficulty = vec![DifficultyComponent {
        weight: 1.0,
        low: 0.01,
        high: 0.1,
    }];
    let mut cfg = TrainConfig::new(task, 70, seed);
    cfg.k = 0.4;
    cfg.estimator = Estimator::QuantileStd;
    cfg.eps_low = 0.2;
    cfg.eps_high = 0.28;
    cfg.eta = 0.2;
    cfg.group_size = 6;
    cfg.updates_per_rollout = 2;
    cfg
}

/// The exploration-prone task trained with the mean baseline and
/// clip-higher (`eps_high = 0.28`).
pub fn exploration_prone_mean_baseline(seed: u64) -> TrainConfig {
    let mut cfg = exploration_prone(seed);
    cfg.estimator = Estimator::MeanStd;
    cfg.eps_high = 0.28;
    cfg
}

/// A small mixed-difficulty task with the default difficulty mixture
/// (roughly 70% of queries start easy at `K = 0.4`).
pub fn mixture(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(SyntheticTaskSpec::flat(64, 16), 40, seed);
    cfg.eta = 0.5;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        exploration_prone(0).validate().unwrap();
        exploration_prone_mean_baseline(0).validate().unwrap();
        mixture(0).validate().unwrap();
    }
}

//! Learning-rate schedule: linear warmup into exponential decay, continuous
//! at the knee.

use super::TrainConfig;

pub fn lr_schedule(iteration: u64, config: &TrainConfig) -> f64 {
    if config.warmup_iters > 0 && iteration <= config.warmup_iters {
        config.peak_lr * iteration as f64 / config.warmup_iters as f64
    } else {
        let after = iteration.saturating_sub(config.warmup_iters);
        config.peak_lr * config.decay_rate.powf(after as f64)
    }
}

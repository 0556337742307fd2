use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probability of feeding an observed rather than a predicted frame during the target
/// period: `p₀ · exp(−step / decay_steps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub p0: f64,
    pub decay_steps: f64,
}

impl SamplingSchedule {
    pub fn probability(&self, step: u64) -> f64 {
        self.p0 * (-(step as f64) / self.decay_steps).exp()
    }
}

/// Per-timestep probability of ground truth: 1 for the `context_len` context steps,
/// the schedule's value for each of the `target_len` target steps.
pub fn scheduled_sampling_mask(step: u64, schedule: &SamplingSchedule, context_len: usize, target_len: usize) -> Vec<f64> {
    let p = schedule.probability(step);
    (0..context_len + target_len).map(|i| if i < context_len { 1.0 } else { p }).collect()
}

/// Draws the teacher-forcing flags of the target steps.
pub fn sample_teacher(probabilities: &[f64], rng: &mut impl Rng) -> Vec<bool> {
    probabilities.iter().map(|&p| rng.random::<f64>() < p).collect()
}

use crate::error::{ensure, Result};
use crate::minicube::STEP_DAYS;
use crate::tensor::Tensor;

/// Squared errors pooled per target step.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonAccumulator {
    sse: Vec<f64>,
    count: Vec<usize>,
}

impl HorizonAccumulator {
    pub fn new(steps: usize) -> Self {
        Self { sse: vec![0.0; steps], count: vec![0; steps] }
    }

    pub fn steps(&self) -> usize {
        self.sse.len()
    }

    pub fn add(&mut self, step: usize, target: f64, forecast: f64) {
        self.sse[step] += (target - forecast).powi(2);
        self.count[step] += 1;
    }

    pub fn add_series(&mut self, target: &[f64], forecast: &[f64], valid: &[bool]) {
        for s in 0..self.steps() {
            if valid[s] {
                self.add(s, target[s], forecast[s]);
            }
        }
    }

    /// RMSE of each step; `None` where no valid observation fell.
    pub fn per_step(&self) -> Vec<Option<f64>> {
        self.sse.iter().zip(&self.count).map(|(s, &n)| (n > 0).then(|| (s / n as f64).sqrt())).collect()
    }

    /// RMSE pooled over the steps that end within `days` of the forecast start.
    pub fn within_days(&self, days: usize) -> Option<f64> {
        let steps = (days / STEP_DAYS).min(self.steps());
        let n: usize = self.count[..steps].iter().sum();
        (n > 0).then(|| (self.sse[..steps].iter().sum::<f64>() / n as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonRmse {
    pub per_step: Vec<Option<f64>>,
    pub within: Option<f64>,
}

/// RMSE per target step and over the first `horizon_days`, for `[K, H, W]` cuboids.
pub fn horizon_rmse(
    target: &Tensor<f32>,
    forecast: &Tensor<f32>,
    valid: &Tensor<f32>,
    horizon_days: usize,
) -> Result<HorizonRmse> {
    ensure!(target.rank() == 3, "target must be [K, H, W], got {:?}", target.shape());
    ensure!(forecast.shape() == target.shape() && valid.shape() == target.shape(), "shapes disagree");
    let k = target.shape()[0];
    ensure!(horizon_days <= k * STEP_DAYS, "horizon {horizon_days} days exceeds the {k}-step target");
    let hw = target.len() / k;
    let mut acc = HorizonAccumulator::new(k);
    for s in 0..k {
        for p in 0..hw {
            let i = s * hw + p;
            if valid.data()[i] > 0.0 {
                acc.add(s, target.data()[i] as f64, forecast.data()[i] as f64);
            }
        }
    }
    Ok(HorizonRmse { per_step: acc.per_step(), within: acc.within_days(horizon_days) })
}

use serde::{Deserialize, Serialize};

use super::Reason;
use crate::minicube::Landcover;

/// The four per-pixel scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Squared Pearson correlation.
    pub r2: f64,
    pub rmse: f64,
    pub nse: f64,
    pub abs_bias: f64,
}

impl Metrics {
    /// Same order as [`Metrics::NAMES`], oriented so that larger is better.
    pub fn higher_is_better(&self) -> [f64; 4] {
        [self.r2, -self.rmse, self.nse, -self.abs_bias]
    }

    pub const NAMES: [&'static str; 4] = ["r2", "rmse", "nse", "abs_bias"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.r2, self.rmse, self.nse, self.abs_bias]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { r2: a[0], rmse: a[1], nse: a[2], abs_bias: a[3] }
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 4];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Some(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelScore {
    pub cube_id: String,
    pub pixel: usize,
    pub landcover: Landcover,
    pub metrics: Metrics,
    pub valid_target: usize,
    pub valid_context: usize,
}

/// Scores one pixel over the timesteps where `valid` holds.
///
/// A forecast with zero variance has no linear association with the target; its
/// R² is reported as 0.
pub fn pixel_metrics(target: &[f64], forecast: &[f64], valid: &[bool]) -> Result<Metrics, Reason> {
    assert!(target.len() == forecast.len() && target.len() == valid.len(), "series lengths differ");
    let pairs: Vec<(f64, f64)> =
        (0..target.len()).filter(|&i| valid[i]).map(|i| (target[i], forecast[i])).collect();
    if pairs.len() < 2 {
        return Err(Reason::TooFewTargets);
    }
    if pairs.iter().any(|(_, f)| !f.is_finite()) {
        return Err(Reason::NoForecast);
    }
    let n = pairs.len() as f64;
    let mv = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mf = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut svv, mut sff, mut svf, mut sse) = (0.0, 0.0, 0.0, 0.0);
    for &(v, f) in &pairs {
        svv += (v - mv) * (v - mv);
        sff += (f - mf) * (f - mf);
        svf += (v - mv) * (f - mf);
        sse += (v - f) * (v - f);
    }
    if svv == 0.0 {
        return Err(Reason::ZeroVariance);
    }
    let mse = sse / n;
    let r2 = if sff == 0.0 { 0.0 } else { (svf * svf / (svv * sff)).min(1.0) };
    Ok(Metrics { r2, rmse: mse.sqrt(), nse: 1.0 - sse / svv, abs_bias: (mv - mf).abs() })
}

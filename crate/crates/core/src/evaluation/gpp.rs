use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::models::Forecast;
use crate::tensor::Tensor;

/// Ordinary least squares line from NDVI to gross primary productivity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GppFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fits on the pairs where both values are finite.
pub fn gpp_fit(ndvi: &[f64], gpp: &[f64]) -> Result<GppFit> {
    ensure!(ndvi.len() == gpp.len(), "{} NDVI values but {} GPP values", ndvi.len(), gpp.len());
    let pairs: Vec<(f64, f64)> =
        ndvi.iter().zip(gpp).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(x, y)| (*x, *y)).collect();
    ensure!(pairs.len() >= 2, "need at least two paired observations, got {}", pairs.len());
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sx2: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
    ensure!(sxx > 1e-12 * sx2, "NDVI has zero variance; the line is undetermined");
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(GppFit { slope, intercept: my - slope * mx, r2 })
}

pub fn gpp_predict(fit: &GppFit, ndvi: &[f64]) -> Vec<f64> {
    ndvi.iter().map(|x| fit.slope * x + fit.intercept).collect()
}

/// GPP cuboid `[K, H, W]` from a forecast; NaN stays NaN.
pub fn gpp_predict_forecast(fit: &GppFit, forecast: &Forecast) -> Tensor<f32> {
    forecast.ndvi_hat.map(|v| (fit.slope * v as f64 + fit.intercept) as f32)
}

/// Squared correlation between predictions and observations.
pub fn r2_score(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    Ok(gpp_fit(predicted, observed)?.r2)
}

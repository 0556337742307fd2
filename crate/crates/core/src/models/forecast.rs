use crate::hashing::fingerprint_f32;
use crate::minicube::Minicube;
use crate::tensor::Tensor;

/// Predicted NDVI cuboid `[K, H, W]` with its provenance.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub ndvi_hat: Tensor<f32>,
    pub model_id: String,
    pub config_hash: String,
    /// Hash of the context frames, masks and weather the forecast was made from.
    pub context_fingerprint: String,
    pub cube_id: String,
    /// Flat `[H, W]` indices of pixels a baseline could not forecast (NaN rows).
    pub flagged_pixels: Vec<usize>,
}

impl Forecast {
    /// Clips to `[-1, 1]`; NaN (no forecast) is kept.
    pub fn emit(ndvi_hat: Tensor<f32>, model_id: &str, config_hash: &str, cube: &Minicube, flagged: Vec<usize>) -> Self {
        Self {
            ndvi_hat: ndvi_hat.map(|v| if v.is_nan() { v } else { v.clamp(-1.0, 1.0) }),
            model_id: model_id.to_string(),
            config_hash: config_hash.to_string(),
            context_fingerprint: context_fingerprint(cube),
            cube_id: cube.id.clone(),
            flagged_pixels: flagged,
        }
    }

    pub fn target_len(&self) -> usize {
        self.ndvi_hat.shape()[0]
    }

    /// Pixel time series at flat index `p`.
    pub fn series(&self, p: usize) -> Vec<f32> {
        let hw = self.ndvi_hat.shape()[1] * self.ndvi_hat.shape()[2];
        (0..self.target_len()).map(|k| self.ndvi_hat.data()[k * hw + p]).collect()
    }
}

/// Fingerprint of what a forecaster may look at: context frames, masks, all weather.
pub fn context_fingerprint(cube: &Minicube) -> String {
    let hw = cube.height() * cube.width();
    let ctx = cube.context_len * hw;
    fingerprint_f32([
        &cube.ndvi.data()[..ctx],
        &cube.quality_mask.data()[..ctx],
        &cube.sat_red.data()[..ctx],
        &cube.sat_nir.data()[..ctx],
        cube.weather.data(),
        cube.elevation.data(),
    ])
}

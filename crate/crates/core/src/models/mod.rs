//! Assembled forecasters.

mod batch;
mod checkpoint;
mod config;
mod forecast;
mod nets;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{Batch, Crop, WeatherStats, ELEVATION_SCALE, FRAME_CHANNELS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamRecord, CHECKPOINT_FORMAT};
pub use config::{Family, ModelConfig};
pub use forecast::{context_fingerprint, Forecast};
pub use nets::{
    ConvLstmNet, Inputs, Net, PredRnnNet, RolloutOutput, SimvpNet, UnetCuboidNet, UnetFrameNet, STATS_PER_STEP,
};

use crate::error::{ensure, Result};
use crate::hashing::config_hash;
use crate::minicube::Minicube;
use crate::nn::Ctx;
use crate::tensor::{Graph, ParamStore, Tensor};

/// A forecaster: configuration, parameters and the weather standardization it was trained with.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub weather_stats: WeatherStats,
    pub net: Net,
    config_hash: String,
}

impl Model {
    /// Initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig, weather_stats: WeatherStats) -> Result<Self> {
        config.validate()?;
        ensure!(
            !weather_stats.is_empty() && weather_stats.len() % STATS_PER_STEP == 0,
            "weather features ({}) must be a positive multiple of {STATS_PER_STEP}",
            weather_stats.len()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, &config, weather_stats.len() / STATS_PER_STEP, &mut rng)?;
        let config_hash = config_hash(&config);
        Ok(Self { config, store, weather_stats, net, config_hash })
    }

    /// Family name, suffixed when weather conditioning is disabled.
    pub fn model_id(&self) -> String {
        if self.config.meteo {
            self.config.family.to_string()
        } else {
            format!("{}-nometeo", self.config.family)
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Times any conditioning layer has run since construction or the last reset.
    pub fn fusion_applications(&self) -> usize {
        self.net.fusion().map_or(0, |f| f.applications())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        ensure!(
            batch.context_len == self.config.context_len && batch.target_len == self.config.target_len,
            "batch has {}+{} steps, model expects {}+{}",
            batch.context_len,
            batch.target_len,
            self.config.context_len,
            self.config.target_len
        );
        ensure!(
            batch.weather_features() == self.weather_stats.len(),
            "batch has {} weather features, model expects {}",
            batch.weather_features(),
            self.weather_stats.len()
        );
        Ok(())
    }

    /// Differentiable K-step rollout. `teacher[j]` (next-frame families only) feeds the
    /// observed frame `T + j` instead of the model's own prediction.
    pub fn rollout<'g>(&self, cx: &Ctx<'g, f32>, batch: &'g Batch, teacher: Option<&[bool]>) -> Result<RolloutOutput<'g>> {
        self.check_batch(batch)?;
        if let Some(tf) = teacher {
            ensure!(tf.len() == batch.target_len, "teacher mask has {} entries, expected {}", tf.len(), batch.target_len);
        }
        let inputs = Inputs::new(cx, batch);
        self.net.rollout(cx, &inputs, teacher)
    }

    /// Unclipped predictions `[B, K, H, W]`; target-period observations are hidden first.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let hidden = batch.without_targets();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let out = self.rollout(&cx, &hidden, None)?;
        Ok((*out.pred.value()).clone())
    }

    pub fn forecast(&self, cube: &Minicube) -> Result<Forecast> {
        Ok(self.forecast_batch(&[cube])?.remove(0))
    }

    pub fn forecast_batch(&self, cubes: &[&Minicube]) -> Result<Vec<Forecast>> {
        let batch = Batch::from_cubes(cubes, &self.weather_stats, None)?;
        let pred = self.predict(&batch)?;
        let id = self.model_id();
        Ok(cubes
            .iter()
            .enumerate()
            .map(|(i, cube)| {
                let (_, k, h, w) = pred.dims4();
                let one = pred.narrow(0, i, 1).reshape(vec![k, h, w]);
                Forecast::emit(one, &id, &self.config_hash, cube, Vec::new())
            })
            .collect())
    }

    /// One autoregressive step of the next-frame UNet: window `[B, T·5, H, W]`,
    /// weather of the predicted step `[B, 4V, H, W]` → `[B, 1, H, W]`.
    pub fn next_frame(&self, window: &Tensor<f32>, weather: &Tensor<f32>) -> Result<Tensor<f32>> {
        let Net::UnetFrame(net) = &self.net else {
            return Err(crate::error::Error::Contract(format!("{} is not a single-frame UNet", self.config.family)));
        };
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let out = net.next_frame(&cx, g.constant(window.clone()), g.constant(weather.clone()))?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests;

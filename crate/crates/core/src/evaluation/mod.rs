//! Scoring protocol: pixel filtering, per-pixel metrics, class-balanced aggregation,
//! outperformance against a reference, horizon curves, the spatial-shuffle harness,
//! a signed-rank test and the NDVI→GPP downstream fit.

mod aggregate;
mod filter;
mod gpp;
mod horizon;
mod metrics;
mod shuffle;
mod wilcoxon;

use serde::{Deserialize, Serialize};

pub use aggregate::{
    aggregate, evaluate_forecasts, outperformance, outperformance_wins, LandcoverScore, ScoreRow, ScoreTable,
    OUTPERFORMANCE_MIN_WINS, OUTPERFORMANCE_THRESHOLDS, SHORT_HORIZON_DAYS,
};
pub use filter::{pixel_filter, PixelFilter, MIN_CONTEXT_OBS, MIN_NDVI, MIN_NDVI_STD, MIN_TARGET_OBS};
pub use gpp::{gpp_fit, gpp_predict, gpp_predict_forecast, r2_score, GppFit};
pub use horizon::{horizon_rmse, HorizonAccumulator, HorizonRmse};
pub use metrics::{pixel_metrics, Metrics, PixelScore};
pub use shuffle::{invert, permute_columns, spatial_shuffle, unshuffle};
pub use wilcoxon::{normal_p, wilcoxon_signed_rank, Wilcoxon, WilcoxonMethod, EXACT_MAX_N};

use crate::error::Result;
use crate::minicube::Minicube;
use crate::models::{Batch, Forecast, Model};

/// Why a pixel carries no score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Landcover,
    TargetCount,
    ContextCount,
    MinNdvi,
    Variation,
    TooFewTargets,
    ZeroVariance,
    NoForecast,
}

/// Model forecasts for `cubes` in batches. With `shuffle_seed`, each batch is spatially
/// shuffled before prediction and the predictions are moved back to their source pixels.
pub fn predict_cubes(model: &Model, cubes: &[&Minicube], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Forecast>> {
    let mut out = Vec::with_capacity(cubes.len());
    for (i, chunk) in cubes.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::from_cubes(chunk, &model.weather_stats, None)?;
        let pred = match shuffle_seed {
            Some(seed) => {
                let (shuffled, perm) = spatial_shuffle(&batch, seed.wrapping_add(i as u64));
                unshuffle(&model.predict(&shuffled)?, &perm)
            }
            None => model.predict(&batch)?,
        };
        let (_, k, h, w) = pred.dims4();
        for (j, cube) in chunk.iter().enumerate() {
            let one = pred.narrow(0, j, 1).reshape(vec![k, h, w]);
            out.push(Forecast::emit(one, &model.model_id(), model.config_hash(), cube, Vec::new()));
        }
    }
    Ok(out)
}

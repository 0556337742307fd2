use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filter::pixel_filter;
use super::horizon::HorizonAccumulator;
use super::metrics::{pixel_metrics, Metrics, PixelScore};
use super::Reason;
use crate::binio::{create_dir, read_json, write_json};
use crate::error::{ensure, Error, Result};
use crate::minicube::{Landcover, Minicube};
use crate::models::{context_fingerprint, Forecast};

/// Horizon of the short-range RMSE, in days.
pub const SHORT_HORIZON_DAYS: usize = 25;

/// Margins a model must beat the reference by, per metric in [`Metrics::NAMES`] order.
pub const OUTPERFORMANCE_THRESHOLDS: [f64; 4] = [0.05, 0.01, 0.05, 0.01];
/// Wins out of four needed for a minicube to count.
pub const OUTPERFORMANCE_MIN_WINS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cube_id: String,
    pub landcover: Landcover,
    pub n_pixels: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandcoverScore {
    pub landcover: Landcover,
    pub n_cubes: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub model_id: String,
    pub config_hash: String,
    /// Means per (minicube, landcover), sorted by cube id then class.
    pub rows: Vec<ScoreRow>,
    pub per_landcover: Vec<LandcoverScore>,
    /// Unweighted mean of the per-landcover means; `None` when nothing was scored.
    pub macro_avg: Option<Metrics>,
    pub n_pixels: usize,
    /// Excluded pixels by reason.
    pub reasons: BTreeMap<Reason, usize>,
    /// Pooled RMSE per target step over scored pixels.
    pub horizon_rmse: Vec<Option<f64>>,
    /// Pooled RMSE over the first [`SHORT_HORIZON_DAYS`].
    pub rmse_short: Option<f64>,
    /// Fraction of minicubes beating climatology, when compared.
    pub outperformance: Option<f64>,
    /// Hash of the dataset the table was scored on.
    #[serde(default)]
    pub dataset_hash: Option<String>,
    #[serde(default)]
    pub split: Option<String>,
    /// Whether forecasts were made from spatially shuffled inputs.
    #[serde(default)]
    pub shuffled: bool,
}

/// Mean within (minicube, landcover), then within landcover, then across landcover classes.
/// Input order does not matter.
pub fn aggregate(model_id: &str, config_hash: &str, scores: &[PixelScore]) -> ScoreTable {
    let mut sorted: Vec<&PixelScore> = scores.iter().collect();
    sorted.sort_by(|a, b| (&a.cube_id, a.landcover, a.pixel).cmp(&(&b.cube_id, b.landcover, b.pixel)));
    let mut groups: BTreeMap<(&str, Landcover), Vec<Metrics>> = BTreeMap::new();
    for s in sorted {
        groups.entry((s.cube_id.as_str(), s.landcover)).or_default().push(s.metrics);
    }
    let rows: Vec<ScoreRow> = groups
        .iter()
        .map(|((cube, lc), ms)| ScoreRow {
            cube_id: cube.to_string(),
            landcover: *lc,
            n_pixels: ms.len(),
            metrics: Metrics::mean(ms).expect("group is non-empty"),
        })
        .collect();
    let mut by_class: BTreeMap<Landcover, Vec<Metrics>> = BTreeMap::new();
    for r in &rows {
        by_class.entry(r.landcover).or_default().push(r.metrics);
    }
    let per_landcover: Vec<LandcoverScore> = by_class
        .iter()
        .map(|(lc, ms)| LandcoverScore { landcover: *lc, n_cubes: ms.len(), metrics: Metrics::mean(ms).expect("non-empty") })
        .collect();
    let macro_avg = Metrics::mean(&per_landcover.iter().map(|l| l.metrics).collect::<Vec<_>>());
    ScoreTable {
        model_id: model_id.to_string(),
        config_hash: config_hash.to_string(),
        rows,
        per_landcover,
        macro_avg,
        n_pixels: scores.len(),
        reasons: BTreeMap::new(),
        horizon_rmse: Vec::new(),
        rmse_short: None,
        outperformance: None,
        dataset_hash: None,
        split: None,
        shuffled: false,
    }
}

/// Filters and scores every cube against its forecast.
pub fn evaluate_forecasts(
    model_id: &str,
    config_hash: &str,
    cubes: &[&Minicube],
    forecasts: &[Forecast],
) -> Result<ScoreTable> {
    ensure!(cubes.len() == forecasts.len(), "{} cubes but {} forecasts", cubes.len(), forecasts.len());
    let mut scores = Vec::new();
    let mut reasons: BTreeMap<Reason, usize> = BTreeMap::new();
    let mut horizon: Option<HorizonAccumulator> = None;
    for (cube, fc) in cubes.iter().zip(forecasts) {
        ensure!(fc.cube_id == cube.id, "forecast for {} paired with cube {}", fc.cube_id, cube.id);
        ensure!(
            fc.context_fingerprint == context_fingerprint(cube),
            "forecast for {} was made from different context data",
            cube.id
        );
        let (t, k, hw) = (cube.context_len, cube.target_len, cube.height() * cube.width());
        ensure!(fc.ndvi_hat.shape() == [k, cube.height(), cube.width()], "forecast shape {:?}", fc.ndvi_hat.shape());
        let acc = horizon.get_or_insert_with(|| HorizonAccumulator::new(k));
        ensure!(acc.steps() == k, "cubes disagree on the target length");
        let filter = pixel_filter(cube)?;
        let valid = cube.valid_mask()?;
        for p in 0..hw {
            if let Some(r) = filter.reasons[p] {
                *reasons.entry(r).or_default() += 1;
                continue;
            }
            let target: Vec<f64> = (0..k).map(|s| cube.ndvi.data()[(t + s) * hw + p] as f64).collect();
            let pred: Vec<f64> = (0..k).map(|s| fc.ndvi_hat.data()[s * hw + p] as f64).collect();
            let ok: Vec<bool> = (0..k).map(|s| valid.data()[(t + s) * hw + p] > 0.0).collect();
            match pixel_metrics(&target, &pred, &ok) {
                Ok(metrics) => {
                    acc.add_series(&target, &pred, &ok);
                    scores.push(PixelScore {
                        cube_id: cube.id.clone(),
                        pixel: p,
                        landcover: cube.landcover_at(p / cube.width(), p % cube.width()).expect("filtered"),
                        metrics,
                        valid_target: filter.valid_target[p],
                        valid_context: filter.valid_context[p],
                    });
                }
                Err(r) => *reasons.entry(r).or_default() += 1,
            }
        }
    }
    let mut table = aggregate(model_id, config_hash, &scores);
    table.reasons = reasons;
    if let Some(acc) = horizon {
        table.horizon_rmse = acc.per_step();
        table.rmse_short = acc.within_days(SHORT_HORIZON_DAYS);
    }
    Ok(table)
}

/// Number of metrics on which `model` beats `reference` by more than the threshold.
pub fn outperformance_wins(model: &Metrics, reference: &Metrics) -> usize {
    model
        .higher_is_better()
        .iter()
        .zip(reference.higher_is_better())
        .zip(OUTPERFORMANCE_THRESHOLDS)
        .filter(|((m, r), thr)| *m - r > *thr)
        .count()
}

impl ScoreTable {
    /// Per-minicube scores: the mean of the cube's landcover rows.
    pub fn per_cube(&self) -> BTreeMap<String, Metrics> {
        let mut groups: BTreeMap<&str, Vec<Metrics>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(&r.cube_id).or_default().push(r.metrics);
        }
        groups.into_iter().map(|(c, ms)| (c.to_string(), Metrics::mean(&ms).expect("non-empty"))).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let path = dir.join("scores.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for r in &self.rows {
            w.serialize(CsvRow {
                cube_id: &r.cube_id,
                landcover: r.landcover.name(),
                n_pixels: r.n_pixels,
                r2: r.metrics.r2,
                rmse: r.metrics.rmse,
                nse: r.metrics.nse,
                abs_bias: r.metrics.abs_bias,
                model_id: &self.model_id,
                config_hash: &self.config_hash,
            })
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("summary.json"), self)?;
        write_json(&dir.join("reasons.json"), &ReasonHistogram { config_hash: &self.config_hash, reasons: &self.reasons })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("summary.json"))
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    cube_id: &'a str,
    landcover: &'a str,
    n_pixels: usize,
    r2: f64,
    rmse: f64,
    nse: f64,
    abs_bias: f64,
    model_id: &'a str,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct ReasonHistogram<'a> {
    config_hash: &'a str,
    reasons: &'a BTreeMap<Reason, usize>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, "scores.csv", e.to_string())
}

/// Fraction of minicubes where `model` wins on at least three of the four metrics.
/// Both tables must cover the same minicubes.
pub fn outperformance(model: &ScoreTable, reference: &ScoreTable) -> Result<f64> {
    let a = model.per_cube();
    let b = reference.per_cube();
    ensure!(
        a.keys().eq(b.keys()),
        "score tables cover different minicubes ({} vs {})",
        a.len(),
        b.len()
    );
    ensure!(!a.is_empty(), "no scored minicubes to compare");
    let wins = a.iter().filter(|(c, m)| outperformance_wins(m, &b[*c]) >= OUTPERFORMANCE_MIN_WINS).count();
    Ok(wins as f64 / a.len() as f64)
}

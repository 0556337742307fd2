//! Parameter-free reference forecasters: persistence, previous year and
//! leave-one-year-out climatology.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::binio::{create_dir, read_f32, read_json, write_f32, write_json};
use crate::error::{ensure, Error, Result};
use crate::hashing::config_hash;
use crate::minicube::{Minicube, STEP_DAYS};
use crate::models::Forecast;
use crate::tensor::Tensor;

/// Bins of the day-of-year grid (5-day stride).
pub const YEAR_BINS: usize = 73;

/// Width of the climatology smoothing window in grid steps (30 days).
pub const BOX_WIDTH_STEPS: usize = 6;

/// Multi-year observed NDVI of one location.
#[derive(Clone, Debug)]
pub struct HistoryStack {
    pub location_id: String,
    pub dates: Vec<NaiveDate>,
    /// `[N, H, W]`, NaN where not validly observed.
    pub ndvi: Tensor<f32>,
    /// `[N, H, W]` in {0, 1}.
    pub valid: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct HistoryManifest {
    format: String,
    location_id: String,
    dates: Vec<NaiveDate>,
    height: usize,
    width: usize,
}

impl HistoryStack {
    pub fn new(location_id: String, dates: Vec<NaiveDate>, ndvi: Tensor<f32>, valid: Tensor<f32>) -> Result<Self> {
        ensure!(ndvi.rank() == 3 && ndvi.shape()[0] == dates.len(), "history ndvi shape {:?}", ndvi.shape());
        ensure!(valid.shape() == ndvi.shape(), "history validity shape {:?}", valid.shape());
        ensure!(dates.windows(2).all(|w| w[0] < w[1]), "history timestamps must be strictly increasing");
        ensure!(valid.data().iter().all(|&v| v == 0.0 || v == 1.0), "history validity must be binary");
        Ok(Self { location_id, dates, ndvi, valid })
    }

    pub fn hw(&self) -> usize {
        self.ndvi.shape()[1] * self.ndvi.shape()[2]
    }

    /// Valid (date, value) observations of flat pixel `p`.
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        let hw = self.hw();
        self.dates.iter().enumerate().filter_map(move |(n, &d)| {
            let k = n * hw + p;
            (self.valid.data()[k] == 1.0 && self.ndvi.data()[k].is_finite()).then(|| (d, self.ndvi.data()[k] as f64))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_f32(&dir.join("ndvi.f32"), self.ndvi.data())?;
        write_f32(&dir.join("valid.f32"), self.valid.data())?;
        let m = HistoryManifest {
            format: "history/1".into(),
            location_id: self.location_id.clone(),
            dates: self.dates.clone(),
            height: self.ndvi.shape()[1],
            width: self.ndvi.shape()[2],
        };
        write_json(&dir.join("manifest.json"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: HistoryManifest = read_json(&dir.join("manifest.json"))?;
        let shape = vec![m.dates.len(), m.height, m.width];
        let n = shape.iter().product();
        let ndvi = Tensor::new(shape.clone(), read_f32(&dir.join("ndvi.f32"), "ndvi", n)?);
        let valid = Tensor::new(shape, read_f32(&dir.join("valid.f32"), "valid", n)?);
        Self::new(m.location_id, m.dates, ndvi, valid).map_err(|e| Error::format(dir, "history", e.to_string()))
    }
}

/// Grid bin of a date: nearest 5-day bin of the day of year.
pub fn year_bin(date: NaiveDate) -> usize {
    ((date.ordinal0() as f64 / STEP_DAYS as f64).round() as usize).min(YEAR_BINS - 1)
}

/// Piecewise-linear interpolation through `(xs, ys)` (sorted `xs`), constant beyond the ends.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    if x <= xs[0] {
        return Some(ys[0]);
    }
    if x >= xs[n - 1] {
        return Some(ys[n - 1]);
    }
    let i = xs.partition_point(|&v| v <= x);
    let (x0, x1, y0, y1) = (xs[i - 1], xs[i], ys[i - 1], ys[i]);
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

/// Centred 30-day box filter on the 5-day grid: taps at offsets −3..=3 with
/// half weight on the outermost two. Truncated at the ends and renormalized.
pub fn box_filter(values: &[f64]) -> Vec<f64> {
    let half = (BOX_WIDTH_STEPS / 2) as isize;
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            // Averaging deviations from the centre keeps constants exact.
            let centre = values[i as usize];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for o in -half..=half {
                let j = i + o;
                if j < 0 || j >= n {
                    continue;
                }
                let w = if o.abs() == half { 0.5 } else { 1.0 };
                acc += w * (values[j as usize] - centre);
                wsum += w;
            }
            centre + acc / wsum
        })
        .collect()
}

/// Amplitude factor of [`box_filter`] on a sinusoid of period `period_steps` grid steps.
pub fn box_filter_gain(period_steps: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI / period_steps;
    let half = BOX_WIDTH_STEPS / 2;
    let mut g = 1.0;
    for o in 1..half {
        g += 2.0 * (w * o as f64).cos();
    }
    g += (w * half as f64).cos();
    g / BOX_WIDTH_STEPS as f64
}

fn target_dates(cube: &Minicube) -> &[NaiveDate] {
    &cube.time_axis[cube.context_len..]
}

fn nan_forecast(k: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::full(vec![k, h, w], f32::NAN)
}

/// Repeats the last valid context observation of every pixel.
pub fn persistence_forecast(cube: &Minicube) -> Result<Forecast> {
    let (t, k, h, w) = (cube.context_len, cube.target_len, cube.height(), cube.width());
    let hw = h * w;
    let mut out = nan_forecast(k, h, w);
    let mut flagged = Vec::new();
    for p in 0..hw {
        let last = (0..t)
            .rev()
            .map(|s| s * hw + p)
            .find(|&i| cube.quality_mask.data()[i] == 1.0 && cube.ndvi.data()[i].is_finite())
            .map(|i| cube.ndvi.data()[i]);
        match last {
            Some(v) => (0..k).for_each(|s| out.data_mut()[s * hw + p] = v),
            None => flagged.push(p),
        }
    }
    Ok(Forecast::emit(out, Baseline::Persistence.id(), &Baseline::Persistence.hash(), cube, flagged))
}

/// Last year's valid observations, linearly interpolated to this year's target days.
pub fn previous_year_forecast(cube: &Minicube, history: &HistoryStack) -> Result<Forecast> {
    let (k, h, w) = (cube.target_len, cube.height(), cube.width());
    ensure!(history.hw() == h * w, "history grid does not match cube {}", cube.id);
    let hw = h * w;
    let dates = target_dates(cube);
    let mut out = nan_forecast(k, h, w);
    let mut flagged = Vec::new();
    for p in 0..hw {
        let mut missing = false;
        for (s, d) in dates.iter().enumerate() {
            let prev = d.year() - 1;
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                history.pixel(p).filter(|(dd, _)| dd.year() == prev).map(|(dd, v)| (dd.ordinal0() as f64, v)).unzip();
            match interp_linear(&xs, &ys, d.ordinal0() as f64) {
                Some(v) => out.data_mut()[s * hw + p] = v as f32,
                None => missing = true,
            }
        }
        if missing {
            (0..k).for_each(|s| out.data_mut()[s * hw + p] = f32::NAN);
            flagged.push(p);
        }
    }
    Ok(Forecast::emit(out, Baseline::PreviousYear.id(), &Baseline::PreviousYear.hash(), cube, flagged))
}

/// Mean seasonal cycle of all years except `target_year` on the 73-bin grid,
/// box-filtered. `None` if fewer than two years have data.
pub fn climatology_curve(history: &HistoryStack, p: usize, target_year: i32) -> Option<Vec<f64>> {
    let mut by_year: std::collections::BTreeMap<i32, (Vec<f64>, Vec<f64>)> = Default::default();
    for (d, v) in history.pixel(p).filter(|(d, _)| d.year() != target_year) {
        let e = by_year.entry(d.year()).or_default();
        let x = year_bin(d) as f64;
        if e.0.last() == Some(&x) {
            continue;
        }
        e.0.push(x);
        e.1.push(v);
    }
    if by_year.len() < 2 {
        return None;
    }
    let per_year: Vec<Vec<f64>> = by_year
        .values()
        .map(|(xs, ys)| (0..YEAR_BINS).map(|b| interp_linear(xs, ys, b as f64).expect("non-empty year")).collect())
        .collect();
    let mean: Vec<f64> = (0..YEAR_BINS)
        .map(|b| {
            // Sorted summation makes the mean independent of year order.
            let mut col: Vec<f64> = per_year.iter().map(|y| y[b]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect();
    Some(box_filter(&mean))
}

pub fn climatology_forecast(cube: &Minicube, history: &HistoryStack) -> Result<Forecast> {
    let (k, h, w) = (cube.target_len, cube.height(), cube.width());
    ensure!(history.hw() == h * w, "history grid does not match cube {}", cube.id);
    let hw = h * w;
    let dates = target_dates(cube);
    let target_year = dates[0].year();
    let mut out = nan_forecast(k, h, w);
    let mut flagged = Vec::new();
    for p in 0..hw {
        match climatology_curve(history, p, target_year) {
            Some(curve) => {
                for (s, d) in dates.iter().enumerate() {
                    out.data_mut()[s * hw + p] = curve[year_bin(*d)] as f32;
                }
            }
            None => flagged.push(p),
        }
    }
    Ok(Forecast::emit(out, Baseline::Climatology.id(), &Baseline::Climatology.hash(), cube, flagged))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Persistence,
    #[serde(rename = "prevyear")]
    PreviousYear,
    Climatology,
}

impl Baseline {
    pub fn id(self) -> &'static str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::PreviousYear => "prevyear",
            Baseline::Climatology => "climatology",
        }
    }

    pub fn hash(self) -> String {
        config_hash(&(self, BOX_WIDTH_STEPS, YEAR_BINS))
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Baseline::Persistence, Baseline::PreviousYear, Baseline::Climatology]
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| Error::Contract(format!("unknown baseline {s:?}")))
    }

    pub fn forecast(self, cube: &Minicube, history: Option<&HistoryStack>) -> Result<Forecast> {
        let need = || history.ok_or_else(|| Error::Contract(format!("{} needs the location history", self.id())));
        match self {
            Baseline::Persistence => persistence_forecast(cube),
            Baseline::PreviousYear => previous_year_forecast(cube, need()?),
            Baseline::Climatology => climatology_forecast(cube, need()?),
        }
    }

    /// Baselines have no learnable parameters.
    pub fn parameter_count(self) -> usize {
        0
    }
}

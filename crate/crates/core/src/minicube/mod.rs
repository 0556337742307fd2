//! Minicubes: one spatio-temporal sample of satellite frames, masks, static
//! layers and daily weather, plus the on-disk format and a synthetic world.

mod io;
mod split;
mod synth;

pub use io::{load_minicube, save_minicube};
pub use split::{Split, SplitSpec, SubsetSpec};
pub use synth::{
    generate_dataset, synthesize_minicube, ClassResponse, CubeSite, Dataset, LocationWorld, SyntheticWorldParams,
};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Days covered by one image timestep.
pub const STEP_DAYS: usize = 5;

/// Daily meteorological drivers, in column order of [`Minicube::weather`].
pub const WEATHER_VARS: [&str; 8] =
    ["rainfall", "pressure", "temp_mean", "temp_min", "temp_max", "wind", "humidity", "radiation"];

/// Statistics emitted per variable and window by [`aggregate_weather`].
pub const WEATHER_STATS: [&str; 4] = ["min", "mean", "max", "std"];

/// Landcover classes. Ids are the values stored in the class map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Landcover {
    Water = 0,
    Cropland = 1,
    Forest = 2,
    Grassland = 3,
    Shrubland = 4,
    Urban = 5,
}

impl Landcover {
    pub const ALL: [Landcover; 6] = [
        Landcover::Water,
        Landcover::Cropland,
        Landcover::Forest,
        Landcover::Grassland,
        Landcover::Shrubland,
        Landcover::Urban,
    ];

    pub fn from_id(id: f32) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u8 as f32 == id)
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn is_vegetated(self) -> bool {
        matches!(self, Landcover::Cropland | Landcover::Forest | Landcover::Grassland | Landcover::Shrubland)
    }

    pub fn name(self) -> &'static str {
        match self {
            Landcover::Water => "water",
            Landcover::Cropland => "cropland",
            Landcover::Forest => "forest",
            Landcover::Grassland => "grassland",
            Landcover::Shrubland => "shrubland",
            Landcover::Urban => "urban",
        }
    }
}

/// One sample: `T` context and `K` target frames on an `H x W` grid.
///
/// Cuboids are `[T+K, H, W]`, maps `[H, W]`, weather `[5·(T+K), V]`.
/// NaN in the reflectances marks "not observed"; `quality_mask == 0` marks
/// observed but contaminated pixels.
#[derive(Clone, Debug)]
pub struct Minicube {
    pub id: String,
    pub location_id: String,
    pub split: Split,
    pub context_len: usize,
    pub target_len: usize,
    pub time_axis: Vec<NaiveDate>,
    /// Longitude and latitude of the cube centre.
    pub center: [f64; 2],
    pub sat_red: Tensor<f32>,
    pub sat_nir: Tensor<f32>,
    pub ndvi: Tensor<f32>,
    pub quality_mask: Tensor<f32>,
    pub landcover_mask: Tensor<f32>,
    pub landcover_class: Tensor<f32>,
    pub weather: Tensor<f32>,
    pub weather_vars: Vec<String>,
    pub elevation: Tensor<f32>,
}

impl Minicube {
    pub fn steps(&self) -> usize {
        self.context_len + self.target_len
    }

    pub fn height(&self) -> usize {
        self.ndvi.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ndvi.shape()[2]
    }

    pub fn landcover_at(&self, row: usize, col: usize) -> Option<Landcover> {
        Landcover::from_id(self.landcover_class.at(&[row, col]))
    }

    /// `M_Q ⊙ M_L`, additionally zero wherever NDVI is NaN.
    pub fn valid_mask(&self) -> Result<Tensor<f32>> {
        let mut m = valid_pixel_mask(&self.quality_mask, &self.landcover_mask)?;
        for (v, x) in m.data_mut().iter_mut().zip(self.ndvi.data()) {
            if x.is_nan() {
                *v = 0.0;
            }
        }
        Ok(m)
    }

    /// Weather aggregated to one `[4V]` row per image timestep.
    pub fn weather_steps(&self) -> Result<Tensor<f32>> {
        aggregate_weather(&self.weather, STEP_DAYS)
    }

    /// Checks the structural invariants of the data model.
    pub fn validate(&self) -> Result<()> {
        let s = self.steps();
        ensure!(s > 0 && self.context_len > 0, "cube {}: empty context or time axis", self.id);
        ensure!(self.ndvi.rank() == 3 && self.ndvi.shape()[0] == s, "cube {}: ndvi shape {:?}", self.id, self.ndvi.shape());
        let cuboid = self.ndvi.shape();
        let (h, w) = (cuboid[1], cuboid[2]);
        for (name, t) in [("sat_red", &self.sat_red), ("sat_nir", &self.sat_nir), ("quality_mask", &self.quality_mask)] {
            ensure!(t.shape() == cuboid, "cube {}: {name} shape {:?} != {:?}", self.id, t.shape(), cuboid);
        }
        for (name, t) in [
            ("landcover_mask", &self.landcover_mask),
            ("landcover_class", &self.landcover_class),
            ("elevation", &self.elevation),
        ] {
            ensure!(t.shape() == [h, w], "cube {}: {name} shape {:?} != [{h}, {w}]", self.id, t.shape());
        }
        ensure!(is_binary(&self.quality_mask), "cube {}: quality mask is not binary", self.id);
        ensure!(is_binary(&self.landcover_mask), "cube {}: landcover mask is not binary", self.id);
        ensure!(self.time_axis.len() == s, "cube {}: time axis has {} entries, expected {s}", self.id, self.time_axis.len());
        for pair in self.time_axis.windows(2) {
            let gap = (pair[1] - pair[0]).num_days();
            ensure!(gap == STEP_DAYS as i64, "cube {}: time axis stride {gap} days", self.id);
        }
        ensure!(
            self.weather.rank() == 2 && self.weather.shape()[0] == STEP_DAYS * s,
            "cube {}: weather shape {:?}, expected [{}, V]",
            self.id,
            self.weather.shape(),
            STEP_DAYS * s
        );
        ensure!(self.weather.shape()[1] == self.weather_vars.len(), "cube {}: weather column names", self.id);
        let derived = compute_ndvi(&self.sat_red, &self.sat_nir)?;
        let consistent = derived
            .data()
            .iter()
            .zip(self.ndvi.data())
            .all(|(a, b)| (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits());
        ensure!(consistent, "cube {}: ndvi differs from the value derived from red/nir", self.id);
        Ok(())
    }
}

fn is_binary(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&x| x == 0.0 || x == 1.0)
}

/// `(NIR − Red) / (NIR + Red + 1e−8)`, elementwise; NaN propagates.
pub fn compute_ndvi(red: &Tensor<f32>, nir: &Tensor<f32>) -> Result<Tensor<f32>> {
    ensure!(red.shape() == nir.shape(), "ndvi: red {:?} vs nir {:?}", red.shape(), nir.shape());
    Ok(red.zip_map(nir, |r, n| (n - r) / (n + r + 1e-8)))
}

/// Product of the quality mask `[S, H, W]` and the landcover mask `[H, W]`
/// broadcast over time.
pub fn valid_pixel_mask(quality: &Tensor<f32>, landcover: &Tensor<f32>) -> Result<Tensor<f32>> {
    ensure!(quality.rank() == 3, "quality mask must be [S, H, W], got {:?}", quality.shape());
    ensure!(
        landcover.shape() == &quality.shape()[1..],
        "landcover mask {:?} does not match frames {:?}",
        landcover.shape(),
        &quality.shape()[1..]
    );
    ensure!(is_binary(quality), "quality mask has non-binary values");
    ensure!(is_binary(landcover), "landcover mask has non-binary values");
    let hw = landcover.len();
    let lc = landcover.data();
    Ok(Tensor::from_fn(quality.shape().to_vec(), |i| quality.data()[i] * lc[i % hw]))
}

/// Per window of `stride` days and per variable: (min, mean, max, population std).
///
/// Output is `[D / stride, 4V]`, variable-major: column `4v + s` holds
/// statistic `s` of variable `v`.
pub fn aggregate_weather(daily: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
    ensure!(daily.rank() == 2, "weather must be [D, V], got {:?}", daily.shape());
    let (d, v) = (daily.shape()[0], daily.shape()[1]);
    ensure!(stride > 0 && d % stride == 0, "{d} weather days are not divisible by stride {stride}");
    let windows = d / stride;
    let mut out = Tensor::zeros(vec![windows, 4 * v]);
    for win in 0..windows {
        for var in 0..v {
            let xs: Vec<f64> = (0..stride).map(|k| daily.data()[(win * stride + k) * v + var] as f64).collect();
            let n = stride as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var_pop = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out.data_mut()[win * 4 * v + 4 * var..win * 4 * v + 4 * var + 4];
            row.copy_from_slice(&[min as f32, mean as f32, max as f32, var_pop.sqrt() as f32]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn ndvi_examples() {
        let n = compute_ndvi(&t(&[3], &[0.1, 0.3, 0.0]), &t(&[3], &[0.5, 0.3, 0.0])).unwrap();
        assert_abs_diff_eq!(n.data()[0], 0.4 / 0.6, epsilon = 1e-6);
        assert_eq!(n.data()[1], 0.0);
        assert_eq!(n.data()[2], 0.0);
    }

    #[test]
    fn ndvi_propagates_nan_and_rejects_shape_mismatch() {
        let n = compute_ndvi(&t(&[2], &[f32::NAN, 0.2]), &t(&[2], &[0.4, f32::NAN])).unwrap();
        assert!(n.data().iter().all(|x| x.is_nan()));
        assert!(compute_ndvi(&t(&[2], &[0.1, 0.2]), &t(&[1], &[0.4])).is_err());
    }

    #[test]
    fn valid_mask_broadcasts_landcover() {
        let q = t(&[3, 1, 2], &[1., 1., 1., 0., 0., 1.]);
        let l = t(&[1, 2], &[1., 0.]);
        let m = valid_pixel_mask(&q, &l).unwrap();
        assert_eq!(m.data(), &[1., 0., 1., 0., 0., 0.]);
        assert!(valid_pixel_mask(&t(&[1, 1, 1], &[0.5]), &t(&[1, 1], &[1.])).is_err());
        assert!(valid_pixel_mask(&q, &t(&[2, 1], &[1., 1.])).is_err());
    }

    #[test]
    fn weather_window_statistics() {
        let daily = t(&[5, 1], &[1., 2., 3., 4., 5.]);
        let agg = aggregate_weather(&daily, 5).unwrap();
        assert_eq!(agg.shape(), &[1, 4]);
        assert_abs_diff_eq!(agg.data()[0], 1.0);
        assert_abs_diff_eq!(agg.data()[1], 3.0);
        assert_abs_diff_eq!(agg.data()[2], 5.0);
        assert_abs_diff_eq!(agg.data()[3], 2f32.sqrt(), epsilon = 1e-6);
        assert!(aggregate_weather(&t(&[4, 1], &[0.; 4]), 5).is_err());
    }

    #[test]
    fn weather_windows_are_local() {
        let daily = Tensor::from_fn(vec![10, 2], |i| (i / 2) as f32 * if i % 2 == 0 { 1.0 } else { -2.0 });
        let agg = aggregate_weather(&daily, 5).unwrap();
        for win in 0..2 {
            for var in 0..2 {
                let xs: Vec<f64> = (0..5).map(|k| daily.at(&[win * 5 + k, var]) as f64).collect();
                let mean = xs.iter().sum::<f64>() / 5.0;
                let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0).sqrt();
                let lo = xs.iter().cloned().fold(f64::MAX, f64::min);
                let hi = xs.iter().cloned().fold(f64::MIN, f64::max);
                let got: Vec<f64> = (0..4).map(|s| agg.at(&[win, 4 * var + s]) as f64).collect();
                for (g, e) in got.iter().zip([lo, mean, hi, sd]) {
                    assert_abs_diff_eq!(*g, e, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn constant_weather_has_zero_spread() {
        let agg = aggregate_weather(&Tensor::full(vec![10, 3], 4.25f32), 5).unwrap();
        for row in agg.data().chunks(4) {
            assert_eq!(row, &[4.25, 4.25, 4.25, 0.0]);
        }
    }

    proptest! {
        #[test]
        fn window_means_average_to_global_mean(xs in prop::collection::vec(-50f32..50.0, 1..8usize).prop_flat_map(|v| {
            let n = v.len() * 5;
            prop::collection::vec(-50f32..50.0, n)
        })) {
            let d = xs.len();
            let daily = Tensor::new(vec![d, 1], xs.clone());
            let agg = aggregate_weather(&daily, 5).unwrap();
            let mean_of_means: f64 = agg.data().chunks(4).map(|r| r[1] as f64).sum::<f64>() / (d / 5) as f64;
            let global: f64 = xs.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            prop_assert!((mean_of_means - global).abs() < 1e-4);
        }

        #[test]
        fn ndvi_is_bounded(r in 0f32..=1.0, n in 0f32..=1.0) {
            let v = compute_ndvi(&t(&[1], &[r]), &t(&[1], &[n])).unwrap().data()[0];
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}

//! Synthetic world with a known weather → vegetation response.
//!
//! Each location has a landcover layout, an elevation map and six (by
//! default) years of daily weather. Per pixel, NDVI is a seasonal sinusoid
//! (class-specific, phase delayed with elevation) plus a weather anomaly
//! (exponential rainfall memory with a per-pixel time constant, and a
//! temperature term) plus a persistent per-year offset. Observations add
//! Gaussian noise, cloud blobs and missing acquisitions.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{compute_ndvi, Landcover, Minicube, Split, SplitSpec, STEP_DAYS, WEATHER_VARS};
use crate::baselines::HistoryStack;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

const DAYS_PER_YEAR: usize = 365;
const STEPS_PER_YEAR: usize = DAYS_PER_YEAR / STEP_DAYS;

/// Seasonal shape and weather sensitivity of one landcover class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResponse {
    pub base: f64,
    pub amplitude: f64,
    /// Fraction of a year by which the sinusoid is shifted.
    pub phase: f64,
    /// NDVI per standard deviation of remembered rainfall anomaly (times `rain_sensitivity`).
    pub rain: f64,
    /// NDVI per standard deviation of smoothed temperature anomaly (times `temp_sensitivity`).
    pub temp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldParams {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub context_len: usize,
    pub target_len: usize,
    /// Years of history simulated per location.
    pub years: usize,
    pub base_year: i32,
    /// Step-of-year indices at which cubes may start.
    pub cube_starts: Vec<usize>,
    pub cloud_rate: f64,
    /// Probability that a whole acquisition is missing (NaN).
    pub missing_rate: f64,
    pub noise_std: f64,
    pub year_offset_std: f64,
    pub rain_sensitivity: f64,
    pub temp_sensitivity: f64,
    /// Range of the per-pixel rainfall memory time constant, in days.
    pub rain_memory_days: [f64; 2],
    /// Relative spatial variation of the per-pixel response coefficients.
    pub coefficient_variation: f64,
    pub landcover_patches: usize,
    /// Sampling weights of the classes, indexed by [`Landcover`] id.
    pub landcover_weights: [f64; 6],
    /// Indexed by [`Landcover`] id.
    pub classes: [ClassResponse; 6],
}

impl SyntheticWorldParams {
    /// 32×32 cubes with 10 context and 20 target steps.
    pub fn desk(seed: u64) -> Self {
        let c = |base, amplitude, phase, rain, temp| ClassResponse { base, amplitude, phase, rain, temp };
        Self {
            seed,
            height: 32,
            width: 32,
            context_len: 10,
            target_len: 20,
            years: 6,
            base_year: 2017,
            cube_starts: vec![16, 22, 28, 34],
            cloud_rate: 0.25,
            missing_rate: 0.03,
            noise_std: 0.02,
            year_offset_std: 0.15,
            rain_sensitivity: 0.06,
            temp_sensitivity: 0.03,
            rain_memory_days: [40.0, 120.0],
            coefficient_variation: 0.3,
            landcover_patches: 7,
            landcover_weights: [0.05, 0.3, 0.22, 0.25, 0.13, 0.05],
            classes: [
                c(-0.15, 0.03, 0.25, 0.0, 0.0),
                c(0.42, 0.28, 0.30, 1.0, -0.7),
                c(0.60, 0.22, 0.24, 0.5, -0.4),
                c(0.47, 0.25, 0.26, 1.2, -0.8),
                c(0.36, 0.20, 0.22, 0.9, -0.6),
                c(0.10, 0.03, 0.25, 0.1, 0.0),
            ],
        }
    }

    pub fn steps(&self) -> usize {
        self.context_len + self.target_len
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height > 0 && self.width > 0, "grid must be non-empty");
        ensure!(self.context_len > 0 && self.target_len > 0, "context and target lengths must be positive");
        ensure!(self.years >= 1, "at least one year must be simulated");
        ensure!(!self.cube_starts.is_empty(), "no cube start steps");
        for &s in &self.cube_starts {
            ensure!(s + self.steps() <= STEPS_PER_YEAR, "cube starting at step {s} crosses the year end");
        }
        for (name, r) in [("cloud_rate", self.cloud_rate), ("missing_rate", self.missing_rate)] {
            ensure!((0.0..=1.0).contains(&r), "{name} {r} outside [0, 1]");
        }
        ensure!(self.noise_std >= 0.0 && self.year_offset_std >= 0.0, "noise scales must be non-negative");
        let [lo, hi] = self.rain_memory_days;
        ensure!(lo >= 1.0 && hi >= lo, "rain memory range {lo}..{hi} invalid");
        ensure!(self.landcover_patches > 0, "need at least one landcover patch");
        ensure!(
            self.landcover_weights.iter().all(|&w| w >= 0.0) && self.landcover_weights.iter().sum::<f64>() > 0.0,
            "landcover weights must be non-negative with a positive sum"
        );
        Ok(())
    }

    /// Calendar date of step `s` in simulated year `y`. Every year restarts on 1 January.
    pub fn date(&self, year: usize, step: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.base_year + year as i32, 1, 1)
            .expect("valid base year")
            .checked_add_days(Days::new((step * STEP_DAYS) as u64))
            .expect("date in range")
    }
}

/// Where a cube is cut from the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CubeSite {
    pub location: usize,
    pub year: usize,
    pub start: usize,
    pub split: Split,
}

impl CubeSite {
    pub fn cube_id(&self) -> String {
        format!("{}-{}-y{}-s{:02}", self.split, location_id(self.location), self.year, self.start)
    }
}

pub fn location_id(location: usize) -> String {
    format!("loc{location:03}")
}

fn stream(seed: u64, location: usize, purpose: u64) -> ChaCha8Rng {
    let mut x = seed ^ (location as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Smooth zero-mean, unit-variance random field built from Gaussian bumps.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize, bumps: usize) -> Vec<f64> {
    let scale = h.max(w) as f64;
    let centers: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let r = scale * rng.random_range(0.15..0.4);
            (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), r, normal(rng))
        })
        .collect();
    let mut f: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            centers.iter().map(|&(cy, cx, r, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp()).sum()
        })
        .collect();
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in &mut f {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
    }
    f
}

fn ar1(rng: &mut impl Rng, n: usize, phi: f64, sd: f64) -> Vec<f64> {
    let innov = sd * (1.0 - phi * phi).sqrt();
    let mut x = sd * normal(rng);
    (0..n)
        .map(|_| {
            x = phi * x + innov * normal(rng);
            x
        })
        .collect()
}

/// Full multi-year simulation of one location.
#[derive(Clone, Debug)]
pub struct LocationWorld {
    pub location: usize,
    pub center: [f64; 2],
    pub landcover: Vec<Landcover>,
    pub elevation: Tensor<f32>,
    /// `[years·365, V]`.
    pub weather: Tensor<f32>,
    /// Noise-free NDVI, `[years·73, H, W]`.
    pub ndvi_true: Tensor<f32>,
    pub red: Tensor<f32>,
    pub nir: Tensor<f32>,
    pub ndvi: Tensor<f32>,
    pub quality: Tensor<f32>,
}

impl LocationWorld {
    pub fn generate(p: &SyntheticWorldParams, location: usize) -> Result<Self> {
        p.validate()?;
        let (h, w) = (p.height, p.width);
        let hw = h * w;
        let days = p.years * DAYS_PER_YEAR;
        let steps = p.years * STEPS_PER_YEAR;

        // Static layers.
        let mut rng = stream(p.seed, location, 1);
        let center = [rng.random_range(-5.0..25.0), rng.random_range(40.0..58.0)];
        let total: f64 = p.landcover_weights.iter().sum();
        let seeds: Vec<(f64, f64, Landcover)> = (0..p.landcover_patches)
            .map(|_| {
                let mut u = rng.random_range(0.0..total);
                let mut class = Landcover::Urban;
                for (c, &wt) in Landcover::ALL.iter().zip(&p.landcover_weights) {
                    if u < wt {
                        class = *c;
                        break;
                    }
                    u -= wt;
                }
                (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), class)
            })
            .collect();
        let landcover: Vec<Landcover> = (0..hw)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                seeds
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                        let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                        da.total_cmp(&db)
                    })
                    .map(|s| s.2)
                    .expect("at least one patch")
            })
            .collect();
        let base_elev = rng.random_range(100.0..1200.0);
        let relief = smooth_field(&mut rng, h, w, 5);
        let elevation: Vec<f64> = relief.iter().map(|r| base_elev + 80.0 * r).collect();
        let fields: Vec<Vec<f64>> = (0..6).map(|_| smooth_field(&mut rng, h, w, 6)).collect();

        // Weather, shared by all pixels of the location.
        let mut rng = stream(p.seed, location, 2);
        let temp_anom = ar1(&mut rng, days, 0.85, 2.5);
        let wet = ar1(&mut rng, days, 0.97, 0.6);
        let press = ar1(&mut rng, days, 0.9, 6.0);
        let wind = ar1(&mut rng, days, 0.7, 1.0);
        let elev_km = base_elev / 1000.0;
        let nv = WEATHER_VARS.len();
        let mut weather = vec![0f32; days * nv];
        let mut rain = vec![0f64; days];
        for d in 0..days {
            let doy = (d % DAYS_PER_YEAR) as f64;
            let season = (2.0 * PI * (doy / DAYS_PER_YEAR as f64 - 0.29)).sin();
            let p_rain = (0.35 + 0.2 * wet[d]).clamp(0.05, 0.9);
            let r = if rng.random::<f64>() < p_rain {
                let mean = 5.0 * (1.0 + 0.5 * wet[d]).max(0.2);
                -mean * (1.0 - rng.random::<f64>()).ln()
            } else {
                0.0
            };
            rain[d] = r;
            let t_mean = 9.0 + 10.0 * season - 6.0 * elev_km + temp_anom[d];
            let t_min = t_mean - 4.0 - 1.5 * normal(&mut rng).abs();
            let t_max = t_mean + 4.0 + 1.5 * normal(&mut rng).abs() - if r > 0.0 { 1.5 } else { 0.0 };
            let humidity = (70.0 + 8.0 * wet[d] - 2.0 * temp_anom[d] + 5.0 * normal(&mut rng)).clamp(20.0, 100.0);
            let radiation =
                (160.0 + 110.0 * season - if r > 0.0 { 40.0 } else { 0.0 } + 15.0 * normal(&mut rng)).max(0.0);
            let row = [
                r,
                1013.0 - 110.0 * elev_km + press[d],
                t_mean,
                t_min,
                t_max,
                (3.0 + wind[d]).abs(),
                humidity,
                radiation,
            ];
            for (v, x) in row.iter().enumerate() {
                weather[d * nv + v] = *x as f32;
            }
        }
        let rain_mean = rain.iter().sum::<f64>() / days as f64;
        let rain_sd = (rain.iter().map(|r| (r - rain_mean).powi(2)).sum::<f64>() / days as f64).sqrt().max(1e-9);

        // Per-pixel response coefficients, smooth within landcover patches.
        let cv = p.coefficient_variation;
        let [tau_lo, tau_hi] = p.rain_memory_days;
        let class = |i: usize| &p.classes[landcover[i] as usize];
        let amp: Vec<f64> = (0..hw).map(|i| class(i).amplitude * (1.0 + 0.5 * cv * fields[0][i])).collect();
        let phase: Vec<f64> =
            (0..hw).map(|i| class(i).phase + 0.01 * fields[1][i] + 0.04 * elevation[i] / 1000.0).collect();
        let a_rain: Vec<f64> =
            (0..hw).map(|i| p.rain_sensitivity * class(i).rain * (1.0 + cv * fields[2][i])).collect();
        let a_temp: Vec<f64> =
            (0..hw).map(|i| p.temp_sensitivity * class(i).temp * (1.0 + cv * fields[3][i])).collect();
        let tau: Vec<f64> =
            (0..hw).map(|i| tau_lo + (tau_hi - tau_lo) / (1.0 + (-1.5 * fields[4][i]).exp())).collect();
        let brightness: Vec<f64> = (0..hw).map(|i| (0.4 + 0.05 * fields[5][i]).clamp(0.2, 0.6)).collect();

        let mut rng = stream(p.seed, location, 3);
        let offsets: Vec<Vec<f64>> = (0..p.years)
            .map(|_| {
                let g = normal(&mut rng);
                let f = smooth_field(&mut rng, h, w, 6);
                f.iter().map(|v| p.year_offset_std * (0.6 * g + 0.8 * v)).collect()
            })
            .collect();

        let temp_alpha: f64 = 1.0 / 8.0;
        let temp_norm = 2.5 * (temp_alpha / (2.0 - temp_alpha)).sqrt();
        let mut ndvi_true = vec![0f32; steps * hw];
        for i in 0..hw {
            let alpha = 1.0 / tau[i];
            let rain_norm = rain_sd * (alpha / (2.0 - alpha)).sqrt();
            let c = class(i);
            let (mut r_ema, mut t_ema) = (0.0, 0.0);
            for d in 0..days {
                r_ema += alpha * ((rain[d] - rain_mean) - r_ema);
                t_ema += temp_alpha * (temp_anom[d] - t_ema);
                if d % STEP_DAYS != STEP_DAYS - 1 {
                    continue;
                }
                let doy = (d % DAYS_PER_YEAR) as f64;
                let year = d / DAYS_PER_YEAR;
                let s = d / STEP_DAYS;
                let seasonal = c.base + amp[i] * (2.0 * PI * (doy / DAYS_PER_YEAR as f64 - phase[i])).sin();
                let anomaly = a_rain[i] * r_ema / rain_norm + a_temp[i] * t_ema / temp_norm;
                ndvi_true[s * hw + i] = (seasonal + anomaly + offsets[year][i]).clamp(-0.3, 0.95) as f32;
            }
        }

        // Observations.
        let mut rng = stream(p.seed, location, 4);
        let n_cloud = (p.cloud_rate * hw as f64).round() as usize;
        let mut red = vec![0f32; steps * hw];
        let mut nir = vec![0f32; steps * hw];
        let mut quality = vec![1f32; steps * hw];
        for s in 0..steps {
            let frame = s * hw..(s + 1) * hw;
            if rng.random::<f64>() < p.missing_rate {
                red[frame.clone()].fill(f32::NAN);
                nir[frame.clone()].fill(f32::NAN);
                quality[frame].fill(0.0);
                continue;
            }
            let mut cloudy = vec![false; hw];
            if n_cloud > 0 {
                let field = smooth_field(&mut rng, h, w, 3);
                let mut order: Vec<usize> = (0..hw).collect();
                order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
                for &i in &order[..n_cloud] {
                    cloudy[i] = true;
                }
            }
            for i in 0..hw {
                let k = s * hw + i;
                if cloudy[i] {
                    let r = 0.25 + 0.25 * rng.random::<f64>();
                    red[k] = r as f32;
                    nir[k] = (r * (1.0 + 0.06 * rng.random::<f64>())) as f32;
                    quality[k] = 0.0;
                } else {
                    let v = (ndvi_true[k] as f64 + p.noise_std * normal(&mut rng)).clamp(-0.95, 0.95);
                    let b = brightness[i];
                    nir[k] = (b * (1.0 + v) / 2.0) as f32;
                    red[k] = (b * (1.0 - v) / 2.0) as f32;
                }
            }
        }
        let red = Tensor::new(vec![steps, h, w], red);
        let nir = Tensor::new(vec![steps, h, w], nir);
        let ndvi = compute_ndvi(&red, &nir)?;
        Ok(Self {
            location,
            center,
            landcover,
            elevation: Tensor::new(vec![h, w], elevation.iter().map(|&e| e as f32).collect()),
            weather: Tensor::new(vec![days, nv], weather),
            ndvi_true: Tensor::new(vec![steps, h, w], ndvi_true),
            red,
            nir,
            ndvi,
            quality: Tensor::new(vec![steps, h, w], quality),
        })
    }

    /// Cuts the cube for `site` (which must belong to this location).
    pub fn cube(&self, p: &SyntheticWorldParams, site: &CubeSite) -> Result<Minicube> {
        ensure!(site.location == self.location, "site location {} != world {}", site.location, self.location);
        ensure!(site.year < p.years, "year {} not simulated", site.year);
        ensure!(site.start + p.steps() <= STEPS_PER_YEAR, "cube starting at {} crosses the year end", site.start);
        let s0 = site.year * STEPS_PER_YEAR + site.start;
        let n = p.steps();
        let d0 = site.year * DAYS_PER_YEAR + site.start * STEP_DAYS;
        let (h, w) = (p.height, p.width);
        let lc_class = Tensor::new(vec![h, w], self.landcover.iter().map(|c| c.id() as f32).collect());
        let lc_mask = lc_class.map(|c| if Landcover::from_id(c).is_some_and(Landcover::is_vegetated) { 1.0 } else { 0.0 });
        let cube = Minicube {
            id: site.cube_id(),
            location_id: location_id(self.location),
            split: site.split,
            context_len: p.context_len,
            target_len: p.target_len,
            time_axis: (0..n).map(|k| p.date(site.year, site.start + k)).collect(),
            center: self.center,
            sat_red: self.red.narrow(0, s0, n),
            sat_nir: self.nir.narrow(0, s0, n),
            ndvi: self.ndvi.narrow(0, s0, n),
            quality_mask: self.quality.narrow(0, s0, n),
            landcover_mask: lc_mask,
            landcover_class: lc_class,
            weather: self.weather.narrow(0, d0, n * STEP_DAYS),
            weather_vars: WEATHER_VARS.iter().map(|s| s.to_string()).collect(),
            elevation: self.elevation.clone(),
        };
        cube.validate()?;
        Ok(cube)
    }

    /// Observed NDVI over all simulated years, invalid observations as NaN.
    pub fn history(&self, p: &SyntheticWorldParams) -> Result<HistoryStack> {
        let dates = (0..p.years).flat_map(|y| (0..STEPS_PER_YEAR).map(move |s| (y, s))).map(|(y, s)| p.date(y, s)).collect();
        let valid = self.quality.zip_map(&self.ndvi, |q, v| if q == 1.0 && v.is_finite() { 1.0 } else { 0.0 });
        let ndvi = self.ndvi.zip_map(&valid, |v, m| if m == 1.0 { v } else { f32::NAN });
        HistoryStack::new(location_id(self.location), dates, ndvi, valid)
    }
}

/// One cube generated from scratch (simulates the whole location).
pub fn synthesize_minicube(p: &SyntheticWorldParams, site: &CubeSite) -> Result<Minicube> {
    LocationWorld::generate(p, site.location)?.cube(p, site)
}

/// Generated benchmark: cubes of every subset and the history of every location used.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cubes: Vec<Minicube>,
    pub histories: BTreeMap<String, HistoryStack>,
}

impl Dataset {
    pub fn split(&self, tag: Split) -> Vec<&Minicube> {
        self.cubes.iter().filter(|c| c.split == tag).collect()
    }

    pub fn history(&self, cube: &Minicube) -> Option<&HistoryStack> {
        self.histories.get(&cube.location_id)
    }
}

/// Draws `count` distinct (location, year, start) sites per subset, seeded.
pub fn plan_sites(p: &SyntheticWorldParams, spec: &SplitSpec) -> Result<Vec<CubeSite>> {
    spec.validate()?;
    let mut sites = Vec::new();
    for (k, sub) in spec.subsets.iter().enumerate() {
        for &y in &sub.years {
            ensure!(y < p.years, "subset {} uses year {y}, only {} simulated", sub.tag, p.years);
        }
        let mut all: Vec<CubeSite> = sub
            .location_ids()
            .flat_map(|l| sub.years.iter().flat_map(move |&y| p.cube_starts.iter().map(move |&s| (l, y, s))))
            .map(|(location, year, start)| CubeSite { location, year, start, split: sub.tag })
            .collect();
        ensure!(
            sub.count <= all.len(),
            "subset {} asks for {} cubes but only {} sites exist",
            sub.tag,
            sub.count,
            all.len()
        );
        let mut rng = stream(p.seed, usize::MAX - k, 5);
        for i in (1..all.len()).rev() {
            let j = rng.random_range(0..=i);
            all.swap(i, j);
        }
        all.truncate(sub.count);
        sites.extend(all);
    }
    sites.sort_by_key(|s| (s.location, s.year, s.start));
    Ok(sites)
}

pub fn generate_dataset(p: &SyntheticWorldParams, spec: &SplitSpec) -> Result<Dataset> {
    let sites = plan_sites(p, spec)?;
    let mut cubes = Vec::with_capacity(sites.len());
    let mut histories = BTreeMap::new();
    let mut i = 0;
    while i < sites.len() {
        let loc = sites[i].location;
        let world = LocationWorld::generate(p, loc)?;
        while i < sites.len() && sites[i].location == loc {
            cubes.push(world.cube(p, &sites[i])?);
            i += 1;
        }
        histories.insert(location_id(loc), world.history(p)?);
    }
    cubes.sort_by_key(|c| (c.split, c.id.clone()));
    Ok(Dataset { cubes, histories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticWorldParams {
        let mut p = SyntheticWorldParams::desk(seed);
        p.height = 12;
        p.width = 12;
        p.years = 3;
        p
    }

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let p = small(11);
        let site = CubeSite { location: 4, year: 1, start: 22, split: Split::Val };
        let a = synthesize_minicube(&p, &site).unwrap();
        let b = synthesize_minicube(&p, &site).unwrap();
        for (x, y) in [(&a.ndvi, &b.ndvi), (&a.sat_red, &b.sat_red), (&a.weather, &b.weather), (&a.quality_mask, &b.quality_mask)] {
            assert_eq!(bits(x), bits(y));
        }
        let c = synthesize_minicube(&small(12), &site).unwrap();
        assert_ne!(bits(&a.ndvi), bits(&c.ndvi));
    }

    #[test]
    fn zero_cloud_rate_gives_clear_sky() {
        let mut p = small(1);
        p.cloud_rate = 0.0;
        p.missing_rate = 0.0;
        let cube = synthesize_minicube(&p, &CubeSite { location: 0, year: 0, start: 16, split: Split::Train }).unwrap();
        assert!(cube.quality_mask.data().iter().all(|&q| q == 1.0));
    }

    #[test]
    fn clear_fraction_matches_cloud_rate() {
        let mut p = small(5);
        p.missing_rate = 0.0;
        p.cloud_rate = 0.3;
        let cube = synthesize_minicube(&p, &CubeSite { location: 2, year: 2, start: 28, split: Split::Train }).unwrap();
        let n = cube.quality_mask.len() as f64;
        let clear = cube.quality_mask.sum() as f64 / n;
        let sigma = (0.3 * 0.7 / n).sqrt();
        assert!((clear - 0.7).abs() <= 3.0 * sigma, "clear fraction {clear}");
    }

    #[test]
    fn without_anomalies_ndvi_repeats_every_year() {
        let mut p = small(9);
        p.rain_sensitivity = 0.0;
        p.temp_sensitivity = 0.0;
        p.year_offset_std = 0.0;
        p.noise_std = 0.0;
        p.cloud_rate = 0.0;
        p.missing_rate = 0.0;
        let world = LocationWorld::generate(&p, 3).unwrap();
        let hw = p.height * p.width;
        let per_year = STEPS_PER_YEAR * hw;
        let obs = world.ndvi.data();
        for y in 1..p.years {
            assert_eq!(&obs[..per_year], &obs[y * per_year..(y + 1) * per_year], "year {y}");
        }
        // Brute-force the generator's seasonal equation for one pixel.
        let i = 5;
        let c = p.classes[world.landcover[i] as usize];
        let t = world.ndvi_true.data();
        let vals: Vec<f64> = (0..STEPS_PER_YEAR).map(|s| t[s * hw + i] as f64).collect();
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(((hi + lo) / 2.0 - c.base).abs() < 0.01, "midline {} vs base {}", (hi + lo) / 2.0, c.base);
    }

    #[test]
    fn cubes_satisfy_invariants() {
        let p = small(2);
        let world = LocationWorld::generate(&p, 1).unwrap();
        for &start in &p.cube_starts {
            let cube = world.cube(&p, &CubeSite { location: 1, year: 2, start, split: Split::OodT }).unwrap();
            cube.validate().unwrap();
            assert_eq!(cube.weather.shape(), &[150, 8]);
            assert_eq!(cube.ndvi.shape(), &[30, 12, 12]);
        }
    }

    #[test]
    fn planned_sites_are_disjoint_across_subsets() {
        let p = SyntheticWorldParams::desk(4);
        let sites = plan_sites(&p, &SplitSpec::desk()).unwrap();
        assert_eq!(sites.len(), 280);
        let mut seen = std::collections::BTreeMap::new();
        for s in &sites {
            let prev = seen.insert((s.location, s.year, s.start), s.split);
            assert!(prev.is_none(), "site {s:?} drawn twice");
        }
        for (tag, n) in [(Split::Train, 200), (Split::Val, 20), (Split::OodT, 40)] {
            assert_eq!(sites.iter().filter(|s| s.split == tag).count(), n);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = small(0);
        p.cube_starts = vec![60];
        assert!(p.validate().is_err());
        let mut p = small(0);
        p.cloud_rate = 1.5;
        assert!(p.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::minicube::Minicube;
use crate::tensor::Tensor;

/// Per-frame input channels: ndvi, red, nir, quality flag, elevation.
pub const FRAME_CHANNELS: usize = 5;
/// Elevation (m) is divided by this before entering a model.
pub const ELEVATION_SCALE: f32 = 1000.0;

/// Standardization of the aggregated weather features, fitted on training cubes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl WeatherStats {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    pub fn fit(cubes: &[&Minicube]) -> Result<Self> {
        ensure!(!cubes.is_empty(), "cannot fit weather statistics on zero cubes");
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for cube in cubes {
            let w = cube.weather_steps()?;
            let cols = w.shape()[1];
            if sum.is_empty() {
                sum = vec![0.0; cols];
                sq = vec![0.0; cols];
            }
            ensure!(cols == sum.len(), "cube {} has {cols} weather features, expected {}", cube.id, sum.len());
            for row in w.data().chunks(cols) {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += *v as f64;
                    sq[j] += (*v as f64).powi(2);
                }
                n += 1;
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / nf - m * m).max(0.0).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s as f32
                }
            })
            .collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Square window `[top..top+size, left..left+size]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Model-ready tensors for `B` cubes. Every tensor keeps its own `H × W` pixel
/// axes so a spatial permutation can be applied to all of them alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, S, 5, H, W]`; NaN reflectances zero-filled.
    pub frames: Tensor<f32>,
    /// `[B, S, 4V, H, W]` standardized weather, constant over pixels of one cube.
    pub weather: Tensor<f32>,
    /// `[B, K, H, W]` target NDVI, zero where invalid.
    pub target: Tensor<f32>,
    /// `[B, K, H, W]` `M_Q ⊙ M_L`, zero where the target is NaN.
    pub mask: Tensor<f32>,
    pub context_len: usize,
    pub target_len: usize,
}

impl Batch {
    pub fn from_cubes(cubes: &[&Minicube], stats: &WeatherStats, crop: Option<Crop>) -> Result<Self> {
        ensure!(!cubes.is_empty(), "a batch needs at least one cube");
        let (t, k) = (cubes[0].context_len, cubes[0].target_len);
        let s = t + k;
        let (h0, w0) = (cubes[0].height(), cubes[0].width());
        let (top, left, h, w) = match crop {
            Some(c) => {
                ensure!(c.top + c.size <= h0 && c.left + c.size <= w0, "crop {c:?} exceeds {h0}x{w0}");
                (c.top, c.left, c.size, c.size)
            }
            None => (0, 0, h0, w0),
        };
        let nc = stats.len();
        let b = cubes.len();
        let hw = h * w;
        let mut frames = vec![0.0f32; b * s * FRAME_CHANNELS * hw];
        let mut weather = vec![0.0f32; b * s * nc * hw];
        let mut target = vec![0.0f32; b * k * hw];
        let mut mask = vec![0.0f32; b * k * hw];
        for (bi, cube) in cubes.iter().enumerate() {
            ensure!(
                cube.context_len == t && cube.target_len == k && cube.height() == h0 && cube.width() == w0,
                "cube {} does not match the batch geometry",
                cube.id
            );
            let valid = cube.valid_mask()?;
            let ws = cube.weather_steps()?;
            ensure!(ws.shape()[1] == nc, "cube {} has {} weather features, stats expect {nc}", cube.id, ws.shape()[1]);
            let src = |step: usize, i: usize, j: usize| (step * h0 + top + i) * w0 + left + j;
            for step in 0..s {
                let base = (bi * s + step) * FRAME_CHANNELS * hw;
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        let q = src(step, i, j);
                        let fill = |v: f32| if v.is_nan() { 0.0 } else { v };
                        frames[base + p] = fill(cube.ndvi.data()[q]);
                        frames[base + hw + p] = fill(cube.sat_red.data()[q]);
                        frames[base + 2 * hw + p] = fill(cube.sat_nir.data()[q]);
                        frames[base + 3 * hw + p] = cube.quality_mask.data()[q];
                        frames[base + 4 * hw + p] = cube.elevation.data()[(top + i) * w0 + left + j] / ELEVATION_SCALE;
                        if step >= t {
                            let o = (bi * k + step - t) * hw + p;
                            let m = valid.data()[q];
                            mask[o] = m;
                            target[o] = if m > 0.0 { cube.ndvi.data()[q] } else { 0.0 };
                        }
                    }
                }
                let wbase = (bi * s + step) * nc * hw;
                for f in 0..nc {
                    let v = (ws.data()[step * nc + f] - stats.mean[f]) / stats.std[f];
                    weather[wbase + f * hw..wbase + (f + 1) * hw].fill(v);
                }
            }
        }
        Ok(Self {
            frames: Tensor::new(vec![b, s, FRAME_CHANNELS, h, w], frames),
            weather: Tensor::new(vec![b, s, nc, h, w], weather),
            target: Tensor::new(vec![b, k, h, w], target),
            mask: Tensor::new(vec![b, k, h, w], mask),
            context_len: t,
            target_len: k,
        })
    }

    pub fn size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.context_len + self.target_len
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[4]
    }

    pub fn weather_features(&self) -> usize {
        self.weather.shape()[2]
    }

    /// Input frame at step `t`, `[B, 5, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (b, h, w) = (self.size(), self.height(), self.width());
        self.frames.narrow(1, t, 1).reshape(vec![b, FRAME_CHANNELS, h, w])
    }

    /// Elevation channel `[B, 1, H, W]`.
    pub fn elevation(&self) -> Tensor<f32> {
        self.frame(0).narrow(1, 4, 1)
    }

    /// Weather maps of step `t`, `[B, 4V, H, W]`.
    pub fn weather_at(&self, t: usize) -> Tensor<f32> {
        let (b, h, w) = (self.size(), self.height(), self.width());
        self.weather.narrow(1, t, 1).reshape(vec![b, self.weather_features(), h, w])
    }

    /// Weather of all steps, `[B, V·S·4, H, W]`, variable-major: the `S·4` features
    /// of variable `v` (step-major, then statistic) are contiguous.
    pub fn weather_all(&self) -> Tensor<f32> {
        let (b, s, h, w) = (self.size(), self.steps(), self.height(), self.width());
        let nc = self.weather_features();
        let v = nc / 4;
        self.weather
            .clone()
            .reshape(vec![b, s, v, 4, h, w])
            .permute(&[0, 2, 1, 3, 4, 5])
            .reshape(vec![b, v * s * 4, h, w])
    }

    /// Channel-stacked frames `t0..t0+n`, `[B, n·5, H, W]`.
    pub fn stacked_frames(&self, t0: usize, n: usize) -> Tensor<f32> {
        let (b, h, w) = (self.size(), self.height(), self.width());
        self.frames.narrow(1, t0, n).reshape(vec![b, n * FRAME_CHANNELS, h, w])
    }

    /// Copy with every target-period frame, target and mask zeroed, so nothing
    /// after the context can leak into a forecast.
    pub fn without_targets(&self) -> Batch {
        let mut out = self.clone();
        let (t, k) = (self.context_len, self.target_len);
        let per_step = self.frames.len() / (self.size() * self.steps());
        for b in 0..self.size() {
            let start = (b * self.steps() + t) * per_step;
            out.frames.data_mut()[start..start + k * per_step].fill(0.0);
        }
        out.target.data_mut().fill(0.0);
        out.mask.data_mut().fill(0.0);
        out
    }

    /// Restricts the batch to the given samples (in order).
    pub fn select(&self, rows: &[usize]) -> Batch {
        let pick = |t: &Tensor<f32>| {
            let parts: Vec<Tensor<f32>> = rows.iter().map(|&r| t.narrow(0, r, 1)).collect();
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
        };
        Batch {
            frames: pick(&self.frames),
            weather: pick(&self.weather),
            target: pick(&self.target),
            mask: pick(&self.mask),
            context_len: self.context_len,
            target_len: self.target_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minicube::{synthesize_minicube, CubeSite, Split, SyntheticWorldParams};

    fn cube(loc: usize) -> Minicube {
        let mut p = SyntheticWorldParams::desk(1);
        p.height = 8;
        p.width = 8;
        synthesize_minicube(&p, &CubeSite { location: loc, year: 0, start: 16, split: Split::Train }).unwrap()
    }

    #[test]
    fn batch_layout_matches_cube() {
        let (a, b) = (cube(0), cube(1));
        let stats = WeatherStats::fit(&[&a, &b]).unwrap();
        let batch = Batch::from_cubes(&[&a, &b], &stats, None).unwrap();
        assert_eq!(batch.frames.shape(), &[2, 30, 5, 8, 8]);
        assert_eq!(batch.weather.shape(), &[2, 30, 32, 8, 8]);
        let f = batch.frame(12);
        let v = b.ndvi.at(&[12, 3, 4]);
        assert_eq!(f.at(&[1, 0, 3, 4]), if v.is_nan() { 0.0 } else { v });
        assert_eq!(f.at(&[1, 3, 3, 4]), b.quality_mask.at(&[12, 3, 4]));
        assert_eq!(f.at(&[1, 4, 3, 4]), b.elevation.at(&[3, 4]) / ELEVATION_SCALE);
        let ws = b.weather_steps().unwrap();
        let wa = batch.weather_at(7);
        assert!((wa.at(&[1, 5, 2, 2]) - (ws.at(&[7, 5]) - stats.mean[5]) / stats.std[5]).abs() < 1e-6);
        let valid = b.valid_mask().unwrap();
        assert_eq!(batch.mask.at(&[1, 3, 6, 1]), valid.at(&[13, 6, 1]));
        assert!(batch.target.all_finite());
    }

    #[test]
    fn all_step_weather_is_variable_major() {
        let a = cube(2);
        let batch = Batch::from_cubes(&[&a], &WeatherStats::fit(&[&a]).unwrap(), None).unwrap();
        let all = batch.weather_all();
        assert_eq!(all.shape(), &[1, 8 * 30 * 4, 8, 8]);
        // variable 3, step 11, statistic 2
        assert_eq!(all.at(&[0, 3 * 120 + 11 * 4 + 2, 0, 0]), batch.weather_at(11).at(&[0, 3 * 4 + 2, 0, 0]));
    }

    #[test]
    fn crop_and_select() {
        let (a, b) = (cube(0), cube(1));
        let stats = WeatherStats::fit(&[&a]).unwrap();
        let full = Batch::from_cubes(&[&a, &b], &stats, None).unwrap();
        let crop = Batch::from_cubes(&[&a, &b], &stats, Some(Crop { top: 2, left: 4, size: 4 })).unwrap();
        assert_eq!(crop.frame(3).at(&[1, 1, 0, 0]), full.frame(3).at(&[1, 1, 2, 4]));
        assert!(Batch::from_cubes(&[&a], &stats, Some(Crop { top: 6, left: 0, size: 4 })).is_err());
        let sel = full.select(&[1]);
        assert_eq!(sel.frames, full.frames.narrow(0, 1, 1));
    }
}

use super::Reason;
use crate::error::Result;
use crate::minicube::Minicube;

pub const MIN_TARGET_OBS: usize = 10;
pub const MIN_CONTEXT_OBS: usize = 3;
pub const MIN_NDVI: f64 = 0.0;
pub const MIN_NDVI_STD: f64 = 0.1;

/// Per-pixel eligibility for scoring, `[H·W]` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFilter {
    /// `None` when the pixel is kept.
    pub reasons: Vec<Option<Reason>>,
    pub valid_target: Vec<usize>,
    pub valid_context: Vec<usize>,
}

impl PixelFilter {
    pub fn eligible(&self, p: usize) -> bool {
        self.reasons[p].is_none()
    }

    pub fn kept(&self) -> usize {
        self.reasons.iter().filter(|r| r.is_none()).count()
    }
}

/// Keeps vegetated pixels with enough valid observations, positive NDVI and enough
/// variation. Minimum and standard deviation run over every valid observation of the
/// cube (context and target). The first failing rule is reported.
pub fn pixel_filter(cube: &Minicube) -> Result<PixelFilter> {
    let (t, s, hw) = (cube.context_len, cube.steps(), cube.height() * cube.width());
    let valid = cube.valid_mask()?;
    let mut out = PixelFilter { reasons: vec![None; hw], valid_target: vec![0; hw], valid_context: vec![0; hw] };
    for p in 0..hw {
        let obs: Vec<(usize, f64)> = (0..s)
            .filter(|&step| valid.data()[step * hw + p] > 0.0)
            .map(|step| (step, cube.ndvi.data()[step * hw + p] as f64))
            .collect();
        let n_ctx = obs.iter().filter(|(step, _)| *step < t).count();
        out.valid_context[p] = n_ctx;
        out.valid_target[p] = obs.len() - n_ctx;
        let lc = cube.landcover_at(p / cube.width(), p % cube.width());
        out.reasons[p] = if !lc.is_some_and(|c| c.is_vegetated()) {
            Some(Reason::Landcover)
        } else if out.valid_target[p] < MIN_TARGET_OBS {
            Some(Reason::TargetCount)
        } else if n_ctx < MIN_CONTEXT_OBS {
            Some(Reason::ContextCount)
        } else {
            let values: Vec<f64> = obs.iter().map(|o| o.1).collect();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
            if min <= MIN_NDVI {
                Some(Reason::MinNdvi)
            } else if std <= MIN_NDVI_STD {
                Some(Reason::Variation)
            } else {
                None
            }
        };
    }
    Ok(out)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::Batch;
use crate::tensor::Tensor;

/// Moves pixel column `perm[c]` of `t` to column `c`, where columns run over
/// `(batch, H·W)` of a `[B, ..., H, W]` tensor. Every middle index moves together.
pub fn permute_columns(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let shape = t.shape();
    let b = shape[0];
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mid = t.len() / (b * hw);
    assert_eq!(perm.len(), b * hw, "permutation covers {} columns, tensor has {}", perm.len(), b * hw);
    let mut out = t.clone();
    let (src, dst) = (t.data(), out.data_mut());
    for (c, &from) in perm.iter().enumerate() {
        let (bo, po) = (c / hw, c % hw);
        let (bi, pi) = (from / hw, from % hw);
        for m in 0..mid {
            dst[(bo * mid + m) * hw + po] = src[(bi * mid + m) * hw + pi];
        }
    }
    out
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (c, &from) in perm.iter().enumerate() {
        inv[from] = c;
    }
    inv
}

/// Applies one seeded permutation of the `(batch × H × W)` pixel columns to frames,
/// weather, targets and masks alike. Time series move with their pixel.
pub fn spatial_shuffle(batch: &Batch, seed: u64) -> (Batch, Vec<usize>) {
    let columns = batch.size() * batch.height() * batch.width();
    let mut perm: Vec<usize> = (0..columns).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled = Batch {
        frames: permute_columns(&batch.frames, &perm),
        weather: permute_columns(&batch.weather, &perm),
        target: permute_columns(&batch.target, &perm),
        mask: permute_columns(&batch.mask, &perm),
        context_len: batch.context_len,
        target_len: batch.target_len,
    };
    (shuffled, perm)
}

/// Undoes [`spatial_shuffle`] on any `[B, ..., H, W]` tensor, e.g. predictions.
pub fn unshuffle(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    permute_columns(t, &invert(perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FRAME_CHANNELS;
    use rand::Rng;

    fn batch() -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = |shape: Vec<usize>| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
        Batch {
            frames: r(vec![3, 5, FRAME_CHANNELS, 4, 4]),
            weather: r(vec![3, 5, 8, 4, 4]),
            target: r(vec![3, 2, 4, 4]),
            mask: r(vec![3, 2, 4, 4]),
            context_len: 3,
            target_len: 2,
        }
    }

    #[test]
    fn inverting_restores_the_batch() {
        let b = batch();
        let (s, perm) = spatial_shuffle(&b, 7);
        assert_ne!(s.frames, b.frames);
        assert_eq!(unshuffle(&s.frames, &perm), b.frames);
        assert_eq!(unshuffle(&s.weather, &perm), b.weather);
        assert_eq!(unshuffle(&s.target, &perm), b.target);
        assert_eq!(unshuffle(&s.mask, &perm), b.mask);
    }

    #[test]
    fn values_are_a_permutation() {
        let b = batch();
        let (s, _) = spatial_shuffle(&b, 8);
        let sorted = |t: &Tensor<f32>| {
            let mut v = t.data().to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        assert_eq!(sorted(&s.frames), sorted(&b.frames));
        assert_eq!(sorted(&s.weather), sorted(&b.weather));
    }

    #[test]
    fn a_traced_pixel_keeps_its_time_series() {
        let b = batch();
        let (s, perm) = spatial_shuffle(&b, 9);
        let hw = 16;
        for c in [0usize, 17, 40] {
            let (bo, po) = (c / hw, c % hw);
            let (bi, pi) = (perm[c] / hw, perm[c] % hw);
            for t in 0..5 {
                for ch in 0..FRAME_CHANNELS {
                    assert_eq!(s.frames.at(&[bo, t, ch, po / 4, po % 4]), b.frames.at(&[bi, t, ch, pi / 4, pi % 4]));
                }
                for f in 0..8 {
                    assert_eq!(s.weather.at(&[bo, t, f, po / 4, po % 4]), b.weather.at(&[bi, t, f, pi / 4, pi % 4]));
                }
            }
            for k in 0..2 {
                assert_eq!(s.target.at(&[bo, k, po / 4, po % 4]), b.target.at(&[bi, k, pi / 4, pi % 4]));
            }
        }
    }

    #[test]
    fn same_seed_same_permutation() {
        let b = batch();
        assert_eq!(spatial_shuffle(&b, 3).1, spatial_shuffle(&b, 3).1);
        assert_ne!(spatial_shuffle(&b, 3).1, spatial_shuffle(&b, 4).1);
    }
}

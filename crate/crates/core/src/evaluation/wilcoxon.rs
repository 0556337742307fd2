use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Result};

/// Largest sample size for which the null distribution is computed exactly.
pub const EXACT_MAX_N: usize = 20;
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub p_two_sided: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|` (1-based).
fn ranks(abs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut out = vec![0.0; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Signed-rank test of paired differences. Zeros are dropped and ties get average ranks.
/// Up to [`EXACT_MAX_N`] nonzero differences the null distribution of `W+` is counted
/// over all `2ⁿ` sign assignments; above it a tie-corrected normal approximation with
/// continuity correction is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon> {
    ensure!(diffs.iter().all(|d| d.is_finite()), "differences must be finite");
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    ensure!(!nz.is_empty(), "all differences are zero; the test is undefined");
    ensure!(nz.len() >= MIN_N, "need at least {MIN_N} nonzero differences, got {}", nz.len());
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let r = ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    if n <= EXACT_MAX_N {
        Ok(Wilcoxon { statistic, w_plus, p_two_sided: exact_p(&r, w_plus), n, method: WilcoxonMethod::Exact })
    } else {
        let mean = total / 2.0;
        let mut groups = abs.clone();
        groups.sort_by(f64::total_cmp);
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < groups.len() {
            let j = groups[i..].iter().take_while(|x| **x == groups[i]).count();
            tie_term += (j.pow(3) - j) as f64;
            i += j;
        }
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term / 48.0;
        Ok(Wilcoxon { statistic, w_plus, p_two_sided: normal_p(w_plus, mean, var), n, method: WilcoxonMethod::Normal })
    }
}

/// Two-sided p of the continuity-corrected normal approximation.
pub fn normal_p(w_plus: f64, mean: f64, var: f64) -> f64 {
    let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
    if var <= 0.0 {
        return 1.0;
    }
    let z = dev / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    (2.0 * std_normal.sf(z)).min(1.0)
}

/// Counts sign assignments by dynamic programming over doubled (integer) ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for &d in &doubled {
        for s in (d..=max).rev() {
            counts[s] += counts[s - d];
        }
    }
    let total = 2f64.powi(ranks.len() as i32);
    let obs = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=obs].iter().sum::<f64>() / total;
    let upper: f64 = counts[obs..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Walks all 2ⁿ sign patterns explicitly.
    fn brute_force_p(diffs: &[f64]) -> f64 {
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let r = ranks(&abs);
        let obs: f64 = diffs.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
        let n = diffs.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if w <= obs + 1e-9 {
                le += 1;
            }
            if w >= obs - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn five_positive_differences() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.method, WilcoxonMethod::Exact);
        assert_abs_diff_eq!(w.p_two_sided, 0.0625, epsilon = 1e-15);
    }

    #[test]
    fn balanced_differences_show_no_effect() {
        let w = wilcoxon_signed_rank(&[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(w.p_two_sided, 1.0);
        assert_eq!(brute_force_p(&[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]), 1.0);
    }

    #[test]
    fn sign_flip_keeps_p() {
        let d = [0.3, -1.2, 2.5, 0.7, 1.1, -0.2, 0.9];
        let flipped: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_signed_rank(&d).unwrap();
        let b = wilcoxon_signed_rank(&flipped).unwrap();
        assert_eq!(a.p_two_sided, b.p_two_sided);
        assert_eq!(a.statistic, b.statistic);
    }

    #[test]
    fn counting_matches_enumeration_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(5..=12);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4i32..=4) as f64).filter(|x| *x != 0.0).collect();
            if d.len() < 5 {
                continue;
            }
            let w = wilcoxon_signed_rank(&d).unwrap();
            assert_abs_diff_eq!(w.p_two_sided, brute_force_p(&d), epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_and_normal_agree_at_twenty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let shift = rng.random_range(-0.5..0.5);
            let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
            let exact = wilcoxon_signed_rank(&d).unwrap();
            let n = 20.0;
            let approx = normal_p(exact.w_plus, n * (n + 1.0) / 4.0, n * (n + 1.0) * (2.0 * n + 1.0) / 24.0);
            worst = worst.max((exact.p_two_sided - approx).abs());
        }
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn degenerate_inputs() {
        assert!(wilcoxon_signed_rank(&[0.0; 8]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 0.0, 0.0, 3.0]).is_err());
        let w = wilcoxon_signed_rank(&(1..=30).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Normal);
        assert!(w.p_two_sided < 1e-5);
    }
}

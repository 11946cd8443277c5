//! Structural similarity with a Gaussian-weighted sliding window.
//!
//! Local means, variances and covariance are computed with a separable
//! Gaussian filter over every fully contained window position (valid
//! mode), and the score is the mean of the local SSIM map. Identical
//! inputs score exactly 1.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// SSIM window and stabilizer configuration.
///
/// Defaults are the original constants: 11x11 Gaussian window with
/// sigma 1.5, k1 = 0.01, k2 = 0.03. `dynamic_range` is 1.0 for normalized
/// data and the HU window width (3000) for HU-scale data.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Precondition("SSIM window must be nonempty".into()));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Precondition(format!(
                "SSIM sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.k1.is_finite() && self.k2.is_finite()) || self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::Precondition(format!(
                "SSIM stabilizers must be positive, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !self.dynamic_range.is_finite() || self.dynamic_range <= 0.0 {
            return Err(Error::Precondition(format!(
                "SSIM dynamic range must be positive, got {}",
                self.dynamic_range
            )));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian window weights (sum exactly rescaled to 1).
    pub fn window_weights(&self) -> Vec<f64> {
        let center = (self.window as f64 - 1.0) / 2.0;
        let mut w: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }
}

/// Correlates each row with `weights` (valid mode): output width shrinks
/// by `weights.len() - 1`.
fn filter_rows(a: &ArrayView2<'_, f64>, weights: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = weights.len();
    let out_w = w - k + 1;
    let mut out = Array2::zeros((h, out_w));
    for i in 0..h {
        for j in 0..out_w {
            let mut acc = 0.0;
            for (u, &wt) in weights.iter().enumerate() {
                acc += wt * a[[i, j + u]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Correlates each column with `weights` (valid mode).
fn filter_cols(a: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = weights.len();
    let out_h = h - k + 1;
    let mut out = Array2::zeros((out_h, w));
    for i in 0..out_h {
        for j in 0..w {
            let mut acc = 0.0;
            for (u, &wt) in weights.iter().enumerate() {
                acc += wt * a[[i + u, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn local_means(a: &ArrayView2<'_, f64>, weights: &[f64]) -> Array2<f64> {
    filter_cols(&filter_rows(a, weights), weights)
}

/// Mean structural similarity between two same-shape 2D images.
pub fn ssim(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    params: &SsimParams,
) -> Result<f64> {
    params.validate()?;
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "SSIM needs matching shapes, got {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (h, w) = pred.dim();
    if h < params.window || w < params.window {
        return Err(Error::DegenerateInput(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            params.window
        )));
    }

    let weights = params.window_weights();
    let mu_x = local_means(&pred, &weights);
    let mu_y = local_means(&target, &weights);
    let xx = pred.mapv(|v| v * v);
    let yy = target.mapv(|v| v * v);
    let xy = &pred.to_owned() * &target;
    let e_xx = local_means(&xx.view(), &weights);
    let e_yy = local_means(&yy.view(), &weights);
    let e_xy = local_means(&xy.view(), &weights);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);

    let mut sum = 0.0;
    let count = mu_x.len();
    for idx in 0..count {
        let (i, j) = (idx / mu_x.dim().1, idx % mu_x.dim().1);
        let mx = mu_x[[i, j]];
        let my = mu_y[[i, j]];
        let var_x = e_xx[[i, j]] - mx * mx;
        let var_y = e_yy[[i, j]] - my * my;
        let cov = e_xy[[i, j]] - mx * my;
        let local = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        sum += local.clamp(-1.0, 1.0);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn window_weights_sum_to_one() {
        let params = SsimParams::default();
        let w = params.window_weights();
        assert_eq!(w.len(), 11);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // Symmetric around the center.
        for i in 0..5 {
            assert_abs_diff_eq!(w[i], w[10 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let img = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 31 + j * 7) % 13) as f64 / 13.0);
        assert_eq!(
            ssim(img.view(), img.view(), &SsimParams::default()).unwrap(),
            1.0
        );
    }

    #[test]
    fn constant_images_match_the_zero_variance_closed_form() {
        // mu_x = 0, mu_y = 1, all variances zero:
        // SSIM = C1 / (1 + C1) with C1 = (0.01 * 1)^2.
        let zeros = Array2::zeros((16, 16));
        let ones = Array2::from_elem((16, 16), 1.0);
        let got = ssim(zeros.view(), ones.view(), &SsimParams::default()).unwrap();
        let c1 = 0.0001;
        assert_abs_diff_eq!(got, c1 / (1.0 + c1), epsilon = 1e-12);
    }

    #[test]
    fn image_smaller_than_window_is_degenerate() {
        let img = Array2::<f64>::zeros((8, 8));
        assert!(matches!(
            ssim(img.view(), img.view(), &SsimParams::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    /// Brute-force oracle: per window position, accumulate the weighted
    /// moments with an explicit double loop over the 2D kernel.
    pub(crate) fn ssim_oracle(
        pred: &Array2<f64>,
        target: &Array2<f64>,
        params: &SsimParams,
    ) -> f64 {
        let weights = params.window_weights();
        let k = params.window;
        let (h, w) = pred.dim();
        let c1 = (params.k1 * params.dynamic_range).powi(2);
        let c2 = (params.k2 * params.dynamic_range).powi(2);
        let mut sum = 0.0;
        let mut count = 0usize;
        for i0 in 0..=(h - k) {
            for j0 in 0..=(w - k) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..k {
                    for v in 0..k {
                        let wt = weights[u] * weights[v];
                        let x = pred[[i0 + u, j0 + v]];
                        let y = target[[i0 + u, j0 + v]];
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let var_x = sxx - mx * mx;
                let var_y = syy - my * my;
                let cov = sxy - mx * my;
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn matches_the_brute_force_oracle_on_random_pairs() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(0x5EED);
        let params = SsimParams::default();
        for _ in 0..25 {
            let a = Array2::from_shape_fn((16, 16), |_| rng.next_u64() as f64 / u64::MAX as f64);
            let b = Array2::from_shape_fn((16, 16), |_| rng.next_u64() as f64 / u64::MAX as f64);
            let fast = ssim(a.view(), b.view(), &params).unwrap();
            let slow = ssim_oracle(&a, &b, &params);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-6);
        }
    }
}

//! Complex ideal ratio mask targets, bounded compression and mask application.

use num_complex::Complex;
use num_traits::Float;

use super::ModelError;
use crate::dsp::Spectrogram;

/// Compression bound `K`: compressed mask coordinates lie in `(-K, K)`.
pub const MASK_BOUND: f64 = 10.0;
/// Compression steepness `C`.
pub const MASK_STEEPNESS: f64 = 0.1;
/// Floor for `|Y|^2` in the ratio `S / Y`.
pub const POWER_FLOOR: f64 = 1e-8;
/// Distance from the bound at which compressed values are clamped before inversion.
pub const CLAMP_MARGIN: f64 = 1e-6;

/// `K (1 - e^{-C m}) / (1 + e^{-C m})`, evaluated as `K tanh(C m / 2)`.
pub fn compress(m: f64) -> f64 {
    MASK_BOUND * (0.5 * MASK_STEEPNESS * m).tanh()
}

/// Inverse of [`compress`]; inputs at or beyond the bound are clamped to `K - 1e-6`.
pub fn uncompress(c: f64) -> f64 {
    let lim = MASK_BOUND - CLAMP_MARGIN;
    let c = c.clamp(-lim, lim);
    -((MASK_BOUND - c) / (MASK_BOUND + c)).ln() / MASK_STEEPNESS
}

/// Per-bin compressed mask values for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFrame<T> {
    pub values: Vec<Complex<T>>,
}

impl<T: Float> MaskFrame<T> {
    /// The compressed identity mask `compress(1 + 0i)` on every bin.
    pub fn identity(bins: usize) -> Self {
        let one = T::from(compress(1.0)).unwrap();
        Self {
            values: vec![Complex::new(one, T::zero()); bins],
        }
    }

    pub fn zeros(bins: usize) -> Self {
        Self {
            values: vec![Complex::new(T::zero(), T::zero()); bins],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_bounded(&self) -> bool {
        let k = T::from(MASK_BOUND).unwrap();
        self.values.iter().all(|v| v.re.abs() < k && v.im.abs() < k)
    }
}

/// Compressed cIRM for every frame of a clean/noisy spectrogram pair.
pub fn compute_cirm(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Vec<MaskFrame<f64>>, ModelError> {
    if clean.n_frames() != noisy.n_frames() || clean.config.n_bins() != noisy.config.n_bins() {
        return Err(ModelError::Shape(format!(
            "clean {}x{} vs noisy {}x{}",
            clean.n_frames(),
            clean.config.n_bins(),
            noisy.n_frames(),
            noisy.config.n_bins()
        )));
    }
    clean
        .frames
        .iter()
        .zip(&noisy.frames)
        .map(|(s, y)| {
            if s.len() != y.len() {
                return Err(ModelError::Shape(format!("frame bins {} vs {}", s.len(), y.len())));
            }
            Ok(MaskFrame {
                values: s
                    .iter()
                    .zip(y)
                    .map(|(&s, &y)| {
                        let m = raw_ratio(s, y);
                        Complex::new(compress(m.re), compress(m.im))
                    })
                    .collect(),
            })
        })
        .collect()
}

/// `S / Y` with `|Y|^2` floored at [`POWER_FLOOR`].
pub fn raw_ratio(s: Complex<f64>, y: Complex<f64>) -> Complex<f64> {
    s * y.conj() / y.norm_sqr().max(POWER_FLOOR)
}

/// Uncompresses `mask` and multiplies it into `noisy` bin by bin.
pub fn apply_mask<T: Float>(noisy: &[Complex<T>], mask: &MaskFrame<T>) -> Result<Vec<Complex<T>>, ModelError> {
    if noisy.len() != mask.values.len() {
        return Err(ModelError::BinMismatch {
            got: noisy.len(),
            want: mask.values.len(),
        });
    }
    Ok(noisy
        .iter()
        .zip(&mask.values)
        .map(|(&y, m)| {
            let re = T::from(uncompress(m.re.to_f64().unwrap())).unwrap();
            let im = T::from(uncompress(m.im.to_f64().unwrap())).unwrap();
            y * Complex::new(re, im)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn literal_compress(m: f64) -> f64 {
        let e = (-MASK_STEEPNESS * m).exp();
        MASK_BOUND * (1.0 - e) / (1.0 + e)
    }

    #[test]
    fn compression_matches_literal_formula() {
        for m in [-30.0, -3.7, -1.0, 0.0, 0.25, 1.0, 3.7, 50.0] {
            assert!((compress(m) - literal_compress(m)).abs() < 1e-12, "{m}");
        }
        assert_eq!(compress(0.0), 0.0);
        assert!((compress(1.0) - 0.49958374957879975).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        assert!((uncompress(compress(3.7)) - 3.7).abs() < 1e-9);
        for i in -99..100 {
            let c = i as f64 * 0.0999;
            assert!((compress(uncompress(c)) - c).abs() < 1e-9);
        }
    }

    #[test]
    fn bound_is_clamped() {
        let at = uncompress(MASK_BOUND);
        assert!(at.is_finite());
        assert_eq!(at, uncompress(MASK_BOUND - CLAMP_MARGIN));
        assert_eq!(uncompress(-MASK_BOUND), -at);
        let y = [Complex::new(1.0, 0.0)];
        let out = apply_mask(&y, &MaskFrame { values: vec![Complex::new(MASK_BOUND, 0.0)] }).unwrap();
        assert!(out[0].re.is_finite() && out[0].re > 100.0);
    }

    #[test]
    fn identity_and_zero_masks() {
        let y: Vec<Complex<f64>> = (0..8).map(|k| Complex::new(k as f64 - 3.0, 0.5 * k as f64)).collect();
        let out = apply_mask(&y, &MaskFrame::identity(8)).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).norm() < 1e-6);
        }
        let out = apply_mask(&y, &MaskFrame::zeros(8)).unwrap();
        assert!(out.iter().all(|c| c.norm() == 0.0));
        assert!(matches!(
            apply_mask(&y, &MaskFrame::<f64>::zeros(7)),
            Err(ModelError::BinMismatch { got: 8, want: 7 })
        ));
    }

    #[test]
    fn ratio_of_equal_frames_is_one() {
        let y = Complex::new(0.3, -1.2);
        let m = raw_ratio(y, y);
        assert!((m - Complex::new(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(raw_ratio(Complex::new(0.0, 0.0), y), Complex::new(0.0, 0.0));
    }
}

//! MFCC front end: framing, power spectrum, mel filterbank, log, DCT-II.
//!
//! The defaults turn a one-second 16 kHz clip into a 101 x 40 matrix: 30 ms
//! Hann frames every 10 ms (offsets 0, 160, ..., 16000, zero-padded past the
//! end), a 512-point FFT, 40 mel filters between 20 Hz and 4 kHz, a log floor
//! of 1e-10 and an orthonormal DCT-II keeping all 40 coefficients.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{AudioClip, CLIP_LEN, SAMPLE_RATE};

pub const WINDOW_LEN: usize = 480;
pub const FRAME_SHIFT: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 40;
pub const N_FRAMES: usize = 101;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 4000.0;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected a clip of {expected} samples, got {found}")]
    BadLength { expected: usize, found: usize },
    #[error("bad filterbank range: {0}")]
    BadRange(String),
    #[error("feature dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Row-major `frames x coeffs` matrix of cepstral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    coeffs: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, coeffs: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), frames * coeffs, "feature buffer size");
        Self { frames, coeffs, values }
    }

    pub fn zeros(frames: usize, coeffs: usize) -> Self {
        Self::new(frames, coeffs, vec![0.0; frames * coeffs])
    }

    /// Time length `t`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Frequency length `f`.
    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.coeffs)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.coeffs..(frame + 1) * self.coeffs]
    }

    pub fn get(&self, frame: usize, coeff: usize) -> f32 {
        self.values[frame * self.coeffs + coeff]
    }

    /// Writes the dump format: `u32 t`, `u32 f`, then `t*f` f32 values, all
    /// little-endian, row-major.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.coeffs as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let frames = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let coeffs = u32::from_le_bytes(word) as usize;
        let n = frames
            .checked_mul(coeffs)
            .ok_or_else(|| FeatureError::Dump(format!("dims {frames}x{coeffs} overflow")))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            values.push(f32::from_le_bytes(word));
        }
        Ok(Self::new(frames, coeffs, values))
    }
}

/// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / len)`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Splits a one-second clip into Hann-windowed frames.
///
/// Frames start at every multiple of `shift` from 0 through the clip length
/// inclusive; samples past the end of the clip read as zero.
pub fn frame_signal(clip: &AudioClip, window_len: usize, shift: usize) -> Result<Vec<Vec<f64>>> {
    if clip.len() != CLIP_LEN {
        return Err(FeatureError::BadLength {
            expected: CLIP_LEN,
            found: clip.len(),
        });
    }
    Ok(frame_samples(clip.samples(), &hann_window(window_len), shift))
}

fn frame_samples(samples: &[f32], window: &[f64], shift: usize) -> Vec<Vec<f64>> {
    let n_frames = samples.len() / shift + 1;
    (0..n_frames)
        .map(|k| {
            let start = k * shift;
            window
                .iter()
                .enumerate()
                .map(|(i, &w)| samples.get(start + i).map_or(0.0, |&s| f64::from(s) * w))
                .collect()
        })
        .collect()
}

fn power_spectrum_with(fft: &dyn Fft<f64>, frame: &[f64], n_fft: usize) -> Vec<f64> {
    assert!(frame.len() <= n_fft, "frame longer than FFT size");
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n_fft)
        .collect();
    fft.process(&mut buf);
    buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// One-sided power spectrum `|DFT_k|^2`, `k = 0..=n_fft/2`, of the
/// zero-padded frame. No normalization is applied, so
/// `P[0] + P[n/2] + 2 * sum(P[1..n/2]) == n_fft * sum(x^2)`.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    power_spectrum_with(fft.as_ref(), frame, n_fft)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, one row per filter over the
/// `n_fft/2 + 1` spectrum bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    f_min: f64,
    f_max: f64,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel]
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(spectrum).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Builds `n_mels` triangles with peaks evenly spaced in mel between
/// `f_min` and `f_max`. Each triangle spans its neighbours' peaks and peaks
/// at `2 / (f_right - f_left)`.
pub fn mel_filterbank(n_mels: usize, f_min: f64, f_max: f64, sample_rate: u32, n_fft: usize) -> Result<MelFilterbank> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(FeatureError::BadRange(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got f_min={f_min} f_max={f_max}"
        )));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(FeatureError::BadRange(format!("n_mels={n_mels} n_fft={n_fft}")));
    }
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let weights = edges
        .windows(3)
        .map(|w| {
            let (left, center, right) = (w[0], w[1], w[2]);
            let peak = 2.0 / (right - left);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rise = (f - left) / (center - left);
                    let fall = (right - f) / (right - center);
                    rise.min(fall).max(0.0) * peak
                })
                .collect()
        })
        .collect();
    Ok(MelFilterbank { weights, f_min, f_max })
}

/// Orthonormal DCT-II matrix, `n x n`, row `k` holding basis vector `k`.
pub fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Precomputed MFCC pipeline. Cheap to share across threads.
pub struct MfccExtractor {
    window: Vec<f64>,
    shift: usize,
    n_fft: usize,
    filterbank: MelFilterbank,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("window_len", &self.window.len())
            .field("shift", &self.shift)
            .field("n_fft", &self.n_fft)
            .field("n_mels", &self.filterbank.n_mels())
            .finish()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        let filterbank =
            mel_filterbank(N_MELS, F_MIN, F_MAX, SAMPLE_RATE, N_FFT).expect("default filterbank range is valid");
        Self {
            window: hann_window(WINDOW_LEN),
            shift: FRAME_SHIFT,
            n_fft: N_FFT,
            filterbank,
            dct: dct_matrix(N_MELS),
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.len() != CLIP_LEN {
            return Err(FeatureError::BadLength {
                expected: CLIP_LEN,
                found: clip.len(),
            });
        }
        let frames = frame_samples(clip.samples(), &self.window, self.shift);
        let n_coeffs = self.dct.len();
        let mut values = Vec::with_capacity(frames.len() * n_coeffs);
        for frame in &frames {
            let spectrum = power_spectrum_with(self.fft.as_ref(), frame, self.n_fft);
            let log_mel: Vec<f64> = self
                .filterbank
                .apply(&spectrum)
                .into_iter()
                .map(|e| e.max(LOG_FLOOR).ln())
                .collect();
            values.extend(
                self.dct
                    .iter()
                    .map(|basis| basis.iter().zip(&log_mel).map(|(b, l)| b * l).sum::<f64>() as f32),
            );
        }
        Ok(FeatureMatrix::new(frames.len(), n_coeffs, values))
    }
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// Shared default extractor.
pub fn default_extractor() -> &'static MfccExtractor {
    static EXTRACTOR: OnceLock<MfccExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(MfccExtractor::new)
}

/// 101 x 40 MFCC matrix of a one-second clip.
pub fn mfcc(clip: &AudioClip) -> Result<FeatureMatrix> {
    default_extractor().extract(clip)
}

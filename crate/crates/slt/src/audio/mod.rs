//! Acoustic frontend: mono PCM in, 41-dimensional feature matrices out
//! (40 MFCC plus log frame energy, 10 ms step, 40 ms window).

pub mod cache;
pub mod wav;

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono audio signal, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct PcmSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// MFCC extraction settings.
#[derive(Clone, Debug)]
pub struct MfccConfig {
    pub window_ms: u32,
    pub step_ms: u32,
    pub n_mfcc: usize,
    pub n_mel_filters: usize,
    pub pre_emphasis: f64,
    /// FFT length; `None` picks the next power of two >= window length.
    pub fft_size: Option<usize>,
    pub energy_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 40,
            step_ms: 10,
            n_mfcc: 40,
            n_mel_filters: 40,
            pre_emphasis: 0.97,
            fft_size: None,
            energy_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_mfcc + 1
    }

    fn validate(&self, window_samples: usize) -> Result<()> {
        if self.window_ms < self.step_ms {
            return Err(Error::Config(format!(
                "window {} ms shorter than step {} ms",
                self.window_ms, self.step_ms
            )));
        }
        if self.n_mfcc > self.n_mel_filters {
            return Err(Error::Config(format!(
                "n_mfcc {} exceeds n_mel_filters {}",
                self.n_mfcc, self.n_mel_filters
            )));
        }
        if let Some(n) = self.fft_size {
            if n < window_samples {
                return Err(Error::Config(format!(
                    "fft_size {n} shorter than window of {window_samples} samples"
                )));
            }
        }
        Ok(())
    }

    fn resolve_fft(&self, window_samples: usize) -> usize {
        self.fft_size.unwrap_or_else(|| window_samples.next_power_of_two())
    }
}

/// Per-utterance acoustic features: `T_x` rows of 41 columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    /// (T_x, 41) row-major, 40 MFCC then log energy.
    pub frames: Tensor<f32>,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.dim(1)
    }
}

/// Pre-emphasized, Hamming-windowed analysis frames.
pub struct Frames {
    pub windowed: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

/// Slice a signal into overlapping frames: count = 1 + floor((L - W) / S),
/// pre-emphasis on the whole signal first, then a Hamming window per frame.
pub fn frame_signal(signal: &PcmSignal, config: &MfccConfig) -> Result<Frames> {
    let sr = signal.sample_rate as usize;
    let window = sr * config.window_ms as usize / 1000;
    let step = sr * config.step_ms as usize / 1000;
    config.validate(window)?;
    if signal.sample_rate == 0 || window == 0 || step == 0 {
        return Err(Error::Config("sample rate too low for the configured window".into()));
    }
    let n = signal.samples.len();
    if n < window {
        return Err(Error::Format(format!(
            "signal of {n} samples is shorter than one {window}-sample window"
        )));
    }
    if signal.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input signal".into()));
    }

    // y[0] = x[0], y[t] = x[t] - a*x[t-1]
    let a = config.pre_emphasis;
    let mut emphasized = Vec::with_capacity(n);
    emphasized.push(signal.samples[0] as f64);
    for t in 1..n {
        emphasized.push(signal.samples[t] as f64 - a * signal.samples[t - 1] as f64);
    }

    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos())
        .collect();

    let count = 1 + (n - window) / step;
    let mut windowed = Vec::with_capacity(count);
    for j in 0..count {
        let start = j * step;
        let frame: Vec<f64> = emphasized[start..start + window]
            .iter()
            .zip(&hamming)
            .map(|(s, w)| s * w)
            .collect();
        windowed.push(frame);
    }
    Ok(Frames { windowed, sample_rate: signal.sample_rate })
}

/// 2595 * log10(1 + f / 700)
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins 0..=fft/2, spanning 0 Hz to
/// Nyquist. Row f holds filter f's weight per bin.
pub fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_filters + 1) as f64))
        .collect();

    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut bank = Vec::with_capacity(n_filters);
    for f in 0..n_filters {
        let (lo, center, hi) = (centers[f], centers[f + 1], centers[f + 2]);
        let mut row = vec![0.0; n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let freq = k as f64 * bin_hz;
            if freq > lo && freq < center {
                *w = (freq - lo) / (center - lo);
            } else if (freq - center).abs() < 1e-12 {
                *w = 1.0;
            } else if freq > center && freq < hi {
                *w = (hi - freq) / (hi - center);
            }
        }
        bank.push(row);
    }
    bank
}

/// Center frequencies (Hz) of the triangular filters.
pub fn filter_centers(n_filters: usize, sample_rate: u32) -> Vec<f64> {
    let mel_hi = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_filters)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_filters + 1) as f64))
        .collect()
}

/// Per-filter energies of one windowed frame: FFT power spectrum through the
/// filterbank. Exposed so tests can compare against a direct-DFT oracle.
pub fn filterbank_energies(frame: &[f64], fft_size: usize, bank: &[Vec<f64>]) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = frame
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(fft_size)
        .collect();
    fft.process(&mut buf);
    let power: Vec<f64> = buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
    bank.iter()
        .map(|row| row.iter().zip(&power).map(|(w, p)| w * p).sum())
        .collect()
}

/// Orthonormal DCT-II.
fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let sum: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * m)).cos())
                .sum();
            scale * sum
        })
        .collect()
}

/// Windowed frames to a 41-column feature matrix: mel filterbank, floored
/// log, DCT-II, plus floored log of the windowed frame energy.
pub fn mfcc(frames: &Frames, config: &MfccConfig) -> Result<Tensor<f32>> {
    let window = frames.windowed.first().map(|f| f.len()).unwrap_or(0);
    if window == 0 {
        return Err(Error::Format("no frames to featurize".into()));
    }
    let fft_size = config.resolve_fft(window);
    let bank = mel_filterbank(config.n_mel_filters, fft_size, frames.sample_rate);
    let floor = config.energy_floor;

    let cols = config.feature_dim();
    let mut data = Vec::with_capacity(frames.windowed.len() * cols);
    for frame in &frames.windowed {
        let energies = filterbank_energies(frame, fft_size, &bank);
        let logs: Vec<f64> = energies.iter().map(|&e| e.max(floor).ln()).collect();
        let ceps = dct2(&logs, config.n_mfcc);
        data.extend(ceps.iter().map(|&c| c as f32));
        let frame_energy: f64 = frame.iter().map(|v| v * v).sum();
        data.push(frame_energy.max(floor).ln() as f32);
    }
    Tensor::from_vec(vec![frames.windowed.len(), cols], data)
}

/// Featurize one signal.
pub fn features_from_signal(
    id: &str,
    signal: &PcmSignal,
    config: &MfccConfig,
) -> Result<FeatureMatrix> {
    let frames = frame_signal(signal, config)?;
    Ok(FeatureMatrix { utterance_id: id.to_string(), frames: mfcc(&frames, config)? })
}

/// Featurize a 16-bit PCM mono WAV file; the utterance id is the file stem.
pub fn extract_features(wav_path: &Path, config: &MfccConfig) -> Result<FeatureMatrix> {
    let signal = wav::read_wav(wav_path)?;
    let id = wav_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "utterance".to_string());
    features_from_signal(&id, &signal, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32) -> PcmSignal {
        let n = (secs * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        PcmSignal { samples, sample_rate: sr }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MfccConfig::default();
        let sig = tone(440.0, 1.0, 16000);
        let frames = frame_signal(&sig, &cfg).unwrap();
        // L=16000, W=640, S=160 -> 1 + (16000-640)/160 = 97
        assert_eq!(frames.windowed.len(), 97);
    }

    #[test]
    fn one_window_exactly_is_one_frame() {
        let cfg = MfccConfig::default();
        let sig = PcmSignal { samples: vec![0.1; 640], sample_rate: 16000 };
        assert_eq!(frame_signal(&sig, &cfg).unwrap().windowed.len(), 1);
        let short = PcmSignal { samples: vec![0.1; 639], sample_rate: 16000 };
        assert!(frame_signal(&short, &cfg).is_err());
    }

    #[test]
    fn all_zero_signal_gives_constant_floored_rows() {
        let cfg = MfccConfig::default();
        let sig = PcmSignal { samples: vec![0.0; 16000], sample_rate: 16000 };
        let feats = features_from_signal("z", &sig, &cfg).unwrap();
        assert_eq!(feats.frames.shape(), &[97, 41]);
        let log_floor = (1e-10f64).ln();
        let row0: Vec<f32> = feats.frames.data()[..41].to_vec();
        // DCT of a constant vector: sqrt(M) * v in coefficient 0, zero elsewhere
        assert!((row0[0] as f64 - (40.0f64).sqrt() * log_floor).abs() < 1e-4);
        for &c in &row0[1..40] {
            assert!(c.abs() < 1e-6, "{c}");
        }
        assert!((row0[40] as f64 - log_floor).abs() < 1e-6);
        // identical across frames
        for r in 1..97 {
            assert_eq!(&feats.frames.data()[r * 41..(r + 1) * 41], &row0[..]);
        }
    }

    #[test]
    fn pure_tone_peaks_at_filter_nearest_1khz() {
        let cfg = MfccConfig::default();
        let sig = tone(1000.0, 0.2, 16000);
        let frames = frame_signal(&sig, &cfg).unwrap();
        let fft_size = cfg.resolve_fft(frames.windowed[0].len());
        let bank = mel_filterbank(cfg.n_mel_filters, fft_size, 16000);

        let impl_energies = filterbank_energies(&frames.windowed[0], fft_size, &bank);
        let impl_peak = argmax(&impl_energies);

        // independent oracle: direct O(N^2) DFT of the same frame
        let mut oracle_power = vec![0.0f64; fft_size / 2 + 1];
        for (k, p) in oracle_power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &v) in frames.windowed[0].iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / fft_size as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            *p = re * re + im * im;
        }
        let oracle_energies: Vec<f64> = bank
            .iter()
            .map(|row| row.iter().zip(&oracle_power).map(|(w, p)| w * p).sum())
            .collect();
        let oracle_peak = argmax(&oracle_energies);
        assert_eq!(impl_peak, oracle_peak);

        let centers = filter_centers(cfg.n_mel_filters, 16000);
        let nearest = argmin_by(&centers, |c| (c - 1000.0).abs());
        assert_eq!(impl_peak, nearest);
    }

    #[test]
    fn energy_column_monotone_in_amplitude() {
        let cfg = MfccConfig::default();
        let base = tone(700.0, 0.3, 16000);
        let scaled = PcmSignal {
            samples: base.samples.iter().map(|v| v * 1.8).collect(),
            sample_rate: 16000,
        };
        let fa = features_from_signal("a", &base, &cfg).unwrap();
        let fb = features_from_signal("b", &scaled, &cfg).unwrap();
        for r in 0..fa.num_frames() {
            let ea = fa.frames.at2(r, 40);
            let eb = fb.frames.at2(r, 40);
            assert!(eb >= ea, "frame {r}: {eb} < {ea}");
        }
    }

    #[test]
    fn filterbank_rows_nonnegative_with_positive_coverage() {
        let bank = mel_filterbank(40, 1024, 16000);
        for row in &bank {
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let centers = filter_centers(40, 16000);
        let first = centers[0];
        let bin_hz = 16000.0 / 1024.0;
        for k in 0..=512 {
            let freq = k as f64 * bin_hz;
            if freq > first && freq < 8000.0 - bin_hz {
                let total: f64 = bank.iter().map(|row| row[k]).sum();
                assert!(total > 0.0, "bin {k} at {freq} Hz uncovered");
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = MfccConfig::default();
        let sig = tone(523.0, 0.5, 16000);
        let a = features_from_signal("x", &sig, &cfg).unwrap();
        let b = features_from_signal("x", &sig, &cfg).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        best
    }

    fn argmin_by(v: &[f64], f: impl Fn(f64) -> f64) -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if f(v[i]) < f(v[best]) {
                best = i;
            }
        }
        best
    }
}

//! Log-Mel filterbank front end.
//!
//! Raw mono waveforms are mean-centred, framed with a Hanning window, passed
//! through a power spectrum and a bank of triangular Mel filters, and
//! log-compressed. The resulting matrix is fitted to a fixed number of frames
//! and standardized with corpus-wide statistics.

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Floor applied to the corpus standard deviation when standardizing.
pub const STD_FLOOR: f64 = 1e-8;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Window shape applied to each analysis frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hanning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub n_mels: usize,
    /// Frame shift in milliseconds.
    pub frame_shift: f64,
    /// Frame length in milliseconds.
    pub frame_length: f64,
    pub window: WindowKind,
    pub target_frames: usize,
    pub energy_floor: f64,
    /// Lower edge of the first Mel filter, in Hz.
    pub low_freq: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            frame_shift: 10.0,
            frame_length: 25.0,
            window: WindowKind::Hanning,
            target_frames: 1000,
            energy_floor: 1e-10,
            low_freq: 20.0,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if self.target_frames == 0 {
            return Err(Error::invalid("target_frames must be at least 1"));
        }
        if !(self.frame_shift > 0.0) || self.frame_length < self.frame_shift {
            return Err(Error::invalid(
                "frame_length must be >= frame_shift and frame_shift > 0",
            ));
        }
        if !(self.energy_floor > 0.0) {
            return Err(Error::invalid("energy_floor must be positive"));
        }
        Ok(())
    }

    /// Window length and hop in samples at the given rate.
    pub fn frame_geometry(&self, sample_rate: u32) -> (usize, usize) {
        let sr = f64::from(sample_rate);
        let win = (sr * self.frame_length / 1000.0).round() as usize;
        let hop = (sr * self.frame_shift / 1000.0).round() as usize;
        (win.max(1), hop.max(1))
    }
}

/// Number of whole frames produced for `n` samples with window `w` and hop
/// `s`. Partial trailing frames are dropped.
pub fn frame_count(n: usize, w: usize, s: usize) -> usize {
    if n < w {
        0
    } else {
        1 + (n - w) / s
    }
}

/// Time x frequency matrix of log-Mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix<T> {
    values: Array2<T>,
}

impl<T: Real> FbankMatrix<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("fbank matrix contains non-finite values"));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            values: Array2::zeros((frames, bins)),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<T> {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Subtract the sample mean.
pub fn normalize_raw<T: Real>(w: &Waveform<T>) -> Waveform<T> {
    let n = T::of(w.len() as f64);
    let mean = w.samples.iter().copied().sum::<T>() / n;
    Waveform {
        samples: w.samples.iter().map(|&x| x - mean).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Hz to Mel.
pub fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// Mel to Hz.
pub fn mel_inverse(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular Mel filters over the `n_fft / 2 + 1` power-spectrum bins,
/// returned as an `n_mels x n_bins` weight matrix.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, low_freq: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_lo = mel(low_freq.clamp(0.0, nyquist));
    let mel_hi = mel(nyquist);
    let delta = (mel_hi - mel_lo) / (n_mels + 1) as f64;
    let bin_hz = f64::from(sample_rate) / n_fft as f64;

    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let left = mel_lo + m as f64 * delta;
        let center = left + delta;
        let right = center + delta;
        for b in 0..n_bins {
            let x = mel(b as f64 * bin_hz);
            let w = if x > left && x <= center {
                (x - left) / (center - left)
            } else if x > center && x < right {
                (right - x) / (right - center)
            } else {
                0.0
            };
            bank[[m, b]] = w;
        }
    }
    bank
}

/// Log-Mel filterbank of a waveform, one row per whole frame.
pub fn fbank<T: Real>(w: &Waveform<T>, cfg: &FbankConfig) -> Result<FbankMatrix<T>> {
    cfg.validate()?;
    let (win, hop) = cfg.frame_geometry(w.sample_rate);
    let n_frames = frame_count(w.len(), win, hop);
    if n_frames == 0 {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.len()
        )));
    }
    let n_fft = win.next_power_of_two();
    let bank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.low_freq);
    let n_bins = n_fft / 2 + 1;

    let window: Vec<f64> = match cfg.window {
        WindowKind::Hanning if win > 1 => (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
            .collect(),
        WindowKind::Hanning => vec![1.0],
    };

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    let log_floor = cfg.energy_floor;

    let mut out = Array2::<T>::zeros((n_frames, cfg.n_mels));
    for t in 0..n_frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(w.samples[start + i].as_f64() * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out[[t, m]] = T::of(e.max(log_floor).ln());
        }
    }
    FbankMatrix::new(out)
}

/// Center-crop or tail-zero-pad to exactly `target_frames` rows.
pub fn fit_frames<T: Real>(m: &FbankMatrix<T>, target_frames: usize) -> FbankMatrix<T> {
    let t = m.frames();
    let values = if t == target_frames {
        m.values.clone()
    } else if t > target_frames {
        let start = (t - target_frames) / 2;
        m.values
            .slice(s![start..start + target_frames, ..])
            .to_owned()
    } else {
        let mut padded = Array2::zeros((target_frames, m.bins()));
        padded.slice_mut(s![..t, ..]).assign(&m.values);
        padded
    };
    FbankMatrix { values }
}

/// Corpus-wide mean and population standard deviation of feature entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: f64,
    pub std: f64,
}

/// Streaming moments that merge associatively, so partial results from any
/// partition of the corpus combine to the same statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn of_slice<T: Real>(xs: impl IntoIterator<Item = T>) -> Self {
        let mut m = Moments::default();
        for x in xs {
            m.push(x.as_f64());
        }
        m
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Moments) -> Moments {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let n = self.count + other.count;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        Moments {
            count: n,
            mean: self.mean + delta * nb / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let var = if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        };
        CorpusStats {
            mean: self.mean,
            std: var.sqrt(),
        }
    }
}

pub fn compute_corpus_stats<'a, T: Real>(
    dataset: impl IntoIterator<Item = &'a FbankMatrix<T>>,
) -> Result<CorpusStats> {
    let total = dataset
        .into_iter()
        .map(|m| Moments::of_slice(m.values.iter().copied()))
        .fold(Moments::default(), Moments::merge);
    if total.count == 0 {
        return Err(Error::invalid("cannot compute statistics of an empty dataset"));
    }
    Ok(total.stats())
}

pub fn normalize_fbank<T: Real>(m: &FbankMatrix<T>, s: &CorpusStats) -> FbankMatrix<T> {
    let mean = T::of(s.mean);
    let std = T::of(s.std.max(STD_FLOOR));
    FbankMatrix {
        values: m.values.mapv(|x| (x - mean) / std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn wave(samples: Vec<f64>, sr: u32) -> Waveform<f64> {
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn normalize_raw_examples() {
        let c = normalize_raw(&wave(vec![0.5; 17], 8000));
        assert!(c.samples().iter().all(|&x| x.abs() < 1e-12));
        let z = normalize_raw(&wave(vec![0.0; 5], 8000));
        assert_eq!(z.samples(), &[0.0; 5]);
        let h = normalize_raw(&wave(vec![1.0, 3.0], 8000));
        assert_eq!(h.samples(), &[-1.0, 1.0]);
        assert_eq!(h.sample_rate(), 8000);
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::<f64>::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![1.0f64], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
    }

    #[test]
    fn fbank_frame_counts() {
        let cfg = FbankConfig::default();
        let ten = fbank(&wave(vec![0.0; 160_000], 16_000), &cfg).unwrap();
        assert_eq!(ten.frames(), 998);
        assert_eq!(ten.bins(), 128);
        let one = fbank(&wave(vec![0.0; 16_000], 16_000), &cfg).unwrap();
        assert_eq!(one.frames(), 98);
    }

    #[test]
    fn fbank_of_silence_is_uniform_floor() {
        let cfg = FbankConfig::default();
        let m = fbank(&wave(vec![0.0; 4000], 16_000), &cfg).unwrap();
        let floor = cfg.energy_floor.ln();
        assert!(m.values().iter().all(|&x| x == floor));
    }

    #[test]
    fn fbank_rejects_short_waveform() {
        let cfg = FbankConfig::default();
        assert!(matches!(
            fbank(&wave(vec![0.1; 399], 16_000), &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fbank_locates_a_tone() {
        let cfg = FbankConfig {
            n_mels: 40,
            ..FbankConfig::default()
        };
        let sr = 16_000u32;
        let lo: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 300.0 * i as f64 / sr as f64).sin())
            .collect();
        let hi: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 4000.0 * i as f64 / sr as f64).sin())
            .collect();
        let argmax = |m: &FbankMatrix<f64>| {
            let row = m.values().row(10);
            (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap()
        };
        let a = argmax(&fbank(&wave(lo, sr), &cfg).unwrap());
        let b = argmax(&fbank(&wave(hi, sr), &cfg).unwrap());
        assert!(a < b, "300 Hz peak bin {a} should sit below 4 kHz peak bin {b}");
    }

    #[test]
    fn fit_frames_pad_crop_identity() {
        let m = FbankMatrix::new(Array2::from_shape_fn((998, 4), |(i, _)| i as f64 + 1.0)).unwrap();
        let padded = fit_frames(&m, 1000);
        assert_eq!(padded.frames(), 1000);
        assert!(padded.values().row(998).iter().all(|&x| x == 0.0));
        assert!(padded.values().row(999).iter().all(|&x| x == 0.0));
        assert_eq!(padded.values()[[997, 0]], 998.0);

        let same = FbankMatrix::new(Array2::from_shape_fn((1000, 4), |(i, j)| (i * j) as f64)).unwrap();
        assert_eq!(fit_frames(&same, 1000), same);

        let long = FbankMatrix::new(Array2::from_shape_fn((1004, 4), |(i, _)| i as f64)).unwrap();
        let cropped = fit_frames(&long, 1000);
        assert_eq!(cropped.values()[[0, 0]], 2.0);
        assert_eq!(cropped.values()[[999, 0]], 1001.0);
    }

    #[test]
    fn corpus_stats_examples() {
        let c = FbankMatrix::new(Array2::from_elem((3, 3), 2.5f64)).unwrap();
        let s = compute_corpus_stats([&c]).unwrap();
        assert_eq!((s.mean, s.std), (2.5, 0.0));

        let m = FbankMatrix::new(array![[0.0f64, 0.0], [2.0, 2.0]]).unwrap();
        let s = compute_corpus_stats([&m]).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 1.0, epsilon = 1e-12);

        let z = FbankMatrix::new(Array2::<f64>::zeros((4, 5))).unwrap();
        let t = FbankMatrix::new(Array2::from_elem((4, 5), 2.0f64)).unwrap();
        let s = compute_corpus_stats([&z, &t]).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 1.0, epsilon = 1e-12);

        assert!(compute_corpus_stats::<f64>([]).is_err());
    }

    #[test]
    fn normalize_fbank_examples() {
        let m = FbankMatrix::new(array![[3.0f64, -1.0], [5.0, 0.25]]).unwrap();
        let id = normalize_fbank(&m, &CorpusStats { mean: 0.0, std: 1.0 });
        assert_eq!(id, m);
        let n = normalize_fbank(&m, &CorpusStats { mean: 1.0, std: 2.0 });
        assert_eq!(n.values()[[0, 0]], 1.0);
        let g = normalize_fbank(&m, &CorpusStats { mean: 5.0, std: 0.0 });
        assert_eq!(g.values()[[1, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn normalize_raw_is_idempotent(xs in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let w = wave(xs, 8000);
            let once = normalize_raw(&w);
            let twice = normalize_raw(&once);
            let mean: f64 = once.samples().iter().sum::<f64>() / once.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            for (a, b) in once.samples().iter().zip(twice.samples()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn frame_count_matches_enumeration(n in 1usize..3000, w in 1usize..400, s in 1usize..200) {
            prop_assume!(w >= s);
            let brute = (0..n).filter(|start| start + w <= n && start % s == 0).count();
            prop_assert_eq!(frame_count(n, w, s), brute);
        }

        #[test]
        fn fbank_rows_follow_formula(n in 400usize..3000) {
            let cfg = FbankConfig { n_mels: 8, ..FbankConfig::default() };
            let m = fbank(&wave(vec![0.01; n], 16_000), &cfg).unwrap();
            prop_assert_eq!(m.frames(), 1 + (n - 400) / 160);
        }

        #[test]
        fn standardized_matrix_has_unit_moments(
            xs in prop::collection::vec(-50.0f64..50.0, 12)
        ) {
            let m = FbankMatrix::new(Array2::from_shape_vec((3, 4), xs).unwrap()).unwrap();
            let stats = compute_corpus_stats([&m]).unwrap();
            prop_assume!(stats.std > 1e-3);
            let n = normalize_fbank(&m, &stats);
            let again = compute_corpus_stats([&n]).unwrap();
            prop_assert!(again.mean.abs() < 1e-6);
            prop_assert!((again.std - 1.0).abs() < 1e-6);
        }

        #[test]
        fn fit_frames_is_idempotent(t in 1usize..40, target in 1usize..40) {
            let m = FbankMatrix::new(Array2::from_shape_fn((t, 3), |(i, j)| (i + 7 * j) as f64)).unwrap();
            let once = fit_frames(&m, target);
            prop_assert_eq!(once.frames(), target);
            prop_assert_eq!(fit_frames(&once, target), once);
        }

        #[test]
        fn moments_merge_is_order_independent(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            b in prop::collection::vec(-5.0f64..5.0, 1..20),
        ) {
            let ma = Moments::of_slice(a.iter().copied());
            let mb = Moments::of_slice(b.iter().copied());
            let ab = ma.merge(mb).stats();
            let ba = mb.merge(ma).stats();
            let all = Moments::of_slice(a.iter().chain(&b).copied()).stats();
            prop_assert!((ab.mean - ba.mean).abs() < 1e-12);
            prop_assert!((ab.std - all.std).abs() < 1e-9);
        }
    }
}

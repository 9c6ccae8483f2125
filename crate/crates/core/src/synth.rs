//! Synthetic clips whose frame-audio agreement varies over time.
//!
//! Every clip has a background latent `b` and an event latent `e`, and one
//! of its `L` temporal segments is the event segment.
//!
//! * Frames: off-event frames show a visual scene `g = r b + sqrt(1-r^2) v`,
//!   where `v` is a clip-level latent with no audio counterpart, plus a
//!   per-frame distractor; the event frame shows `(1-s) (g + distractor) + s e`.
//! * Audio: every segment carries background tones keyed to `b`; the event
//!   segment also carries louder tones keyed to `e` while the background is
//!   attenuated by `1 - s`.
//! * Captions describe the dominant sound: `(1-s) b + s e` plus noise.
//!
//! Tone amplitudes are `exp(gain * z_j)` for latent coordinate `z_j`, so
//! log-Mel energies are close to linear in the latents.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::key_hash;
use crate::error::{Error, Result};
use crate::io::write_wav;
use crate::manifest::{ClipRecord, Manifest, Split};
use crate::signal::{mel, mel_inverse, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Frames (and audio segments) per clip.
    pub frames: usize,
    pub event_strength: f64,
    /// Latent noise on frames and captions.
    pub noise_sigma: f64,
    /// Scale of the audio-free visual distractor on each frame.
    pub distractor_sigma: f64,
    /// Weight `r` of the audio background in the visual scene.
    pub scene_overlap: f64,
    /// Captions per validation/test clip. Training clips get one.
    pub eval_captions: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            n_train: 512,
            n_val: 64,
            n_test: 256,
            frames: 4,
            event_strength: 0.8,
            noise_sigma: 0.1,
            distractor_sigma: 1.0,
            scene_overlap: 0.5,
            eval_captions: 5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.frames == 0 || self.eval_captions == 0 {
            return Err(Error::config("latent_dim, frames and eval_captions must be positive"));
        }
        if self.n_train + self.n_val + self.n_test < 2 {
            return Err(Error::config("at least two clips are required"));
        }
        if !(0.0..=1.0).contains(&self.event_strength) {
            return Err(Error::config("event_strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.scene_overlap) {
            return Err(Error::config("scene_overlap must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.distractor_sigma >= 0.0) {
            return Err(Error::config("noise scales must be non-negative"));
        }
        Ok(())
    }

    fn clips(&self) -> Vec<(Split, usize)> {
        let mut v = Vec::with_capacity(self.n_train + self.n_val + self.n_test);
        v.extend((0..self.n_train).map(|i| (Split::Train, i)));
        v.extend((0..self.n_val).map(|i| (Split::Val, i)));
        v.extend((0..self.n_test).map(|i| (Split::Test, i)));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Log-amplitude change per unit latent coordinate.
    pub tone_gain: f64,
    pub background_level: f64,
    pub event_level: f64,
    pub noise_level: f64,
    pub min_freq: f64,
    pub max_freq: f64,
    /// Crossfade at segment boundaries, in seconds.
    pub ramp_s: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration_s: 1.3,
            tone_gain: 4.0,
            background_level: 0.01,
            event_level: 0.03,
            noise_level: 0.002,
            min_freq: 150.0,
            max_freq: 3700.0,
            ramp_s: 0.01,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.duration_s > 0.0) {
            return Err(Error::config("sample_rate and duration_s must be positive"));
        }
        if !(self.min_freq > 0.0 && self.min_freq < self.max_freq)
            || self.max_freq >= f64::from(self.sample_rate) / 2.0
        {
            return Err(Error::config("tone band must lie strictly inside (0, Nyquist)"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    /// `count` tone frequencies evenly spaced on the Mel scale.
    pub fn tone_frequencies(&self, count: usize) -> Vec<f64> {
        let (lo, hi) = (mel(self.min_freq), mel(self.max_freq));
        (0..count)
            .map(|k| {
                let t = if count == 1 { 0.5 } else { k as f64 / (count - 1) as f64 };
                mel_inverse(lo + t * (hi - lo))
            })
            .collect()
    }
}

/// Segment centers: `duration * (l + 0.5) / L`.
pub fn frame_timestamps(duration_s: f64, l: usize) -> Result<Vec<f64>> {
    if !(duration_s > 0.0) || l == 0 {
        return Err(Error::invalid("duration must be positive and L at least 1"));
    }
    Ok((0..l).map(|i| duration_s * (i as f64 + 0.5) / l as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip_id: String,
    pub split: Split,
    pub background: Vec<f64>,
    pub event: Vec<f64>,
    pub event_frame: usize,
    pub frame_latents: Vec<Vec<f64>>,
    pub caption_latents: Vec<Vec<f64>>,
    /// Latent content of each audio segment.
    pub segment_latents: Vec<Vec<f64>>,
    /// Per-tone phases used by the renderer.
    phases: Vec<f64>,
    noise_seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn mix(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

fn add_scaled(v: &mut [f64], s: f64, n: &[f64]) {
    v.iter_mut().zip(n).for_each(|(x, y)| *x += s * y);
}

pub fn clip_id(split: Split, index: usize) -> String {
    format!("{split}-{index:05}")
}

/// Latents of one clip. Seeded from the clip id alone, so clips can be
/// generated in any order.
pub fn generate_clip(spec: &SceneSpec, split: Split, index: usize) -> SynthClip {
    let id = clip_id(split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(key_hash(&format!("{}/{id}", spec.seed)));
    let d = spec.latent_dim;
    let s = spec.event_strength;
    let background = unit(gaussian(&mut rng, d));
    let event = unit(gaussian(&mut rng, d));
    let event_frame = rng.gen_range(0..spec.frames);
    let r = spec.scene_overlap;
    let scene = mix(&background, r, &unit(gaussian(&mut rng, d)), (1.0 - r * r).sqrt());
    let scale_d = spec.distractor_sigma / (d as f64).sqrt();
    let scale_n = spec.noise_sigma / (d as f64).sqrt();

    let frame_latents = (0..spec.frames)
        .map(|l| {
            let distractor = gaussian(&mut rng, d);
            let noise = gaussian(&mut rng, d);
            let mut f = scene.clone();
            add_scaled(&mut f, scale_d, &distractor);
            if l == event_frame {
                f = mix(&f, 1.0 - s, &event, s);
            }
            add_scaled(&mut f, scale_n, &noise);
            f
        })
        .collect();
    let n_captions = if split == Split::Train { 1 } else { spec.eval_captions };
    let caption_latents = (0..n_captions)
        .map(|_| {
            let mut c = mix(&background, 1.0 - s, &event, s);
            add_scaled(&mut c, scale_n, &gaussian(&mut rng, d));
            c
        })
        .collect();
    let segment_latents = (0..spec.frames)
        .map(|l| {
            if l == event_frame {
                mix(&background, 1.0 - s, &event, s)
            } else {
                background.clone()
            }
        })
        .collect();
    let phases = (0..2 * d)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let noise_seed = rng.gen();
    SynthClip {
        clip_id: id,
        split,
        background,
        event,
        event_frame,
        frame_latents,
        caption_latents,
        segment_latents,
        phases,
        noise_seed,
    }
}

/// Render the clip's waveform. Background tones occupy even tone slots and
/// event tones odd slots of a Mel-spaced comb.
pub fn render_waveform(clip: &SynthClip, spec: &SceneSpec, r: &RenderConfig) -> Result<Waveform<f64>> {
    r.validate()?;
    let d = spec.latent_dim;
    let s = spec.event_strength;
    let n = r.n_samples();
    let sr = f64::from(r.sample_rate);
    let l = spec.frames;
    let freqs = r.tone_frequencies(2 * d);
    let bg_amp: Vec<f64> = clip
        .background
        .iter()
        .map(|z| r.background_level * (r.tone_gain * z).exp())
        .collect();
    let ev_amp: Vec<f64> = clip
        .event
        .iter()
        .map(|z| r.event_level * (r.tone_gain * z).exp())
        .collect();

    // Event envelope: 1 inside the event segment with linear ramps at its edges.
    let seg_len = n as f64 / l as f64;
    let start = clip.event_frame as f64 * seg_len;
    let end = start + seg_len;
    let ramp = (r.ramp_s * sr).max(1.0);
    let envelope = |i: usize| -> f64 {
        let t = i as f64;
        let up = ((t - start) / ramp + 0.5).clamp(0.0, 1.0);
        let down = ((end - t) / ramp + 0.5).clamp(0.0, 1.0);
        up.min(down)
    };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(clip.noise_seed);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let ev = s * envelope(i);
            let bg_gain = 1.0 - ev;
            let mut x = 0.0;
            for j in 0..d {
                let (fb, fe) = (freqs[2 * j], freqs[2 * j + 1]);
                x += bg_gain * bg_amp[j] * (std::f64::consts::TAU * fb * t + clip.phases[2 * j]).sin();
                if ev > 0.0 {
                    x += ev * ev_amp[j] * (std::f64::consts::TAU * fe * t + clip.phases[2 * j + 1]).sin();
                }
            }
            let noise: f64 = StandardNormal.sample(&mut noise_rng);
            x + r.noise_level * noise
        })
        .collect();
    Waveform::new(samples, r.sample_rate)
}

/// Generate every clip, write `wav/<clip>.wav` and return the manifest.
/// Feature paths point at `features/<clip>.xmf`, filled in by extraction.
pub fn generate(spec: &SceneSpec, render: &RenderConfig, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    render.validate()?;
    fs::create_dir_all(out_dir.join("wav"))?;
    let timestamps = frame_timestamps(render.duration_s, spec.frames)?;
    let records = spec
        .clips()
        .into_par_iter()
        .map(|(split, index)| {
            let clip = generate_clip(spec, split, index);
            let wave = render_waveform(&clip, spec, render)?;
            let wav_rel = format!("wav/{}.wav", clip.clip_id);
            write_wav(&out_dir.join(&wav_rel), &wave)?;
            Ok(ClipRecord {
                feature_path: format!("features/{}.xmf", clip.clip_id),
                wav_path: Some(wav_rel),
                frame_timestamps: timestamps.clone(),
                frame_latents: clip.frame_latents,
                caption_latents: clip.caption_latents,
                event_frame: Some(clip.event_frame),
                clip_id: clip.clip_id,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{fbank, FbankConfig};
    use approx::assert_abs_diff_eq;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    fn tiny() -> SceneSpec {
        SceneSpec {
            latent_dim: 4,
            n_train: 3,
            n_val: 1,
            n_test: 2,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn timestamps() {
        assert_eq!(frame_timestamps(10.0, 4).unwrap(), vec![1.25, 3.75, 6.25, 8.75]);
        assert_eq!(frame_timestamps(3.0, 1).unwrap(), vec![1.5]);
        let ts = frame_timestamps(7.3, 9).unwrap();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert!(ts.iter().all(|&t| t > 0.0 && t < 7.3));
        assert!(frame_timestamps(0.0, 4).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec { event_strength: 1.5, ..tiny() }.validate().is_err());
        assert!(SceneSpec { scene_overlap: -0.1, ..tiny() }.validate().is_err());
        assert!(SceneSpec { n_train: 1, n_val: 0, n_test: 0, ..tiny() }.validate().is_err());
        assert!(RenderConfig { max_freq: 4000.0, ..RenderConfig::default() }.validate().is_err());
    }

    #[test]
    fn same_seed_same_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r = RenderConfig { duration_s: 0.2, ..RenderConfig::default() };
        let ma = generate(&tiny(), &r, a.path()).unwrap();
        let mb = generate(&tiny(), &r, b.path()).unwrap();
        assert_eq!(ma.to_jsonl().unwrap(), mb.to_jsonl().unwrap());
        for rec in &ma.records {
            let p = rec.wav_path.as_ref().unwrap();
            assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
        }
        assert_eq!(ma.split(Split::Train)[0].caption_latents.len(), 1);
        assert_eq!(ma.split(Split::Test)[0].caption_latents.len(), 5);

        let other = generate(&SceneSpec { seed: 1, ..tiny() }, &r, a.path()).unwrap();
        assert_ne!(other.to_jsonl().unwrap(), ma.to_jsonl().unwrap());
    }

    #[test]
    fn full_strength_event_frame_is_unique_argmax() {
        let spec = SceneSpec {
            event_strength: 1.0,
            noise_sigma: 0.0,
            n_train: 300,
            ..SceneSpec::default()
        };
        for i in 0..spec.n_train {
            let c = generate_clip(&spec, Split::Train, i);
            let audio = &c.segment_latents[c.event_frame];
            let sims: Vec<f64> = c.frame_latents.iter().map(|f| cos(f, audio)).collect();
            for (l, &x) in sims.iter().enumerate() {
                if l != c.event_frame {
                    assert!(x < sims[c.event_frame], "clip {i}: frame {l}");
                }
            }
        }
    }

    #[test]
    fn zero_strength_gives_uniform_nearest_frame() {
        let spec = SceneSpec { event_strength: 0.0, n_train: 4000, ..SceneSpec::default() };
        let mut counts = vec![0usize; spec.frames];
        for i in 0..spec.n_train {
            let c = generate_clip(&spec, Split::Train, i);
            let audio: Vec<f64> = c.segment_latents.iter().flatten().copied().collect();
            let mean: Vec<f64> = (0..spec.latent_dim)
                .map(|j| (0..spec.frames).map(|l| audio[l * spec.latent_dim + j]).sum())
                .collect();
            let best = (0..spec.frames)
                .max_by(|&a, &b| cos(&c.frame_latents[a], &mean).total_cmp(&cos(&c.frame_latents[b], &mean)))
                .unwrap();
            counts[best] += 1;
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() < 0.03, "{c}");
        }
    }

    #[test]
    fn captions_follow_the_event() {
        let spec = SceneSpec { n_train: 500, ..SceneSpec::default() };
        let (mut ce, mut cb) = (0.0, 0.0);
        for i in 0..spec.n_train {
            let c = generate_clip(&spec, Split::Train, i);
            ce += cos(&c.caption_latents[0], &c.event);
            cb += cos(&c.caption_latents[0], &c.background);
        }
        assert!(ce > cb);
    }

    #[test]
    fn event_segment_dominates_event_band() {
        let spec = SceneSpec { latent_dim: 8, ..SceneSpec::default() };
        let r = RenderConfig::default();
        let c = generate_clip(&spec, Split::Train, 3);
        let w = render_waveform(&c, &spec, &r).unwrap();
        assert_eq!(w.len(), r.n_samples());
        let cfg = FbankConfig { n_mels: 32, target_frames: 128, ..FbankConfig::default() };
        let m = fbank(&w, &cfg).unwrap();
        assert_eq!(m.frames(), 128);
        let seg = m.frames() / spec.frames;
        let energy = |l: usize| -> f64 {
            let rows = m.values().slice(ndarray::s![l * seg + 4..(l + 1) * seg - 4, ..]);
            rows.iter().map(|&x| x.exp()).sum()
        };
        let e = energy(c.event_frame);
        for l in (0..spec.frames).filter(|&l| l != c.event_frame) {
            assert!(e > energy(l));
        }
        assert_abs_diff_eq!(r.tone_frequencies(3)[0], r.min_freq, epsilon = 1e-9);
    }
}

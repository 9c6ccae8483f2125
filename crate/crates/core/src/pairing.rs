//! Audio-image pairing strategies.
//!
//! * `Random`: one frame drawn uniformly per clip visit.
//! * `Nearest(n)`: random before epoch `n`, afterwards the frame with the
//!   highest cosine similarity to the current audio embedding (lowest index
//!   wins ties).
//! * `Multiframe`: the `L x D` block of per-segment audio embeddings is
//!   compared with the `L x D` block of frame embeddings by the cosine of
//!   their row-major flattenings.
//!
//! Frame selection is a discrete, gradient-free choice: only the chosen
//! frame's (frozen) embedding enters the similarity matrix.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{cosine_sim, sim_matrix, LogitScale, SimilarityMatrix};
use crate::scalar::Real;

/// Frame embeddings sampled from one clip, with ascending timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet<T> {
    frames: Array2<T>,
    timestamps: Vec<f64>,
}

impl<T: Real> FrameSet<T> {
    pub fn new(frames: Array2<T>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::invalid("frame set is empty"));
        }
        if timestamps.len() != frames.nrows() {
            return Err(Error::invalid(format!(
                "{} frames but {} timestamps",
                frames.nrows(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("frame timestamps must be strictly ascending"));
        }
        Ok(Self { frames, timestamps })
    }

    /// Frames with evenly spaced placeholder timestamps.
    pub fn untimed(frames: Array2<T>) -> Result<Self> {
        let ts = (0..frames.nrows()).map(|i| i as f64).collect();
        Self::new(frames, ts)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn frames(&self) -> ArrayView2<'_, T> {
        self.frames.view()
    }

    pub fn frame(&self, l: usize) -> &[T] {
        let row = self.frames.row(l);
        row.to_slice().expect("frames are row-major")
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairingStrategy {
    Random,
    /// Nearest Match opening at epoch `gate`.
    Nearest { gate: usize },
    Multiframe,
}

impl fmt::Display for PairingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairingStrategy::Random => write!(f, "random"),
            PairingStrategy::Nearest { gate } => write!(f, "nearest:{gate}"),
            PairingStrategy::Multiframe => write!(f, "multiframe"),
        }
    }
}

impl FromStr for PairingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(PairingStrategy::Random),
            "multiframe" => Ok(PairingStrategy::Multiframe),
            other => {
                let gate = other
                    .strip_prefix("nearest:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "unknown strategy {other:?}; expected random, nearest:<n> or multiframe"
                        ))
                    })?;
                Ok(PairingStrategy::Nearest { gate })
            }
        }
    }
}

impl Serialize for PairingStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairingStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl PairingStrategy {
    pub fn is_multiframe(&self) -> bool {
        matches!(self, PairingStrategy::Multiframe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpochState {
    pub epoch: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator for one (run seed, epoch, clip) triple, so the
/// draw for a clip never depends on which other clips were processed.
pub fn clip_rng(seed: u64, epoch: usize, clip_index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ splitmix(epoch as u64).rotate_left(21) ^ clip_index);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn random_match<T: Real, R: Rng>(fs: &FrameSet<T>, rng: &mut R) -> Result<usize> {
    if fs.is_empty() {
        return Err(Error::invalid("cannot pick from an empty frame set"));
    }
    Ok(rng.gen_range(0..fs.len()))
}

/// Index of the first maximum.
fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity of `audio` to every frame.
pub fn frame_similarities<T: Real>(audio: &[T], fs: &FrameSet<T>) -> Result<Vec<T>> {
    (0..fs.len()).map(|l| cosine_sim(audio, fs.frame(l))).collect()
}

/// Nearest Match selection. Before the gate opens the choice is random.
pub fn nearest_match<T: Real, R: Rng>(
    audio: &[T],
    fs: &FrameSet<T>,
    st: EpochState,
    gate: usize,
    rng: &mut R,
) -> Result<usize> {
    if fs.is_empty() {
        return Err(Error::invalid("cannot pick from an empty frame set"));
    }
    if st.epoch < gate {
        return random_match(fs, rng);
    }
    Ok(argmax(&frame_similarities(audio, fs)?))
}

/// Cosine similarity between the flattened `L x D` blocks.
pub fn multiframe_sim<T: Real>(a_all: ArrayView2<'_, T>, i_all: ArrayView2<'_, T>) -> Result<T> {
    if a_all.dim() != i_all.dim() {
        return Err(Error::invalid(format!(
            "block shapes differ: {:?} vs {:?}",
            a_all.dim(),
            i_all.dim()
        )));
    }
    let a: Vec<T> = a_all.iter().copied().collect();
    let i: Vec<T> = i_all.iter().copied().collect();
    cosine_sim(&a, &i)
}

/// Audio representation of one clip, matching the strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioRepr<T> {
    /// Whole-clip embedding (Random / Nearest).
    Single(Array1<T>),
    /// `L x D` per-segment embeddings (Multiframe).
    Segments(Array2<T>),
}

/// One clip of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchClip<'a, T> {
    pub clip_id: &'a str,
    pub clip_index: u64,
    pub frames: &'a FrameSet<T>,
}

/// Audit record of one pairing decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub clip_id: String,
    pub epoch: usize,
    pub strategy: String,
    pub chosen_index: Option<usize>,
    pub similarities: Vec<f64>,
}

/// Similarity matrix for a batch plus the query/key rows that produced it.
#[derive(Debug, Clone)]
pub struct BatchSims<T> {
    pub sims: SimilarityMatrix<T>,
    /// Audio rows (flattened segment blocks for Multiframe).
    pub queries: Array2<T>,
    /// Selected frame rows, or flattened frame blocks for Multiframe.
    pub keys: Array2<T>,
    pub selections: Vec<SelectionRecord>,
}

/// Build the scaled similarity matrix of a batch under `strategy`.
pub fn build_batch_sims<T: Real>(
    strategy: PairingStrategy,
    clips: &[BatchClip<'_, T>],
    audio: &[AudioRepr<T>],
    st: EpochState,
    seed: u64,
    scale: &LogitScale,
) -> Result<BatchSims<T>> {
    if clips.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if clips.len() != audio.len() {
        return Err(Error::invalid(format!(
            "{} clips but {} audio representations",
            clips.len(),
            audio.len()
        )));
    }
    let mut query_rows: Vec<Vec<T>> = Vec::with_capacity(clips.len());
    let mut key_rows: Vec<Vec<T>> = Vec::with_capacity(clips.len());
    let mut selections = Vec::with_capacity(clips.len());

    for (clip, repr) in clips.iter().zip(audio) {
        let fs = clip.frames;
        match (strategy, repr) {
            (PairingStrategy::Multiframe, AudioRepr::Segments(block)) => {
                if block.dim() != fs.frames().dim() {
                    return Err(Error::invalid(format!(
                        "clip {}: audio block {:?} vs frame block {:?}",
                        clip.clip_id,
                        block.dim(),
                        fs.frames().dim()
                    )));
                }
                let per_frame = (0..fs.len())
                    .map(|l| {
                        let a = block.row(l);
                        cosine_sim(a.to_slice().expect("row-major"), fs.frame(l)).map(|x| x.as_f64())
                    })
                    .collect::<Result<Vec<_>>>()?;
                selections.push(SelectionRecord {
                    clip_id: clip.clip_id.to_owned(),
                    epoch: st.epoch,
                    strategy: strategy.to_string(),
                    chosen_index: None,
                    similarities: per_frame,
                });
                query_rows.push(block.iter().copied().collect());
                key_rows.push(fs.frames().iter().copied().collect());
            }
            (PairingStrategy::Random | PairingStrategy::Nearest { .. }, AudioRepr::Single(a)) => {
                let a = a.as_slice().expect("contiguous audio embedding");
                let sims = frame_similarities(a, fs)?;
                let mut rng = clip_rng(seed, st.epoch, clip.clip_index);
                let chosen = match strategy {
                    PairingStrategy::Nearest { gate } => nearest_match(a, fs, st, gate, &mut rng)?,
                    _ => random_match(fs, &mut rng)?,
                };
                selections.push(SelectionRecord {
                    clip_id: clip.clip_id.to_owned(),
                    epoch: st.epoch,
                    strategy: strategy.to_string(),
                    chosen_index: Some(chosen),
                    similarities: sims.iter().map(|x| x.as_f64()).collect(),
                });
                query_rows.push(a.to_vec());
                key_rows.push(fs.frame(chosen).to_vec());
            }
            _ => {
                return Err(Error::invalid(format!(
                    "clip {}: audio representation does not match strategy {strategy}",
                    clip.clip_id
                )))
            }
        }
    }
    let width = query_rows[0].len();
    if query_rows.iter().chain(&key_rows).any(|r| r.len() != width) {
        return Err(Error::invalid("inconsistent embedding sizes within batch"));
    }
    let to_array = |rows: Vec<Vec<T>>| {
        Array2::from_shape_vec((rows.len(), width), rows.into_iter().flatten().collect())
            .expect("rows have equal width")
    };
    let queries = to_array(query_rows);
    let keys = to_array(key_rows);
    let sims = sim_matrix(queries.view(), keys.view(), scale)?;
    Ok(BatchSims {
        sims,
        queries,
        keys,
        selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{info_nce, info_nce_grad};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let mut m: Array2<f64> = Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        m
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("random".parse::<PairingStrategy>().unwrap(), PairingStrategy::Random);
        assert_eq!(
            "nearest:15".parse::<PairingStrategy>().unwrap(),
            PairingStrategy::Nearest { gate: 15 }
        );
        assert_eq!("multiframe".parse::<PairingStrategy>().unwrap(), PairingStrategy::Multiframe);
        assert!("nearest:x".parse::<PairingStrategy>().is_err());
        assert_eq!(PairingStrategy::Nearest { gate: 3 }.to_string(), "nearest:3");
    }

    #[test]
    fn frame_set_validation() {
        assert!(FrameSet::<f64>::new(Array2::zeros((0, 3)), vec![]).is_err());
        assert!(FrameSet::new(Array2::<f64>::zeros((2, 3)), vec![1.0]).is_err());
        assert!(FrameSet::new(Array2::<f64>::zeros((2, 3)), vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn random_match_single_frame_and_replay() {
        let one = FrameSet::untimed(array![[1.0f64, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(random_match(&one, &mut rng).unwrap(), 0);
        }
        let four = FrameSet::untimed(Array2::<f64>::eye(4)).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| random_match(&four, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn random_match_is_uniform() {
        let four = FrameSet::untimed(Array2::<f64>::eye(4)).unwrap();
        let mut counts = [0usize; 4];
        for clip in 0..100_000u64 {
            let mut rng = clip_rng(9, 0, clip);
            counts[random_match(&four, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.25).abs() < 0.005, "frequency {freq}");
        }
    }

    #[test]
    fn nearest_match_examples() {
        // Frames whose cosine with the audio axis is 0.1, 0.9, 0.3, 0.5.
        let cosines = [0.1f64, 0.9, 0.3, 0.5];
        let frames = Array2::from_shape_fn((4, 2), |(l, j)| {
            if j == 0 {
                cosines[l]
            } else {
                (1.0 - cosines[l] * cosines[l]).sqrt()
            }
        });
        let fs = FrameSet::untimed(frames).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = [1.0f64, 0.0];
        assert_eq!(nearest_match(&a, &fs, EpochState { epoch: 20 }, 15, &mut rng).unwrap(), 1);

        let same = FrameSet::untimed(Array2::from_elem((4, 2), 0.5f64)).unwrap();
        assert_eq!(nearest_match(&a, &same, EpochState { epoch: 5 }, 5, &mut rng).unwrap(), 0);

        let mut counts = [0usize; 4];
        for clip in 0..100_000u64 {
            let mut rng = clip_rng(3, 3, clip);
            counts[nearest_match(&a, &fs, EpochState { epoch: 3 }, 5, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn multiframe_examples() {
        let a = array![[1.0f64, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(multiframe_sim(a.view(), a.view()).unwrap(), 1.0, epsilon = 1e-12);
        let x = array![[1.0f64, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let y = array![[0.0f64, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert_eq!(multiframe_sim(x.view(), y.view()).unwrap(), 0.0);
        let i = array![[1.0f64, 0.0], [1.0, 0.0]];
        assert_abs_diff_eq!(multiframe_sim(a.view(), i.view()).unwrap(), 0.5, epsilon = 1e-12);
        assert!(multiframe_sim(a.view(), x.view()).is_err());
    }

    fn batch_frames(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize) -> Vec<FrameSet<f64>> {
        (0..b).map(|_| FrameSet::untimed(unit_rows(rng, l, d)).unwrap()).collect()
    }

    #[test]
    fn single_clip_batch_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = batch_frames(&mut rng, 1, 4, 6);
        let clips = [BatchClip { clip_id: "c0", clip_index: 0, frames: &fs[0] }];
        let audio = [AudioRepr::Single(unit_rows(&mut rng, 1, 6).row(0).to_owned())];
        let out = build_batch_sims(PairingStrategy::Random, &clips, &audio, EpochState::default(), 1, &LogitScale::default()).unwrap();
        assert_eq!(out.sims.values.dim(), (1, 1));
        assert_eq!(info_nce(&out.sims).unwrap(), 0.0);
        assert_eq!(out.selections.len(), 1);
    }

    #[test]
    fn nearest_batch_puts_maximum_on_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, l, d) = (6, 4, 8);
        let mut sets = batch_frames(&mut rng, b, l, d);
        let audio_rows = unit_rows(&mut rng, b, d);
        // plant each clip's audio embedding among its frames
        for (i, fs) in sets.iter_mut().enumerate() {
            let mut frames = fs.frames().to_owned();
            frames.row_mut(i % l).assign(&audio_rows.row(i));
            *fs = FrameSet::untimed(frames).unwrap();
        }
        let ids: Vec<String> = (0..b).map(|i| format!("c{i}")).collect();
        let clips: Vec<_> = sets
            .iter()
            .enumerate()
            .map(|(i, fs)| BatchClip { clip_id: &ids[i], clip_index: i as u64, frames: fs })
            .collect();
        let audio: Vec<_> = audio_rows.rows().into_iter().map(|r| AudioRepr::Single(r.to_owned())).collect();
        let out = build_batch_sims(PairingStrategy::Nearest { gate: 2 }, &clips, &audio, EpochState { epoch: 2 }, 7, &LogitScale::default()).unwrap();
        for (i, row) in out.sims.values.rows().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[i], max);
            assert_eq!(out.selections[i].chosen_index, Some(i % l));
        }
    }

    #[test]
    fn multiframe_batch_diagonal_is_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, l, d) = (5, 4, 6);
        let sets = batch_frames(&mut rng, b, l, d);
        let ids: Vec<String> = (0..b).map(|i| format!("c{i}")).collect();
        let clips: Vec<_> = sets
            .iter()
            .enumerate()
            .map(|(i, fs)| BatchClip { clip_id: &ids[i], clip_index: i as u64, frames: fs })
            .collect();
        let audio: Vec<_> = sets.iter().map(|fs| AudioRepr::Segments(fs.frames().to_owned())).collect();
        let scale = LogitScale::default();
        let out = build_batch_sims(PairingStrategy::Multiframe, &clips, &audio, EpochState::default(), 0, &scale).unwrap();
        for (i, row) in out.sims.values.rows().into_iter().enumerate() {
            assert_abs_diff_eq!(row[i], scale.scale(), epsilon = 1e-9);
            for (j, &x) in row.iter().enumerate() {
                if j != i {
                    assert!(x < row[i]);
                }
            }
        }
        let wrong = [AudioRepr::Single(Array1::from(vec![1.0; 6]))];
        assert!(build_batch_sims(PairingStrategy::Multiframe, &clips[..1], &wrong, EpochState::default(), 0, &scale).is_err());
    }

    #[test]
    fn unselected_frames_do_not_affect_loss_or_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (b, l, d) = (4, 4, 5);
        let sets = batch_frames(&mut rng, b, l, d);
        let audio_rows = unit_rows(&mut rng, b, d);
        let ids: Vec<String> = (0..b).map(|i| format!("c{i}")).collect();
        let run = |sets: &[FrameSet<f64>]| {
            let clips: Vec<_> = sets
                .iter()
                .enumerate()
                .map(|(i, fs)| BatchClip { clip_id: &ids[i], clip_index: i as u64, frames: fs })
                .collect();
            let audio: Vec<_> = audio_rows.rows().into_iter().map(|r| AudioRepr::Single(r.to_owned())).collect();
            let out = build_batch_sims(PairingStrategy::Random, &clips, &audio, EpochState { epoch: 1 }, 3, &LogitScale::default()).unwrap();
            let g = info_nce_grad(out.queries.view(), out.keys.view(), &LogitScale::default()).unwrap();
            let chosen: Vec<usize> = out.selections.iter().map(|s| s.chosen_index.unwrap()).collect();
            (g.loss, g.d_queries, chosen)
        };
        let (loss, grad, chosen) = run(&sets);
        let perturbed: Vec<FrameSet<f64>> = sets
            .iter()
            .zip(&chosen)
            .map(|(fs, &c)| {
                let mut f = fs.frames().to_owned();
                for l2 in 0..l {
                    if l2 != c {
                        f.row_mut(l2).mapv_inplace(|x| -x + 0.3);
                    }
                }
                FrameSet::untimed(f).unwrap()
            })
            .collect();
        let (loss2, grad2, chosen2) = run(&perturbed);
        assert_eq!(chosen, chosen2);
        assert_eq!(loss, loss2);
        assert_eq!(grad, grad2);
    }

    proptest! {
        #[test]
        fn nearest_equals_brute_force_and_ignores_scale(
            seed in any::<u64>(),
            l in 1usize..8,
            s in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = Array2::from_shape_fn((l, 5), |_| rng.gen_range(-1.0..1.0));
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fs = FrameSet::untimed(frames.clone()).unwrap();
            let got = nearest_match(&a, &fs, EpochState { epoch: 3 }, 3, &mut rng).unwrap();
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for r in 0..l {
                let f = frames.row(r);
                let c = f.dot(&Array1::from(a.clone())) / (f.dot(&f).sqrt() * a.iter().map(|x| x * x).sum::<f64>().sqrt());
                if c > best_sim {
                    best_sim = c;
                    best = r;
                }
            }
            prop_assert_eq!(got, best);
            let scaled = FrameSet::untimed(frames.mapv(|x| x * s)).unwrap();
            prop_assert_eq!(nearest_match(&a, &scaled, EpochState { epoch: 3 }, 3, &mut rng).unwrap(), got);
        }

        #[test]
        fn multiframe_is_symmetric_and_scale_free(seed in any::<u64>(), s in 0.1f64..10.0, t in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let b: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let ab = multiframe_sim(a.view(), b.view()).unwrap();
            prop_assert!((ab - multiframe_sim(b.view(), a.view()).unwrap()).abs() < 1e-12);
            let scaled = multiframe_sim((&a * s).view(), (&b * t).view()).unwrap();
            prop_assert!((ab - scaled).abs() < 1e-12);
        }
    }
}

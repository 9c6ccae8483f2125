//! Recall@k retrieval evaluation.
//!
//! Ranks use a pessimistic tie rule: a non-relevant gallery item scoring
//! exactly as high as the best relevant item is counted as ranked above it.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::cosine_matrix;
use crate::scalar::Real;

pub const IMAGE_KS: [usize; 2] = [1, 5];
pub const TEXT_KS: [usize; 2] = [1, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "A->I")]
    AudioToImage,
    #[serde(rename = "I->A")]
    ImageToAudio,
    #[serde(rename = "A->T")]
    AudioToText,
    #[serde(rename = "T->A")]
    TextToAudio,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AudioToImage => "A->I",
            Direction::ImageToAudio => "I->A",
            Direction::AudioToText => "A->T",
            Direction::TextToAudio => "T->A",
        })
    }
}

/// Relevant gallery indices for every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    relevant: Vec<Vec<usize>>,
    gallery_size: usize,
}

impl GroundTruth {
    pub fn new(mut relevant: Vec<Vec<usize>>, gallery_size: usize) -> Result<Self> {
        for (q, rel) in relevant.iter_mut().enumerate() {
            if rel.is_empty() {
                return Err(Error::invalid(format!("query {q} has no relevant item")));
            }
            if let Some(&bad) = rel.iter().find(|&&g| g >= gallery_size) {
                return Err(Error::invalid(format!(
                    "query {q}: gallery index {bad} out of range {gallery_size}"
                )));
            }
            rel.sort_unstable();
            rel.dedup();
        }
        Ok(Self {
            relevant,
            gallery_size,
        })
    }

    /// Query `i` matches gallery item `i`.
    pub fn one_to_one(n: usize) -> Self {
        Self {
            relevant: (0..n).map(|i| vec![i]).collect(),
            gallery_size: n,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery_size
    }

    pub fn relevant(&self, q: usize) -> &[usize] {
        &self.relevant[q]
    }
}

/// 1-based rank of the best-scoring relevant item.
pub fn rank_of_best_target<T: Real>(scores: &[T], relevant: &[usize]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    if relevant.is_empty() {
        return Err(Error::invalid("empty relevant set"));
    }
    if let Some(&bad) = relevant.iter().find(|&&g| g >= scores.len()) {
        return Err(Error::invalid(format!("relevant index {bad} outside gallery of {}", scores.len())));
    }
    let best = relevant
        .iter()
        .map(|&g| scores[g])
        .fold(T::neg_infinity(), T::max);
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(g, &s)| s >= best && !relevant.contains(&g))
        .count();
    Ok(1 + above)
}

/// Rank of every query under `gt`.
pub fn ranks<T: Real>(gt: &GroundTruth, scores: ArrayView2<'_, T>) -> Result<Vec<usize>> {
    if scores.dim() != (gt.n_queries(), gt.gallery_size()) {
        return Err(Error::invalid(format!(
            "score matrix {:?} does not match ground truth ({}, {})",
            scores.dim(),
            gt.n_queries(),
            gt.gallery_size()
        )));
    }
    scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(q, row)| {
            let row = row.to_vec();
            rank_of_best_target(&row, gt.relevant(q))
        })
        .collect()
}

pub fn recall_at_k<T: Real>(gt: &GroundTruth, scores: ArrayView2<'_, T>, k: usize) -> Result<f64> {
    let r = ranks(gt, scores)?;
    Ok(fraction_within(&r, k))
}

fn fraction_within(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub metrics: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Representation used for audio-image scoring, if applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl RetrievalReport {
    pub fn from_scores<T: Real>(
        direction: Direction,
        gt: &GroundTruth,
        scores: ArrayView2<'_, T>,
        ks: &[usize],
    ) -> Result<Self> {
        let r = ranks(gt, scores)?;
        Ok(Self {
            direction,
            metrics: ks.iter().map(|&k| (k, fraction_within(&r, k))).collect(),
            n_queries: gt.n_queries(),
            mode: None,
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).copied()
    }

    /// One flat record per k.
    pub fn rows(&self, seed: u64) -> Vec<ReportRow> {
        self.metrics
            .iter()
            .map(|(&k, &recall)| ReportRow {
                direction: self.direction,
                k,
                recall,
                n_queries: self.n_queries,
                seed,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
    pub n_queries: usize,
    pub seed: u64,
}

/// Audio-to-text and text-to-audio reports. `captions` holds
/// `captions_per_clip` consecutive rows per clip, in clip order.
pub fn eval_audio_text<T: Real>(
    audio: ArrayView2<'_, T>,
    captions: ArrayView2<'_, T>,
    captions_per_clip: usize,
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    let n = audio.nrows();
    if n == 0 || captions_per_clip == 0 {
        return Err(Error::invalid("audio-text evaluation needs clips and captions"));
    }
    if captions.nrows() != n * captions_per_clip {
        return Err(Error::invalid(format!(
            "{} captions for {n} clips at {captions_per_clip} per clip",
            captions.nrows()
        )));
    }
    let a2t = cosine_matrix(audio, captions)?;
    let c = captions_per_clip;
    let gt_a2t = GroundTruth::new((0..n).map(|i| (i * c..(i + 1) * c).collect()).collect(), n * c)?;
    let gt_t2a = GroundTruth::new((0..n * c).map(|j| vec![j / c]).collect(), n)?;
    let t2a = a2t.t();
    Ok([
        RetrievalReport::from_scores(Direction::AudioToText, &gt_a2t, a2t.view(), ks)?,
        RetrievalReport::from_scores(Direction::TextToAudio, &gt_t2a, t2a, ks)?,
    ])
}

/// How audio and images are compared at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// One embedding per clip on each side.
    Single,
    /// Rows are flattened `frames x D` blocks compared as whole vectors.
    Multiframe { frames: usize },
}

impl fmt::Display for ImageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageMode::Single => f.write_str("single"),
            ImageMode::Multiframe { frames } => write!(f, "multiframe:{frames}"),
        }
    }
}

/// Audio-to-image and image-to-audio reports with one-to-one relevance.
pub fn eval_audio_image<T: Real>(
    audio: ArrayView2<'_, T>,
    images: ArrayView2<'_, T>,
    mode: ImageMode,
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    if audio.nrows() != images.nrows() || audio.nrows() == 0 {
        return Err(Error::invalid(format!(
            "{} audio clips vs {} images",
            audio.nrows(),
            images.nrows()
        )));
    }
    if let ImageMode::Multiframe { frames } = mode {
        if frames == 0 || audio.ncols() % frames != 0 {
            return Err(Error::invalid(format!(
                "row width {} is not a whole number of {frames} frames",
                audio.ncols()
            )));
        }
    }
    let scores: Array2<T> = cosine_matrix(audio, images)?;
    let gt = GroundTruth::one_to_one(audio.nrows());
    let mut a2i = RetrievalReport::from_scores(Direction::AudioToImage, &gt, scores.view(), ks)?;
    let mut i2a = RetrievalReport::from_scores(Direction::ImageToAudio, &gt, scores.t(), ks)?;
    a2i.mode = Some(mode.to_string());
    i2a.mode = Some(mode.to_string());
    Ok([a2i, i2a])
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate of one (direction, k) cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub direction: Direction,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<Summary> {
    let mut cells: BTreeMap<(Direction, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.direction, r.k)).or_default().push(r.recall);
    }
    cells
        .into_iter()
        .map(|((direction, k), xs)| {
            let (mean, std) = mean_std(&xs);
            Summary {
                direction,
                k,
                mean,
                std,
                n_seeds: xs.len(),
            }
        })
        .collect()
}

/// Plain-text table: one line per labelled row, one column per
/// (direction, k), values in percent as `mean ± std`.
pub fn format_table(rows: &[(String, Vec<Summary>)]) -> String {
    let mut columns: Vec<(Direction, usize)> = rows
        .iter()
        .flat_map(|(_, s)| s.iter().map(|c| (c.direction, c.k)))
        .collect();
    columns.sort();
    columns.dedup();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "strategy");
    for (d, k) in &columns {
        let _ = write!(out, " | {:>15}", format!("{d} R@{k}"));
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for col in &columns {
            let cell = cells
                .iter()
                .find(|c| (c.direction, c.k) == *col)
                .map(|c| format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std))
                .unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {cell:>15}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_rank(scores: &[f64], relevant: &[usize]) -> usize {
        // Full sort, relevant items placed after equal-scored non-relevant ones.
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(relevant.contains(&a).cmp(&relevant.contains(&b)))
        });
        1 + idx.iter().position(|g| relevant.contains(g)).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_best_target(&[0.9, 0.1, 0.5], &[0]).unwrap(), 1);
        assert_eq!(rank_of_best_target(&[0.5, 0.5, 0.5], &[2]).unwrap(), 3);
        assert_eq!(rank_of_best_target(&[0.2, 0.8, 0.6], &[0, 2]).unwrap(), 2);
        assert!(rank_of_best_target(&[0.2], &[]).is_err());
        assert!(GroundTruth::new(vec![vec![]], 3).is_err());
    }

    #[test]
    fn recall_examples() {
        let id = Array2::<f64>::eye(10);
        let gt = GroundTruth::one_to_one(10);
        assert_eq!(recall_at_k(&gt, id.view(), 1).unwrap(), 1.0);
        let anti = Array2::from_shape_fn((10, 10), |(i, j)| if i + j == 9 { 1.0 } else { 0.0 });
        let gt_anti = GroundTruth::new((0..10).map(|i| vec![9 - i]).collect(), 10).unwrap();
        assert_eq!(recall_at_k(&gt_anti, anti.view(), 1).unwrap(), 1.0);
        assert!(recall_at_k(&gt, Array2::<f64>::eye(9).view(), 1).is_err());
    }

    #[test]
    fn recall_matches_sort_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scores = Array2::from_shape_fn((20, 20), |_| rng.gen_range(0..6) as f64 / 5.0);
            let rel: Vec<Vec<usize>> = (0..20)
                .map(|_| {
                    let n = rng.gen_range(1..4);
                    (0..n).map(|_| rng.gen_range(0..20)).collect()
                })
                .collect();
            let gt = GroundTruth::new(rel, 20).unwrap();
            for k in [1, 3, 5, 10, 20] {
                let hits = (0..20)
                    .filter(|&q| oracle_rank(&scores.row(q).to_vec(), gt.relevant(q)) <= k)
                    .count();
                assert_eq!(recall_at_k(&gt, scores.view(), k).unwrap(), hits as f64 / 20.0);
            }
        }
    }

    #[test]
    fn audio_text_protocol() {
        let audio = Array2::from_shape_fn((3, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let captions = Array2::from_shape_fn((15, 4), |(r, j)| audio[[r / 5, j]]);
        let [a2t, t2a] = eval_audio_text(audio.view(), captions.view(), 5, &TEXT_KS).unwrap();
        assert_eq!(a2t.recall(1), Some(1.0));
        assert_eq!(t2a.recall(1), Some(1.0));
        assert_eq!(a2t.n_queries, 3);
        assert_eq!(t2a.n_queries, 15);
        assert!(eval_audio_text(audio.view(), captions.view(), 4, &TEXT_KS).is_err());
    }

    #[test]
    fn audio_text_swapped_captions() {
        // clip 1's five captions describe clip 0's audio
        let audio = array![[1.0, 0.0], [0.0, 1.0]];
        let captions = Array2::from_shape_fn((10, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let [a2t, t2a] = eval_audio_text(audio.view(), captions.view(), 5, &[1, 5, 6, 10]).unwrap();
        // every audio query sees its own captions tied with (or below) five others
        assert_eq!(a2t.recall(1), Some(0.0));
        assert_eq!(a2t.recall(5), Some(0.0));
        assert_eq!(a2t.recall(6), Some(1.0));
        // clip 0's captions rank audio 0 first; clip 1's captions rank it second
        assert_eq!(t2a.recall(1), Some(0.5));
        assert_eq!(t2a.recall(5), Some(1.0));
    }

    #[test]
    fn audio_image_protocol() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
        let [a2i, i2a] = eval_audio_image(a.view(), a.view(), ImageMode::Single, &[1, 8]).unwrap();
        assert_eq!(a2i.recall(1), Some(1.0));
        assert_eq!(i2a.recall(8), Some(1.0));
        assert!(eval_audio_image(a.view(), a.view(), ImageMode::Multiframe { frames: 4 }, &[1]).is_err());
        let [mf, _] = eval_audio_image(a.view(), a.view(), ImageMode::Multiframe { frames: 3 }, &[1]).unwrap();
        assert_eq!(mf.mode.as_deref(), Some("multiframe:3"));

        let b = Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0));
        let [a2i, i2a] = eval_audio_image(a.view(), b.view(), ImageMode::Single, &IMAGE_KS).unwrap();
        let cos = cosine_matrix(a.view(), b.view()).unwrap();
        for k in IMAGE_KS {
            let hits = (0..8).filter(|&q| oracle_rank(&cos.row(q).to_vec(), &[q]) <= k).count();
            assert_eq!(a2i.recall(k), Some(hits as f64 / 8.0));
            let hits = (0..8).filter(|&q| oracle_rank(&cos.column(q).to_vec(), &[q]) <= k).count();
            assert_eq!(i2a.recall(k), Some(hits as f64 / 8.0));
        }
    }

    #[test]
    fn aggregation_and_table() {
        let rows: Vec<ReportRow> = [0.1, 0.2, 0.3]
            .iter()
            .enumerate()
            .map(|(s, &r)| ReportRow {
                direction: Direction::AudioToImage,
                k: 1,
                recall: r,
                n_queries: 10,
                seed: s as u64,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n_seeds, 3);
        assert!((s[0].mean - 0.2).abs() < 1e-12);
        assert!((s[0].std - (2.0f64 / 300.0).sqrt()).abs() < 1e-12);
        let table = format_table(&[("random".into(), s)]);
        assert!(table.contains("A->I R@1"));
        assert!(table.contains("20.00 ± 8.16"));
    }

    #[test]
    fn report_json_shape() {
        let gt = GroundTruth::one_to_one(2);
        let r = RetrievalReport::from_scores(Direction::TextToAudio, &gt, Array2::<f64>::eye(2).view(), &[1]).unwrap();
        let json = serde_json::to_string(&r.rows(7)).unwrap();
        assert_eq!(json, r#"[{"direction":"T->A","k":1,"recall":1.0,"n_queries":2,"seed":7}]"#);
    }

    proptest! {
        #[test]
        fn recall_invariants(seed in any::<u64>(), q in 1usize..12, g in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = Array2::from_shape_fn((q, g), |_| rng.gen_range(0..5) as f64);
            let rel: Vec<Vec<usize>> = (0..q).map(|_| vec![rng.gen_range(0..g)]).collect();
            let gt = GroundTruth::new(rel.clone(), g).unwrap();
            let mut prev = 0.0;
            for k in 1..=g {
                let r = recall_at_k(&gt, scores.view(), k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);

            // strictly increasing transform
            let warped = scores.mapv(|x| (x * 0.7).exp() - 3.0);
            let perm: Vec<usize> = (0..g).rev().collect();
            let permuted = Array2::from_shape_fn((q, g), |(i, j)| scores[[i, perm[j]]]);
            let gt_perm = GroundTruth::new(
                rel.iter().map(|r| r.iter().map(|&x| perm.iter().position(|&p| p == x).unwrap()).collect()).collect(),
                g,
            ).unwrap();
            // duplicate a non-relevant column
            for k in 1..=g {
                let base = recall_at_k(&gt, scores.view(), k).unwrap();
                prop_assert_eq!(recall_at_k(&gt, warped.view(), k).unwrap(), base);
                prop_assert_eq!(recall_at_k(&gt_perm, permuted.view(), k).unwrap(), base);
            }
            let dup_col = rng.gen_range(0..g);
            let dup = Array2::from_shape_fn((q, g + 1), |(i, j)| scores[[i, if j == g { dup_col } else { j }]]);
            let gt_dup = GroundTruth::new(rel.clone(), g + 1).unwrap();
            let unaffected: Vec<usize> = (0..q).filter(|&i| !rel[i].contains(&dup_col)).collect();
            for k in 1..=g {
                let before = unaffected.iter().filter(|&&i| rank_of_best_target(&scores.row(i).to_vec(), &rel[i]).unwrap() <= k).count();
                let after = unaffected.iter().filter(|&&i| rank_of_best_target(&dup.row(i).to_vec(), gt_dup.relevant(i)).unwrap() <= k).count();
                prop_assert!(after <= before);
            }
        }
    }
}

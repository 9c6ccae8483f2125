//! Scaled cosine similarity and the symmetric InfoNCE objective.
//!
//! For a `B x B` similarity matrix `S` with positives on the diagonal the
//! loss is
//!
//! ```text
//! L = (1/B) * sum_j [ -log softmax_col_j(S)[j] - log softmax_row_j(S)[j] ]
//! ```
//!
//! evaluated with log-sum-exp stabilization. [`info_nce_grad`] returns the
//! exact gradient with respect to both embedding sets and the log logit
//! scale.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, Real};

/// Learnable logit scale stored in log space and clamped from above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScale {
    log_scale: f64,
    clamp_max: f64,
}

impl Default for LogitScale {
    fn default() -> Self {
        Self::new((1.0f64 / 0.07).ln())
    }
}

impl LogitScale {
    pub const DEFAULT_CLAMP: f64 = 4.605_170_185_988_092; // ln 100

    pub fn new(log_scale: f64) -> Self {
        Self::with_clamp(log_scale, Self::DEFAULT_CLAMP)
    }

    pub fn with_clamp(log_scale: f64, clamp_max: f64) -> Self {
        Self {
            log_scale: log_scale.min(clamp_max),
            clamp_max,
        }
    }

    /// Scale fixed at exactly `s` (no clamp).
    pub fn fixed(s: f64) -> Self {
        Self {
            log_scale: s.ln(),
            clamp_max: f64::INFINITY,
        }
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn clamp_max(&self) -> f64 {
        self.clamp_max
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn set_log_scale(&mut self, v: f64) {
        self.log_scale = v.min(self.clamp_max);
    }
}

/// Square matrix of scaled similarities; entry `(i, j)` compares query `i`
/// with key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub values: Array2<T>,
    pub scale: f64,
}

pub fn cosine_sim<T: Real>(q: &[T], k: &[T]) -> Result<T> {
    if q.len() != k.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            q.len(),
            k.len()
        )));
    }
    let (nq, nk) = (l2_norm(q), l2_norm(k));
    if nq == T::zero() || nk == T::zero() {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok(dot(q, k) / (nq * nk))
}

fn row_normalized<T: Real>(m: ArrayView2<'_, T>) -> Result<(Array2<T>, Array1<T>)> {
    let norms: Array1<T> = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    if norms.iter().any(|&n| n == T::zero()) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let mut unit = m.to_owned();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|x| x / n);
    }
    Ok((unit, norms))
}

fn check_batches<T>(q: &ArrayView2<'_, T>, k: &ArrayView2<'_, T>) -> Result<()> {
    if q.nrows() != k.nrows() {
        return Err(Error::invalid(format!(
            "batch mismatch: {} queries vs {} keys",
            q.nrows(),
            k.nrows()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if q.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Unscaled cosine similarity of every query row with every key row. The two
/// sides may have different row counts.
pub fn cosine_matrix<T: Real>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let (qn, _) = row_normalized(q)?;
    let (kn, _) = row_normalized(k)?;
    Ok(qn.dot(&kn.t()))
}

/// `exp(log_scale) * cos(Q_i, K_j)` for every pair of rows.
pub fn sim_matrix<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    s: &LogitScale,
) -> Result<SimilarityMatrix<T>> {
    check_batches(&q, &k)?;
    let (qn, _) = row_normalized(q)?;
    let (kn, _) = row_normalized(k)?;
    let scale = s.scale();
    let values = qn.dot(&kn.t()) * T::of(scale);
    Ok(SimilarityMatrix { values, scale })
}

fn log_softmax_rows<T: Real>(s: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = s.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Symmetric InfoNCE of a similarity matrix whose diagonal holds positives.
pub fn info_nce<T: Real>(s: &SimilarityMatrix<T>) -> Result<T> {
    info_nce_values(s.values.view())
}

pub fn info_nce_values<T: Real>(s: ArrayView2<'_, T>) -> Result<T> {
    let b = s.nrows();
    if b == 0 || b != s.ncols() {
        return Err(Error::invalid(format!(
            "InfoNCE needs a non-empty square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("similarity matrix has non-finite entries"));
    }
    let rows = log_softmax_rows(s);
    let cols = log_softmax_rows(s.t());
    let total: T = (0..b).map(|j| -(rows[[j, j]] + cols[[j, j]])).sum();
    Ok(total / T::of(b as f64))
}

/// Gradient of the loss with respect to each entry of `S`.
pub fn info_nce_dsim<T: Real>(s: ArrayView2<'_, T>) -> Array2<T> {
    let b = s.nrows();
    let inv_b = T::one() / T::of(b as f64);
    let p_row = log_softmax_rows(s).mapv(T::exp);
    let p_col = log_softmax_rows(s.t()).mapv(T::exp).reversed_axes();
    let mut g = (p_row + p_col) * inv_b;
    for j in 0..b {
        g[[j, j]] -= T::of(2.0) * inv_b;
    }
    g
}

#[derive(Debug, Clone)]
pub struct InfoNceGrad<T> {
    pub loss: T,
    pub d_queries: Array2<T>,
    pub d_keys: Array2<T>,
    pub d_log_scale: T,
}

/// Loss and exact gradient of `info_nce(sim_matrix(Q, K, s))`.
pub fn info_nce_grad<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    s: &LogitScale,
) -> Result<InfoNceGrad<T>> {
    check_batches(&q, &k)?;
    let (qn, q_norms) = row_normalized(q)?;
    let (kn, k_norms) = row_normalized(k)?;
    let scale = T::of(s.scale());
    let cos = qn.dot(&kn.t());
    let sims = &cos * scale;
    let loss = info_nce_values(sims.view())?;
    let d_sims = info_nce_dsim(sims.view());

    // d/d log_scale of scale * cos is scale * cos = S.
    let d_log_scale = (&d_sims * &sims).sum();
    let d_cos = d_sims * scale;

    let project = |unit: &Array2<T>, d_unit: Array2<T>, norms: &Array1<T>| {
        let mut out = d_unit;
        for ((mut g, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
            let radial: T = g.iter().zip(u.iter()).map(|(&a, &b)| a * b).sum();
            g.zip_mut_with(&u, |gi, &ui| *gi = (*gi - radial * ui) / n);
        }
        out
    };
    let d_qn = d_cos.dot(&kn);
    let d_kn = d_cos.t().dot(&qn);
    Ok(InfoNceGrad {
        loss,
        d_queries: project(&qn, d_qn, &q_norms),
        d_keys: project(&kn, d_kn, &k_norms),
        d_log_scale,
    })
}

/// Fraction of rows whose positive is the row maximum.
pub fn diagonal_accuracy<T: Real>(s: &SimilarityMatrix<T>) -> f64 {
    let b = s.values.nrows();
    let hits = s
        .values
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(i, row)| row.iter().all(|&x| x <= row[*i]))
        .count();
    hits as f64 / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_sim(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(cosine_sim(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn sim_matrix_examples() {
        let eye = Array2::<f64>::eye(3);
        let s = sim_matrix(eye.view(), eye.view(), &LogitScale::fixed(1.0)).unwrap();
        assert_eq!(s.values, eye);

        let q = array![[1.0f64, 0.0], [0.0, 1.0]];
        let k = array![[1.0f64, 0.0], [1.0, 0.0]];
        let s = sim_matrix(q.view(), k.view(), &LogitScale::fixed(1.0)).unwrap();
        assert_eq!(s.values, array![[1.0, 1.0], [0.0, 0.0]]);

        let s2 = sim_matrix(q.view(), k.view(), &LogitScale::fixed(2.0)).unwrap();
        assert_abs_diff_eq!(s2.values, &s.values * 2.0, epsilon = 1e-12);

        let short = array![[1.0f64, 0.0]];
        assert!(sim_matrix(q.view(), short.view(), &LogitScale::fixed(1.0)).is_err());
    }

    #[test]
    fn info_nce_examples() {
        let one = SimilarityMatrix {
            values: array![[3.7f64]],
            scale: 1.0,
        };
        assert_eq!(info_nce(&one).unwrap(), 0.0);

        let l3 = 3.0f64.ln();
        let two = SimilarityMatrix {
            values: array![[l3, 0.0], [0.0, l3]],
            scale: 1.0,
        };
        let expect = 2.0 * (4.0f64 / 3.0).ln();
        assert_abs_diff_eq!(info_nce(&two).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(info_nce(&two).unwrap(), 0.575_364, epsilon = 1e-6);

        let shifted = SimilarityMatrix {
            values: two.values.mapv(|x| x + 5.0),
            scale: 1.0,
        };
        assert_abs_diff_eq!(info_nce(&shifted).unwrap(), expect, epsilon = 1e-12);

        let rect = array![[1.0f64, 2.0]];
        assert!(info_nce_values(rect.view()).is_err());
    }

    #[test]
    fn log_scale_clamps() {
        let mut s = LogitScale::new(10.0);
        assert_eq!(s.log_scale(), LogitScale::DEFAULT_CLAMP);
        s.set_log_scale(1.0);
        assert_eq!(s.log_scale(), 1.0);
        assert_abs_diff_eq!(LogitScale::default().scale(), 1.0 / 0.07, epsilon = 1e-9);
    }

    #[test]
    fn single_pair_has_zero_gradient() {
        let q = array![[0.3f64, -1.0, 2.0]];
        let k = array![[1.0f64, 0.5, 0.0]];
        let g = info_nce_grad(q.view(), k.view(), &LogitScale::default()).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.d_queries.iter().all(|&x| x == 0.0));
        assert!(g.d_keys.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_optimum_has_small_gradient() {
        let eye = Array2::<f64>::eye(4);
        let g = info_nce_grad(eye.view(), eye.view(), &LogitScale::with_clamp(5.0, 10.0)).unwrap();
        let small = g.d_queries.iter().chain(g.d_keys.iter()).all(|x| x.abs() < 1e-2);
        assert!(small, "gradient at an orthonormal optimum should vanish");
        let loose = info_nce_grad(eye.view(), eye.view(), &LogitScale::fixed(1.0)).unwrap();
        let big = loose.d_queries.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tight = g.d_queries.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(tight < big);
    }

    // Central finite differences of the loss w.r.t. every input coordinate.
    fn fd_check(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, d) = (4, 8);
        let q = random_matrix(&mut rng, b, d);
        let k = random_matrix(&mut rng, b, d);
        let s = LogitScale::with_clamp(rng.gen_range(0.0..2.0), 10.0);
        let g = info_nce_grad(q.view(), k.view(), &s).unwrap();
        let loss_at = |q: &Array2<f64>, k: &Array2<f64>, s: &LogitScale| {
            info_nce(&sim_matrix(q.view(), k.view(), s).unwrap()).unwrap()
        };
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs().max(n.abs()).max(1e-6));
        for idx in 0..b * d {
            let (i, j) = (idx / d, idx % d);
            for (which, analytic) in [(0, g.d_queries[[i, j]]), (1, g.d_keys[[i, j]])] {
                let (mut qp, mut qm, mut kp, mut km) = (q.clone(), q.clone(), k.clone(), k.clone());
                if which == 0 {
                    qp[[i, j]] += h;
                    qm[[i, j]] -= h;
                } else {
                    kp[[i, j]] += h;
                    km[[i, j]] -= h;
                }
                let num = (loss_at(&qp, &kp, &s) - loss_at(&qm, &km, &s)) / (2.0 * h);
                assert!(rel(analytic, num) < 1e-4, "seed {seed} coord {idx}: {analytic} vs {num}");
            }
        }
        let num = (loss_at(&q, &k, &LogitScale::with_clamp(s.log_scale() + h, 10.0))
            - loss_at(&q, &k, &LogitScale::with_clamp(s.log_scale() - h, 10.0)))
            / (2.0 * h);
        assert!(rel(g.d_log_scale, num) < 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            fd_check(seed);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_nonnegative_and_shift_invariant(
            vals in prop::collection::vec(-5.0f64..5.0, 9),
            c in -10.0f64..10.0,
        ) {
            let s = Array2::from_shape_vec((3, 3), vals).unwrap();
            let l = info_nce_values(s.view()).unwrap();
            prop_assert!(l >= 0.0);
            let shifted = s.mapv(|x| x + c);
            prop_assert!((info_nce_values(shifted.view()).unwrap() - l).abs() < 1e-9);
        }

        #[test]
        fn loss_is_permutation_invariant(
            vals in prop::collection::vec(-5.0f64..5.0, 16),
            perm in Just([2usize, 0, 3, 1]).prop_shuffle(),
        ) {
            let s = Array2::from_shape_vec((4, 4), vals).unwrap();
            let p = Array2::from_shape_fn((4, 4), |(i, j)| s[[perm[i], perm[j]]]);
            let a = info_nce_values(s.view()).unwrap();
            let b = info_nce_values(p.view()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn lowering_a_negative_never_raises_loss(
            vals in prop::collection::vec(-5.0f64..5.0, 9),
            i in 0usize..3, j in 0usize..3, delta in 0.0f64..4.0,
        ) {
            prop_assume!(i != j);
            let s = Array2::from_shape_vec((3, 3), vals).unwrap();
            let mut lowered = s.clone();
            lowered[[i, j]] -= delta;
            let before = info_nce_values(s.view()).unwrap();
            let after = info_nce_values(lowered.view()).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }
}

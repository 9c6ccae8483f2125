//! Small transformer-style patch encoder with an exact backward pass.
//!
//! Pipeline per input: patches -> linear projection (+ bias, + positional
//! rows) -> `depth` residual blocks of single-head attention and a GELU MLP
//! -> mean pool over tokens -> output projection -> L2 normalization.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grid::{extract_patches, token_grid, TokenGridSpec};
use crate::error::{Error, Result};
use crate::io::{NamedTensor, TensorMap};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            mlp_hidden: 128,
            dim: 32,
        }
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Array1<T>,
}

impl<T: Real> Embedding<T> {
    /// Normalize `v` to unit length; fails on the zero vector.
    pub fn normalize(v: Array1<T>) -> Result<Self> {
        let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self {
            values: v.mapv(|x| x / n),
        })
    }

    pub fn values(&self) -> &Array1<T> {
        &self.values
    }

    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("embedding is contiguous")
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Trainable parameters of one encoder. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub patch_proj: Array2<T>,
    pub patch_bias: Array1<T>,
    pub positional: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub out_proj: Array2<T>,
}

/// Read-only view of one named parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub is_bias: bool,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one named parameter tensor.
pub struct TensorMut<'a, T> {
    pub name: String,
    pub is_bias: bool,
    pub data: &'a mut [T],
}

fn gaussian<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(shape, |_| T::of(normal.sample(rng)))
}

impl<T: Real> EncoderParams<T> {
    /// Freshly initialized parameters for inputs described by `spec`.
    pub fn random(cfg: &EncoderConfig, spec: &TokenGridSpec, seed: u64) -> Result<Self> {
        let grid = token_grid(spec)?;
        if cfg.width == 0 || cfg.dim == 0 || cfg.mlp_hidden == 0 {
            return Err(Error::invalid("encoder width, hidden size and dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = spec.patch_len();
        let w = cfg.width;
        let h = cfg.mlp_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_proj = gaussian(&mut rng, (p, w), inv(p));
        let positional = gaussian(&mut rng, (grid.n_tokens, w), 0.1);
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                wq: gaussian(&mut rng, (w, w), inv(w)),
                wk: gaussian(&mut rng, (w, w), inv(w)),
                wv: gaussian(&mut rng, (w, w), inv(w)),
                wo: gaussian(&mut rng, (w, w), 0.5 * inv(w)),
                bo: Array1::zeros(w),
                w1: gaussian(&mut rng, (w, h), inv(w)),
                b1: Array1::zeros(h),
                w2: gaussian(&mut rng, (h, w), 0.5 * inv(h)),
                b2: Array1::zeros(w),
            })
            .collect();
        let out_proj = gaussian(&mut rng, (w, cfg.dim), inv(w));
        Ok(Self {
            patch_proj,
            patch_bias: Array1::zeros(w),
            positional,
            blocks,
            out_proj,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        Self {
            patch_proj: z2(&self.patch_proj),
            patch_bias: z1(&self.patch_bias),
            positional: z2(&self.positional),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    wq: z2(&b.wq),
                    wk: z2(&b.wk),
                    wv: z2(&b.wv),
                    wo: z2(&b.wo),
                    bo: z1(&b.bo),
                    w1: z2(&b.w1),
                    b1: z1(&b.b1),
                    w2: z2(&b.w2),
                    b2: z1(&b.b2),
                })
                .collect(),
            out_proj: z2(&self.out_proj),
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.patch_proj.ncols(),
            depth: self.blocks.len(),
            mlp_hidden: self.blocks.first().map_or(0, |b| b.w1.ncols()),
            dim: self.out_proj.ncols(),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_proj.nrows()
    }

    pub fn width(&self) -> usize {
        self.patch_proj.ncols()
    }

    pub fn dim(&self) -> usize {
        self.out_proj.ncols()
    }

    /// Every tensor in a fixed order with its checkpoint name.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        fn push2<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: String, a: &'a Array2<T>) {
            out.push(TensorRef {
                name,
                is_bias: false,
                dims: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            });
        }
        fn push1<'a, T>(out: &mut Vec<TensorRef<'a, T>>, name: String, a: &'a Array1<T>) {
            out.push(TensorRef {
                name,
                is_bias: true,
                dims: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            });
        }
        push2(&mut out, "patch_proj".into(), &self.patch_proj);
        push1(&mut out, "patch_bias".into(), &self.patch_bias);
        push2(&mut out, "positional".into(), &self.positional);
        for (i, b) in self.blocks.iter().enumerate() {
            push2(&mut out, format!("block{i}/wq"), &b.wq);
            push2(&mut out, format!("block{i}/wk"), &b.wk);
            push2(&mut out, format!("block{i}/wv"), &b.wv);
            push2(&mut out, format!("block{i}/wo"), &b.wo);
            push1(&mut out, format!("block{i}/bo"), &b.bo);
            push2(&mut out, format!("block{i}/w1"), &b.w1);
            push1(&mut out, format!("block{i}/b1"), &b.b1);
            push2(&mut out, format!("block{i}/w2"), &b.w2);
            push1(&mut out, format!("block{i}/b2"), &b.b2);
        }
        push2(&mut out, "out_proj".into(), &self.out_proj);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        fn push2<'a, T>(out: &mut Vec<TensorMut<'a, T>>, name: String, a: &'a mut Array2<T>) {
            out.push(TensorMut {
                name,
                is_bias: false,
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        fn push1<'a, T>(out: &mut Vec<TensorMut<'a, T>>, name: String, a: &'a mut Array1<T>) {
            out.push(TensorMut {
                name,
                is_bias: true,
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        push2(&mut out, "patch_proj".into(), &mut self.patch_proj);
        push1(&mut out, "patch_bias".into(), &mut self.patch_bias);
        push2(&mut out, "positional".into(), &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push2(&mut out, format!("block{i}/wq"), &mut b.wq);
            push2(&mut out, format!("block{i}/wk"), &mut b.wk);
            push2(&mut out, format!("block{i}/wv"), &mut b.wv);
            push2(&mut out, format!("block{i}/wo"), &mut b.wo);
            push1(&mut out, format!("block{i}/bo"), &mut b.bo);
            push2(&mut out, format!("block{i}/w1"), &mut b.w1);
            push1(&mut out, format!("block{i}/b1"), &mut b.b1);
            push2(&mut out, format!("block{i}/w2"), &mut b.w2);
            push1(&mut out, format!("block{i}/b2"), &mut b.b2);
        }
        push2(&mut out, "out_proj".into(), &mut self.out_proj);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a += b;
            }
        }
    }

    pub fn scale_by(&mut self, s: T) {
        for t in self.tensors_mut() {
            for a in t.data.iter_mut() {
                *a *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Export as `f32` checkpoint tensors under `prefix/`.
    pub fn export(&self, prefix: &str, map: &mut TensorMap) {
        for t in self.tensors() {
            map.insert(
                format!("{prefix}/{}", t.name),
                NamedTensor {
                    dims: t.dims,
                    values: t.data.iter().map(|x| x.as_f32()).collect(),
                },
            );
        }
    }

    /// Rebuild parameters from checkpoint tensors under `prefix/`.
    pub fn import(map: &TensorMap, prefix: &str) -> Result<Self> {
        let get = |name: &str| {
            map.get(&format!("{prefix}/{name}"))
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor {prefix}/{name}")))
        };
        let arr2 = |name: &str| -> Result<Array2<T>> {
            let t = get(name)?;
            if t.dims.len() != 2 {
                return Err(Error::data(format!("{prefix}/{name} is not rank 2")));
            }
            Array2::from_shape_vec(
                (t.dims[0], t.dims[1]),
                t.values.iter().map(|&x| T::of(f64::from(x))).collect(),
            )
            .map_err(|e| Error::data(e.to_string()))
        };
        let arr1 = |name: &str| -> Result<Array1<T>> {
            let t = get(name)?;
            if t.dims.len() != 1 {
                return Err(Error::data(format!("{prefix}/{name} is not rank 1")));
            }
            Ok(t.values.iter().map(|&x| T::of(f64::from(x))).collect())
        };
        let mut blocks = Vec::new();
        while map.contains_key(&format!("{prefix}/block{}/wq", blocks.len())) {
            let i = blocks.len();
            blocks.push(Block {
                wq: arr2(&format!("block{i}/wq"))?,
                wk: arr2(&format!("block{i}/wk"))?,
                wv: arr2(&format!("block{i}/wv"))?,
                wo: arr2(&format!("block{i}/wo"))?,
                bo: arr1(&format!("block{i}/bo"))?,
                w1: arr2(&format!("block{i}/w1"))?,
                b1: arr1(&format!("block{i}/b1"))?,
                w2: arr2(&format!("block{i}/w2"))?,
                b2: arr1(&format!("block{i}/b2"))?,
            });
        }
        let p = Self {
            patch_proj: arr2("patch_proj")?,
            patch_bias: arr1("patch_bias")?,
            positional: arr2("positional")?,
            blocks,
            out_proj: arr2("out_proj")?,
        };
        p.check_shapes().map_err(|e| Error::data(e.to_string()))?;
        Ok(p)
    }

    /// Internal shape consistency, independent of any grid.
    pub fn check_shapes(&self) -> Result<()> {
        let w = self.width();
        let bad = |what: &str| Err(Error::invalid(format!("inconsistent encoder shapes: {what}")));
        if self.patch_bias.len() != w || self.positional.ncols() != w || self.out_proj.nrows() != w {
            return bad("patch/positional/output width");
        }
        if self.positional.nrows() == 0 {
            return bad("empty positional table");
        }
        for b in &self.blocks {
            let h = b.w1.ncols();
            if b.wq.dim() != (w, w)
                || b.wk.dim() != (w, w)
                || b.wv.dim() != (w, w)
                || b.wo.dim() != (w, w)
                || b.bo.len() != w
                || b.w1.nrows() != w
                || b.b1.len() != h
                || b.w2.dim() != (h, w)
                || b.b2.len() != w
            {
                return bad("block");
            }
        }
        Ok(())
    }
}

/// Source row and interpolation weight for destination row `j` when
/// resampling `n_src` rows to `n_dst` along the flattened index.
fn interp_source(j: usize, n_src: usize, n_dst: usize) -> (usize, f64) {
    if n_src <= 1 || n_dst <= 1 {
        return (0, 0.0);
    }
    let num = j * (n_src - 1);
    let den = n_dst - 1;
    (num / den, (num % den) as f64 / den as f64)
}

/// Linearly interpolate a positional table to `n_dst` rows. Endpoints are
/// preserved exactly; `n_dst == rows` is the identity.
pub fn resample_positional<T: Real>(table: ArrayView2<'_, T>, n_dst: usize) -> Array2<T> {
    let n_src = table.nrows();
    if n_src == n_dst {
        return table.to_owned();
    }
    let mut out = Array2::zeros((n_dst, table.ncols()));
    for j in 0..n_dst {
        let (i, w) = interp_source(j, n_src, n_dst);
        let mut row = out.row_mut(j);
        if w == 0.0 {
            row.assign(&table.row(i));
        } else {
            let (a, b) = (T::of(1.0 - w), T::of(w));
            row.assign(&(&table.row(i) * a + &table.row(i + 1) * b));
        }
    }
    out
}

fn resample_positional_backward<T: Real>(d_dst: ArrayView2<'_, T>, grad: &mut Array2<T>) {
    let n_src = grad.nrows();
    let n_dst = d_dst.nrows();
    if n_src == n_dst {
        *grad += &d_dst;
        return;
    }
    for j in 0..n_dst {
        let (i, w) = interp_source(j, n_src, n_dst);
        let d = d_dst.row(j);
        if w == 0.0 {
            let mut r = grad.row_mut(i);
            r += &d;
        } else {
            let (a, b) = (T::of(1.0 - w), T::of(w));
            grad.row_mut(i).scaled_add(a, &d);
            grad.row_mut(i + 1).scaled_add(b, &d);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Real>(u: T) -> T {
    let a = T::of(GELU_C) * (u + T::of(GELU_K) * u * u * u);
    T::of(0.5) * u * (T::one() + a.tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let a = T::of(GELU_C) * (u + T::of(GELU_K) * u * u * u);
    let t = a.tanh();
    let da = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * u * u);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * u * (T::one() - t * t) * da
}

fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

struct BlockTrace<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Array2<T>,
    h: Array2<T>,
    x1: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

/// Intermediate values retained by a forward pass for [`backward`].
pub struct Trace<T> {
    patches: Array2<T>,
    blocks: Vec<BlockTrace<T>>,
    n_tokens: usize,
    pooled: Array1<T>,
    embedding: Array1<T>,
    z_norm: T,
}

/// Token sequence for one input: projected patches plus bias plus
/// positional rows (resampled if the grid size differs from the table).
pub fn patch_embed<T: Real>(
    m: ArrayView2<'_, T>,
    spec: &TokenGridSpec,
    params: &EncoderParams<T>,
) -> Result<Array2<T>> {
    embed_patches(&extract_patches(m, spec)?, params)
}

fn embed_patches<T: Real>(patches: &Array2<T>, params: &EncoderParams<T>) -> Result<Array2<T>> {
    if patches.ncols() != params.patch_len() {
        return Err(Error::invalid(format!(
            "patch length {} does not match projection rows {}",
            patches.ncols(),
            params.patch_len()
        )));
    }
    let pos = resample_positional(params.positional.view(), patches.nrows());
    Ok(patches.dot(&params.patch_proj) + &params.patch_bias + &pos)
}

fn block_forward<T: Real>(x: Array2<T>, b: &Block<T>) -> (Array2<T>, BlockTrace<T>) {
    let inv_sqrt = T::one() / T::of(x.ncols() as f64).sqrt();
    let q = x.dot(&b.wq);
    let k = x.dot(&b.wk);
    let v = x.dot(&b.wv);
    let mut attn = q.dot(&k.t()) * inv_sqrt;
    softmax_rows(&mut attn);
    let h = attn.dot(&v);
    let x1 = &x + &h.dot(&b.wo) + &b.bo;
    let u = x1.dot(&b.w1) + &b.b1;
    let g = u.mapv(gelu);
    let x2 = &x1 + &g.dot(&b.w2) + &b.b2;
    (
        x2,
        BlockTrace {
            x,
            q,
            k,
            v,
            attn,
            h,
            x1,
            u,
            g,
        },
    )
}

fn block_backward<T: Real>(dx2: Array2<T>, b: &Block<T>, t: &BlockTrace<T>, gb: &mut Block<T>) -> Array2<T> {
    let inv_sqrt = T::one() / T::of(t.x.ncols() as f64).sqrt();
    gb.w2 += &t.g.t().dot(&dx2);
    gb.b2 += &dx2.sum_axis(Axis(0));
    let dg = dx2.dot(&b.w2.t());
    let du = &dg * &t.u.mapv(gelu_grad);
    gb.w1 += &t.x1.t().dot(&du);
    gb.b1 += &du.sum_axis(Axis(0));
    let dx1 = dx2 + du.dot(&b.w1.t());

    gb.wo += &t.h.t().dot(&dx1);
    gb.bo += &dx1.sum_axis(Axis(0));
    let dh = dx1.dot(&b.wo.t());
    let dattn = dh.dot(&t.v.t());
    let dv = t.attn.t().dot(&dh);
    let mut dscores = &dattn * &t.attn;
    for (mut row, a) in dscores.rows_mut().into_iter().zip(t.attn.rows()) {
        let s = row.sum();
        row.zip_mut_with(&a, |d, &p| *d = (*d - s * p) * inv_sqrt);
    }
    let dq = dscores.dot(&t.k);
    let dk = dscores.t().dot(&t.q);
    gb.wq += &t.x.t().dot(&dq);
    gb.wk += &t.x.t().dot(&dk);
    gb.wv += &t.x.t().dot(&dv);
    dx1 + dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t())
}

fn run_tokens<T: Real>(
    tokens: Array2<T>,
    params: &EncoderParams<T>,
) -> Result<(Embedding<T>, Vec<BlockTrace<T>>, Array1<T>, T)> {
    if tokens.nrows() == 0 {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.ncols() != params.width() {
        return Err(Error::invalid(format!(
            "token width {} does not match encoder width {}",
            tokens.ncols(),
            params.width()
        )));
    }
    let mut x = tokens;
    let mut traces = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, t) = block_forward(x, b);
        traces.push(t);
        x = next;
    }
    let pooled = x.mean_axis(Axis(0)).expect("non-empty tokens");
    let z = pooled.dot(&params.out_proj);
    let z_norm = z.iter().map(|&v| v * v).sum::<T>().sqrt();
    let emb = Embedding::normalize(z)?;
    Ok((emb, traces, pooled, z_norm))
}

/// Encode a token sequence to a unit-norm embedding.
pub fn encode<T: Real>(tokens: ArrayView2<'_, T>, params: &EncoderParams<T>) -> Result<Embedding<T>> {
    run_tokens(tokens.to_owned(), params).map(|(e, ..)| e)
}

/// Encode one input matrix, keeping the trace needed for [`backward`].
pub fn forward<T: Real>(
    m: ArrayView2<'_, T>,
    spec: &TokenGridSpec,
    params: &EncoderParams<T>,
) -> Result<(Embedding<T>, Trace<T>)> {
    let patches = extract_patches(m, spec)?;
    let tokens = embed_patches(&patches, params)?;
    let n_tokens = tokens.nrows();
    let (emb, blocks, pooled, z_norm) = run_tokens(tokens, params)?;
    let embedding = emb.values.clone();
    Ok((
        emb,
        Trace {
            patches,
            blocks,
            n_tokens,
            pooled,
            embedding,
            z_norm,
        },
    ))
}

/// Accumulate into `grads` the gradient of a scalar loss given
/// `d_embedding`, its gradient with respect to the normalized output.
pub fn backward<T: Real>(
    params: &EncoderParams<T>,
    trace: &Trace<T>,
    d_embedding: ArrayView1<'_, T>,
    grads: &mut EncoderParams<T>,
) {
    let e = &trace.embedding;
    let radial: T = e.iter().zip(d_embedding.iter()).map(|(&a, &b)| a * b).sum();
    let dz = (&d_embedding - &(e * radial)) / trace.z_norm;

    let pooled_col = trace.pooled.view().insert_axis(Axis(1));
    let dz_row = dz.view().insert_axis(Axis(0));
    grads.out_proj += &pooled_col.dot(&dz_row);
    let dpooled = params.out_proj.dot(&dz);

    let inv_n = T::one() / T::of(trace.n_tokens as f64);
    let mut dx = Array2::from_shape_fn((trace.n_tokens, params.width()), |(_, j)| dpooled[j] * inv_n);
    for ((b, t), gb) in params
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        dx = block_backward(dx, b, t, gb);
    }
    grads.patch_proj += &trace.patches.t().dot(&dx);
    grads.patch_bias += &dx.sum_axis(Axis(0));
    resample_positional_backward(dx.view(), &mut grads.positional);
}

/// Split the time axis into `l` equal segments (remainder rows dropped).
pub fn segment_rows(total_rows: usize, l: usize) -> Result<usize> {
    if l == 0 {
        return Err(Error::invalid("segment count must be at least 1"));
    }
    if l > total_rows {
        return Err(Error::invalid(format!(
            "cannot split {total_rows} rows into {l} segments"
        )));
    }
    Ok(total_rows / l)
}

/// Forward pass over each of the `l` temporal segments, with traces.
pub fn forward_segments<T: Real>(
    m: ArrayView2<'_, T>,
    l: usize,
    spec: &TokenGridSpec,
    params: &EncoderParams<T>,
) -> Result<Vec<(Embedding<T>, Trace<T>)>> {
    let seg = segment_rows(m.nrows(), l)?;
    let seg_spec = spec.with_input((seg, m.ncols()));
    token_grid(&seg_spec)?;
    (0..l)
        .map(|i| {
            let view = m.slice(ndarray::s![i * seg..(i + 1) * seg, ..]);
            forward(view, &seg_spec, params)
        })
        .collect()
}

/// Encode each of `l` equal temporal segments independently.
pub fn encode_segments<T: Real>(
    m: ArrayView2<'_, T>,
    l: usize,
    spec: &TokenGridSpec,
    params: &EncoderParams<T>,
) -> Result<Vec<Embedding<T>>> {
    Ok(forward_segments(m, l, spec, params)?
        .into_iter()
        .map(|(e, _)| e)
        .collect())
}

/// Initialize an audio encoder from image encoder weights: every tensor is
/// copied and the positional table is interpolated to the audio token count.
pub fn init_audio_from_image<T: Real>(
    image: &EncoderParams<T>,
    image_spec: &TokenGridSpec,
    audio_spec: &TokenGridSpec,
) -> Result<EncoderParams<T>> {
    if image_spec.patch != audio_spec.patch {
        return Err(Error::invalid(format!(
            "patch shapes differ: image {:?} vs audio {:?}",
            image_spec.patch, audio_spec.patch
        )));
    }
    if image.patch_len() != audio_spec.patch_len() {
        return Err(Error::invalid("image projection does not match the patch size"));
    }
    let audio_tokens = token_grid(audio_spec)?.n_tokens;
    let mut out = image.clone();
    out.positional = resample_positional(image.positional.view(), audio_tokens);
    Ok(out)
}

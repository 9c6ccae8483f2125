use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Geometry of a patch grid over a 2-D input (rows x cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGridSpec {
    pub input: (usize, usize),
    pub patch: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub n_tokens: usize,
}

impl TokenGridSpec {
    pub fn new(input: (usize, usize), patch: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            input,
            patch,
            stride,
        }
    }

    /// Same patch and stride over a different input size.
    pub fn with_input(&self, input: (usize, usize)) -> Self {
        Self { input, ..*self }
    }

    pub fn patch_len(&self) -> usize {
        self.patch.0 * self.patch.1
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        token_grid(self)
    }
}

pub fn token_grid(spec: &TokenGridSpec) -> Result<TokenGrid> {
    let TokenGridSpec {
        input,
        patch,
        stride,
    } = *spec;
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("strides must be at least 1"));
    }
    if patch.0 == 0 || patch.1 == 0 {
        return Err(Error::invalid("patch must be non-empty"));
    }
    if patch.0 > input.0 || patch.1 > input.1 {
        return Err(Error::invalid(format!(
            "patch {patch:?} larger than input {input:?}"
        )));
    }
    let rows = 1 + (input.0 - patch.0) / stride.0;
    let cols = 1 + (input.1 - patch.1) / stride.1;
    Ok(TokenGrid {
        rows,
        cols,
        n_tokens: rows * cols,
    })
}

/// Flattened patches in row-major grid order, one per row.
pub fn extract_patches<T: Real>(m: ArrayView2<'_, T>, spec: &TokenGridSpec) -> Result<Array2<T>> {
    if m.dim() != spec.input {
        return Err(Error::invalid(format!(
            "input of shape {:?} does not match grid input {:?}",
            m.dim(),
            spec.input
        )));
    }
    let grid = token_grid(spec)?;
    let (pr, pc) = spec.patch;
    let mut out = Array2::zeros((grid.n_tokens, pr * pc));
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let (r0, c0) = (gr * spec.stride.0, gc * spec.stride.1);
            let patch = m.slice(s![r0..r0 + pr, c0..c0 + pc]);
            let mut row = out.row_mut(gr * grid.cols + gc);
            for (dst, &src) in row.iter_mut().zip(patch.iter()) {
                *dst = src;
            }
        }
    }
    Ok(out)
}

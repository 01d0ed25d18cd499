//! Batched affine kernels, each in a sequential and a rayon variant.
//!
//! The parallel variants split work over independent output slices (batch
//! rows for activations, weight rows for gradients) and keep the inner
//! accumulation order identical to the sequential code, so both variants are
//! bitwise-identical. The `parallel` feature selects which one the public
//! dispatch functions use; both remain callable for benches.
//!
//! `pattern`, when present, lists the nonzero column indices of each input
//! row. The wide first layer of the claim model passes it so the cost scales
//! with the handful of populated claim fields instead of the vocabulary size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the rayon fork overhead dominates.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

/// y[r, j] = b[j] + sum_k w[j, k] * x[r, k]
pub fn linear_forward(
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    w: &[f64],
    b: Option<&[f64]>,
    out: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    #[cfg(feature = "parallel")]
    {
        let rows = if in_dim == 0 { 0 } else { x.len() / in_dim.max(1) };
        if rows * in_dim * out_dim >= PAR_MIN_WORK {
            return linear_forward_par(x, pattern, w, b, out, in_dim, out_dim);
        }
    }
    linear_forward_seq(x, pattern, w, b, out, in_dim, out_dim)
}

pub fn linear_forward_seq(
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    w: &[f64],
    b: Option<&[f64]>,
    out: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    for (r, out_row) in out.chunks_mut(out_dim).enumerate() {
        forward_row(r, &x[r * in_dim..(r + 1) * in_dim], pattern, w, b, out_row, in_dim);
    }
}

#[cfg(feature = "parallel")]
pub fn linear_forward_par(
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    w: &[f64],
    b: Option<&[f64]>,
    out: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    out.par_chunks_mut(out_dim).enumerate().for_each(|(r, out_row)| {
        forward_row(r, &x[r * in_dim..(r + 1) * in_dim], pattern, w, b, out_row, in_dim);
    });
}

#[inline]
fn forward_row(
    r: usize,
    x_row: &[f64],
    pattern: Option<&[Vec<usize>]>,
    w: &[f64],
    b: Option<&[f64]>,
    out_row: &mut [f64],
    in_dim: usize,
) {
    match pattern {
        Some(pat) => {
            let nnz = &pat[r];
            for (j, o) in out_row.iter_mut().enumerate() {
                let w_row = &w[j * in_dim..(j + 1) * in_dim];
                let mut acc = b.map_or(0.0, |b| b[j]);
                for &k in nnz {
                    acc += w_row[k] * x_row[k];
                }
                *o = acc;
            }
        }
        None => {
            for (j, o) in out_row.iter_mut().enumerate() {
                let w_row = &w[j * in_dim..(j + 1) * in_dim];
                let mut acc = b.map_or(0.0, |b| b[j]);
                for (wv, xv) in w_row.iter().zip(x_row) {
                    acc += wv * xv;
                }
                *o = acc;
            }
        }
    }
}

/// dx[r, k] = sum_j dy[r, j] * w[j, k]
pub fn linear_grad_input(dy: &[f64], w: &[f64], dx: &mut [f64], in_dim: usize, out_dim: usize) {
    #[cfg(feature = "parallel")]
    {
        let rows = if out_dim == 0 { 0 } else { dy.len() / out_dim.max(1) };
        if rows * in_dim * out_dim >= PAR_MIN_WORK {
            return linear_grad_input_par(dy, w, dx, in_dim, out_dim);
        }
    }
    linear_grad_input_seq(dy, w, dx, in_dim, out_dim)
}

pub fn linear_grad_input_seq(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    for (r, dx_row) in dx.chunks_mut(in_dim).enumerate() {
        grad_input_row(&dy[r * out_dim..(r + 1) * out_dim], w, dx_row, in_dim);
    }
}

#[cfg(feature = "parallel")]
pub fn linear_grad_input_par(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    dx.par_chunks_mut(in_dim).enumerate().for_each(|(r, dx_row)| {
        grad_input_row(&dy[r * out_dim..(r + 1) * out_dim], w, dx_row, in_dim);
    });
}

#[inline]
fn grad_input_row(dy_row: &[f64], w: &[f64], dx_row: &mut [f64], in_dim: usize) {
    dx_row.fill(0.0);
    for (j, &g) in dy_row.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let w_row = &w[j * in_dim..(j + 1) * in_dim];
        for (d, wv) in dx_row.iter_mut().zip(w_row) {
            *d += g * wv;
        }
    }
}

/// dw[j, k] = sum_r dy[r, j] * x[r, k]
pub fn linear_grad_weight(
    dy: &[f64],
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    dw: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    #[cfg(feature = "parallel")]
    {
        let rows = if out_dim == 0 { 0 } else { dy.len() / out_dim.max(1) };
        if rows * in_dim * out_dim >= PAR_MIN_WORK {
            return linear_grad_weight_par(dy, x, pattern, dw, in_dim, out_dim);
        }
    }
    linear_grad_weight_seq(dy, x, pattern, dw, in_dim, out_dim)
}

pub fn linear_grad_weight_seq(
    dy: &[f64],
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    dw: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    let rows = if out_dim == 0 { 0 } else { dy.len() / out_dim };
    for (j, dw_row) in dw.chunks_mut(in_dim).enumerate() {
        grad_weight_row(j, dy, x, pattern, dw_row, in_dim, out_dim, rows);
    }
}

#[cfg(feature = "parallel")]
pub fn linear_grad_weight_par(
    dy: &[f64],
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    dw: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    let rows = if out_dim == 0 { 0 } else { dy.len() / out_dim };
    dw.par_chunks_mut(in_dim).enumerate().for_each(|(j, dw_row)| {
        grad_weight_row(j, dy, x, pattern, dw_row, in_dim, out_dim, rows);
    });
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn grad_weight_row(
    j: usize,
    dy: &[f64],
    x: &[f64],
    pattern: Option<&[Vec<usize>]>,
    dw_row: &mut [f64],
    in_dim: usize,
    out_dim: usize,
    rows: usize,
) {
    dw_row.fill(0.0);
    for r in 0..rows {
        let g = dy[r * out_dim + j];
        if g == 0.0 {
            continue;
        }
        let x_row = &x[r * in_dim..(r + 1) * in_dim];
        match pattern {
            Some(pat) => {
                for &k in &pat[r] {
                    dw_row[k] += g * x_row[k];
                }
            }
            None => {
                for (d, xv) in dw_row.iter_mut().zip(x_row) {
                    *d += g * xv;
                }
            }
        }
    }
}

/// db[j] = sum_r dy[r, j]
pub fn bias_grad(dy: &[f64], db: &mut [f64], out_dim: usize) {
    db.fill(0.0);
    for dy_row in dy.chunks(out_dim) {
        for (d, g) in db.iter_mut().zip(dy_row) {
            *d += g;
        }
    }
}

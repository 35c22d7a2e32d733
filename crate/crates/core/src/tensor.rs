//! Dense row-major `f32` tensors and the deterministic primitives shared by the
//! reference model and the block interpreter.
//!
//! Storage is 32-bit; every reduction accumulates in 64-bit in a fixed
//! (row-major, ascending index) order and rounds once on store, so results are
//! bit-reproducible for fixed inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Values at or below this are treated as the masked sentinel.
pub const MASK_THRESHOLD: f32 = -1.0e38;

/// Serialized form of a masked attention entry (most negative finite `f32`).
pub const MASK_SENTINEL: f32 = f32::MIN;

#[inline]
pub fn is_masked(v: f32) -> bool {
    v <= MASK_THRESHOLD
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting NaN and infinities.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a mask tensor that may hold `-inf` entries. NaN and `+inf` are
    /// still rejected.
    pub fn new_allow_nonfinite(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        if let Some(index) = data
            .iter()
            .position(|v| v.is_nan() || *v == f32::INFINITY)
        {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// The additive causal mask: 0 on and below the diagonal, sentinel above.
    pub fn causal_mask(t: usize) -> Self {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                data[i * t + j] = MASK_SENTINEL;
            }
        }
        Tensor {
            shape: vec![t, t],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected rank 2, got shape {s:?}"))),
        }
    }

    /// Width of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.last_dim().max(1))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_len(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Columns `[start, start + width)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of {c}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Tensor {
            shape: vec![r, width],
            data: out,
        })
    }

    /// Top-left `rows × cols` block of a rank-2 tensor.
    pub fn top_left(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if rows > r || cols > c {
            return Err(Error::Dimension(format!(
                "top-left {rows}x{cols} exceeds {r}x{c}"
            )));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend_from_slice(&self.data[i * c..i * c + cols]);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data: out,
        })
    }

    /// Leading `rows` rows along the first axis.
    pub fn head_rows(&self, rows: usize) -> Result<Tensor> {
        let n = self.shape.first().copied().unwrap_or(0);
        if rows > n {
            return Err(Error::Dimension(format!("{rows} rows requested of {n}")));
        }
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Ok(Tensor {
            shape,
            data: self.data[..rows * per].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Little-endian bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// True when both tensors have the same shape and bit-identical payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Seeded uniform samples in `[-scale, scale]`.
    pub fn random_uniform(shape: Vec<usize>, scale: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..=1.0) * scale).collect();
        Tensor { shape, data }
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {n} values, data has {len}"
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`, each output accumulated in `f64` over ascending `p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv as f64;
            }
        }
        for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Adds a bias row to every row of a rank-2 tensor.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    if bias.len() != c {
        return Err(Error::Dimension(format!(
            "bias of length {} for width {c}",
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += *b;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `scores + additive_mask` with row-max subtraction.
pub fn softmax_rows(scores: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    let (r, c) = scores.dims2()?;
    same_shape(scores, additive_mask, "softmax_rows")?;
    let mut out = vec![0.0f32; r * c];
    let mut buf = vec![0.0f64; c];
    for i in 0..r {
        let srow = &scores.data[i * c..(i + 1) * c];
        let mrow = &additive_mask.data[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (s, m) in srow.iter().zip(mrow) {
            if !is_masked(*m) {
                max = max.max(*s as f64 + *m as f64);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0f64;
        for j in 0..c {
            buf[j] = if is_masked(mrow[j]) {
                0.0
            } else {
                (srow[j] as f64 + mrow[j] as f64 - max).exp()
            };
            sum += buf[j];
        }
        for j in 0..c {
            out[i * c + j] = (buf[j] / sum) as f32;
        }
    }
    Ok(Tensor {
        shape: vec![r, c],
        data: out,
    })
}

fn norm_params(x: &Tensor, gain: &Tensor, bias: Option<&Tensor>) -> Result<usize> {
    let d = x.last_dim();
    if d == 0 {
        return Err(Error::Dimension("normalization over an empty axis".into()));
    }
    if gain.len() != d || bias.is_some_and(|b| b.len() != d) {
        return Err(Error::Dimension(format!(
            "norm parameters do not match width {d}"
        )));
    }
    Ok(d)
}

/// Layer normalization over the last axis (population variance).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = norm_params(x, gain, Some(bias))?;
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * inv * gain.data[j] as f64 + bias.data[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// RMS normalization over the last axis: `x / sqrt(mean(x²) + eps) · gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = norm_params(x, gain, None)?;
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v as f64 * inv * gain.data[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// Rotary embedding over adjacent dimension pairs `(2i, 2i+1)` of each row,
/// using the angle tabulated at `cos/sin[positions[row]][i]`.
pub fn rope_apply(
    x: &Tensor,
    cos_table: &Tensor,
    sin_table: &Tensor,
    positions: &[usize],
) -> Result<Tensor> {
    let (t, dh) = x.dims2()?;
    if dh % 2 != 0 {
        return Err(Error::Dimension(format!("rope on odd head width {dh}")));
    }
    let half = dh / 2;
    let (rows, cols) = cos_table.dims2()?;
    same_shape(cos_table, sin_table, "rope tables")?;
    if cols != half {
        return Err(Error::Dimension(format!(
            "rope tables have {cols} columns, head needs {half}"
        )));
    }
    if positions.len() != t {
        return Err(Error::Dimension(format!(
            "{} positions for {t} rows",
            positions.len()
        )));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= rows {
            return Err(Error::Range(format!(
                "position {pos} outside rope table of {rows} rows"
            )));
        }
        let row = &mut out.data[r * dh..(r + 1) * dh];
        for i in 0..half {
            let c = cos_table.data[pos * half + i] as f64;
            let s = sin_table.data[pos * half + i] as f64;
            let a = row[2 * i] as f64;
            let b = row[2 * i + 1] as f64;
            row[2 * i] = (a * c - b * s) as f32;
            row[2 * i + 1] = (a * s + b * c) as f32;
        }
    }
    Ok(out)
}

/// `(cos, sin)` tables of shape `[positions × d_head/2]` with frequencies
/// `theta^(-2i/d_head)`.
pub fn rope_tables(positions: usize, d_head: usize, theta: f32) -> (Tensor, Tensor) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(positions * half);
    let mut sin = Vec::with_capacity(positions * half);
    for p in 0..positions {
        for i in 0..half {
            let freq = (theta as f64).powf(-2.0 * i as f64 / d_head as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    (
        Tensor {
            shape: vec![positions, half],
            data: cos,
        },
        Tensor {
            shape: vec![positions, half],
            data: sin,
        },
    )
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    /// Converged estimate of the largest singular value.
    pub value: f64,
    /// `‖wᵀw v − λ v‖ / λ` at the final iterate (0 for a zero matrix).
    pub rel_residual: f64,
    pub iterations: usize,
}

impl SpectralNorm {
    /// `value · (1 + tol)`, the figure callers should treat as an upper bound.
    pub fn upper(&self, tol: f64) -> f64 {
        self.value * (1.0 + tol)
    }
}

/// Largest singular value of `w` by power iteration on `wᵀw`, started from a
/// seeded random vector. Stops once the relative residual drops below `tol`
/// or after `iters` steps.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64, seed: u64) -> Result<SpectralNorm> {
    let (m, n) = w.dims2()?;
    if m == 0 || n == 0 {
        return Err(Error::Dimension("spectral norm of an empty matrix".into()));
    }
    if iters == 0 {
        return Err(Error::Input("spectral norm needs at least one iteration".into()));
    }
    if w.data.iter().all(|&v| v == 0.0) {
        return Ok(SpectralNorm {
            value: 0.0,
            rel_residual: 0.0,
            iterations: 0,
        });
    }
    let a: Vec<f64> = w.data.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    normalize(&mut v);

    let mut u = vec![0.0f64; m];
    let mut z = vec![0.0f64; n];
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let mut done = 0;
    for step in 1..=iters {
        gram_apply(&a, m, n, &v, &mut u, &mut z);
        lambda = dot(&v, &z);
        if lambda <= 0.0 {
            // Start vector fell in the null space; restart on the heaviest column.
            v = heaviest_column_basis(&a, m, n);
            continue;
        }
        residual = v
            .iter()
            .zip(&z)
            .map(|(vi, zi)| (zi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / lambda;
        done = step;
        if residual <= tol {
            break;
        }
        v.copy_from_slice(&z);
        normalize(&mut v);
    }
    Ok(SpectralNorm {
        value: lambda.max(0.0).sqrt(),
        rel_residual: residual,
        iterations: done,
    })
}

fn gram_apply(a: &[f64], m: usize, n: usize, v: &[f64], u: &mut [f64], z: &mut [f64]) {
    for i in 0..m {
        u[i] = dot(&a[i * n..(i + 1) * n], v);
    }
    z.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        let ui = u[i];
        for (zj, aij) in z.iter_mut().zip(&a[i * n..(i + 1) * n]) {
            *zj += aij * ui;
        }
    }
}

fn heaviest_column_basis(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..n {
        let s: f64 = (0..m).map(|i| a[i * n + j].powi(2)).sum();
        if s > best_norm {
            best_norm = s;
            best = j;
        }
    }
    let mut v = vec![0.0; n];
    v[best] = 1.0;
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn silu(x: f32) -> f32 {
    let x = x as f64;
    (x / (1.0 + (-x).exp())) as f32
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    a.map(|v| v * s)
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    same_shape(a, b, what)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Euclidean norm, accumulated in `f64`.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Euclidean distance between two equal-length slices, in `f64`.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Index of the maximum; the lowest index wins ties. `None` for empty input.
pub fn argmax(x: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

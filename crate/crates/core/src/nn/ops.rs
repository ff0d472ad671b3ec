//! Differentiable primitives over [`Tensor`].

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// `c (m×n) += a (m×k) · b (k×n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents match (m, k, n) and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let ga = ac.requires_grad().then(|| {
                // g (m×n) · bᵀ (n×k)
                let mut ga = vec![0.0; m * k];
                gemm_acc(m, n, k, g, (n as isize, 1), bc.data(), (1, n as isize), &mut ga);
                ga
            });
            let gb = bc.requires_grad().then(|| {
                // aᵀ (k×m) · g (m×n)
                let mut gb = vec![0.0; k * n];
                gemm_acc(k, m, n, ac.data(), (1, k as isize), g, (n as isize, 1), &mut gb);
                gb
            });
            vec![ga, gb]
        }),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", a.shape(), &[0, 0]));
    }
    let (m, n) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_op(
        "transpose",
        out,
        vec![n, m],
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(ga)]
        }),
    ))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        "sub",
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "mul",
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let ga = g.iter().zip(bc.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(ac.data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Adds a row vector (`[n]` or `[1×n]`) to every row of an `m×n` matrix.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if row.numel() != n || row.rank() > 2 || (row.rank() == 2 && row.shape()[0] != 1) {
        return Err(Error::shape("add_row", x.shape(), row.shape()));
    }
    let b = row.data();
    let mut out = x.to_vec();
    for r in out.chunks_exact_mut(n) {
        r.iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
    Ok(Tensor::from_op(
        "add_row",
        out,
        x.shape().to_vec(),
        vec![x.clone(), row.clone()],
        Box::new(move |g, _| {
            let mut gb = vec![0.0; n];
            for r in g.chunks_exact(n).take(m) {
                gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }),
    ))
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        "scale",
        x.data().iter().map(|v| v * s).collect(),
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn add_scalar(x: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(
        "add_scalar",
        x.data().iter().map(|v| v + s).collect(),
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_op(
        "relu",
        x.data().iter().map(|v| v.max(0.0)).collect(),
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|g, y| {
            vec![Some(
                g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect(),
            )]
        }),
    )
}

/// Natural logarithm; every input must be strictly positive.
pub fn ln(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numeric(format!("ln of non-positive value {v}")));
    }
    let xc = x.clone();
    Ok(Tensor::from_op(
        "ln",
        x.data().iter().map(|v| v.ln()).collect(),
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(g.iter().zip(xc.data()).map(|(g, x)| g / x).collect())]),
    ))
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![x.data().iter().sum()],
        Vec::new(),
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel().max(1) as f64;
    scale(&sum(x), 1.0 / n)
}

/// Column means of an `m×n` matrix, as `[1×n]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if m == 0 {
        return Err(Error::Contract("mean_rows of empty matrix".into()));
    }
    let mut out = vec![0.0; n];
    for r in x.data().chunks_exact(n) {
        out.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / m as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_op(
        "mean_rows",
        out,
        vec![1, n],
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = Vec::with_capacity(m * n);
            for _ in 0..m {
                gx.extend(g.iter().map(|v| v * inv));
            }
            vec![Some(gx)]
        }),
    ))
}

/// Adds together scalars (one-element tensors).
pub fn add_scalars(terms: &[Tensor]) -> Result<Tensor> {
    if let Some(t) = terms.iter().find(|t| t.numel() != 1) {
        return Err(Error::shape("add_scalars", t.shape(), &[]));
    }
    let k = terms.len();
    Ok(Tensor::from_op(
        "add_scalars",
        vec![terms.iter().map(|t| t.data()[0]).sum()],
        Vec::new(),
        terms.to_vec(),
        Box::new(move |g, _| vec![Some(vec![g[0]]); k]),
    ))
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Param(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn masked_softmax(x: &Tensor, axis: usize, k: Option<usize>, name: &'static str) -> Result<Tensor> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN input to {name}")));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * len * inner + a * inner + i;
            idx.clear();
            idx.extend(0..len);
            if let Some(k) = k.filter(|k| *k < len) {
                // Stable sort keeps the lowest index first among equal logits.
                idx.sort_by(|&p, &q| src[at(q)].total_cmp(&src[at(p)]));
                idx.truncate(k);
            }
            let max = idx.iter().map(|&a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &a in &idx {
                let e = (src[at(a)] - max).exp();
                out[at(a)] = e;
                total += e;
            }
            for &a in &idx {
                out[at(a)] /= total;
            }
        }
    }
    Ok(Tensor::from_op(
        name,
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, y| {
            // Masked entries have y = 0, so their gradient vanishes.
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * len * inner + a * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    masked_softmax(x, axis, None, "softmax")
}

/// Softmax restricted to the `k` largest entries of each slice along `axis`.
/// All other positions are exactly zero. Ties keep the lowest index.
pub fn top_k_softmax(x: &Tensor, k: usize, axis: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Param("top-k softmax needs k >= 1".into()));
    }
    masked_softmax(x, axis, Some(k), "top_k_softmax")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of `x` to zero mean and unit variance, then applies
/// the per-column `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut xhat = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for (r, row) in x.data().chunks_exact(n).enumerate() {
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *h = (v - mu) * is;
        }
    }
    let gd = gain.data();
    let bd = bias.data();
    let out = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| h * gd[i % n] + bd[i % n])
        .collect();
    let gc = gain.clone();
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, _| {
            let gd = gc.data();
            let mut gx = vec![0.0; m * n];
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for r in 0..m {
                let gr = &g[r * n..(r + 1) * n];
                let hr = &xhat[r * n..(r + 1) * n];
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for c in 0..n {
                    gg[c] += gr[c] * hr[c];
                    gb[c] += gr[c];
                    let d = gr[c] * gd[c];
                    mean_d += d;
                    mean_dh += d * hr[c];
                }
                mean_d /= n as f64;
                mean_dh /= n as f64;
                for c in 0..n {
                    let d = gr[c] * gd[c];
                    gx[r * n + c] = inv_std[r] * (d - mean_d - hr[c] * mean_dh);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Per-feature maximum over the point axis of an `n×d` matrix, giving `[d]`.
/// The gradient goes to the first point attaining each maximum.
pub fn max_pool_points(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(Error::Contract("max pool over zero points".into()));
    }
    let src = x.data();
    let mut arg = vec![0usize; d];
    let mut out = src[..d].to_vec();
    for p in 1..n {
        for c in 0..d {
            let v = src[p * d + c];
            if v > out[c] {
                out[c] = v;
                arg[c] = p;
            }
        }
    }
    Ok(Tensor::from_op(
        "max_pool_points",
        out,
        vec![d],
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n * d];
            for c in 0..d {
                gx[arg[c] * d + c] = g[c];
            }
            vec![Some(gx)]
        }),
    ))
}

/// Concatenates rank-2 tensors with equal row counts side by side.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let (m, _) = first.dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pm != m || p.rank() != 2 {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for r in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_op(
        "concat_cols",
        out,
        vec![m, total],
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(m * w)).collect();
            for r in 0..m {
                let mut off = r * total;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Columns `start..end` of a rank-2 tensor.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if x.rank() != 2 || start > end || end > n {
        return Err(Error::shape("slice_cols", x.shape(), &[start, end]));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(m * w);
    for r in 0..m {
        out.extend_from_slice(&x.data()[r * n + start..r * n + end]);
    }
    Ok(Tensor::from_op(
        "slice_cols",
        out,
        vec![m, w],
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; m * n];
            for r in 0..m {
                gx[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(gx)]
        }),
    ))
}

/// Stacks tensors vertically. Rank-1 inputs count as single rows.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
    let (_, n) = first.dims2()?;
    let mut sizes = Vec::with_capacity(parts.len());
    let mut out = Vec::new();
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pn != n {
            return Err(Error::shape("concat_rows", first.shape(), p.shape()));
        }
        sizes.push(pm * pn);
        out.extend_from_slice(p.data());
    }
    let rows = out.len() / n.max(1);
    Ok(Tensor::from_op(
        "concat_rows",
        out,
        vec![rows, n],
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[off..off + s].to_vec();
                    off += s;
                    Some(part)
                })
                .collect()
        }),
    ))
}

/// Rows `start..end` of a rank-2 tensor.
pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if x.rank() != 2 || start > end || end > m {
        return Err(Error::shape("slice_rows", x.shape(), &[start, end]));
    }
    let total = m * n;
    Ok(Tensor::from_op(
        "slice_rows",
        x.data()[start * n..end * n].to_vec(),
        vec![end - start, n],
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; total];
            gx[start * n..end * n].copy_from_slice(g);
            vec![Some(gx)]
        }),
    ))
}

/// `x · w + b` with `w` stored as `in × out`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, weight)?;
    match bias {
        Some(b) => add_row(&y, b),
        None => Ok(y),
    }
}

use super::{grad_enabled, Node, Result, Tensor, TensorError};
use std::sync::atomic::AtomicBool;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Primitive operation tag together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Elementwise sum. The second operand may be a scalar or a trailing-suffix
    /// of the first operand's shape, in which case it is repeated.
    Add,
    /// Elementwise product, same broadcasting as [`Primitive::Add`].
    Mul,
    /// Elementwise quotient, same broadcasting as [`Primitive::Add`].
    Div,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    /// Half-open range `start..end` along `axis`.
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Softmax over the last dimension.
    Softmax,
    /// Log-softmax over the last dimension.
    LogSoftmax,
    Sigmoid,
    /// Layer norm over the last dimension; inputs are `(x, gain, bias)`.
    LayerNorm {
        eps: f64,
    },
    /// Tanh approximation of GELU.
    Gelu,
    /// Mean of all elements, returned as a 0-d tensor.
    Mean,
    /// Sum of all elements, returned as a 0-d tensor.
    Sum,
    Scale(f64),
    AddScalar(f64),
    /// Select rows of a 2-D tensor (embedding lookup).
    GatherRows(Vec<usize>),
    /// `out[i] = x[i, cols[i]]` over a 2-D input.
    Pick(Vec<usize>),
    /// Bilinear resize of `[h, w]` or channels-last `[h, w, c]` input,
    /// half-pixel (align-corners-false) sampling.
    UpsampleBilinear {
        height: usize,
        width: usize,
    },
    /// Elementwise stable binary cross-entropy against a constant target.
    BceWithLogits(Vec<f64>),
    /// Scaled dot-product attention over `(q, k, v)`, each `[T, d]`, with
    /// head `h` in columns `h·d/n_heads..(h+1)·d/n_heads`. With `causal`,
    /// row `i` attends to rows `0..=i` only and later rows get probability
    /// exactly 0.
    Attention {
        n_heads: usize,
        causal: bool,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Pick(_) => "pick",
            Primitive::UpsampleBilinear { .. } => "upsample_bilinear",
            Primitive::BceWithLogits(_) => "bce_with_logits",
            Primitive::Attention { .. } => "attention",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add | Primitive::Mul | Primitive::Div | Primitive::MatMul => Some(2),
            Primitive::LayerNorm { .. } | Primitive::Attention { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn mismatch(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

/// Evaluates `kind` on `inputs`, recording a graph node when any input
/// requires gradients and recording is enabled.
pub fn apply_primitive(kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind.arity() {
        Some(n) if n != inputs.len() => {
            return Err(mismatch(format!("{} takes {n} inputs, got {}", kind.name(), inputs.len())))
        }
        None if inputs.is_empty() => return Err(mismatch("concat of zero tensors")),
        _ => {}
    }
    let (shape, data) = forward(&kind, inputs)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NumericOverflow(kind.name()));
    }
    let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let node = track.then(|| Node {
        op: kind,
        inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        consumed: AtomicBool::new(false),
    });
    Ok(Tensor::from_parts(shape, data, track, node))
}

/// Repetition count for broadcasting `b` against `a`.
fn broadcast_reps(a: &[usize], b: &[usize], an: usize, bn: usize) -> Result<usize> {
    if a == b || bn == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Ok(an / bn)
    } else {
        Err(mismatch(format!("cannot broadcast {b:?} onto {a:?}")))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(format!("{what} expects a 2-D tensor, got {s:?}"))),
    }
}

/// `c = a * b` with explicit row/column strides on `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    gemm_strided(m, k, n, a, sa, b, sb, c, (n as isize, 1));
}

/// Largest offset touched by an `r x c` view with strides `(rs, cs)`, plus one.
fn view_extent(r: usize, c: usize, (rs, cs): (isize, isize)) -> usize {
    (r - 1) * rs as usize + (c - 1) * cs as usize + 1
}

/// `c = a * b` with explicit row/column strides on every operand.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    assert!(
        a.len() >= view_extent(m, k, (rsa, csa))
            && b.len() >= view_extent(k, n, (rsb, csb))
            && c.len() >= view_extent(m, n, (rsc, csc)),
        "gemm view out of bounds"
    );
    // SAFETY: the assertion above keeps every strided view in bounds.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), rsc, csc);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

/// `exp(x)` for `x <= 0`; arguments below the smallest subnormal exponent are exactly 0.
fn shifted_exp(x: f64) -> f64 {
    if x < -746.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Attention probabilities of head `h` into the dense `t x t` buffer `p`.
#[allow(clippy::too_many_arguments)]
fn attention_probs(q: &[f64], k: &[f64], t: usize, d: usize, h: usize, dh: usize, causal: bool, p: &mut [f64]) {
    let off = h * dh;
    let di = d as isize;
    gemm_strided(t, dh, t, &q[off..], (di, 1), &k[off..], (1, di), p, (t as isize, 1));
    let inv = (dh as f64).sqrt().recip();
    for (i, row) in p.chunks_mut(t).enumerate() {
        let lim = if causal { i + 1 } else { t };
        let (live, masked) = row.split_at_mut(lim);
        let mut max = f64::NEG_INFINITY;
        for v in live.iter_mut() {
            *v *= inv;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in live.iter_mut() {
            *v = shifted_exp(*v - max);
            sum += *v;
        }
        for v in live.iter_mut() {
            *v /= sum;
        }
        masked.fill(0.0);
    }
}

fn attention_dims(kind: &Primitive, inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let Primitive::Attention { n_heads, .. } = kind else { unreachable!("attention dims of {}", kind.name()) };
    let (t, d) = as_matrix(inputs[0], "attention")?;
    if inputs[1].shape() != [t, d] || inputs[2].shape() != [t, d] {
        return Err(mismatch(format!(
            "attention q {:?}, k {:?}, v {:?}",
            inputs[0].shape(),
            inputs[1].shape(),
            inputs[2].shape()
        )));
    }
    if *n_heads == 0 || d % n_heads != 0 {
        return Err(mismatch(format!("{d} features do not split into {n_heads} heads")));
    }
    Ok((t, d, d / n_heads))
}

/// `tanh` through a single `exp`; saturates cleanly to ±1.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Per-axis sampling table: `(lo, hi, weight_hi)` for every output index.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    // src = (dst + 0.5) * in / out - 0.5, clamped at 0; upper neighbour clamped at in - 1.
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(mismatch(format!("upsample expects [h, w] or [h, w, c], got {s:?}"))),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let x = inputs[0];
    let xd = x.data();
    Ok(match kind {
        Primitive::Add | Primitive::Mul | Primitive::Div => {
            let b = inputs[1];
            let bn = b.numel();
            broadcast_reps(x.shape(), b.shape(), x.numel(), bn)?;
            let bd = b.data();
            let f: fn(f64, f64) -> f64 = match kind {
                Primitive::Add => |a, v| a + v,
                Primitive::Mul => |a, v| a * v,
                _ => |a, v| a / v,
            };
            let mut data = Vec::with_capacity(xd.len());
            for chunk in xd.chunks(bn) {
                data.extend(chunk.iter().zip(bd).map(|(&a, &v)| f(a, v)));
            }
            (x.shape().to_vec(), data)
        }
        Primitive::MatMul => {
            let (m, k) = as_matrix(x, "matmul")?;
            let (k2, n) = as_matrix(inputs[1], "matmul")?;
            if k != k2 {
                return Err(mismatch(format!("matmul inner dims {k} vs {k2}")));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, xd, (k as isize, 1), inputs[1].data(), (n as isize, 1), &mut out);
            (vec![m, n], out)
        }
        Primitive::Transpose => {
            let (r, c) = as_matrix(x, "transpose")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xd[i * c + j];
                }
            }
            (vec![c, r], out)
        }
        Primitive::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != x.numel() || shape.contains(&0) {
                return Err(mismatch(format!("reshape {:?} -> {shape:?}", x.shape())));
            }
            (shape.clone(), xd.to_vec())
        }
        Primitive::Concat { axis } => {
            let axis = *axis;
            let first = x.shape();
            if axis >= first.len() {
                return Err(mismatch(format!("concat axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(mismatch(format!("concat {s:?} with {first:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            (shape, out)
        }
        Primitive::Slice { axis, start, end } => {
            let (axis, start, end) = (*axis, *start, *end);
            let s = x.shape();
            if axis >= s.len() || start >= end || end > s[axis] {
                return Err(mismatch(format!("slice {start}..{end} on axis {axis} of {s:?}")));
            }
            let (outer, len, inner) = axis_split(s, axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&xd[base + start * inner..base + end * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = end - start;
            (shape, out)
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let d = last_dim(x.shape());
            let mut out = vec![0.0; xd.len()];
            for (row, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, v) in dst.iter_mut().zip(row) {
                    *o = shifted_exp(v - max);
                    sum += *o;
                }
                if matches!(kind, Primitive::Softmax) {
                    for o in dst.iter_mut() {
                        *o /= sum;
                    }
                } else {
                    let lse = max + sum.ln();
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o = v - lse;
                    }
                }
            }
            (x.shape().to_vec(), out)
        }
        Primitive::Sigmoid => (x.shape().to_vec(), xd.iter().map(|&v| sigmoid(v)).collect()),
        Primitive::Gelu => (x.shape().to_vec(), xd.iter().map(|&v| gelu(v)).collect()),
        Primitive::LayerNorm { eps } => {
            let d = last_dim(x.shape());
            let (gain, bias) = (inputs[1], inputs[2]);
            if gain.numel() != d || bias.numel() != d {
                return Err(mismatch(format!(
                    "layer_norm over {d} features with gain {:?} and bias {:?}",
                    gain.shape(),
                    bias.shape()
                )));
            }
            let mut out = vec![0.0; xd.len()];
            for (row, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    dst[j] = (row[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
                }
            }
            (x.shape().to_vec(), out)
        }
        Primitive::Mean => (Vec::new(), vec![xd.iter().sum::<f64>() / xd.len() as f64]),
        Primitive::Sum => (Vec::new(), vec![xd.iter().sum::<f64>()]),
        Primitive::Scale(c) => (x.shape().to_vec(), xd.iter().map(|v| v * c).collect()),
        Primitive::AddScalar(c) => (x.shape().to_vec(), xd.iter().map(|v| v + c).collect()),
        Primitive::GatherRows(rows) => {
            let (n, d) = as_matrix(x, "gather_rows")?;
            if rows.is_empty() {
                return Err(mismatch("gather_rows with no rows"));
            }
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= n {
                    return Err(mismatch(format!("row {r} out of range for {n} rows")));
                }
                out.extend_from_slice(&xd[r * d..(r + 1) * d]);
            }
            (vec![rows.len(), d], out)
        }
        Primitive::Pick(cols) => {
            let (n, d) = as_matrix(x, "pick")?;
            if cols.len() != n {
                return Err(mismatch(format!("pick needs {n} column indices, got {}", cols.len())));
            }
            let mut out = Vec::with_capacity(n);
            for (i, &c) in cols.iter().enumerate() {
                if c >= d {
                    return Err(mismatch(format!("column {c} out of range for width {d}")));
                }
                out.push(xd[i * d + c]);
            }
            (vec![n], out)
        }
        Primitive::Attention { n_heads, causal } => {
            let (t, d, dh) = attention_dims(kind, inputs)?;
            let (k, v) = (inputs[1].data(), inputs[2].data());
            let mut p = vec![0.0; t * t];
            let mut out = vec![0.0; t * d];
            for h in 0..*n_heads {
                let off = h * dh;
                attention_probs(xd, k, t, d, h, dh, *causal, &mut p);
                let di = d as isize;
                gemm_strided(t, t, dh, &p, (t as isize, 1), &v[off..], (di, 1), &mut out[off..], (di, 1));
            }
            (vec![t, d], out)
        }
        Primitive::UpsampleBilinear { height, width } => {
            let (h, w, c) = spatial_dims(x.shape())?;
            if *height == 0 || *width == 0 {
                return Err(mismatch("upsample to an empty grid"));
            }
            let ys = bilinear_axis(h, *height);
            let xs = bilinear_axis(w, *width);
            let mut out = vec![0.0; height * width * c];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let dst = &mut out[(oy * width + ox) * c..(oy * width + ox + 1) * c];
                    let taps = [
                        ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                        ((y0 * w + x1) * c, (1.0 - ly) * lx),
                        ((y1 * w + x0) * c, ly * (1.0 - lx)),
                        ((y1 * w + x1) * c, ly * lx),
                    ];
                    for (base, wt) in taps {
                        for (ch, o) in dst.iter_mut().enumerate() {
                            *o += wt * xd[base + ch];
                        }
                    }
                }
            }
            let shape = if x.shape().len() == 2 { vec![*height, *width] } else { vec![*height, *width, c] };
            (shape, out)
        }
        Primitive::BceWithLogits(target) => {
            if target.len() != xd.len() {
                return Err(mismatch(format!("bce target has {} values for {} logits", target.len(), xd.len())));
            }
            // max(z, 0) - z t + ln(1 + exp(-|z|))
            let out = xd.iter().zip(target).map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()).collect();
            (x.shape().to_vec(), out)
        }
    })
}

/// Vector-Jacobian products for every input flagged in `needs`.
pub(super) fn vjp(
    kind: &Primitive,
    inputs: &[Tensor],
    out: &Tensor,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let x = &inputs[0];
    let xd = x.data();
    let y = out.data();
    let one = |v: Vec<f64>| vec![Some(v)];
    match kind {
        Primitive::Add | Primitive::Mul | Primitive::Div => {
            let b = &inputs[1];
            let bd = b.data();
            let bn = bd.len();
            let ga = needs[0].then(|| match kind {
                Primitive::Add => g.to_vec(),
                Primitive::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[i % bn]).collect(),
                _ => g.iter().enumerate().map(|(i, gi)| gi / bd[i % bn]).collect(),
            });
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; bn];
                for (i, gi) in g.iter().enumerate() {
                    let j = i % bn;
                    acc[j] += match kind {
                        Primitive::Add => *gi,
                        Primitive::Mul => gi * xd[i],
                        _ => -gi * xd[i] / (bd[j] * bd[j]),
                    };
                }
                acc
            });
            vec![ga, gb]
        }
        Primitive::MatMul => {
            let b = &inputs[1];
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = b.shape()[1];
            // dA = dC B^T, dB = A^T dC
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n as isize, 1), b.data(), (1, n as isize), &mut ga);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, xd, (1, k as isize), g, (n as isize, 1), &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Primitive::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            one(gx)
        }
        Primitive::Reshape(_) => one(g.to_vec()),
        Primitive::Concat { axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for (t, buf) in inputs.iter().zip(grads.iter_mut()) {
                    let chunk = t.shape()[*axis] * inner;
                    buf.extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            grads.into_iter().zip(needs).map(|(gr, &n)| n.then_some(gr)).collect()
        }
        Primitive::Slice { axis, start, end } => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![0.0; xd.len()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            one(gx)
        }
        Primitive::Softmax => {
            let d = last_dim(x.shape());
            let mut gx = vec![0.0; xd.len()];
            for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            one(gx)
        }
        Primitive::LogSoftmax => {
            let d = last_dim(x.shape());
            let mut gx = vec![0.0; xd.len()];
            for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    dst[j] = gr[j] - yr[j].exp() * total;
                }
            }
            one(gx)
        }
        Primitive::Sigmoid => one(g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect()),
        Primitive::Gelu => one(g.iter().zip(xd).map(|(gi, &v)| gi * gelu_grad(v)).collect()),
        Primitive::LayerNorm { eps } => {
            let d = last_dim(x.shape());
            let gain = inputs[1].data();
            let mut gx = vec![0.0; xd.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut gxhat = vec![0.0; d];
            for ((row, gr), dst) in xd.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * rstd;
                    gxhat[j] = gr[j] * gain[j];
                    ggain[j] += gr[j] * xhat[j];
                    gbias[j] += gr[j];
                }
                let m1 = gxhat.iter().sum::<f64>() / d as f64;
                let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dst[j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![needs[0].then_some(gx), needs[1].then_some(ggain), needs[2].then_some(gbias)]
        }
        Primitive::Mean => one(vec![g[0] / xd.len() as f64; xd.len()]),
        Primitive::Sum => one(vec![g[0]; xd.len()]),
        Primitive::Scale(c) => one(g.iter().map(|v| v * c).collect()),
        Primitive::AddScalar(_) => one(g.to_vec()),
        Primitive::GatherRows(rows) => {
            let d = x.shape()[1];
            let mut gx = vec![0.0; xd.len()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    gx[r * d + j] += g[i * d + j];
                }
            }
            one(gx)
        }
        Primitive::Pick(cols) => {
            let d = x.shape()[1];
            let mut gx = vec![0.0; xd.len()];
            for (i, &c) in cols.iter().enumerate() {
                gx[i * d + c] += g[i];
            }
            one(gx)
        }
        Primitive::UpsampleBilinear { height, width } => {
            let (h, w, c) = spatial_dims(x.shape()).expect("validated in forward");
            let ys = bilinear_axis(h, *height);
            let xs = bilinear_axis(w, *width);
            let mut gx = vec![0.0; xd.len()];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let src = &g[(oy * width + ox) * c..(oy * width + ox + 1) * c];
                    let taps = [
                        ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                        ((y0 * w + x1) * c, (1.0 - ly) * lx),
                        ((y1 * w + x0) * c, ly * (1.0 - lx)),
                        ((y1 * w + x1) * c, ly * lx),
                    ];
                    for (base, wt) in taps {
                        for (ch, v) in src.iter().enumerate() {
                            gx[base + ch] += wt * v;
                        }
                    }
                }
            }
            one(gx)
        }
        Primitive::BceWithLogits(target) => {
            one(g.iter().zip(xd).zip(target).map(|((gi, &z), &t)| gi * (sigmoid(z) - t)).collect())
        }
        Primitive::Attention { n_heads, causal } => {
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let (t, d, dh) = attention_dims(kind, &refs).expect("validated in forward");
            let (k, v) = (inputs[1].data(), inputs[2].data());
            let (di, ti) = (d as isize, t as isize);
            let (mut gq, mut gk, mut gv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
            let mut p = vec![0.0; t * t];
            let mut ds = vec![0.0; t * t];
            let inv = (dh as f64).sqrt().recip();
            for h in 0..*n_heads {
                let off = h * dh;
                attention_probs(xd, k, t, d, h, dh, *causal, &mut p);
                // dP = G·Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) with the score scale folded in.
                gemm_strided(t, dh, t, &g[off..], (di, 1), &v[off..], (1, di), &mut ds, (ti, 1));
                for (pr, dr) in p.chunks(t).zip(ds.chunks_mut(t)) {
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * inv;
                    }
                }
                gemm_strided(t, t, dh, &ds, (ti, 1), &k[off..], (di, 1), &mut gq[off..], (di, 1));
                gemm_strided(t, t, dh, &ds, (1, ti), &xd[off..], (di, 1), &mut gk[off..], (di, 1));
                gemm_strided(t, t, dh, &p, (1, ti), &g[off..], (di, 1), &mut gv[off..], (di, 1));
            }
            vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = t(&[1, 2], &[0.0, 0.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().data(), &[0.5]);
    }

    #[test]
    fn overflow_is_an_error() {
        let x = t(&[1], &[1e300]);
        assert_eq!(x.mul(&x).unwrap_err(), TensorError::NumericOverflow("mul"));
    }

    #[test]
    fn bias_broadcast_over_rows() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(x.add(&b).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert!(b.add(&x).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[9.0, 8.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 2, 3).unwrap().data(), b.data());
    }

    #[test]
    fn upsample_constant_is_constant() {
        let x = t(&[2, 2], &[3.0; 4]);
        let y = x.upsample_bilinear(8, 8).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn upsample_half_pixel_convention() {
        // 2 -> 4 samples at src = -0.25 (clamped to 0), 0.25, 0.75, 1.25 (upper tap clamped).
        let x = t(&[1, 2], &[0.0, 1.0]);
        let y = x.upsample_bilinear(1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_channels_last_matches_per_channel() {
        let data: Vec<f64> = (0..2 * 3 * 2).map(|v| v as f64 * 0.37).collect();
        let x = t(&[2, 3, 2], &data);
        let y = x.upsample_bilinear(5, 7).unwrap();
        for ch in 0..2 {
            let plane: Vec<f64> = data.iter().skip(ch).step_by(2).copied().collect();
            let yp = t(&[2, 3], &plane).upsample_bilinear(5, 7).unwrap();
            let got: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            assert_eq!(got, yp.data());
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let z = t(&[2], &[800.0, -800.0]);
        let l = z.bce_with_logits(&[1.0, 0.0]).unwrap();
        assert_eq!(l.data(), &[0.0, 0.0]);
    }

    /// Per-head slices, explicit transpose, additive `-1e9` mask and softmax.
    fn composite_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, causal: bool) -> Tensor {
        let (t, d) = (q.shape()[0], q.shape()[1]);
        let dh = d / n_heads;
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask[i * t + j] = if causal { -1e9 } else { 0.0 };
            }
        }
        let mask = Tensor::new(&[t, t], mask).unwrap();
        let heads: Vec<Tensor> = (0..n_heads)
            .map(|h| {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let kt = k.slice(1, lo, hi).unwrap().transpose().unwrap();
                let scores = q.slice(1, lo, hi).unwrap().matmul(&kt).unwrap().scale(1.0 / (dh as f64).sqrt()).unwrap();
                scores.add(&mask).unwrap().softmax().unwrap().matmul(&v.slice(1, lo, hi).unwrap()).unwrap()
            })
            .collect();
        Tensor::concat(&heads.iter().collect::<Vec<_>>(), 1).unwrap()
    }

    fn qkv(t: usize, d: usize, seed: u64) -> [Tensor; 3] {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| {
            Tensor::param(&[t, d], (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
        })
    }

    #[test]
    fn fused_attention_matches_composite_values_and_gradients() {
        for causal in [true, false] {
            for (t, d, heads) in [(1, 4, 2), (7, 8, 2), (13, 12, 3)] {
                let [q, k, v] = qkv(t, d, (t * d) as u64);
                let w = Tensor::new(&[t, d], (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
                let fused = Tensor::attention(&q, &k, &v, heads, causal).unwrap();
                fused.mul(&w).unwrap().sum().unwrap().backward().unwrap();
                let fused_grads: Vec<Vec<f64>> = [&q, &k, &v].iter().map(|p| p.grad().unwrap()).collect();
                for p in [&q, &k, &v] {
                    p.zero_grad();
                }
                let oracle = composite_attention(&q, &k, &v, heads, causal);
                oracle.mul(&w).unwrap().sum().unwrap().backward().unwrap();
                for (a, b) in fused.data().iter().zip(oracle.data()) {
                    assert!((a - b).abs() < 1e-12, "value {a} vs {b}");
                }
                for (p, fg) in [&q, &k, &v].iter().zip(&fused_grads) {
                    for (a, b) in fg.iter().zip(p.grad().unwrap()) {
                        assert!((a - b).abs() < 1e-12, "grad {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn causal_attention_ignores_later_rows() {
        let [q, k, v] = qkv(6, 4, 1);
        let base = Tensor::attention(&q, &k, &v, 2, true).unwrap();
        let mut kd = k.data().to_vec();
        let mut vd = v.data().to_vec();
        kd[5 * 4] += 1.0;
        vd[5 * 4 + 1] -= 1.0;
        let k2 = Tensor::new(&[6, 4], kd).unwrap();
        let v2 = Tensor::new(&[6, 4], vd).unwrap();
        let moved = Tensor::attention(&q, &k2, &v2, 2, true).unwrap();
        assert_eq!(&base.data()[..5 * 4], &moved.data()[..5 * 4]);
        assert_ne!(&base.data()[5 * 4..], &moved.data()[5 * 4..]);
    }

    #[test]
    fn attention_rejects_bad_head_split() {
        let [q, k, v] = qkv(3, 6, 2);
        assert!(matches!(Tensor::attention(&q, &k, &v, 4, false), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(Tensor::attention(&q, &k, &v, 0, false), Err(TensorError::ShapeMismatch(_))));
        let short = Tensor::new(&[2, 6], vec![0.0; 12]).unwrap();
        assert!(matches!(Tensor::attention(&q, &short, &v, 2, false), Err(TensorError::ShapeMismatch(_))));
    }
}

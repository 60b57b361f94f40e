//! Forward and backward math for each primitive, on plain tensors.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{invalid, mismatch, strides, Tensor, TensorError};

pub(crate) type Res<T> = Result<T, TensorError>;

// ── elementwise ─────────────────────────────────────────────────────

/// `b` must equal `a`'s shape or be a suffix of it (broadcast over leading axes).
pub(crate) fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Res<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.rank() < a.rank() && a.shape().ends_with(b.shape()) {
        let n = b.len();
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(mismatch("add", a.shape(), b.shape()))
}

/// Reduces an upstream gradient of `a`'s shape down to the (suffix) shape of `b`.
pub(crate) fn reduce_to_suffix<S: Scalar>(g: &Tensor<S>, b_shape: &[usize]) -> Tensor<S> {
    if g.shape() == b_shape {
        return g.clone();
    }
    let n: usize = b_shape.iter().product();
    let mut out = vec![S::zero(); n];
    for row in g.data().chunks_exact(n) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = *o + x;
        }
    }
    Tensor::new(b_shape.to_vec(), out).expect("suffix shape")
}

pub(crate) fn zip_same<S: Scalar>(
    name: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Res<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(mismatch(name, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ── matmul ──────────────────────────────────────────────────────────

pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Res<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch("matmul", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    let batch: usize = lead_a.iter().product();
    if b.len() == 2 {
        Ok(MatMulDims { batch, m, k, n, shared_rhs: true })
    } else if &b[..b.len() - 2] == lead_a {
        Ok(MatMulDims { batch, m, k, n, shared_rhs: false })
    } else {
        Err(mismatch("matmul", a, b))
    }
}

pub(crate) fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Res<Tensor<S>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = d.n;
    let mut out = vec![S::zero(); d.batch * d.m * d.n];
    if d.shared_rhs {
        gemm(d.batch * d.m, d.k, d.n, MatRef::new(a.data()), MatRef::new(b.data()), S::zero(), &mut out);
    } else {
        for i in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                MatRef::new(&a.data()[i * d.m * d.k..(i + 1) * d.m * d.k]),
                MatRef::new(&b.data()[i * d.k * d.n..(i + 1) * d.k * d.n]),
                S::zero(),
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            );
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![S::zero(); a.len()];
    let mut gb = vec![S::zero(); b.len()];
    if d.shared_rhs {
        let rows = d.batch * d.m;
        gemm(rows, d.n, d.k, MatRef::new(g.data()), MatRef::t(b.data()), S::zero(), &mut ga);
        gemm(d.k, rows, d.n, MatRef::t(a.data()), MatRef::new(g.data()), S::zero(), &mut gb);
    } else {
        let (sa, sb, sg) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let gi = &g.data()[i * sg..(i + 1) * sg];
            gemm(
                d.m,
                d.n,
                d.k,
                MatRef::new(gi),
                MatRef::t(&b.data()[i * sb..(i + 1) * sb]),
                S::zero(),
                &mut ga[i * sa..(i + 1) * sa],
            );
            gemm(
                d.k,
                d.m,
                d.n,
                MatRef::t(&a.data()[i * sa..(i + 1) * sa]),
                MatRef::new(gi),
                S::zero(),
                &mut gb[i * sb..(i + 1) * sb],
            );
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

// ── softmax / normalization ─────────────────────────────────────────

pub(crate) fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Res<Tensor<S>> {
    let d = *x.shape().last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    let d = *y.shape().last().expect("rank >= 1");
    let mut out = vec![S::zero(); y.len()];
    for ((o, yr), gr) in out
        .chunks_exact_mut(d)
        .zip(y.data().chunks_exact(d))
        .zip(g.data().chunks_exact(d))
    {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape")
}

/// Per-group normalization state kept for the backward pass.
pub(crate) struct NormSaved<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Res<(Tensor<S>, NormSaved<S>)> {
    let d = *x.shape().last().ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = S::lit(eps);
    let inv_d = S::one() / S::from_usize_lossy(d);
    let rows = x.len() / d;
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); rows];
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        inv_std[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormSaved { xhat, inv_std }))
}

pub(crate) fn layer_norm_backward<S: Scalar>(
    saved: &NormSaved<S>,
    gamma: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = gamma.len();
    let rows = g.len() / d;
    let inv_d = S::one() / S::from_usize_lossy(d);
    let mut gx = vec![S::zero(); g.len()];
    let mut gg = vec![S::zero(); d];
    let mut gb = vec![S::zero(); d];
    for r in 0..rows {
        let gr = &g.data()[r * d..(r + 1) * d];
        let hr = &saved.xhat[r * d..(r + 1) * d];
        let mut mean_gh = S::zero();
        let mut mean_ghh = S::zero();
        for j in 0..d {
            let gh = gr[j] * gamma.data()[j];
            mean_gh = mean_gh + gh;
            mean_ghh = mean_ghh + gh * hr[j];
            gg[j] = gg[j] + gr[j] * hr[j];
            gb[j] = gb[j] + gr[j];
        }
        mean_gh = mean_gh * inv_d;
        mean_ghh = mean_ghh * inv_d;
        let rs = saved.inv_std[r];
        for j in 0..d {
            let gh = gr[j] * gamma.data()[j];
            gx[r * d + j] = rs * (gh - mean_gh - hr[j] * mean_ghh);
        }
    }
    (
        Tensor::new(g.shape().to_vec(), gx).expect("shape"),
        Tensor::new(vec![d], gg).expect("shape"),
        Tensor::new(vec![d], gb).expect("shape"),
    )
}

pub(crate) struct BatchNormSaved<S> {
    pub norm: NormSaved<S>,
    pub batch_mean: Vec<S>,
    /// Unbiased batch variance, for running-statistics updates.
    pub batch_var: Vec<S>,
}

fn bn_geometry(x: &[usize]) -> Res<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(invalid("batch_norm", format!("input rank {} < 2", x.len())));
    }
    let inner: usize = x[2..].iter().product();
    Ok((x[0], x[1], inner))
}

pub(crate) fn batch_norm_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Res<(Tensor<S>, BatchNormSaved<S>)> {
    let (batch, c, inner) = bn_geometry(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("batch_norm", x.shape(), gamma.shape()));
    }
    let count = batch * inner;
    let inv_n = S::one() / S::from_usize_lossy(count);
    let eps = S::lit(eps);
    let xd = x.data();
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); c];
    let mut batch_mean = vec![S::zero(); c];
    let mut batch_var = vec![S::zero(); c];
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * inner + i;
        let mut mean = S::zero();
        for b in 0..batch {
            for i in 0..inner {
                mean = mean + xd[idx(b, i)];
            }
        }
        mean = mean * inv_n;
        let mut ss = S::zero();
        for b in 0..batch {
            for i in 0..inner {
                let v = xd[idx(b, i)] - mean;
                ss = ss + v * v;
            }
        }
        let var = ss * inv_n;
        let rs = S::one() / (var + eps).sqrt();
        inv_std[ch] = rs;
        batch_mean[ch] = mean;
        batch_var[ch] = if count > 1 {
            ss / S::from_usize_lossy(count - 1)
        } else {
            S::zero()
        };
        for b in 0..batch {
            for i in 0..inner {
                let j = idx(b, i);
                let h = (xd[j] - mean) * rs;
                xhat[j] = h;
                out[j] = h * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormSaved {
            norm: NormSaved { xhat, inv_std },
            batch_mean,
            batch_var,
        },
    ))
}

pub(crate) fn batch_norm_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: f64,
) -> Res<(Tensor<S>, NormSaved<S>)> {
    let (batch, c, inner) = bn_geometry(x.shape())?;
    for t in [gamma, beta, mean, var] {
        if t.shape() != [c] {
            return Err(mismatch("batch_norm", x.shape(), t.shape()));
        }
    }
    let eps = S::lit(eps);
    let inv_std: Vec<S> = var.data().iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..inner {
                let j = (b * c + ch) * inner + i;
                let h = (x.data()[j] - mean.data()[ch]) * inv_std[ch];
                xhat[j] = h;
                out[j] = h * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormSaved { xhat, inv_std }))
}

/// Gradients of batch norm w.r.t. (x, gamma, beta). `training` selects the
/// batch-statistics gradient; otherwise statistics are constants.
pub(crate) fn batch_norm_backward<S: Scalar>(
    saved: &NormSaved<S>,
    gamma: &Tensor<S>,
    g: &Tensor<S>,
    training: bool,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (batch, c, inner) = bn_geometry(g.shape()).expect("validated");
    let count = batch * inner;
    let inv_n = S::one() / S::from_usize_lossy(count);
    let gd = g.data();
    let mut gx = vec![S::zero(); g.len()];
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    for ch in 0..c {
        let gamma_c = gamma.data()[ch];
        let rs = saved.inv_std[ch];
        let mut sum_gh = S::zero();
        let mut sum_ghh = S::zero();
        for b in 0..batch {
            for i in 0..inner {
                let j = (b * c + ch) * inner + i;
                let h = saved.xhat[j];
                gg[ch] = gg[ch] + gd[j] * h;
                gb[ch] = gb[ch] + gd[j];
                let gh = gd[j] * gamma_c;
                sum_gh = sum_gh + gh;
                sum_ghh = sum_ghh + gh * h;
            }
        }
        let mean_gh = sum_gh * inv_n;
        let mean_ghh = sum_ghh * inv_n;
        for b in 0..batch {
            for i in 0..inner {
                let j = (b * c + ch) * inner + i;
                let gh = gd[j] * gamma_c;
                gx[j] = if training {
                    rs * (gh - mean_gh - saved.xhat[j] * mean_ghh)
                } else {
                    rs * gh
                };
            }
        }
    }
    (
        Tensor::new(g.shape().to_vec(), gx).expect("shape"),
        Tensor::new(vec![c], gg).expect("shape"),
        Tensor::new(vec![c], gb).expect("shape"),
    )
}

// ── structural ──────────────────────────────────────────────────────

pub(crate) fn concat<S: Scalar>(inputs: &[&Tensor<S>], axis: usize) -> Res<Tensor<S>> {
    let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(invalid("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for t in &inputs[1..] {
        let ok = t.rank() == rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(mismatch("concat", first.shape(), t.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn concat_backward<S: Scalar>(
    shapes: &[Vec<usize>],
    axis: usize,
    g: &Tensor<S>,
) -> Vec<Tensor<S>> {
    let outer: usize = g.shape()[..axis].iter().product();
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let total = g.shape()[axis] * inner;
    let mut parts: Vec<Vec<S>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut offset = o * total;
        for (p, s) in parts.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            p.extend_from_slice(&g.data()[offset..offset + chunk]);
            offset += chunk;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::new(s.clone(), p).expect("shape"))
        .collect()
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Res<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(invalid("permute", format!("perm {perm:?} does not match rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(invalid("permute", format!("perm {perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// `out.shape[i] = x.shape[perm[i]]`.
pub(crate) fn permute<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Res<Tensor<S>> {
    check_perm(perm, x.rank())?;
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.push(x.data()[0]);
        return Tensor::new(out_shape, out);
    }
    let last = rank - 1;
    let (last_dim, last_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let xd = x.data();
    while out.len() < n {
        for j in 0..last_dim {
            out.push(xd[base + j * last_stride]);
        }
        // increment all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── convolution ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_geom(
    name: &'static str,
    x: &[usize; 4],
    w: &[usize; 4],
    bias: &[usize],
    pad: [usize; 2],
) -> Res<ConvGeom> {
    let [batch, cin, h, wd] = *x;
    let [cout, cin_w, kh, kw] = *w;
    if cin != cin_w || bias != [cout] {
        return Err(mismatch(name, x, w));
    }
    let oh = (h + 2 * pad[0]).checked_sub(kh).map(|v| v + 1);
    let ow = (wd + 2 * pad[1]).checked_sub(kw).map(|v| v + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ph: pad[0],
            pw: pad[1],
            oh,
            ow,
        }),
        _ => Err(invalid(name, format!("kernel {w:?} larger than padded input {x:?}"))),
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // valid output columns: 0 <= ow + kj - pw < w
                let ow_lo = g.pw.saturating_sub(kj);
                let ow_hi = (g.w + g.pw).saturating_sub(kj).min(g.ow);
                for oh in 0..g.oh {
                    let ih = (oh + ki) as isize - g.ph as isize;
                    let d = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih as usize >= g.h || ow_lo >= ow_hi {
                        d.fill(S::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + ih as usize) * g.w..];
                    d[..ow_lo].fill(S::zero());
                    for ow in ow_lo..ow_hi {
                        d[ow] = src[ow + kj - g.pw];
                    }
                    d[ow_hi..].fill(S::zero());
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], gx: &mut [S]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let ow_lo = g.pw.saturating_sub(kj);
                let ow_hi = (g.w + g.pw).saturating_sub(kj).min(g.ow);
                for oh in 0..g.oh {
                    let ih = (oh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut gx[(ci * g.h + ih as usize) * g.w..];
                    for ow in ow_lo..ow_hi {
                        let v = &mut dst[ow + kj - g.pw];
                        *v = *v + src[oh * g.ow + ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    bias: &[S],
) -> Vec<S> {
    let patch = g.patch();
    let plane = g.out_plane();
    let mut cols = vec![S::zero(); patch * plane];
    let mut out = vec![S::zero(); g.batch * g.cout * plane];
    let in_size = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_size..(b + 1) * in_size], &mut cols);
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for (co, row) in ob.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.cout, patch, plane, MatRef::new(w), MatRef::new(&cols), S::one(), ob);
    }
    out
}

/// Returns (gx, gw, gbias).
pub(crate) fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let patch = g.patch();
    let plane = g.out_plane();
    let in_size = g.cin * g.h * g.w;
    let mut cols = vec![S::zero(); patch * plane];
    let mut gcols = vec![S::zero(); patch * plane];
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); w.len()];
    let mut gb = vec![S::zero(); g.cout];
    for b in 0..g.batch {
        im2col(g, &x[b * in_size..(b + 1) * in_size], &mut cols);
        let gb_out = &gout[b * g.cout * plane..(b + 1) * g.cout * plane];
        gemm(g.cout, plane, patch, MatRef::new(gb_out), MatRef::t(&cols), S::one(), &mut gw);
        gemm(patch, g.cout, plane, MatRef::t(w), MatRef::new(gb_out), S::zero(), &mut gcols);
        col2im_add(g, &gcols, &mut gx[b * in_size..(b + 1) * in_size]);
        for (co, row) in gb_out.chunks_exact(plane).enumerate() {
            gb[co] = gb[co] + row.iter().copied().sum::<S>();
        }
    }
    (gx, gw, gb)
}

// ── pooling ─────────────────────────────────────────────────────────

/// Non-overlapping max pool; returns pooled values and, per output element,
/// the flat input index of its maximum (lowest index wins ties).
pub(crate) fn max_pool2d<S: Scalar>(x: &Tensor<S>, kernel: [usize; 2]) -> Res<(Tensor<S>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(invalid("max_pool2d", format!("expected rank 4, got {:?}", x.shape())));
    }
    let [kh, kw] = kernel;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
        return Err(invalid(
            "max_pool2d",
            format!("kernel {kernel:?} does not tile input {:?}", x.shape()),
        ));
    }
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * kh) * w + j * kw;
                for di in 0..kh {
                    for dj in 0..kw {
                        let p = base + (i * kh + di) * w + j * kw + dj;
                        if xd[p] > xd[best] {
                            best = p;
                        }
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, idx))
}

pub(crate) fn max_unpool2d<S: Scalar>(
    x: &Tensor<S>,
    indices: &[usize],
    out_shape: &[usize],
) -> Tensor<S> {
    let mut out = Tensor::zeros(out_shape.to_vec());
    let od = out.data_mut();
    for (&v, &i) in x.data().iter().zip(indices) {
        od[i] = v;
    }
    out
}

// ── loss ────────────────────────────────────────────────────────────

pub(crate) fn bce<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, clamp: f64) -> Res<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(mismatch("bce", pred.shape(), target.shape()));
    }
    let lo = S::lit(clamp);
    let hi = S::one() - lo;
    let mut total = S::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.max(lo).min(hi);
        total = total - (y * p.ln() + (S::one() - y) * (S::one() - p).ln());
    }
    Ok(Tensor::scalar(total / S::from_usize_lossy(pred.len())))
}

/// Gradient of the mean BCE w.r.t. the predictions, evaluated at the clamped
/// prediction.
pub(crate) fn bce_backward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    clamp: f64,
    upstream: S,
) -> Tensor<S> {
    let lo = S::lit(clamp);
    let hi = S::one() - lo;
    let scale = upstream / S::from_usize_lossy(pred.len());
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            scale * (p - y) / (p * (S::one() - p))
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("shape")
}

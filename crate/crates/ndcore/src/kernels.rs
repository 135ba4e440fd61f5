//! Forward and backward kernels for the layers the denoiser and classifier use.
//!
//! Every forward function here is usable on its own; the tape calls the same
//! code and keeps whatever the backward pass needs.

use crate::array::NdArray;
use crate::element::{gemm, Element};
use crate::error::{NdError, Result};

fn axis_err(op: &'static str, axis: &'static str, expected: usize, got: usize) -> NdError {
    NdError::AxisMismatch {
        op,
        axis,
        expected,
        got,
    }
}

fn expect_rank<T: Element>(a: &NdArray<T>, rank: usize, op: &'static str) -> Result<()> {
    if a.rank() != rank {
        return Err(NdError::Rank {
            op,
            expected: rank,
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_vector<T: Element>(
    a: &NdArray<T>,
    len: usize,
    op: &'static str,
    axis: &'static str,
) -> Result<()> {
    if a.len() != len || a.rank() != 1 {
        return Err(axis_err(op, axis, len, a.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conv2d

/// Static geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Element>(
        input: &NdArray<T>,
        kernel: &NdArray<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = input.dims4(OP)?;
        let (k, kc, kh, kw) = kernel.dims4(OP)?;
        if kc != c {
            return Err(axis_err(OP, "C", c, kc));
        }
        if kh % 2 == 0 {
            return Err(NdError::invalid(
                OP,
                format!("kernel height {kh} must be odd"),
            ));
        }
        if kw % 2 == 0 {
            return Err(NdError::invalid(
                OP,
                format!("kernel width {kw} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(NdError::invalid(OP, "stride must be positive"));
        }
        if h + 2 * pad < kh {
            return Err(axis_err(OP, "H", kh, h + 2 * pad));
        }
        if w + 2 * pad < kw {
            return Err(axis_err(OP, "W", kw, w + 2 * pad));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad` is inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut Vec<T>) {
    col.clear();
    let zero = T::zero();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        col.resize(col.len() + g.wo, zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    col.resize(col.len() + lo, zero);
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        col.extend_from_slice(&src[start..start + hi - lo]);
                    } else {
                        col.extend((lo..hi).map(|ox| src[ox * g.stride + kj - g.pad]));
                    }
                    col.resize(col.len() + g.wo - hi, zero);
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let l = g.out_len();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        dst[start..start + hi - lo]
                            .iter_mut()
                            .zip(&line[lo..hi])
                            .for_each(|(d, &s)| *d += s);
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kj - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip), `[N,C,H,W] * [K,C,kh,kw] -> [N,K,H',W']`.
pub fn conv2d<T: Element>(
    input: &NdArray<T>,
    kernel: &NdArray<T>,
    stride: usize,
    padding: usize,
) -> Result<NdArray<T>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let out = conv2d_forward(&g, input.data(), kernel.data());
    NdArray::from_parts(vec![g.n, g.k, g.ho, g.wo], out).ensure_finite("conv2d")
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (p, l) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.n * g.k * l];
    let mut col = Vec::with_capacity(if g.is_pointwise() { 0 } else { p * l });
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let ob = &mut out[b * g.k * l..(b + 1) * g.k * l];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        gemm(false, false, g.k, l, p, T::one(), w, cols, T::zero(), ob);
    }
    out
}

/// Returns `(d input, d kernel)`; the input gradient is skipped when not needed.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (p, l) = (g.patch_len(), g.out_len());
    let mut dw = vec![T::zero(); g.k * p];
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut col = Vec::with_capacity(if g.is_pointwise() { 0 } else { p * l });
    let mut dcol = vec![T::zero(); if need_input { p * l } else { 0 }];
    for b in 0..g.n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let db = &dout[b * g.k * l..(b + 1) * g.k * l];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        gemm(
            false,
            true,
            g.k,
            p,
            l,
            T::one(),
            db,
            cols,
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                gemm(true, false, p, l, g.k, T::one(), w, db, T::zero(), dxb);
            } else {
                gemm(
                    true,
                    false,
                    p,
                    l,
                    g.k,
                    T::one(),
                    w,
                    db,
                    T::zero(),
                    &mut dcol,
                );
                col2im(g, &dcol, dxb);
            }
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// group_norm

pub(crate) struct GroupNormSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `(C/groups, H, W)` blocks followed by a per-channel affine map.
pub fn group_norm<T: Element>(
    input: &NdArray<T>,
    groups: usize,
    gain: &NdArray<T>,
    bias: &NdArray<T>,
    eps: T,
) -> Result<NdArray<T>> {
    let (out, _) = group_norm_forward(input, groups, gain, bias, eps)?;
    Ok(out)
}

pub(crate) fn group_norm_forward<T: Element>(
    input: &NdArray<T>,
    groups: usize,
    gain: &NdArray<T>,
    bias: &NdArray<T>,
    eps: T,
) -> Result<(NdArray<T>, GroupNormSaved<T>)> {
    const OP: &str = "group_norm";
    let (n, c, h, w) = input.dims4(OP)?;
    if groups == 0 || c % groups != 0 {
        return Err(NdError::invalid(
            OP,
            format!("{groups} groups do not divide {c} channels"),
        ));
    }
    expect_vector(gain, c, OP, "C")?;
    expect_vector(bias, c, OP, "C")?;
    let cg = c / groups;
    let block = cg * h * w;
    let x = input.data();
    let (gn, bs) = (gain.data(), bias.data());
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for (gi, (xs, ys)) in x
        .chunks_exact(block)
        .zip(out.chunks_exact_mut(block))
        .enumerate()
    {
        let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / block as f64;
        let var = xs.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / block as f64;
        let r = 1.0 / (var + eps.as_f64()).sqrt();
        let (mt, rt) = (T::from_f64(m), T::from_f64(r));
        let g0 = (gi % groups) * cg;
        for (cc, (xc, yc)) in xs
            .chunks_exact(h * w)
            .zip(ys.chunks_exact_mut(h * w))
            .enumerate()
        {
            let (a, b) = (gn[g0 + cc], bs[g0 + cc]);
            for (xv, yv) in xc.iter().zip(yc.iter_mut()) {
                *yv = (*xv - mt) * rt * a + b;
            }
        }
        mean.push(mt);
        rstd.push(rt);
    }
    let out = NdArray::from_parts(vec![n, c, h, w], out).ensure_finite(OP)?;
    Ok((out, GroupNormSaved { mean, rstd }))
}

/// Returns `(d input, d gain, d bias)`.
pub(crate) fn group_norm_backward<T: Element>(
    shape: &[usize],
    groups: usize,
    x: &[T],
    gain: &[T],
    saved: &GroupNormSaved<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let cg = c / groups;
    let block = cg * hw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![0.0f64; c];
    let mut dbias = vec![0.0f64; c];
    for (gi, ((xs, dys), dxs)) in x
        .chunks_exact(block)
        .zip(dy.chunks_exact(block))
        .zip(dx.chunks_exact_mut(block))
        .enumerate()
    {
        let (m, r) = (saved.mean[gi].as_f64(), saved.rstd[gi].as_f64());
        let g0 = (gi % groups) * cg;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for cc in 0..cg {
            let a = gain[g0 + cc].as_f64();
            let (mut sg, mut sb) = (0.0, 0.0);
            for i in cc * hw..(cc + 1) * hw {
                let xhat = (xs[i].as_f64() - m) * r;
                let d = dys[i].as_f64();
                sg += d * xhat;
                sb += d;
                sum_dxhat += d * a;
                sum_dxhat_xhat += d * a * xhat;
            }
            dgain[g0 + cc] += sg;
            dbias[g0 + cc] += sb;
        }
        let mean_d = sum_dxhat / block as f64;
        let mean_dx = sum_dxhat_xhat / block as f64;
        for cc in 0..cg {
            let a = gain[g0 + cc].as_f64();
            for i in cc * hw..(cc + 1) * hw {
                let xhat = (xs[i].as_f64() - m) * r;
                dxs[i] = T::from_f64(r * (dys[i].as_f64() * a - mean_d - xhat * mean_dx));
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dgain), cast(dbias))
}

// ---------------------------------------------------------------------------
// self-attention

/// Weights of a multi-head spatial self-attention layer over `C` channels.
pub struct AttentionWeights<'a, T> {
    /// `[3C, C]`: query, key and value projections stacked by rows.
    pub qkv: &'a NdArray<T>,
    /// `[3C]`
    pub qkv_bias: &'a NdArray<T>,
    /// `[C, C]`
    pub out: &'a NdArray<T>,
    /// `[C]`
    pub out_bias: &'a NdArray<T>,
    pub heads: usize,
}

pub(crate) struct AttentionSaved<T> {
    /// `[N, 3C, L]`
    pub qkv: Vec<T>,
    /// `[N, heads, L, L]`, rows are softmax distributions over keys.
    pub probs: Vec<T>,
    /// `[N, C, L]` attention output before the output projection.
    pub mixed: Vec<T>,
}

/// Multi-head self-attention over the `H*W` positions of each sample,
/// `softmax(Q^T K / sqrt(d)) V` per head followed by an output projection.
/// The residual connection is left to the caller.
pub fn self_attention<T: Element>(
    input: &NdArray<T>,
    weights: &AttentionWeights<'_, T>,
) -> Result<NdArray<T>> {
    Ok(self_attention_forward(input, weights)?.0)
}

fn check_attention<T: Element>(
    input: &NdArray<T>,
    wt: &AttentionWeights<'_, T>,
) -> Result<(usize, usize, usize)> {
    const OP: &str = "self_attention";
    let (n, c, h, w) = input.dims4(OP)?;
    if wt.heads == 0 || c % wt.heads != 0 {
        return Err(NdError::invalid(
            OP,
            format!("{} heads do not divide {c} channels", wt.heads),
        ));
    }
    expect_rank(wt.qkv, 2, OP)?;
    if wt.qkv.shape() != [3 * c, c] {
        return Err(axis_err(OP, "C", 3 * c, wt.qkv.shape()[0]));
    }
    expect_vector(wt.qkv_bias, 3 * c, OP, "C")?;
    expect_rank(wt.out, 2, OP)?;
    if wt.out.shape() != [c, c] {
        return Err(axis_err(OP, "C", c, wt.out.shape()[0]));
    }
    expect_vector(wt.out_bias, c, OP, "C")?;
    Ok((n, c, h * w))
}

pub(crate) fn self_attention_forward<T: Element>(
    input: &NdArray<T>,
    wt: &AttentionWeights<'_, T>,
) -> Result<(NdArray<T>, AttentionSaved<T>)> {
    let (n, c, l) = check_attention(input, wt)?;
    let heads = wt.heads;
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let x = input.data();
    let mut qkv = vec![T::zero(); n * 3 * c * l];
    let mut probs = vec![T::zero(); n * heads * l * l];
    let mut mixed = vec![T::zero(); n * c * l];
    let mut out = vec![T::zero(); n * c * l];
    for b in 0..n {
        let xb = &x[b * c * l..(b + 1) * c * l];
        let qb = &mut qkv[b * 3 * c * l..(b + 1) * 3 * c * l];
        gemm(
            false,
            false,
            3 * c,
            l,
            c,
            T::one(),
            wt.qkv.data(),
            xb,
            T::zero(),
            qb,
        );
        add_row_bias(qb, wt.qkv_bias.data(), l);
        for h in 0..heads {
            let q = &qb[h * d * l..(h + 1) * d * l];
            let k = &qb[(c + h * d) * l..(c + (h + 1) * d) * l];
            let v = &qb[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
            let p = &mut probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
            gemm(true, false, l, l, d, scale, q, k, T::zero(), p);
            for row in p.chunks_exact_mut(l) {
                softmax_in_place(row);
            }
            let o = &mut mixed[(b * c + h * d) * l..(b * c + (h + 1) * d) * l];
            gemm(false, true, d, l, l, T::one(), v, p, T::zero(), o);
        }
        let ob = &mut out[b * c * l..(b + 1) * c * l];
        gemm(
            false,
            false,
            c,
            l,
            c,
            T::one(),
            wt.out.data(),
            &mixed[b * c * l..(b + 1) * c * l],
            T::zero(),
            ob,
        );
        add_row_bias(ob, wt.out_bias.data(), l);
    }
    let out = NdArray::from_parts(input.shape().to_vec(), out).ensure_finite("self_attention")?;
    Ok((out, AttentionSaved { qkv, probs, mixed }))
}

pub(crate) struct AttentionGrads<T> {
    pub input: Vec<T>,
    pub qkv: Vec<T>,
    pub qkv_bias: Vec<T>,
    pub out: Vec<T>,
    pub out_bias: Vec<T>,
}

pub(crate) fn self_attention_backward<T: Element>(
    shape: &[usize],
    heads: usize,
    x: &[T],
    w_qkv: &[T],
    w_out: &[T],
    saved: &AttentionSaved<T>,
    dy: &[T],
) -> AttentionGrads<T> {
    let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut g = AttentionGrads {
        input: vec![T::zero(); n * c * l],
        qkv: vec![T::zero(); 3 * c * c],
        qkv_bias: vec![T::zero(); 3 * c],
        out: vec![T::zero(); c * c],
        out_bias: vec![T::zero(); c],
    };
    let mut dmixed = vec![T::zero(); c * l];
    let mut dqkv = vec![T::zero(); 3 * c * l];
    let mut dp = vec![T::zero(); l * l];
    for b in 0..n {
        let dyb = &dy[b * c * l..(b + 1) * c * l];
        let mixed = &saved.mixed[b * c * l..(b + 1) * c * l];
        gemm(
            false,
            true,
            c,
            c,
            l,
            T::one(),
            dyb,
            mixed,
            T::one(),
            &mut g.out,
        );
        accumulate_row_sums(&mut g.out_bias, dyb, l);
        gemm(
            true,
            false,
            c,
            l,
            c,
            T::one(),
            w_out,
            dyb,
            T::zero(),
            &mut dmixed,
        );
        let qb = &saved.qkv[b * 3 * c * l..(b + 1) * 3 * c * l];
        for h in 0..heads {
            let q = &qb[h * d * l..(h + 1) * d * l];
            let k = &qb[(c + h * d) * l..(c + (h + 1) * d) * l];
            let v = &qb[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
            let p = &saved.probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
            let dmo = &dmixed[h * d * l..(h + 1) * d * l];
            {
                let dv = &mut dqkv[(2 * c + h * d) * l..(2 * c + (h + 1) * d) * l];
                gemm(false, false, d, l, l, T::one(), dmo, p, T::zero(), dv);
            }
            gemm(true, false, l, l, d, T::one(), dmo, v, T::zero(), &mut dp);
            for (prow, drow) in p.chunks_exact(l).zip(dp.chunks_exact_mut(l)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            {
                let dq = &mut dqkv[h * d * l..(h + 1) * d * l];
                gemm(false, true, d, l, l, scale, k, &dp, T::zero(), dq);
            }
            {
                let dk = &mut dqkv[(c + h * d) * l..(c + (h + 1) * d) * l];
                gemm(false, false, d, l, l, scale, q, &dp, T::zero(), dk);
            }
        }
        let xb = &x[b * c * l..(b + 1) * c * l];
        gemm(
            false,
            true,
            3 * c,
            c,
            l,
            T::one(),
            &dqkv,
            xb,
            T::one(),
            &mut g.qkv,
        );
        accumulate_row_sums(&mut g.qkv_bias, &dqkv, l);
        let dxb = &mut g.input[b * c * l..(b + 1) * c * l];
        gemm(
            true,
            false,
            c,
            l,
            3 * c,
            T::one(),
            w_qkv,
            &dqkv,
            T::zero(),
            dxb,
        );
    }
    g
}

fn add_row_bias<T: Element>(m: &mut [T], bias: &[T], row_len: usize) {
    for (row, &b) in m.chunks_exact_mut(row_len).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn accumulate_row_sums<T: Element>(acc: &mut [T], m: &[T], row_len: usize) {
    for (a, row) in acc.iter_mut().zip(m.chunks_exact(row_len)) {
        *a += row.iter().copied().sum::<T>();
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    for v in row.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let total: T = row.iter().copied().sum();
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

// ---------------------------------------------------------------------------
// linear layers

/// `[N, I] x [O, I]^T + [O] -> [N, O]`.
pub fn linear<T: Element>(
    input: &NdArray<T>,
    weight: &NdArray<T>,
    bias: &NdArray<T>,
) -> Result<NdArray<T>> {
    const OP: &str = "linear";
    expect_rank(input, 2, OP)?;
    expect_rank(weight, 2, OP)?;
    let (n, i) = (input.shape()[0], input.shape()[1]);
    let (o, wi) = (weight.shape()[0], weight.shape()[1]);
    if wi != i {
        return Err(axis_err(OP, "axis1", i, wi));
    }
    expect_vector(bias, o, OP, "axis0")?;
    let mut out = vec![T::zero(); n * o];
    gemm(
        false,
        true,
        n,
        o,
        i,
        T::one(),
        input.data(),
        weight.data(),
        T::zero(),
        &mut out,
    );
    add_col_bias(&mut out, bias.data());
    NdArray::from_parts(vec![n, o], out).ensure_finite(OP)
}

fn add_col_bias<T: Element>(m: &mut [T], bias: &[T]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

// ---------------------------------------------------------------------------
// resampling

/// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
pub fn upsample2x<T: Element>(input: &NdArray<T>) -> Result<NdArray<T>> {
    let (n, c, h, w) = input.dims4("upsample2x")?;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(NdArray::from_parts(vec![n, c, 2 * h, 2 * w], out))
}

pub(crate) fn upsample2x_backward<T: Element>(shape: &[usize], dy: &[T]) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let mut dx = vec![T::zero(); dy.len() / 4];
    for (dst, src) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    dx
}

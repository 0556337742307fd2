//! Forward and backward kernels used by the tape ops.

use super::{numel, Float, Tensor};

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn permute<F: Float>(x: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let rank = x.rank();
    assert_eq!(axes.len(), rank, "permute axes {axes:?} for {:?}", x.shape());
    let mut seen = vec![false; rank];
    for &a in axes {
        assert!(a < rank && !seen[a], "invalid permutation {axes:?}");
        seen[a] = true;
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn narrow<F: Float>(x: &Tensor<F>, axis: usize, start: usize, len: usize) -> Tensor<F> {
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    assert!(start + len <= size, "narrow {start}+{len} exceeds axis size {size}");
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Adds `g` (shaped like the narrowed slice) into `dst` at `start` along `axis`.
pub fn narrow_backward<F: Float>(dst: &mut Tensor<F>, g: &Tensor<F>, axis: usize, start: usize) {
    let (outer, size, inner) = split_at_axis(dst.shape(), axis);
    let len = g.shape()[axis];
    let dd = dst.data_mut();
    for o in 0..outer {
        let base = (o * size + start) * inner;
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        for (d, &s) in dd[base..base + len * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}

pub fn concat<F: Float>(parts: &[&Tensor<F>], axis: usize) -> Tensor<F> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].shape();
    let mut total = 0;
    for p in parts {
        assert_eq!(p.rank(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
        }
        total += p.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Expands size-1 dimensions of `x` to `shape` (same rank).
pub fn broadcast_to<F: Float>(x: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    assert_eq!(x.rank(), shape.len(), "broadcast rank mismatch {:?} -> {shape:?}", x.shape());
    for (&a, &b) in x.shape().iter().zip(shape) {
        assert!(a == b || a == 1, "cannot broadcast {:?} to {shape:?}", x.shape());
    }
    if x.shape() == shape {
        return x.clone();
    }
    let in_strides = strides(x.shape());
    let src: Vec<usize> =
        (0..shape.len()).map(|d| if x.shape()[d] == 1 { 0 } else { in_strides[d] }).collect();
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Sums `g` down to `shape`, the adjoint of [`broadcast_to`].
pub fn reduce_to<F: Float>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let rank = shape.len();
    let out_strides = strides(shape);
    let dst: Vec<usize> = (0..rank).map(|d| if shape[d] == 1 { 0 } else { out_strides[d] }).collect();
    let mut out = vec![F::zero(); numel(shape)];
    let gshape = g.shape();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += dst[d];
            if idx[d] < gshape[d] {
                break;
            }
            off -= dst[d] * gshape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn sum_axis<F: Float>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..size {
            let src = &x.data()[(o * size + a) * inner..(o * size + a + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// Geometry of a 2-D convolution over NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Self {
        let (batch, cin, h, wd) = match *x {
            [a, b, c, d] => (a, b, c, d),
            _ => panic!("conv2d input must be NCHW, got {x:?}"),
        };
        let (cout, cin_g, kh, kw) = match *w {
            [a, b, c, d] => (a, b, c, d),
            _ => panic!("conv2d weight must be [cout, cin/groups, kh, kw], got {w:?}"),
        };
        assert!(stride >= 1 && groups >= 1, "stride and groups must be positive");
        assert!(cin % groups == 0 && cout % groups == 0, "groups {groups} must divide channels");
        assert_eq!(cin / groups, cin_g, "conv2d weight expects {cin_g} channels per group, input has {}", cin / groups);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Self { batch, cin, h, w: wd, cout, kh, kw, stride, pad, groups, ho, wo }
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout && self.groups > 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }
}

/// Unfolds channels `[c0, c0 + cin_g)` of one image into `cols` (`k × ho·wo`).
fn im2col<F: Float>(x: &[F], g: &ConvGeom, c0: usize, cols: &mut [F]) {
    let n = g.ho * g.wo;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid output columns: 0 <= ox + j - pad < w
                        let lo = g.pad.saturating_sub(j).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(j).min(g.wo).max(lo);
                        line[..lo].fill(F::zero());
                        line[hi..].fill(F::zero());
                        let s0 = lo + j - g.pad;
                        line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom, c0: usize, dx: &mut [F]) {
    let n = g.ho * g.wo;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(j).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(j).min(g.wo).max(lo);
                        let s0 = lo + j - g.pad;
                        for (d, &v) in line[s0..s0 + (hi - lo)].iter_mut().zip(&src[oy * g.wo + lo..oy * g.wo + hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn depthwise_forward<F: Float>(x: &[F], w: &[F], g: &ConvGeom, out: &mut [F]) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xin = &x[(b * g.cin + c) * plane_in..(b * g.cin + c + 1) * plane_in];
            let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let o = &mut out[(b * g.cout + c) * plane_out..(b * g.cout + c + 1) * plane_out];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = F::zero();
                    for i in 0..g.kh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for j in 0..g.kw {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += ker[i * g.kw + j] * xin[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    o[oy * g.wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<F: Float>(x: &[F], w: &[F], dy: &[F], g: &ConvGeom, dx: &mut [F], dw: &mut [F]) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xin = &x[(b * g.cin + c) * plane_in..(b * g.cin + c + 1) * plane_in];
            let ker = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let gout = &dy[(b * g.cout + c) * plane_out..(b * g.cout + c + 1) * plane_out];
            let dxin = &mut dx[(b * g.cin + c) * plane_in..(b * g.cin + c + 1) * plane_in];
            let dker = &mut dw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = gout[oy * g.wo + ox];
                    if go == F::zero() {
                        continue;
                    }
                    for i in 0..g.kh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for j in 0..g.kw {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let p = iy as usize * g.w + ix as usize;
                                dker[i * g.kw + j] += go * xin[p];
                                dxin[p] += go * ker[i * g.kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Float>(x: &Tensor<F>, w: &Tensor<F>, bias: Option<&Tensor<F>>, g: &ConvGeom) -> Tensor<F> {
    let mut out = vec![F::zero(); numel(&g.out_shape())];
    if g.is_depthwise() && g.cout_g() == 1 {
        depthwise_forward(x.data(), w.data(), g, &mut out);
    } else {
        let n = g.ho * g.wo;
        let k = g.k();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); k * n] };
        let plane_in = g.cin * g.h * g.w;
        for b in 0..g.batch {
            let xb = &x.data()[b * plane_in..(b + 1) * plane_in];
            for grp in 0..g.groups {
                let c0 = grp * g.cin_g();
                let wg = &w.data()[grp * g.cout_g() * k..(grp + 1) * g.cout_g() * k];
                let ob = &mut out[(b * g.cout + grp * g.cout_g()) * n..(b * g.cout + (grp + 1) * g.cout_g()) * n];
                let rhs: &[F] = if g.is_pointwise() {
                    &xb[c0 * n..(c0 + g.cin_g()) * n]
                } else {
                    im2col(xb, g, c0, &mut cols);
                    &cols
                };
                F::gemm(g.cout_g(), k, n, F::one(), wg, k, 1, rhs, n, 1, F::zero(), ob, n, 1);
            }
        }
    }
    if let Some(bias) = bias {
        assert_eq!(bias.len(), g.cout, "conv2d bias length");
        let n = g.ho * g.wo;
        for b in 0..g.batch {
            for c in 0..g.cout {
                let bv = bias.data()[c];
                for v in &mut out[(b * g.cout + c) * n..(b * g.cout + c + 1) * n] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(g.out_shape().to_vec(), out)
}

/// Returns `(dx, dw, dbias)`; each is only computed when requested.
pub fn conv2d_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (need_dx, need_dw, need_db) = need;
    let n = g.ho * g.wo;
    let db = need_db.then(|| {
        let mut db = vec![F::zero(); g.cout];
        for b in 0..g.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dy.data()[(b * g.cout + c) * n..(b * g.cout + c + 1) * n].iter().copied().sum::<F>();
            }
        }
        Tensor::new(vec![g.cout], db)
    });
    if !need_dx && !need_dw {
        return (None, None, db);
    }
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); w.len()];
    if g.is_depthwise() && g.cout_g() == 1 {
        depthwise_backward(x.data(), w.data(), dy.data(), g, &mut dx, &mut dw);
    } else {
        let k = g.k();
        let plane_in = g.cin * g.h * g.w;
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); k * n] };
        let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); k * n] };
        for b in 0..g.batch {
            let xb = &x.data()[b * plane_in..(b + 1) * plane_in];
            for grp in 0..g.groups {
                let c0 = grp * g.cin_g();
                let co = g.cout_g();
                let wg = &w.data()[grp * co * k..(grp + 1) * co * k];
                let dyg = &dy.data()[(b * g.cout + grp * co) * n..(b * g.cout + (grp + 1) * co) * n];
                if need_dw {
                    let rhs: &[F] = if g.is_pointwise() {
                        &xb[c0 * n..(c0 + g.cin_g()) * n]
                    } else {
                        im2col(xb, g, c0, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[grp * co * k..(grp + 1) * co * k];
                    // dW[co × k] += dY[co × n] · colsᵀ[n × k]
                    F::gemm(co, n, k, F::one(), dyg, n, 1, rhs, 1, n, F::one(), dwg, k, 1);
                }
                if need_dx {
                    if g.is_pointwise() {
                        let dxb = &mut dx[b * plane_in + c0 * n..b * plane_in + (c0 + g.cin_g()) * n];
                        F::gemm(k, co, n, F::one(), wg, 1, k, dyg, n, 1, F::one(), dxb, n, 1);
                    } else {
                        F::gemm(k, co, n, F::one(), wg, 1, k, dyg, n, 1, F::zero(), &mut dcols, n, 1);
                        col2im(&dcols, g, c0, &mut dx[b * plane_in..(b + 1) * plane_in]);
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape().to_vec(), dx)),
        need_dw.then(|| Tensor::new(w.shape().to_vec(), dw)),
        db,
    )
}

/// Space-to-depth: `[B, C, H, W] -> [B, C·r², H/r, W/r]`.
pub fn pixel_unshuffle<F: Float>(x: &Tensor<F>, r: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    assert!(h % r == 0 && w % r == 0, "pixel_unshuffle factor {r} must divide {h}x{w}");
    x.clone()
        .reshape(vec![b, c, h / r, r, w / r, r])
        .permute(&[0, 1, 3, 5, 2, 4])
        .reshape(vec![b, c * r * r, h / r, w / r])
}

/// Depth-to-space: `[B, C·r², H, W] -> [B, C, H·r, W·r]`.
pub fn pixel_shuffle<F: Float>(x: &Tensor<F>, r: usize) -> Tensor<F> {
    let (b, cr, h, w) = x.dims4();
    assert!(cr % (r * r) == 0, "pixel_shuffle factor {r} must divide channels {cr}");
    let c = cr / (r * r);
    x.clone()
        .reshape(vec![b, c, r, r, h, w])
        .permute(&[0, 1, 4, 2, 5, 3])
        .reshape(vec![b, c, h * r, w * r])
}

pub fn upsample_nearest<F: Float>(x: &Tensor<F>, r: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h * r, w * r);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let row = &plane[(oy / r) * w..(oy / r + 1) * w];
            for ox in 0..wo {
                out.push(row[ox / r]);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

/// Sum over each `r×r` block; the adjoint of [`upsample_nearest`].
pub fn block_sum<F: Float>(x: &Tensor<F>, r: usize) -> Tensor<F> {
    let (b, c, h, w) = x.dims4();
    assert!(h % r == 0 && w % r == 0, "block factor {r} must divide {h}x{w}");
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![F::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                o[(y / r) * wo + xx / r] += plane[y * w + xx];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

/// Standardizes `x` along `axis`; returns `(y, inv_std)` with one `inv_std` per normalized slice.
pub fn normalize_forward<F: Float>(x: &Tensor<F>, axis: usize, eps: F) -> (Tensor<F>, Vec<F>) {
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    let n = F::of(size as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut inv = vec![F::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * size + a) * inner + i;
            let mean = (0..size).map(|a| d[at(a)]).sum::<F>() / n;
            let var = (0..size).map(|a| (d[at(a)] - mean).powi(2)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv[o * inner + i] = is;
            for a in 0..size {
                y[at(a)] = (d[at(a)] - mean) * is;
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), y), inv)
}

pub fn normalize_backward<F: Float>(y: &Tensor<F>, inv: &[F], dy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, size, inner) = split_at_axis(y.shape(), axis);
    let n = F::of(size as f64);
    let mut dx = vec![F::zero(); y.len()];
    let (yd, gd) = (y.data(), dy.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * size + a) * inner + i;
            let mean_g = (0..size).map(|a| gd[at(a)]).sum::<F>() / n;
            let mean_gy = (0..size).map(|a| gd[at(a)] * yd[at(a)]).sum::<F>() / n;
            let is = inv[o * inner + i];
            for a in 0..size {
                dx[at(a)] = is * (gd[at(a)] - mean_g - yd[at(a)] * mean_gy);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

pub fn softmax_forward<F: Float>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, size, inner) = split_at_axis(x.shape(), axis);
    let mut y = vec![F::zero(); x.len()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * size + a) * inner + i;
            let m = (0..size).map(|a| d[at(a)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for a in 0..size {
                let e = (d[at(a)] - m).exp();
                y[at(a)] = e;
                z += e;
            }
            for a in 0..size {
                y[at(a)] = y[at(a)] / z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn softmax_backward<F: Float>(y: &Tensor<F>, dy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, size, inner) = split_at_axis(y.shape(), axis);
    let mut dx = vec![F::zero(); y.len()];
    let (yd, gd) = (y.data(), dy.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * size + a) * inner + i;
            let dot = (0..size).map(|a| gd[at(a)] * yd[at(a)]).sum::<F>();
            for a in 0..size {
                dx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let mut out = Tensor::zeros(g.out_shape().to_vec());
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        for b in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / cout_g;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += w.at(&[co, ci, i, j])
                                            * x.at(&[b, grp * cin_g + ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, co, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn conv_matches_naive_for_all_layouts() {
        let cases = [
            ([2, 3, 6, 5], [4, 3, 3, 3], 1, 1, 1),
            ([1, 4, 7, 7], [4, 1, 3, 3], 1, 1, 4),
            ([2, 4, 6, 6], [6, 2, 3, 3], 2, 1, 2),
            ([2, 5, 4, 4], [3, 5, 1, 1], 1, 0, 1),
            ([1, 2, 8, 8], [2, 2, 5, 5], 1, 2, 1),
        ];
        for (i, (xs, ws, stride, pad, groups)) in cases.into_iter().enumerate() {
            let x = pseudo(&xs, i as u64 + 1);
            let w = pseudo(&ws, i as u64 + 100);
            let g = ConvGeom::new(&xs, &ws, stride, pad, groups);
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn shuffle_roundtrip_and_upsample_adjoint() {
        let x = pseudo(&[2, 3, 4, 6], 7);
        assert_eq!(pixel_shuffle(&pixel_unshuffle(&x, 2), 2), x);
        let up = upsample_nearest(&x, 2);
        assert_eq!(up.shape(), &[2, 3, 8, 12]);
        let back = block_sum(&up, 2);
        assert_eq!(back, x.map(|v| 4.0 * v));
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let x = pseudo(&[2, 1, 3], 3);
        let b = broadcast_to(&x, &[2, 4, 3]);
        assert_eq!(b.at(&[1, 3, 2]), x.at(&[1, 0, 2]));
        let r = reduce_to(&b, &[2, 1, 3]);
        assert_eq!(r, x.map(|v| 4.0 * v));
    }

    #[test]
    fn permute_inverse_restores() {
        let x = pseudo(&[2, 3, 4, 5], 11);
        let axes = [2, 0, 3, 1];
        let y = permute(&x, &axes);
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        assert_eq!(y.at(&[1, 0, 4, 2]), x.at(&[0, 2, 1, 4]));
        assert_eq!(permute(&y, &inverse_permutation(&axes)), x);
    }
}

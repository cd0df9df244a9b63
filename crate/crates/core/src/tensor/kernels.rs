//! Raw forward/backward kernels over contiguous row-major buffers.
//!
//! Nothing here knows about the graph; shapes are validated by the callers
//! in `graph.rs`.

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `[C×H×W]` into `[C·k·k × H'·W']`, rows `ld` apart.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T], ld: usize) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ld..row * ld + plane];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo < hi {
                            drow[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        }
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose stride-1 tap `kx` lands inside the row.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.out_w);
    let hi = (g.width + g.pad).saturating_sub(kx).min(g.out_w).max(lo);
    (lo, hi)
}

/// Adjoint of [`im2col`]: scatters `[C·k·k × H'·W']` back onto `[C×H×W]`.
fn col2im<T: Element>(g: &ConvGeom, col: &[T], ld: usize, dx: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let xc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ld..row * ld + plane];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let srow = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                        for (d, &v) in drow[lo + kx - g.pad..hi + kx - g.pad].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per GEMM: enough to give small feature maps a reasonably wide
/// column block without letting large ones fall out of cache.
fn chunk_len(g: &ConvGeom) -> usize {
    (1024 / g.out_plane().max(1)).clamp(1, g.batch.max(1))
}

/// Unfolds samples `xs` (consecutive images) into `[C·k·k × m·H'·W']`, sample
/// `i` in columns `i·H'·W'..`. Pointwise convs just gather channels.
fn chunk_cols<T: Element>(g: &ConvGeom, xs: &[T], col: &mut Vec<T>) {
    let plane = g.out_plane();
    let in_img = g.in_ch * g.height * g.width;
    let m = xs.len() / in_img;
    let ld = m * plane;
    col.clear();
    col.resize(g.col_rows() * ld, T::zero());
    for (i, xb) in xs.chunks(in_img).enumerate() {
        if g.is_pointwise() {
            for (c, src) in xb.chunks(plane).enumerate() {
                col[c * ld + i * plane..c * ld + (i + 1) * plane].copy_from_slice(src);
            }
        } else {
            im2col(g, xb, &mut col[i * plane..], ld);
        }
    }
}

/// Reorders `[a × b × plane]` blocks to `[b × a × plane]`.
fn swap_outer<T: Element>(src: &[T], a: usize, b: usize, plane: usize, dst: &mut [T]) {
    for i in 0..b {
        for o in 0..a {
            let from = (o * b + i) * plane;
            let to = (i * a + o) * plane;
            dst[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
}

/// Returns the output and, when `keep_cols` is set, the unfolded input of
/// each chunk for reuse by [`conv2d_backward`].
pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<Vec<T>>>) {
    let plane = g.out_plane();
    let in_img = g.in_ch * g.height * g.width;
    let out_img = g.out_ch * plane;
    let rows = g.col_rows();
    let cb = chunk_len(g);
    let mut out = vec![T::zero(); g.batch * out_img];
    let mut kept = Vec::new();
    let mut col = Vec::new();
    let mut y = Vec::new();
    for (xs, os) in x.chunks(cb * in_img).zip(out.chunks_mut(cb * out_img)) {
        let m = xs.len() / in_img;
        let n = m * plane;
        chunk_cols(g, xs, &mut col);
        y.clear();
        for &b in bias {
            y.extend(std::iter::repeat_n(b, n));
        }
        T::gemm(g.out_ch, rows, n, w, (rows, 1), &col, (n, 1), T::one(), &mut y);
        swap_outer(&y, g.out_ch, m, plane, os);
        if keep_cols {
            kept.push(std::mem::take(&mut col));
        }
    }
    (out, keep_cols.then_some(kept))
}

/// Returns `(dx, dw, dbias)`; each is `None` when not requested.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    cols: Option<&[Vec<T>]>,
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let in_img = g.in_ch * g.height * g.width;
    let out_img = g.out_ch * plane;
    let rows = g.col_rows();
    let cb = chunk_len(g);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.out_ch]);
    let (mut col, mut dcol, mut dyt) = (Vec::new(), Vec::new(), Vec::new());
    for (c, dys) in dy.chunks(cb * out_img).enumerate() {
        let m = dys.len() / out_img;
        let n = m * plane;
        let b0 = c * cb;
        // dY as [O × m·P]
        dyt.resize(dys.len(), T::zero());
        swap_outer(dys, m, g.out_ch, plane, &mut dyt);
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(dyt.chunks(n)) {
                *d = *d + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let colc = match cols {
                Some(kept) => &kept[c],
                None => {
                    chunk_cols(g, &x[b0 * in_img..(b0 + m) * in_img], &mut col);
                    &col
                }
            };
            // dW += dY · colᵀ
            T::gemm(g.out_ch, n, rows, &dyt, (n, 1), colc, (1, n), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            dcol.resize(rows * n, T::zero());
            T::gemm(rows, g.out_ch, n, w, (1, rows), &dyt, (n, 1), T::zero(), &mut dcol);
            let dxs = &mut dx[b0 * in_img..(b0 + m) * in_img];
            for (i, dxb) in dxs.chunks_mut(in_img).enumerate() {
                if g.is_pointwise() {
                    for (ch, d) in dxb.chunks_mut(plane).enumerate() {
                        d.copy_from_slice(&dcol[ch * n + i * plane..ch * n + (i + 1) * plane]);
                    }
                } else {
                    col2im(g, &dcol[i * plane..], n, dxb);
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 stride-2 max pooling. Returns the output and, per output element, the
/// flat input index chosen (first maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Element>(
    planes: usize,
    height: usize,
    width: usize,
    x: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source index pair and weight of the far neighbour for one output
/// coordinate of a ×2 bilinear upsample with half-pixel centres.
///
/// The source coordinate is `(i + 0.5) / 2 - 0.5`, clamped below at zero.
pub(crate) fn upsample_taps(i: usize, extent: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn upsample2_forward<T: Element>(
    planes: usize,
    height: usize,
    width: usize,
    x: &[T],
) -> Vec<T> {
    let (oh, ow) = (2 * height, 2 * width);
    let ytaps = typed_taps::<T>(oh, height);
    let xtaps = typed_taps::<T>(ow, width);
    let mut out = vec![T::zero(); planes * oh * ow];
    // Rows are interpolated horizontally once, then blended vertically.
    let mut rows = vec![T::zero(); height * ow];
    for p in 0..planes {
        let src = &x[p * height * width..(p + 1) * height * width];
        for (r, srow) in rows.chunks_mut(ow).zip(src.chunks(width)) {
            for (d, &(x0, x1, lx, mx)) in r.iter_mut().zip(&xtaps) {
                *d = mx * srow[x0] + lx * srow[x1];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (orow, &(y0, y1, ly, my)) in dst.chunks_mut(ow).zip(&ytaps) {
            let top = &rows[y0 * ow..(y0 + 1) * ow];
            let bottom = &rows[y1 * ow..(y1 + 1) * ow];
            for ((d, &t), &b) in orow.iter_mut().zip(top).zip(bottom) {
                *d = my * t + ly * b;
            }
        }
    }
    out
}

/// `(i0, i1, w1, 1 - w1)` per output coordinate, in the element type.
fn typed_taps<T: Element>(out: usize, extent: usize) -> Vec<(usize, usize, T, T)> {
    (0..out)
        .map(|i| {
            let (i0, i1, l) = upsample_taps(i, extent);
            let l = T::from_f64(l);
            (i0, i1, l, T::one() - l)
        })
        .collect()
}

pub(crate) fn upsample2_backward<T: Element>(
    planes: usize,
    height: usize,
    width: usize,
    dy: &[T],
) -> Vec<T> {
    let (oh, ow) = (2 * height, 2 * width);
    let ytaps = typed_taps::<T>(oh, height);
    let xtaps = typed_taps::<T>(ow, width);
    let mut dx = vec![T::zero(); planes * height * width];
    let mut rows = vec![T::zero(); height * ow];
    for p in 0..planes {
        rows.fill(T::zero());
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (grow, &(y0, y1, ly, my)) in g.chunks(ow).zip(&ytaps) {
            for (d, &v) in rows[y0 * ow..(y0 + 1) * ow].iter_mut().zip(grow) {
                *d = *d + my * v;
            }
            for (d, &v) in rows[y1 * ow..(y1 + 1) * ow].iter_mut().zip(grow) {
                *d = *d + ly * v;
            }
        }
        let d = &mut dx[p * height * width..(p + 1) * height * width];
        for (drow, r) in d.chunks_mut(width).zip(rows.chunks(ow)) {
            for (&v, &(x0, x1, lx, mx)) in r.iter().zip(&xtaps) {
                drow[x0] = drow[x0] + mx * v;
                drow[x1] = drow[x1] + lx * v;
            }
        }
    }
    dx
}

/// Normalizes each length-`d` row; returns `(y, xhat, rstd)`.
pub(crate) fn layernorm_forward<T: Element>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let n = T::from_f64(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn layernorm_backward<T: Element>(
    dy: &[T],
    d: usize,
    gamma: &[T],
    xhat: &[T],
    rstd: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let n = T::from_f64(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let off = r * d;
        for j in 0..d {
            let g = dy[off + j];
            dgamma[j] = dgamma[j] + g * xhat[off + j];
            dbeta[j] = dbeta[j] + g;
            dxhat[j] = g * gamma[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(&xhat[off..off + d])
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / n;
        for j in 0..d {
            dx[off + j] = rstd[r] * (dxhat[j] - mean_dxhat - xhat[off + j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Element>() -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-approximated GELU.
/// `tanh` through a single `exp`; saturates cleanly to ±1 and is several times
/// cheaper than the libm routine.
fn tanh_exp<T: Element>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = sqrt_2_over_pi::<T>() * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + tanh_exp(inner))
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = sqrt_2_over_pi::<T>();
    let c = T::from_f64(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = tanh_exp(inner);
    let dinner = k * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Softmax over the class axis of `[B×K×P]` logits. Returns probabilities in
/// the same layout and the summed negative log-likelihood.
pub(crate) fn softmax_nll<T: Element>(
    logits: &[T],
    batch: usize,
    classes: usize,
    plane: usize,
    target: &[usize],
) -> (Vec<T>, T) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for b in 0..batch {
        let base = b * classes * plane;
        for p in 0..plane {
            let at = |k: usize| base + k * plane + p;
            let max = (0..classes).fold(T::neg_infinity(), |m, k| m.max(logits[at(k)]));
            let mut denom = T::zero();
            for k in 0..classes {
                let e = (logits[at(k)] - max).exp();
                probs[at(k)] = e;
                denom = denom + e;
            }
            for k in 0..classes {
                probs[at(k)] = probs[at(k)] / denom;
            }
            let t = target[b * plane + p];
            total = total + (denom.ln() - (logits[at(t)] - max));
        }
    }
    (probs, total)
}

/// Copies `x` (shape `shape`) into the axis order `perm`.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = super::strides_of(shape);
    // Output axes as (extent, source stride), with unit axes dropped and runs
    // that stay adjacent in the source merged into one axis.
    let mut axes: Vec<(usize, usize)> = Vec::with_capacity(perm.len());
    let mut last_src = None;
    for &p in perm {
        if shape[p] == 1 {
            continue;
        }
        match axes.last_mut() {
            Some(a) if last_src.is_some_and(|q: usize| in_strides[q] == shape[p] * in_strides[p]) => {
                a.0 *= shape[p];
                a.1 = in_strides[p];
            }
            _ => axes.push((shape[p], in_strides[p])),
        }
        last_src = Some(p);
    }
    let Some(&(inner, inner_stride)) = axes.last() else {
        return x.to_vec();
    };
    let outer_axes = &axes[..axes.len() - 1];
    let outer: usize = outer_axes.iter().map(|a| a.0).product();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; outer_axes.len()];
    let mut base = 0;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        for ax in (0..outer_axes.len()).rev() {
            idx[ax] += 1;
            base += outer_axes[ax].1;
            if idx[ax] < outer_axes[ax].0 {
                break;
            }
            base -= idx[ax] * outer_axes[ax].1;
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

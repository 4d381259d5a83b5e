//! Forward kernels and their vector-Jacobian products.
//!
//! The public functions here are the untracked forms of the primitives; the
//! tape calls the same kernels and records what the backward pass needs.
//! Backward helpers accumulate into caller-provided gradient buffers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms in [`bce`].
pub const BCE_EPSILON: f64 = 1e-7;

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (row-major `k x m`,
/// `n x k`), so no transposed copies are ever materialised.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_column_sums(grad_bias: &mut [f64], upstream: &[f64]) {
    for row in upstream.chunks_exact(grad_bias.len()) {
        for (g, u) in grad_bias.iter_mut().zip(row) {
            *g += u;
        }
    }
}

// ---------------------------------------------------------------- dense ----

pub(crate) fn check_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape("dense", x.shape(), w.shape()));
    }
    if b.shape() != [w.shape()[1]] {
        return Err(Error::shape("dense bias", w.shape(), b.shape()));
    }
    Ok((x.shape()[0], w.shape()[0], w.shape()[1]))
}

/// `out[n, j] = sum_i x[n, i] * w[i, j] + b[j]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check_dense(x, w, b)?;
    let mut out = vec![0.0; n * dout];
    gemm(
        n,
        din,
        dout,
        x.data(),
        false,
        w.data(),
        false,
        0.0,
        &mut out,
    );
    add_row_bias(&mut out, b.data());
    Tensor::new(vec![n, dout], out)
}

pub(crate) struct DenseGrads<'a> {
    pub x: Option<&'a mut [f64]>,
    pub w: Option<&'a mut [f64]>,
    pub b: Option<&'a mut [f64]>,
}

pub(crate) fn dense_backward(x: &Tensor, w: &Tensor, upstream: &[f64], grads: DenseGrads<'_>) {
    let (n, din, dout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    if let Some(gw) = grads.w {
        gemm(din, n, dout, x.data(), true, upstream, false, 1.0, gw);
    }
    if let Some(gb) = grads.b {
        accumulate_column_sums(gb, upstream);
    }
    if let Some(gx) = grads.x {
        gemm(n, dout, din, upstream, false, w.data(), true, 1.0, gx);
    }
}

// --------------------------------------------------------------- conv2d ----

/// Geometry of a valid (unpadded) NHWC cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], filters: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 || filters.len() != 4 || input[3] != filters[3] {
            return Err(Error::shape("conv2d", input, filters));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let (h, w) = (input[1], input[2]);
        let (kh, kw) = (filters[1], filters[2]);
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::shape(
                "conv2d kernel larger than input",
                input,
                filters,
            ));
        }
        Ok(Self {
            batch: input[0],
            height: h,
            width: w,
            channels: input[3],
            filters: filters[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.filters]
    }
}

/// Unrolls every receptive field into a row: `[positions x patch_len]`.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let row_span = g.kernel_w * g.channels;
    let mut cols = vec![0.0; g.positions() * patch];
    let mut dst = 0;
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                for i in 0..g.kernel_h {
                    let src =
                        ((n * g.height + oh * g.stride + i) * g.width + ow * g.stride) * g.channels;
                    cols[dst..dst + row_span].copy_from_slice(&x[src..src + row_span]);
                    dst += row_span;
                }
            }
        }
    }
    cols
}

fn col2im_accumulate(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let row_span = g.kernel_w * g.channels;
    let mut src = 0;
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                for i in 0..g.kernel_h {
                    let dst =
                        ((n * g.height + oh * g.stride + i) * g.width + ow * g.stride) * g.channels;
                    for (d, c) in dx[dst..dst + row_span]
                        .iter_mut()
                        .zip(&cols[src..src + row_span])
                    {
                        *d += c;
                    }
                    src += row_span;
                }
            }
        }
    }
}

pub(crate) fn conv2d_with_cols(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(Tensor, ConvGeometry, Vec<f64>)> {
    let g = ConvGeometry::new(x.shape(), filters.shape(), stride)?;
    if bias.shape() != [g.filters] {
        return Err(Error::shape("conv2d bias", filters.shape(), bias.shape()));
    }
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; g.positions() * g.filters];
    gemm(
        g.positions(),
        g.patch_len(),
        g.filters,
        &cols,
        false,
        filters.data(),
        true,
        0.0,
        &mut out,
    );
    add_row_bias(&mut out, bias.data());
    Ok((Tensor::new(g.output_shape(), out)?, g, cols))
}

/// Valid cross-correlation of an NHWC batch with `K x kh x kw x C` filters.
pub fn conv2d(x: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    conv2d_with_cols(x, filters, bias, stride).map(|(out, _, _)| out)
}

pub(crate) struct ConvGrads<'a> {
    pub x: Option<&'a mut [f64]>,
    pub filters: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    cols: &[f64],
    filters: &Tensor,
    upstream: &[f64],
    grads: ConvGrads<'_>,
) {
    let (positions, patch, k) = (g.positions(), g.patch_len(), g.filters);
    if let Some(gf) = grads.filters {
        gemm(k, positions, patch, upstream, true, cols, false, 1.0, gf);
    }
    if let Some(gb) = grads.bias {
        accumulate_column_sums(gb, upstream);
    }
    if let Some(gx) = grads.x {
        let mut dcols = vec![0.0; positions * patch];
        gemm(
            positions,
            k,
            patch,
            upstream,
            false,
            filters.data(),
            false,
            0.0,
            &mut dcols,
        );
        col2im_accumulate(&dcols, g, gx);
    }
}

// ------------------------------------------------------------ maxpool2d ----

pub(crate) fn maxpool2d_with_argmax(
    x: &Tensor,
    pool: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let (ph, pw) = pool;
    if ph == 0 || pw == 0 {
        return Err(Error::Argument("pool dimensions must be positive".into()));
    }
    let s = x.shape();
    if s.len() != 4 || ph > s[1] || pw > s[2] {
        return Err(Error::shape("maxpool2d", s, &[ph, pw]));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / ph, w / pw);
    let data = x.data();
    let mut out = vec![f64::NEG_INFINITY; n * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for r in 0..oh {
            for q in 0..ow {
                let base = ((b * oh + r) * ow + q) * c;
                let (best, arg) = (&mut out[base..base + c], &mut argmax[base..base + c]);
                let mut first = true;
                for i in 0..ph {
                    for j in 0..pw {
                        let src = ((b * h + r * ph + i) * w + q * pw + j) * c;
                        for ch in 0..c {
                            let v = data[src + ch];
                            // strict comparison keeps the first row-major maximum on ties
                            if first || v > best[ch] {
                                best[ch] = v;
                                arg[ch] = src + ch;
                            }
                        }
                        first = false;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, oh, ow, c], out)?, argmax))
}

/// Non-overlapping max pooling (stride equals the window); remainders are dropped.
pub fn maxpool2d(x: &Tensor, pool: (usize, usize)) -> Result<Tensor> {
    maxpool2d_with_argmax(x, pool).map(|(out, _)| out)
}

pub(crate) fn maxpool2d_backward(argmax: &[usize], upstream: &[f64], gx: &mut [f64]) {
    for (&src, &u) in argmax.iter().zip(upstream) {
        gx[src] += u;
    }
}

// ------------------------------------------------- fused conv/relu/pool ----

/// What the backward pass of [`conv2d_relu_maxpool`] needs.
#[derive(Clone, Debug)]
pub(crate) struct ConvPoolCache {
    pub geometry: ConvGeometry,
    /// Unrolled patches of the pooled convolution positions, window by window.
    pub cols: Vec<f64>,
    /// Input offset of the top-left element of each patch row in `cols`.
    pub origins: Vec<usize>,
    /// For each output element, the `cols` row holding its maximum.
    pub argmax: Vec<usize>,
}

/// `maxpool(relu(conv2d(x)))` computed as `relu(maxpool(conv2d(x)))`, which is
/// equal because relu is monotone. Only convolution positions read by some
/// pooling window are evaluated. Ties resolve to the first row-major maximum.
pub(crate) fn conv2d_relu_maxpool(
    x: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    pool: (usize, usize),
) -> Result<(Tensor, ConvPoolCache)> {
    let g = ConvGeometry::new(x.shape(), filters.shape(), stride)?;
    if bias.shape() != [g.filters] {
        return Err(Error::shape("conv2d bias", filters.shape(), bias.shape()));
    }
    let (ph, pw) = pool;
    if ph == 0 || pw == 0 {
        return Err(Error::Argument("pool dimensions must be positive".into()));
    }
    if ph > g.out_h || pw > g.out_w {
        return Err(Error::shape("maxpool2d", &g.output_shape(), &[ph, pw]));
    }
    let (oh, ow, k) = (g.out_h / ph, g.out_w / pw, g.filters);
    let window = ph * pw;
    let patch = g.patch_len();
    let row_span = g.kernel_w * g.channels;
    let rows = g.batch * oh * ow * window;

    let mut cols = Vec::with_capacity(rows * patch);
    let mut origins = Vec::with_capacity(rows);
    let xd = x.data();
    for n in 0..g.batch {
        for r in 0..oh {
            for q in 0..ow {
                for i in 0..ph {
                    for j in 0..pw {
                        let (ch, cw) = ((r * ph + i) * g.stride, (q * pw + j) * g.stride);
                        let origin = ((n * g.height + ch) * g.width + cw) * g.channels;
                        origins.push(origin);
                        for a in 0..g.kernel_h {
                            let src = origin + a * g.width * g.channels;
                            cols.extend(xd[src..src + row_span].iter().copied());
                        }
                    }
                }
            }
        }
    }

    let outputs = g.batch * oh * ow;
    let mut out = vec![0.0; outputs * k];
    let mut argmax = vec![0usize; outputs * k];
    // filter-major weights `[patch x k]`: one patch element scales a run of filters
    let mut wt = vec![0.0; patch * k];
    for (f, w) in filters.data().chunks_exact(patch).enumerate() {
        for (e, &v) in w.iter().enumerate() {
            wt[e * k + f] = v;
        }
    }
    window_max(&cols, &wt, k, patch, window, &mut out, &mut argmax);
    for row in out.chunks_exact_mut(k) {
        for (y, b) in row.iter_mut().zip(bias.data()) {
            *y = (*y + b).max(0.0);
        }
    }
    let cache = ConvPoolCache {
        geometry: g,
        cols,
        origins,
        argmax,
    };
    Ok((Tensor::new(vec![g.batch, oh, ow, k], out)?, cache))
}

/// For every window of `window` consecutive patch rows, the per-filter maximum
/// of `patch . filter` and the row attaining it (first on ties).
///
/// Each output sums its products in patch order on every dispatch target, so
/// the wider instruction sets only change speed, never values.
fn window_max(
    cols: &[f64],
    wt: &[f64],
    k: usize,
    patch: usize,
    window: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { window_max_avx512(cols, wt, k, patch, window, out, argmax) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { window_max_avx2(cols, wt, k, patch, window, out, argmax) };
        }
    }
    window_max_portable(cols, wt, k, patch, window, out, argmax)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn window_max_avx512(
    cols: &[f64],
    wt: &[f64],
    k: usize,
    patch: usize,
    window: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    window_max_portable(cols, wt, k, patch, window, out, argmax)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn window_max_avx2(
    cols: &[f64],
    wt: &[f64],
    k: usize,
    patch: usize,
    window: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    window_max_portable(cols, wt, k, patch, window, out, argmax)
}

#[inline(always)]
fn window_max_portable(
    cols: &[f64],
    wt: &[f64],
    k: usize,
    patch: usize,
    window: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let mut acc = vec![0.0; k];
    let windows = cols.chunks_exact(window * patch);
    for (w, ((rows, best), arg)) in windows
        .zip(out.chunks_exact_mut(k))
        .zip(argmax.chunks_exact_mut(k))
        .enumerate()
    {
        for (p, row) in rows.chunks_exact(patch).enumerate() {
            let mut terms = row.iter().zip(wt.chunks_exact(k));
            if let Some((&v, ws)) = terms.next() {
                for (a, &x) in acc.iter_mut().zip(ws) {
                    *a = v * x;
                }
            }
            for (&v, ws) in terms {
                for (a, &x) in acc.iter_mut().zip(ws) {
                    *a += v * x;
                }
            }
            let position = w * window + p;
            if p == 0 {
                best.copy_from_slice(&acc);
                arg.fill(position);
                continue;
            }
            // `>` keeps the earliest position on ties
            for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(&acc) {
                if v > *b {
                    *b = v;
                    *a = position;
                }
            }
        }
    }
}

/// Routes each output gradient (where the relu is active) to the filters,
/// bias and input of the patch that produced the window maximum.
///
/// Outputs are visited in index order on every dispatch target, so each
/// gradient entry accumulates its terms in the same order.
pub(crate) fn conv2d_relu_maxpool_backward(
    cache: &ConvPoolCache,
    filters: &Tensor,
    out: &[f64],
    upstream: &[f64],
    grads: ConvGrads<'_>,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { route_avx512(cache, filters.data(), out, upstream, grads) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { route_avx2(cache, filters.data(), out, upstream, grads) };
        }
    }
    route_portable(cache, filters.data(), out, upstream, grads)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn route_avx512(
    cache: &ConvPoolCache,
    wd: &[f64],
    out: &[f64],
    upstream: &[f64],
    grads: ConvGrads<'_>,
) {
    route_portable(cache, wd, out, upstream, grads)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn route_avx2(
    cache: &ConvPoolCache,
    wd: &[f64],
    out: &[f64],
    upstream: &[f64],
    grads: ConvGrads<'_>,
) {
    route_portable(cache, wd, out, upstream, grads)
}

#[inline(always)]
fn route_portable(
    cache: &ConvPoolCache,
    wd: &[f64],
    out: &[f64],
    upstream: &[f64],
    grads: ConvGrads<'_>,
) {
    let g = &cache.geometry;
    let (k, patch) = (g.filters, g.patch_len());
    let row_span = g.kernel_w * g.channels;
    let line = g.width * g.channels;
    let ConvGrads {
        x: mut gx,
        filters: mut gf,
        bias: mut gb,
    } = grads;
    let cells = upstream
        .chunks_exact(k)
        .zip(out.chunks_exact(k))
        .zip(cache.argmax.chunks_exact(k));
    for ((ups, ys), args) in cells {
        for (f, ((&u, &y), &p)) in ups.iter().zip(ys).zip(args).enumerate() {
            if u == 0.0 || y <= 0.0 {
                continue;
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[f] += u;
            }
            if let Some(gf) = gf.as_deref_mut() {
                let dst = &mut gf[f * patch..(f + 1) * patch];
                let src = &cache.cols[p * patch..(p + 1) * patch];
                for (d, c) in dst.iter_mut().zip(src) {
                    *d += u * c;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let origin = cache.origins[p];
                let w = &wd[f * patch..(f + 1) * patch];
                for (a, ws) in w.chunks_exact(row_span).enumerate() {
                    let start = origin + a * line;
                    for (d, wv) in gx[start..start + row_span].iter_mut().zip(ws) {
                        *d += u * wv;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------- activations ----

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

// ---------------------------------------------------------------- losses ----

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean of squared differences over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

pub(crate) fn check_labels(y: &Tensor) -> Result<()> {
    if let Some(bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!(
            "binary cross-entropy label {bad} is not 0 or 1"
        )));
    }
    Ok(())
}

/// Binary cross-entropy of probabilities `p` against `{0,1}` targets `y`.
pub fn bce(p: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("bce", p, y)?;
    check_labels(y)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / p.len() as f64)
}

pub(crate) fn bce_grad(p: f64, y: f64, n: f64) -> f64 {
    if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
        return 0.0;
    }
    (-y / p + (1.0 - y) / (1.0 - p)) / n
}

/// `KL(N(mu, sigma^2) || N(0, 1))` summed over independent components.
pub fn kl_gaussian_standard(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape(
            "kl_gaussian_standard",
            &[mu.len()],
            &[sigma.len()],
        ));
    }
    if let Some(s) = sigma.iter().find(|&&s| s <= 0.0 || s.is_nan()) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let var = s * s;
            0.5 * (m * m + var - 1.0 - var.ln())
        })
        .sum())
}

/// Same divergence parameterised by log-variance, as the VAE heads emit it.
pub fn kl_standard_from_log_var(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Sum of absolute values across all listed tensors.
pub fn penalty_l1<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    params
        .into_iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.abs())
        .sum()
}

/// Subgradient of `|x|`, zero at exactly zero.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_arithmetic() {
        let out = dense(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        let out = dense(
            &t(&[1, 2], &[1.0, 1.0]),
            &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[2], &[1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let err = dense(
            &Tensor::zeros([2, 3]),
            &Tensor::zeros([4, 5]),
            &Tensor::zeros([5]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn gemm_transposed_operands() {
        // a^T stored as 3x2, b^T stored as 2x3
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b_t = [1.0, 0.0, 2.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a_t, true, &b_t, true, 0.0, &mut c);
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[2,0]]
        assert_eq!(c, [7.0, 2.0, 16.0, 5.0]);
    }

    #[test]
    fn conv_identity_and_ones() {
        let out = conv2d(
            &t(&[1, 1, 1, 1], &[7.0]),
            &t(&[1, 1, 1, 1], &[1.0]),
            &t(&[1], &[0.0]),
            1,
        )
        .unwrap();
        assert_eq!(out.data(), &[7.0]);
        let out = conv2d(
            &Tensor::full([1, 3, 3, 1], 1.0),
            &Tensor::full([1, 2, 2, 1], 1.0),
            &Tensor::zeros([1]),
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 1]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_output_size_formula() {
        let g = ConvGeometry::new(&[1, 20, 20, 1], &[100, 2, 6, 1], 1).unwrap();
        assert_eq!(g.output_shape(), vec![1, 19, 15, 100]);
        let g = ConvGeometry::new(&[1, 7, 9, 1], &[1, 3, 2, 1], 2).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 4));
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let err = conv2d(
            &Tensor::zeros([1, 2, 2, 1]),
            &Tensor::zeros([1, 3, 1, 1]),
            &Tensor::zeros([1]),
            1,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn maxpool_cases() {
        let out = maxpool2d(&t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), (2, 2)).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let out = maxpool2d(&Tensor::zeros([1, 19, 15, 100]), (2, 6)).unwrap();
        assert_eq!(out.shape(), &[1, 9, 2, 100]);
        let out = maxpool2d(&Tensor::full([2, 4, 4, 3], 2.5), (2, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        assert!(matches!(
            maxpool2d(&Tensor::zeros([1, 2, 2, 1]), (0, 1)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let (_, argmax) = maxpool2d_with_argmax(&Tensor::full([1, 2, 2, 1], 1.0), (2, 2)).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(36.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-36.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-1000.0).is_finite() && sigmoid_scalar(1000.0).is_finite());
        assert_eq!(relu(&t(&[1], &[-1.0])).data(), &[0.0]);
    }

    #[test]
    fn loss_hand_values() {
        let a = t(&[2], &[0.0, 0.0]);
        let b = t(&[2], &[1.0, 1.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        let half = Tensor::full([4], 0.5);
        let y = t(&[4], &[0.0, 1.0, 1.0, 0.0]);
        assert!((bce(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(&y, &y).unwrap() <= 1e-6);
        assert!(matches!(
            bce(&half, &Tensor::full([4], 0.3)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_and_l1_hand_values() {
        assert_eq!(kl_gaussian_standard(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_gaussian_standard(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_standard(&[0.0], &[0.0]).is_err());
        assert!(kl_gaussian_standard(&[0.0], &[-1.0]).is_err());
        assert_eq!(penalty_l1([&t(&[3], &[1.0, -2.0, 3.0])]), 6.0);
        assert_eq!(penalty_l1([&Tensor::zeros([5])]), 0.0);
    }
}

//! Flat-buffer numeric kernels behind the graph ops.
//!
//! Parallelism rule: a kernel may split work across threads only along
//! disjoint output regions, and every output element is reduced in a fixed
//! sequential order. That keeps results bit-identical for any `--threads`
//! setting.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// Below this flop count a matmul stays single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;
/// K-panel size: keeps the active slice of `b` cache-resident while every
/// output row sweeps it.
const K_BLOCK: usize = 128;

#[inline]
fn row_block(m: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    (m / (threads * 4)).max(1)
}

fn matmul_acc_body<T: Scalar>(
    a: &[T],
    b: &[T],
    c_block: &mut [T],
    i0: usize,
    k: usize,
    n: usize,
) {
    let rows = c_block.len() / n;
    let mut kb = 0;
    while kb < k {
        let kend = (kb + K_BLOCK).min(k);
        for r in 0..rows {
            let a_row = &a[(i0 + r) * k..][..k];
            let c_row = &mut c_block[r * n..][..n];
            for kk in kb..kend {
                let aik = a_row[kk];
                let b_row = &b[kk * n..][..n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + aik * bv;
                }
            }
        }
        kb = kend;
    }
}

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if 2 * m * k * n < PAR_FLOP_THRESHOLD {
        matmul_acc_body(a, b, c, 0, k, n);
    } else {
        let rb = row_block(m);
        c.par_chunks_mut(rb * n)
            .enumerate()
            .for_each(|(bi, cb)| matmul_acc_body(a, b, cb, bi * rb, k, n));
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
///
/// Streams `b` row-wise per output row; intended for a `b` that fits in
/// last-level cache.
fn matmul_at_body<T: Scalar>(a: &[T], b: &[T], c_block: &mut [T], i0: usize, m: usize, k: usize, n: usize) {
    let rows = c_block.len() / n;
    for r in 0..rows {
        let i = i0 + r;
        let c_row = &mut c_block[r * n..][..n];
        for kk in 0..k {
            let aki = a[kk * m + i];
            let b_row = &b[kk * n..][..n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aki * bv;
            }
        }
    }
}

pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if 2 * m * k * n < PAR_FLOP_THRESHOLD {
        matmul_at_body(a, b, c, 0, m, k, n);
    } else {
        let rb = row_block(m);
        c.par_chunks_mut(rb * n)
            .enumerate()
            .for_each(|(bi, cb)| matmul_at_body(a, b, cb, bi * rb, m, k, n));
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (each output element is a row dot product)
fn matmul_bt_body<T: Scalar>(a: &[T], b: &[T], c_block: &mut [T], i0: usize, k: usize, n: usize) {
    let rows = c_block.len() / n;
    for r in 0..rows {
        let a_row = &a[(i0 + r) * k..][..k];
        let c_row = &mut c_block[r * n..][..n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..][..k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    }
}

pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if 2 * m * k * n < PAR_FLOP_THRESHOLD {
        matmul_bt_body(a, b, c, 0, k, n);
    } else {
        let rb = row_block(m);
        c.par_chunks_mut(rb * n)
            .enumerate()
            .for_each(|(bi, cb)| matmul_bt_body(a, b, cb, bi * rb, k, n));
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn infer(input: &Shape, weight: &Shape, stride: usize, pad: usize) -> Result<ConvDims> {
        let (n, c_in, h, w) = input.nchw()?;
        let (c_out, wc_in, kh, kw) = weight.nchw()?;
        if c_in != wc_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Gather one sample into patch-major layout: cols[(c,ky,kx), (oy,ox)].
/// Serial: conv kernels parallelize across samples, not inside them.
pub fn im2col<T: Scalar>(x: &[T], d: &ConvDims, cols: &mut [T]) {
    let how = d.spatial_out();
    debug_assert_eq!(cols.len(), d.patch() * how);
    debug_assert_eq!(x.len(), d.c_in * d.h * d.w);
    cols.chunks_mut(how).enumerate().for_each(|(row, out)| {
        let c = row / (d.kh * d.kw);
        let ky = (row / d.kw) % d.kh;
        let kx = row % d.kw;
        let plane = &x[c * d.h * d.w..][..d.h * d.w];
        for oy in 0..d.h_out {
            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
            let dst = &mut out[oy * d.w_out..][..d.w_out];
            if iy < 0 || iy >= d.h as isize {
                for v in dst.iter_mut() {
                    *v = T::zero();
                }
                continue;
            }
            let src_row = &plane[iy as usize * d.w..][..d.w];
            for (ox, v) in dst.iter_mut().enumerate() {
                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                *v = if ix < 0 || ix >= d.w as isize {
                    T::zero()
                } else {
                    src_row[ix as usize]
                };
            }
        }
    });
}

/// Like [`im2col`] but emits the transpose, colsT[(oy,ox), (c,ky,kx)]; the
/// weight-gradient GEMM wants patch-minor layout so its inner loops stay
/// vectorizable saxpy sweeps instead of latency-bound dot products.
fn im2col_t<T: Scalar>(x: &[T], d: &ConvDims, cols_t: &mut [T]) {
    let patch = d.patch();
    debug_assert_eq!(cols_t.len(), d.spatial_out() * patch);
    for oy in 0..d.h_out {
        for ox in 0..d.w_out {
            let row = &mut cols_t[(oy * d.w_out + ox) * patch..][..patch];
            let mut idx = 0;
            for c in 0..d.c_in {
                let plane = &x[c * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        for _ in 0..d.kw {
                            row[idx] = T::zero();
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..][..d.w];
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        row[idx] = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Forward conv for the whole batch, parallel across samples. Each output
/// element is produced by exactly one thread with a fixed reduction order,
/// so results are thread-count independent.
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    let how = d.spatial_out();
    let patch = d.patch();
    let in_sz = d.c_in * d.h * d.w;
    out.par_chunks_mut(d.c_out * how)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x_s = &x[s * in_sz..][..in_sz];
            if let Some(b) = bias {
                for (o, row) in out_s.chunks_mut(how).enumerate() {
                    for v in row.iter_mut() {
                        *v = b[o];
                    }
                }
            } else {
                for v in out_s.iter_mut() {
                    *v = T::zero();
                }
            }
            let mut cols = vec![T::zero(); patch * how];
            im2col(x_s, d, &mut cols);
            matmul_acc_body(weight, &cols, out_s, 0, patch, how);
        });
}

/// Backward conv, parallel across samples. Per-sample weight/bias partials
/// are reduced sequentially in sample order afterward, keeping sums
/// bit-identical for any thread count. Each gradient output is optional so
/// callers skip work for leaves that do not require grad.
pub fn conv2d_bwd<T: Scalar>(
    x: &[T],
    weight: &[T],
    g_out: &[T],
    d: &ConvDims,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let how = d.spatial_out();
    let patch = d.patch();
    let in_sz = d.c_in * d.h * d.w;
    let need_dw = dw.is_some();
    let need_db = db.is_some();

    let process = |s: usize, dx_s: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let g_s = &g_out[s * d.c_out * how..][..d.c_out * how];
        let mut dw_s = Vec::new();
        let mut db_s = Vec::new();
        if need_db {
            db_s = vec![T::zero(); d.c_out];
            for (o, row) in g_s.chunks(how).enumerate() {
                let mut acc = T::zero();
                for &v in row {
                    acc = acc + v;
                }
                db_s[o] = acc;
            }
        }
        if need_dw {
            let x_s = &x[s * in_sz..][..in_sz];
            let mut cols_t = vec![T::zero(); how * patch];
            im2col_t(x_s, d, &mut cols_t);
            dw_s = vec![T::zero(); d.c_out * patch];
            // dw[o,:] += sum_t g[o,t] * colsT[t,:]
            matmul_acc_body(g_s, &cols_t, &mut dw_s, 0, how, patch);
        }
        if let Some(dx_s) = dx_s {
            let mut dcols = vec![T::zero(); patch * how];
            // dcols[j,:] += sum_o W[o,j] * g[o,:]
            matmul_at_body(weight, g_s, &mut dcols, 0, patch, d.c_out, how);
            col2im_acc(&dcols, d, dx_s);
        }
        (dw_s, db_s)
    };
    // dx slices are disjoint per sample; dwt/db partials come back per sample
    let partials: Vec<(Vec<T>, Vec<T>)> = match dx {
        Some(buf) => buf
            .par_chunks_mut(in_sz)
            .enumerate()
            .map(|(s, dx_s)| process(s, Some(dx_s)))
            .collect(),
        None => (0..d.n)
            .into_par_iter()
            .map(|s| process(s, None))
            .collect(),
    };

    if let Some(dw) = dw {
        for (dw_s, _) in &partials {
            for (v, &p) in dw.iter_mut().zip(dw_s) {
                *v = *v + p;
            }
        }
    }
    if let Some(db) = db {
        for (_, db_s) in &partials {
            for (o, v) in db.iter_mut().enumerate() {
                *v = *v + db_s[o];
            }
        }
    }
}

/// Scatter patch-gradients back onto the input plane (gather formulation:
/// each input pixel sums the kernel positions that read it). Serial within
/// one sample.
fn col2im_acc<T: Scalar>(dcols: &[T], d: &ConvDims, dx: &mut [T]) {
    let how = d.spatial_out();
    dx.chunks_mut(d.h * d.w).enumerate().for_each(|(c, plane)| {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &dcols[((c * d.kh + ky) * d.kw + kx) * how..][..how];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        plane[base + ix as usize] =
                            plane[base + ix as usize] + row[oy * d.w_out + ox];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

pub fn avg_pool2d_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<(Vec<T>, usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::dim("avg_pool2d: window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::dim(format!(
            "avg_pool2d: window {window} larger than spatial extent {h}x{w}"
        )));
    }
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let inv = T::from_f64(1.0 / (window * window) as f64);
    let mut out = vec![T::zero(); n * c * h_out * w_out];
    out.par_chunks_mut(h_out * w_out)
        .enumerate()
        .for_each(|(pc, plane_out)| {
            let plane = &x[pc * h * w..][..h * w];
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = T::zero();
                    for dy in 0..window {
                        let row = &plane[(oy * stride + dy) * w + ox * stride..][..window];
                        for &v in row {
                            acc = acc + v;
                        }
                    }
                    plane_out[oy * w_out + ox] = acc * inv;
                }
            }
        });
    Ok((out, h_out, w_out))
}

pub fn avg_pool2d_bwd<T: Scalar>(
    g: &[T],
    dx: &mut [T],
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    window: usize,
    stride: usize,
) {
    let inv = T::from_f64(1.0 / (window * window) as f64);
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pc, plane)| {
        let g_plane = &g[pc * h_out * w_out..][..h_out * w_out];
        for oy in 0..h_out {
            for ox in 0..w_out {
                let gv = g_plane[oy * w_out + ox] * inv;
                for dy in 0..window {
                    let row = &mut plane[(oy * stride + dy) * w + ox * stride..][..window];
                    for v in row.iter_mut() {
                        *v = *v + gv;
                    }
                }
            }
        }
    });
}

pub fn upsample2x_fwd<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    out.par_chunks_mut(4 * h * w).enumerate().for_each(|(pc, po)| {
        let plane = &x[pc * h * w..][..h * w];
        for y in 0..2 * h {
            let src = &plane[(y / 2) * w..][..w];
            let dst = &mut po[y * 2 * w..][..2 * w];
            for x2 in 0..2 * w {
                dst[x2] = src[x2 / 2];
            }
        }
    });
    out
}

pub fn upsample2x_bwd<T: Scalar>(g: &[T], dx: &mut [T], h: usize, w: usize) {
    // dx has planes of h*w; g has planes of 4*h*w
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pc, plane)| {
        let gp = &g[pc * 4 * h * w..][..4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in 0..2 {
                    let row = &gp[(2 * y + dy) * 2 * w..][..2 * w];
                    acc = acc + row[2 * x] + row[2 * x + 1];
                }
                plane[y * w + x] = plane[y * w + x] + acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax over the channel axis
// ---------------------------------------------------------------------------

/// x viewed as [outer, channels, inner]; softmax over the middle axis.
pub fn softmax_channel_fwd<T: Scalar>(x: &[T], _outer: usize, channels: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    out.par_chunks_mut(channels * inner)
        .enumerate()
        .for_each(|(o, ob)| {
            let xb = &x[o * channels * inner..][..channels * inner];
            for i in 0..inner {
                let mut mx = xb[i];
                for c in 1..channels {
                    mx = mx.max_s(xb[c * inner + i]);
                }
                let mut z = T::zero();
                for c in 0..channels {
                    let e = (xb[c * inner + i] - mx).exp();
                    ob[c * inner + i] = e;
                    z = z + e;
                }
                let inv = T::one() / z;
                for c in 0..channels {
                    ob[c * inner + i] = ob[c * inner + i] * inv;
                }
            }
        });
    out
}

/// dx = p * (g - sum_c(g*p)) along the channel axis.
pub fn softmax_channel_bwd<T: Scalar>(
    p: &[T],
    g: &[T],
    dx: &mut [T],
    outer: usize,
    channels: usize,
    inner: usize,
) {
    let _ = outer;
    dx.par_chunks_mut(channels * inner)
        .enumerate()
        .for_each(|(o, db)| {
            let pb = &p[o * channels * inner..][..channels * inner];
            let gb = &g[o * channels * inner..][..channels * inner];
            for i in 0..inner {
                let mut dot = T::zero();
                for c in 0..channels {
                    dot = dot + pb[c * inner + i] * gb[c * inner + i];
                }
                for c in 0..channels {
                    let idx = c * inner + i;
                    db[idx] = db[idx] + pb[idx] * (gb[idx] - dot);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// broadcasting / reduction helpers
// ---------------------------------------------------------------------------

/// NumPy-style right-aligned broadcast shape of two operands.
pub fn broadcast_shape(a: &Shape, b: &Shape) -> Result<Shape> {
    let ra = a.rank();
    let rb = b.rank();
    let r = ra.max(rb);
    let mut dims = vec![0usize; r];
    for i in 0..r {
        let da = if i >= r - ra { a[i - (r - ra)] } else { 1 };
        let db = if i >= r - rb { b[i - (r - rb)] } else { 1 };
        dims[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} with {:?}",
                a.dims(),
                b.dims()
            )));
        };
    }
    Ok(Shape::new(&dims))
}

/// Strides of `shape` right-aligned into `out_rank` dims, with 0 stride on
/// broadcast axes.
fn bcast_strides(shape: &Shape, out: &Shape) -> Vec<usize> {
    let r = out.rank();
    let off = r - shape.rank();
    let s = shape.strides();
    let mut out_s = vec![0usize; r];
    for i in 0..shape.rank() {
        out_s[off + i] = if shape[i] == 1 { 0 } else { s[i] };
    }
    out_s
}

/// When `small` broadcasts against `out` with its true dims leading and all
/// trailing axes broadcast (e.g. [N,C,1,1] against [N,C,H,W]), every index
/// maps as `i / tail`; returns that tail length.
fn suffix_broadcast_tail(small: &Shape, out: &Shape) -> Option<usize> {
    let off = out.rank() - small.rank();
    let mut matched = small.rank();
    while matched > 0 && small[matched - 1] == 1 {
        matched -= 1;
    }
    for i in 0..matched {
        if small[i] != out[off + i] {
            return None;
        }
    }
    if off != 0 {
        return None;
    }
    Some(out.dims()[matched..].iter().product())
}

/// When `small` broadcasts against `out` with leading axes broadcast and its
/// true dims trailing (e.g. bias [D] against [N,D]), indices map as
/// `i % small.numel()`.
fn prefix_broadcast_len(small: &Shape, out: &Shape) -> Option<usize> {
    let off = out.rank() - small.rank();
    let mut lead = 0;
    while lead < small.rank() && small[lead] == 1 {
        lead += 1;
    }
    for i in lead..small.rank() {
        if small[i] != out[off + i] {
            return None;
        }
    }
    let n: usize = small.dims()[lead..].iter().product();
    if out.dims()[..off + lead].iter().product::<usize>() * n != out.numel() {
        return None;
    }
    Some(n)
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_binary<T: Scalar>(
    a: &[T],
    ash: &Shape,
    b: &[T],
    bsh: &Shape,
    f: impl Fn(T, T) -> T + Sync,
) -> Result<(Shape, Vec<T>)> {
    let out_shape = broadcast_shape(ash, bsh)?;
    let n = out_shape.numel();
    let mut out = vec![T::zero(); n];
    if ash == bsh {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
        return Ok((out_shape, out));
    }
    if bsh.numel() == 1 {
        let y = b[0];
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x, y);
        }
        return Ok((out_shape, out));
    }
    if ash.numel() == 1 {
        let x = a[0];
        for (o, &y) in out.iter_mut().zip(b) {
            *o = f(x, y);
        }
        return Ok((out_shape, out));
    }
    // one-sided fast paths: the full-size operand indexes linearly
    if ash == &out_shape {
        if let Some(tail) = suffix_broadcast_tail(bsh, &out_shape) {
            for (block, (ob, ab)) in out.chunks_mut(tail).zip(a.chunks(tail)).enumerate() {
                let y = b[block];
                for (o, &x) in ob.iter_mut().zip(ab) {
                    *o = f(x, y);
                }
            }
            return Ok((out_shape, out));
        }
        if let Some(len) = prefix_broadcast_len(bsh, &out_shape) {
            for (ob, ab) in out.chunks_mut(len).zip(a.chunks(len)) {
                for ((o, &x), &y) in ob.iter_mut().zip(ab).zip(b) {
                    *o = f(x, y);
                }
            }
            return Ok((out_shape, out));
        }
    }
    if bsh == &out_shape {
        if let Some(tail) = suffix_broadcast_tail(ash, &out_shape) {
            for (block, (ob, bb)) in out.chunks_mut(tail).zip(b.chunks(tail)).enumerate() {
                let x = a[block];
                for (o, &y) in ob.iter_mut().zip(bb) {
                    *o = f(x, y);
                }
            }
            return Ok((out_shape, out));
        }
        if let Some(len) = prefix_broadcast_len(ash, &out_shape) {
            for (ob, bb) in out.chunks_mut(len).zip(b.chunks(len)) {
                for ((o, &y), &x) in ob.iter_mut().zip(bb).zip(a) {
                    *o = f(x, y);
                }
            }
            return Ok((out_shape, out));
        }
    }
    let sa = bcast_strides(ash, &out_shape);
    let sb = bcast_strides(bsh, &out_shape);
    let dims = out_shape.dims().to_vec();
    let r = dims.len();
    let mut idx = vec![0usize; r];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(a[ia], b[ib]);
        // increment the rightmost index, carrying
        for ax in (0..r).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * dims[ax];
            ib -= sb[ax] * dims[ax];
        }
    }
    Ok((out_shape, out))
}

/// Sum `g` (shaped `gsh`) down to `target` by collapsing broadcast axes.
pub fn reduce_to_shape<T: Scalar>(g: &[T], gsh: &Shape, target: &Shape) -> Vec<T> {
    if gsh == target {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); target.numel()];
    if target.numel() == 1 {
        let mut acc = T::zero();
        for &v in g {
            acc = acc + v;
        }
        out[0] = acc;
        return out;
    }
    if let Some(tail) = suffix_broadcast_tail(target, gsh) {
        for (o, block) in out.iter_mut().zip(g.chunks(tail)) {
            let mut acc = T::zero();
            for &v in block {
                acc = acc + v;
            }
            *o = *o + acc;
        }
        return out;
    }
    if let Some(len) = prefix_broadcast_len(target, gsh) {
        debug_assert_eq!(len, target.numel());
        for block in g.chunks(len) {
            for (o, &v) in out.iter_mut().zip(block) {
                *o = *o + v;
            }
        }
        return out;
    }
    let st = bcast_strides(target, gsh);
    let dims = gsh.dims().to_vec();
    let r = dims.len();
    let mut idx = vec![0usize; r];
    let mut it = 0usize;
    for &v in g {
        out[it] = out[it] + v;
        for ax in (0..r).rev() {
            idx[ax] += 1;
            it += st[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            idx[ax] = 0;
            it -= st[ax] * dims[ax];
        }
    }
    out
}

/// Sum over `axes` (keepdims). Returns (reduced shape, data, element count per
/// output cell).
pub fn reduce_sum_axes<T: Scalar>(
    x: &[T],
    shape: &Shape,
    axes: &[usize],
) -> Result<(Shape, Vec<T>, usize)> {
    let r = shape.rank();
    for &a in axes {
        if a >= r {
            return Err(Error::dim(format!(
                "reduce axis {a} out of range for rank {r}"
            )));
        }
    }
    let mut dims = shape.dims().to_vec();
    let mut count = 1usize;
    for &a in axes {
        count *= dims[a];
        dims[a] = 1;
    }
    let out_shape = Shape::new(&dims);
    let out = reduce_to_shape(x, shape, &out_shape);
    Ok((out_shape, out, count))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_variants_match_naive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(3, 4, 5), (17, 33, 9), (64, 130, 40)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // a^T path: at[k,m]
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a[i * k + kk];
                }
            }
            let mut c = vec![0.0; m * n];
            matmul_at_acc(&at, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // b^T path: bt[n,k]
            let mut bt = vec![0.0; n * k];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            matmul_bt_acc(&a, &bt, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_per_channel() {
        // [1,2,2,2] * [1,2,1,1]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let ash = Shape::new(&[1, 2, 2, 2]);
        let b = [10.0f64, 100.0];
        let bsh = Shape::new(&[1, 2, 1, 1]);
        let (osh, out) = broadcast_binary(&a, &ash, &b, &bsh, |x, y| x * y).unwrap();
        assert_eq!(osh, ash);
        assert_eq!(
            out,
            vec![10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]
        );
        // reduce back
        let red = reduce_to_shape(&out, &osh, &bsh);
        assert_eq!(red, vec![100.0, 2600.0]);
    }

    #[test]
    fn broadcast_shape_errors() {
        let a = Shape::new(&[2, 3]);
        let b = Shape::new(&[4, 3]);
        assert!(broadcast_shape(&a, &b).is_err());
        assert!(broadcast_shape(&a, &Shape::new(&[1, 3])).is_ok());
    }
}

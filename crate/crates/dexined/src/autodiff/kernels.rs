//! Raw forward/backward compute kernels behind the tape ops.
//!
//! Convolutions run as im2col + GEMM. Every parallel loop splits work at
//! fixed, input-independent chunk boundaries and reduces sequentially inside
//! each chunk, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::AdError;
use crate::tensor::{Scalar, Shape, Tensor};

/// Columns per GEMM work item.
const CHUNK_N: usize = 4096;
/// Output rows per weight-gradient work item.
const CHUNK_M: usize = 4;

/// Padding mode for conv2d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial = ceil(input / stride); zero padding, extra pixel on
    /// the bottom/right when the total is odd.
    Same,
    /// No padding; requires input >= kernel.
    Valid,
}

/// Resolved conv/pool geometry for one spatial axis.
#[derive(Debug, Clone, Copy)]
pub struct AxisGeom {
    pub out: usize,
    pub pad_begin: usize,
}

pub fn axis_geометry_same(input: usize, kernel: usize, stride: usize) -> AxisGeom {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    AxisGeom {
        out,
        pad_begin: total / 2,
    }
}

pub fn axis_geometry_valid(input: usize, kernel: usize, stride: usize) -> Option<AxisGeom> {
    if input < kernel {
        return None;
    }
    Some(AxisGeom {
        out: (input - kernel) / stride + 1,
        pad_begin: 0,
    })
}

/// Geometry shared by conv2d, transpose conv and the column buffers.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    /// Spatial size of the "dense" side (conv input / deconv output).
    pub h: usize,
    pub w: usize,
    /// Spatial size of the "strided" side (conv output / deconv input).
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }
}

struct SendPtr<S>(*mut S);
unsafe impl<S> Send for SendPtr<S> {}
unsafe impl<S> Sync for SendPtr<S> {}
impl<S> SendPtr<S> {
    fn get(&self) -> *mut S {
        self.0
    }
}

struct SendConstPtr<S>(*const S);
unsafe impl<S> Send for SendConstPtr<S> {}
unsafe impl<S> Sync for SendConstPtr<S> {}
impl<S> SendConstPtr<S> {
    fn get(&self) -> *const S {
        self.0
    }
}

/// Gather patches of `src` (one image plane set, C x H x W) into
/// `cols[C*kh*kw x oh*ow]`, zero outside the padded border.
fn im2col<S: Scalar>(src: &[S], g: &ConvGeom, cin: usize, cols: &mut [S]) {
    let n_cols = g.oh * g.ow;
    debug_assert_eq!(cols.len(), cin * g.kh * g.kw * n_cols);
    cols.par_chunks_mut(n_cols)
        .enumerate()
        .for_each(|(q, row)| {
            let dx = q % g.kw;
            let dy = (q / g.kw) % g.kh;
            let c = q / (g.kw * g.kh);
            let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
            for oy in 0..g.oh {
                let y = (oy * g.stride + dy) as isize - g.pad_top as isize;
                let out_row = &mut row[oy * g.ow..(oy + 1) * g.ow];
                if y < 0 || y >= g.h as isize {
                    for v in out_row.iter_mut() {
                        *v = S::zero();
                    }
                    continue;
                }
                let src_row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                for (ox, v) in out_row.iter_mut().enumerate() {
                    let x = (ox * g.stride + dx) as isize - g.pad_left as isize;
                    *v = if x < 0 || x >= g.w as isize {
                        S::zero()
                    } else {
                        src_row[x as usize]
                    };
                }
            }
        });
}

/// Scatter-add `cols` back into `dst` (C x H x W): the adjoint of [`im2col`].
/// Parallel over channels; rows of one channel are applied in order.
fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, cin: usize, dst: &mut [S]) {
    let n_cols = g.oh * g.ow;
    let taps = g.kh * g.kw;
    dst.par_chunks_mut(g.h * g.w)
        .enumerate()
        .for_each(|(c, plane)| {
            for t in 0..taps {
                let q = c * taps + t;
                let dy = t / g.kw;
                let dx = t % g.kw;
                let row = &cols[q * n_cols..(q + 1) * n_cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + dy) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = y as usize * g.w;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + dx) as isize - g.pad_left as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        plane[base + x as usize] += row[oy * g.ow + ox];
                    }
                }
            }
        });
}

/// C[m x n] = A[m x k] * B[k x n] + per-row bias, all row-major; parallel
/// over fixed column chunks.
fn gemm_bias_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    bias: Option<&[S]>,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match bias {
        Some(bias) => c
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out)| out.fill(bias[row])),
        None => c.par_chunks_mut(n).for_each(|out| out.fill(S::zero())),
    }
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    let c_ptr = SendPtr(c.as_mut_ptr());
    let chunks = n.div_ceil(CHUNK_N).max(1);
    (0..chunks).into_par_iter().for_each(|i| {
        let c0 = i * CHUNK_N;
        let cols = CHUNK_N.min(n - c0);
        unsafe {
            S::gemm(
                m,
                k,
                cols,
                S::one(),
                a_ptr.get(),
                k as isize,
                1,
                b_ptr.get().add(c0),
                n as isize,
                1,
                S::one(),
                c_ptr.get().add(c0),
                n as isize,
                1,
            );
        }
    });
}

/// C[m x n] = A^T * B where A is [k x m] row-major; parallel column chunks.
fn gemm_at_b_into<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    let c_ptr = SendPtr(c.as_mut_ptr());
    let chunks = n.div_ceil(CHUNK_N).max(1);
    (0..chunks).into_par_iter().for_each(|i| {
        let c0 = i * CHUNK_N;
        let cols = CHUNK_N.min(n - c0);
        unsafe {
            S::gemm(
                m,
                k,
                cols,
                S::one(),
                a_ptr.get(),
                1,
                m as isize,
                b_ptr.get().add(c0),
                n as isize,
                1,
                S::zero(),
                c_ptr.get().add(c0),
                n as isize,
                1,
            );
        }
    });
}

/// C[m x k] += A[m x n] * B^T where B is [k x n] row-major; parallel over
/// fixed row chunks of C so batch accumulation stays ordered.
fn gemm_abt_acc<S: Scalar>(m: usize, n: usize, k: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    c.par_chunks_mut(CHUNK_M * k)
        .enumerate()
        .for_each(|(i, c_chunk)| {
            let m0 = i * CHUNK_M;
            let rows = CHUNK_M.min(m - m0);
            unsafe {
                S::gemm(
                    rows,
                    n,
                    k,
                    S::one(),
                    a_ptr.get().add(m0 * n),
                    n as isize,
                    1,
                    b_ptr.get(),
                    1,
                    n as isize,
                    S::one(),
                    c_chunk.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_geometry(
    input: Shape,
    kernel: Shape,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom, AdError> {
    if stride == 0 || stride > 2 {
        return Err(AdError::InvalidArgument {
            op: "conv2d",
            msg: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    let (cout, cin, kh, kw) = (kernel.n(), kernel.c(), kernel.h(), kernel.w());
    if cin != input.c() {
        return Err(AdError::ShapeMismatch {
            op: "conv2d",
            expected: format!("kernel input channels {} to match input {}", cin, input),
            got: kernel.to_string(),
        });
    }
    let (gh, gw) = match padding {
        Padding::Same => (
            axis_geometry_same(input.h(), kh, stride),
            axis_geometry_same(input.w(), kw, stride),
        ),
        Padding::Valid => (
            axis_geometry_valid(input.h(), kh, stride).ok_or_else(|| AdError::ShapeMismatch {
                op: "conv2d",
                expected: format!("input height >= kernel height {kh}"),
                got: input.to_string(),
            })?,
            axis_geometry_valid(input.w(), kw, stride).ok_or_else(|| AdError::ShapeMismatch {
                op: "conv2d",
                expected: format!("input width >= kernel width {kw}"),
                got: input.to_string(),
            })?,
        ),
    };
    Ok(ConvGeom {
        cin,
        cout,
        kh,
        kw,
        stride,
        pad_top: gh.pad_begin,
        pad_left: gw.pad_begin,
        h: input.h(),
        w: input.w(),
        oh: gh.out,
        ow: gw.out,
    })
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0
}

/// Cross-correlation (no kernel flip) plus optional bias.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &ConvGeom,
) -> Tensor<S> {
    let n = x.shape.n();
    let out_shape = Shape::new(n, g.cout, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * g.oh * g.ow;
    let n_cols = g.oh * g.ow;
    let bias_slice = bias.map(|b| b.data.as_slice());

    if is_pointwise(g) {
        // Pointwise path accumulates input channels strictly in order; the
        // fusion-at-init identity relies on this exact summation order.
        for img in 0..n {
            let src = &x.data[img * in_plane..(img + 1) * in_plane];
            let dst = &mut out.data[img * out_plane..(img + 1) * out_plane];
            pointwise_forward(src, &w.data, bias_slice, g.cin, g.cout, n_cols, dst);
        }
        return out;
    }

    let mut cols = vec![S::zero(); g.cols_len()];
    for img in 0..n {
        let src = &x.data[img * in_plane..(img + 1) * in_plane];
        im2col(src, g, g.cin, &mut cols);
        let dst = &mut out.data[img * out_plane..(img + 1) * out_plane];
        gemm_bias_into(g.cout, g.cols_rows(), n_cols, &w.data, &cols, bias_slice, dst);
    }
    out
}

fn pointwise_forward<S: Scalar>(
    src: &[S],
    w: &[S],
    bias: Option<&[S]>,
    cin: usize,
    cout: usize,
    n_pix: usize,
    dst: &mut [S],
) {
    dst.par_chunks_mut(CHUNK_N)
        .enumerate()
        .for_each(|(chunk_idx, out_chunk)| {
            let p0 = chunk_idx * CHUNK_N;
            let len = out_chunk.len().min(CHUNK_N);
            // dst is [cout x n_pix] row-major; chunks can span rows, so work
            // row segment by row segment.
            let mut off = 0;
            while off < len {
                let flat = p0 + off;
                let co = flat / n_pix;
                let px = flat % n_pix;
                let seg = (n_pix - px).min(len - off);
                let out_seg = &mut out_chunk[off..off + seg];
                let b = bias.map(|b| b[co]).unwrap_or_else(S::zero);
                for v in out_seg.iter_mut() {
                    *v = b;
                }
                for ci in 0..cin {
                    let wv = w[co * cin + ci];
                    let src_seg = &src[ci * n_pix + px..ci * n_pix + px + seg];
                    for (o, s) in out_seg.iter_mut().zip(src_seg) {
                        *o += wv * *s;
                    }
                }
                off += seg;
            }
        });
}

/// Gradients of conv2d. Returns (dx, dw, dbias).
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &[S],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let n = x.shape.n();
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * g.oh * g.ow;
    let n_cols = g.oh * g.ow;
    let krows = g.cols_rows();

    let mut dw = vec![S::zero(); w.data.len()];
    let mut dbias = vec![S::zero(); g.cout];
    let mut dx = want_dx.then(|| vec![S::zero(); x.data.len()]);

    let mut cols = vec![S::zero(); g.cols_len()];
    let mut dcols = vec![S::zero(); g.cols_len()];
    for img in 0..n {
        let src = &x.data[img * in_plane..(img + 1) * in_plane];
        let dyi = &dy[img * out_plane..(img + 1) * out_plane];

        if is_pointwise(g) {
            // cols is just the input plane here; skip the gather.
            gemm_abt_acc(g.cout, n_cols, g.cin, dyi, src, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[img * in_plane..(img + 1) * in_plane];
                gemm_at_b_into(g.cin, g.cout, n_cols, &w.data, dyi, dcols[..in_plane].as_mut());
                for (d, s) in dxi.iter_mut().zip(&dcols[..in_plane]) {
                    *d += *s;
                }
            }
        } else {
            im2col(src, g, g.cin, &mut cols);
            gemm_abt_acc(g.cout, n_cols, krows, dyi, &cols, &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm_at_b_into(krows, g.cout, n_cols, &w.data, dyi, &mut dcols);
                let dxi = &mut dx[img * in_plane..(img + 1) * in_plane];
                col2im_add(&dcols, g, g.cin, dxi);
            }
        }

        dbias
            .par_iter_mut()
            .enumerate()
            .for_each(|(co, acc)| {
                let mut s = S::zero();
                for v in &dyi[co * n_cols..(co + 1) * n_cols] {
                    s += *v;
                }
                *acc += s;
            });
    }
    (dx, dw, dbias)
}

// ---------------------------------------------------------------------------
// transpose conv2d
// ---------------------------------------------------------------------------

/// Kernel layout is [cin, cout, kh, kw]; output spatial = input * stride,
/// which pins padding to (kernel - stride) / 2 per side.
pub fn deconv2d_geometry(input: Shape, kernel: Shape, stride: usize) -> Result<ConvGeom, AdError> {
    if stride < 2 {
        return Err(AdError::InvalidArgument {
            op: "transpose_conv2d",
            msg: format!("stride must be >= 2, got {stride}"),
        });
    }
    let (cin, cout, kh, kw) = (kernel.n(), kernel.c(), kernel.h(), kernel.w());
    if cin != input.c() {
        return Err(AdError::ShapeMismatch {
            op: "transpose_conv2d",
            expected: format!("kernel input channels {} to match input {}", cin, input),
            got: kernel.to_string(),
        });
    }
    if kh != kw {
        return Err(AdError::InvalidArgument {
            op: "transpose_conv2d",
            msg: format!("kernel must be square, got {kh}x{kw}"),
        });
    }
    if kh < stride || (kh - stride) % 2 != 0 {
        return Err(AdError::InvalidArgument {
            op: "transpose_conv2d",
            msg: format!(
                "kernel size {kh} must be stride + 2*pad for stride {stride} (e.g. {stride} or {})",
                2 * stride
            ),
        });
    }
    let pad = (kh - stride) / 2;
    Ok(ConvGeom {
        cin,
        cout,
        kh,
        kw,
        stride,
        pad_top: pad,
        pad_left: pad,
        h: input.h() * stride,
        w: input.w() * stride,
        oh: input.h(),
        ow: input.w(),
    })
}

/// Transposed convolution: scatter each input pixel through the kernel.
pub fn deconv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &ConvGeom,
) -> Tensor<S> {
    // Here the "dense" side (g.h, g.w) is the output and (g.oh, g.ow) the
    // input; g.cin/cout follow the kernel layout [cin, cout, kh, kw].
    let n = x.shape.n();
    let out_shape = Shape::new(n, g.cout, g.h, g.w);
    let mut out = Tensor::zeros(out_shape);
    let in_plane = g.cin * g.oh * g.ow;
    let out_plane = g.cout * g.h * g.w;
    let n_cols = g.oh * g.ow;
    let qrows = g.cout * g.kh * g.kw;

    let scatter = ConvGeom { cin: g.cout, ..*g };
    let mut cols = vec![S::zero(); qrows * n_cols];
    for img in 0..n {
        let src = &x.data[img * in_plane..(img + 1) * in_plane];
        // cols[cout*kh*kw x n_cols] = W^T[q x cin] * X[cin x n_cols]
        gemm_at_b_into(qrows, g.cin, n_cols, &w.data, src, &mut cols);
        let dst = &mut out.data[img * out_plane..(img + 1) * out_plane];
        col2im_add(&cols, &scatter, g.cout, dst);
        if let Some(b) = bias {
            dst.par_chunks_mut(g.h * g.w)
                .enumerate()
                .for_each(|(co, plane)| {
                    let bv = b.data[co];
                    for v in plane.iter_mut() {
                        *v += bv;
                    }
                });
        }
    }
    out
}

/// Gradients of transpose conv. Returns (dx, dw, dbias).
pub fn deconv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &[S],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let n = x.shape.n();
    let in_plane = g.cin * g.oh * g.ow;
    let out_plane = g.cout * g.h * g.w;
    let n_cols = g.oh * g.ow;
    let qrows = g.cout * g.kh * g.kw;

    let mut dw = vec![S::zero(); w.data.len()];
    let mut dbias = vec![S::zero(); g.cout];
    let mut dx = want_dx.then(|| vec![S::zero(); x.data.len()]);

    let gather = ConvGeom { cin: g.cout, ..*g };
    let mut cols = vec![S::zero(); qrows * n_cols];
    for img in 0..n {
        let src = &x.data[img * in_plane..(img + 1) * in_plane];
        let dyi = &dy[img * out_plane..(img + 1) * out_plane];
        // The adjoint of the forward scatter is a patch gather over dy.
        im2col(dyi, &gather, g.cout, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[img * in_plane..(img + 1) * in_plane];
            let mut tmp = vec![S::zero(); in_plane];
            gemm_bias_into(g.cin, qrows, n_cols, &w.data, &cols, None, &mut tmp);
            for (d, s) in dxi.iter_mut().zip(&tmp) {
                *d += *s;
            }
        }
        gemm_abt_acc(g.cin, n_cols, qrows, src, &cols, &mut dw);
        dbias
            .par_iter_mut()
            .enumerate()
            .for_each(|(co, acc)| {
                let mut s = S::zero();
                for v in &dyi[co * g.h * g.w..(co + 1) * g.h * g.w] {
                    s += *v;
                }
                *acc += s;
            });
    }
    (dx, dw, dbias)
}

/// Separable bilinear interpolation kernel in transpose-conv layout
/// [channels, channels, size, size] with no cross-channel mixing.
pub fn bilinear_kernel<S: Scalar>(size: usize, channels: usize) -> Result<Tensor<S>, AdError> {
    if size < 2 {
        return Err(AdError::InvalidArgument {
            op: "bilinear_kernel",
            msg: format!("size must be >= 2, got {size}"),
        });
    }
    let f = size.div_ceil(2) as f64;
    let c = (2.0 * f - 1.0 - (size % 2) as f64) / (2.0 * f);
    let line: Vec<f64> = (0..size)
        .map(|i| 1.0 - (i as f64 / f - c).abs())
        .collect();
    let mut t = Tensor::zeros(Shape::new(channels, channels, size, size));
    for ch in 0..channels {
        for (i, wi) in line.iter().enumerate() {
            for (j, wj) in line.iter().enumerate() {
                t.data[t.shape.at(ch, ch, i, j)] = S::from_f64(wi * wj);
            }
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// max pool
// ---------------------------------------------------------------------------

pub struct PoolOut<S: Scalar> {
    pub out: Tensor<S>,
    /// Flat input index of the winning element, per output element.
    pub argmax: Vec<usize>,
}

/// SAME-padded max pooling; padding acts as -inf (windows clip to the valid
/// region). Ties go to the first element in row-major window order.
pub fn max_pool_forward<S: Scalar>(x: &Tensor<S>, window: usize, stride: usize) -> PoolOut<S> {
    let (n, c, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let gh = axis_geometry_same(h, window, stride);
    let gw = axis_geometry_same(w, window, stride);
    let (oh, ow) = (gh.out, gw.out);
    let out_shape = Shape::new(n, c, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];

    let plane_in = h * w;
    let plane_out = oh * ow;
    out.data
        .par_chunks_mut(plane_out)
        .zip(argmax.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(p, (out_plane, arg_plane))| {
            let base = p * plane_in;
            let src = &x.data[base..base + plane_in];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * stride) as isize - gh.pad_begin as isize;
                    let x0 = (ox * stride) as isize - gw.pad_begin as isize;
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..window {
                        let yy = y0 + dy as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..window {
                            let xx = x0 + dx as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = yy as usize * w + xx as usize;
                            let v = src[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    arg_plane[oy * ow + ox] = base + best_idx;
                }
            }
        });
    PoolOut { out, argmax }
}

pub fn max_pool_backward<S: Scalar>(dy: &[S], argmax: &[usize], input_len: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); input_len];
    for (g, &idx) in dy.iter().zip(argmax) {
        dx[idx] += *g;
    }
    dx
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

pub struct BnForward<S: Scalar> {
    pub out: Tensor<S>,
    /// Per-channel batch statistics (train mode only).
    pub batch_mean: Vec<S>,
    pub batch_var: Vec<S>,
    /// Per-channel 1/sqrt(var + eps) actually used for normalization.
    pub inv_std: Vec<S>,
    /// Per-channel mean actually used (batch or running).
    pub used_mean: Vec<S>,
}

/// Per-channel batch normalization over (N, H, W). Train mode uses batch
/// statistics (biased variance); infer mode uses the provided running stats.
pub fn batch_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running: Option<(&[S], &[S])>,
    eps: S,
) -> BnForward<S> {
    let (n, c, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let plane = h * w;
    let count = n * plane;

    let (mean, var): (Vec<S>, Vec<S>) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
        None => {
            let stats: Vec<(S, S)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum = S::zero();
                    let mut sum_sq = S::zero();
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for &v in &x.data[base..base + plane] {
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let m = S::from_f64(count as f64);
                    let mean = sum / m;
                    let var = sum_sq / m - mean * mean;
                    (mean, var.max(S::zero()))
                })
                .collect();
            stats.into_iter().unzip()
        }
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape);
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, dst)| {
            let ch = p % c;
            let (m, istd, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = &x.data[p * plane..(p + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - m) * istd + b;
            }
        });

    let is_train = running.is_none();
    BnForward {
        out,
        batch_mean: if is_train { mean.clone() } else { Vec::new() },
        batch_var: if is_train { var } else { Vec::new() },
        inv_std,
        used_mean: mean,
    }
}

pub struct BnGrads<S> {
    pub dx: Vec<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
}

/// Backward through train-mode batch norm (statistics depend on the input).
pub fn batch_norm_backward_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    mean: &[S],
    inv_std: &[S],
    dy: &[S],
) -> BnGrads<S> {
    let (n, c, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let plane = h * w;
    let count = S::from_f64((n * plane) as f64);

    // Per-channel reductions, each sequential over (N, H, W) in index order.
    let sums: Vec<(S, S)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s_dy = S::zero();
            let mut s_dy_xhat = S::zero();
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let g = dy[base + i];
                    let xhat = (x.data[base + i] - mean[ch]) * inv_std[ch];
                    s_dy += g;
                    s_dy_xhat += g * xhat;
                }
            }
            (s_dy, s_dy_xhat)
        })
        .collect();

    let mut dx = vec![S::zero(); x.data.len()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
        let ch = p % c;
        let (s_dy, s_dy_xhat) = sums[ch];
        let scale = gamma[ch] * inv_std[ch] / count;
        let base = p * plane;
        for (i, o) in dst.iter_mut().enumerate() {
            let xhat = (x.data[base + i] - mean[ch]) * inv_std[ch];
            *o = scale * (count * dy[base + i] - s_dy - xhat * s_dy_xhat);
        }
    });

    BnGrads {
        dx,
        dgamma: sums.iter().map(|&(_, s)| s).collect(),
        dbeta: sums.iter().map(|&(s, _)| s).collect(),
    }
}

/// Backward through infer-mode batch norm (running stats are constants).
pub fn batch_norm_backward_infer<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    mean: &[S],
    inv_std: &[S],
    dy: &[S],
) -> BnGrads<S> {
    let (n, c, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let plane = h * w;
    let sums: Vec<(S, S)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s_dy = S::zero();
            let mut s_dy_xhat = S::zero();
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for i in 0..plane {
                    let g = dy[base + i];
                    s_dy += g;
                    s_dy_xhat += g * (x.data[base + i] - mean[ch]) * inv_std[ch];
                }
            }
            (s_dy, s_dy_xhat)
        })
        .collect();
    let mut dx = vec![S::zero(); x.data.len()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
        let ch = p % c;
        let k = gamma[ch] * inv_std[ch];
        let base = p * plane;
        for (i, o) in dst.iter_mut().enumerate() {
            *o = k * dy[base + i];
        }
    });
    BnGrads {
        dx,
        dgamma: sums.iter().map(|&(_, s)| s).collect(),
        dbeta: sums.iter().map(|&(s, _)| s).collect(),
    }
}

// ---------------------------------------------------------------------------
// pixel shuffle, padding, crop
// ---------------------------------------------------------------------------

/// Depth-to-space: [N, C*r^2, H, W] -> [N, C, rH, rW], channel index
/// c*r^2 + dy*r + dx maps to spatial offset (dy, dx).
pub fn pixel_shuffle_forward<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let (n, c_in, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let c_out = c_in / (r * r);
    let mut out = Tensor::zeros(Shape::new(n, c_out, h * r, w * r));
    let out_shape = out.shape;
    out.data
        .par_chunks_mut(h * r * w * r)
        .enumerate()
        .for_each(|(p, plane)| {
            let img = p / c_out;
            let c = p % c_out;
            for y in 0..h {
                for x_ in 0..w {
                    for dy in 0..r {
                        for dx in 0..r {
                            let src_c = c * r * r + dy * r + dx;
                            let v = x.data[x.shape.at(img, src_c, y, x_)];
                            plane[(y * r + dy) * out_shape.w() + (x_ * r + dx)] = v;
                        }
                    }
                }
            }
        });
    out
}

pub fn pixel_shuffle_backward<S: Scalar>(dy: &[S], in_shape: Shape, r: usize) -> Vec<S> {
    let (n, c_in, h, w) = (in_shape.n(), in_shape.c(), in_shape.h(), in_shape.w());
    let c_out = c_in / (r * r);
    let out_shape = Shape::new(n, c_out, h * r, w * r);
    let mut dx = vec![S::zero(); in_shape.len()];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
        let img = p / c_in;
        let src_c = p % c_in;
        let c = src_c / (r * r);
        let dy_off = (src_c % (r * r)) / r;
        let dx_off = src_c % r;
        for y in 0..h {
            for x_ in 0..w {
                plane[y * w + x_] =
                    dy[out_shape.at(img, c, y * r + dy_off, x_ * r + dx_off)];
            }
        }
    });
    dx
}

/// Fold an out-of-range coordinate back into [0, n) by reflecting at the
/// borders without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Pads (top, bottom, left, right) with border reflection.
pub fn reflect_pad_forward<S: Scalar>(x: &Tensor<S>, pads: [usize; 4]) -> Tensor<S> {
    let [pt, pb, pl, pr] = pads;
    let (n, c, h, w) = (x.shape.n(), x.shape.c(), x.shape.h(), x.shape.w());
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    out.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, plane)| {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let sy = reflect_index(oy as isize - pt as isize, h);
                for ox in 0..ow {
                    let sx = reflect_index(ox as isize - pl as isize, w);
                    plane[oy * ow + ox] = src[sy * w + sx];
                }
            }
        });
    out
}

pub fn reflect_pad_backward<S: Scalar>(dy: &[S], in_shape: Shape, pads: [usize; 4]) -> Vec<S> {
    let [pt, pb, pl, pr] = pads;
    let (h, w) = in_shape.hw();
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let mut dx = vec![S::zero(); in_shape.len()];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let sy = reflect_index(oy as isize - pt as isize, h);
            for ox in 0..ow {
                let sx = reflect_index(ox as isize - pl as isize, w);
                plane[sy * w + sx] += src[oy * ow + ox];
            }
        }
    });
    dx
}

pub fn crop_forward<S: Scalar>(x: &Tensor<S>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<S> {
    let (sh, sw) = x.shape.hw();
    debug_assert!(y0 + h <= sh && x0 + w <= sw);
    let planes = x.shape.n() * x.shape.c();
    let mut out = Tensor::zeros(Shape::new(x.shape.n(), x.shape.c(), h, w));
    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = &x.data[p * sh * sw..(p + 1) * sh * sw];
            for y in 0..h {
                dst[y * w..(y + 1) * w]
                    .copy_from_slice(&src[(y0 + y) * sw + x0..(y0 + y) * sw + x0 + w]);
            }
        });
    debug_assert_eq!(planes * h * w, out.data.len());
    out
}

pub fn crop_backward<S: Scalar>(
    dy: &[S],
    in_shape: Shape,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (sh, sw) = in_shape.hw();
    let mut dx = vec![S::zero(); in_shape.len()];
    dx.par_chunks_mut(sh * sw).enumerate().for_each(|(p, dst)| {
        let src = &dy[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                dst[(y0 + y) * sw + x0 + x_] += src[y * w + x_];
            }
        }
    });
    dx
}

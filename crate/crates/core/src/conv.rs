//! Convolution kernels shared by the convolution and transposed convolution
//! nodes. Every routine works on one sample. Layers with few output
//! channels run register-blocked stride-1 loops over the input phases;
//! wider layers go through im2col and a matrix multiply.

use crate::tensor::{Lanes, Scalar, LANES};

/// Output channel count up to which layers use the blocked kernels.
const BLOCKED_MAX_OUT: usize = 32;

/// Geometry of a convolution from a `channels × height × width` image to
/// an `out_h × out_w` map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn blocked(&self, out_channels: usize) -> bool {
        out_channels <= BLOCKED_MAX_OUT && self.kernel >= self.stride
    }

    /// Source row of output row `oy` under kernel row `ki`, if inside.
    #[inline]
    fn src_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        (iy >= 0 && iy < self.height as isize).then_some(iy as usize)
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

/// Range of output columns `ox` whose source column `ox*stride + offset`
/// lands inside `[0, width)`.
fn valid_range(out_w: usize, width: usize, stride: usize, offset: isize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < out_w && (lo * stride) as isize + offset < 0 {
        lo += 1;
    }
    let mut hi = lo;
    while hi < out_w && ((hi * stride) as isize + offset) < width as isize {
        hi += 1;
    }
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.height * g.width;
    let ncols = g.cols();
    for ci in 0..g.channels {
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let offset = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.width, g.stride, offset);
                for oy in 0..g.out_h {
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.src_row(oy, ki) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &src_plane[iy * g.width..(iy + 1) * g.width];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = (lo as isize + offset) as usize;
                        drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[((ox * g.stride) as isize + offset) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and adds columns back onto the image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let plane = g.height * g.width;
    let ncols = g.cols();
    for ci in 0..g.channels {
        let dst_plane = &mut x[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (ci * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let offset = kj as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.width, g.stride, offset);
                for oy in 0..g.out_h {
                    let Some(iy) = g.src_row(oy, ki) else {
                        continue;
                    };
                    let drow = &mut dst_plane[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let start = (lo as isize + offset) as usize;
                        for (d, &s) in drow[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi])
                        {
                            *d = *d + s;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = ((ox * g.stride) as isize + offset) as usize;
                            drow[ix] = drow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output channels computed together by the blocked kernels.
const BLOCK: usize = 8;

/// Reusable buffers.
#[derive(Default)]
pub(crate) struct Scratch<T> {
    cols: Vec<T>,
    image: Vec<T>,
    weights: Vec<T>,
    tmp: Vec<T>,
}

fn sized<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    buf.clear();
    buf.resize(len, T::zero());
    &mut buf[..]
}

impl<T: Scalar> Scratch<T> {
    fn cols(&mut self, len: usize) -> &mut [T] {
        if self.cols.len() < len {
            self.cols.resize(len, T::zero());
        }
        &mut self.cols[..len]
    }
}

/// A convolution of stride `s` seen as a stride-1 correlation over the
/// `s²` sub-sampled phases of the padded input: phase `(c, a, b)` holds
/// `x[c][s·i + a - pad][s·j + b - pad]` and its kernel holds
/// `w[.][c][s·qi + a][s·qj + b]`.
#[derive(Debug, Clone, Copy)]
struct Phases {
    s: usize,
    /// Phase kernel size, `ceil(k / s)`.
    kq: usize,
    /// Phase channels, `C·s²`.
    cq: usize,
    hq: usize,
    wq: usize,
    /// `out_w` rounded up to whole lane groups.
    owr: usize,
}

impl Phases {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        let kq = g.kernel.div_ceil(s);
        let owr = g.out_w.next_multiple_of(LANES);
        Phases {
            s,
            kq,
            cq: g.channels * s * s,
            hq: g.out_h + kq - 1,
            wq: owr + kq - 1,
            owr,
        }
    }

    fn plane(&self) -> usize {
        self.hq * self.wq
    }

    /// `(c, a, b)` of phase `q`.
    fn split(&self, q: usize) -> (usize, usize, usize) {
        (q / (self.s * self.s), (q / self.s) % self.s, q % self.s)
    }
}

/// Gathers the phases of `x` into `out` (`cq × hq × wq`).
fn phase_image<T: Scalar>(x: &[T], g: &ConvGeom, p: &Phases, out: &mut [T]) {
    let plane = g.height * g.width;
    for q in 0..p.cq {
        let (c, a, b) = p.split(q);
        let offset = b as isize - g.pad as isize;
        let (lo, hi) = valid_range(p.wq, g.width, p.s, offset);
        for i in 0..p.hq {
            let iy = (p.s * i + a) as isize - g.pad as isize;
            if iy < 0 || iy >= g.height as isize || lo >= hi {
                continue;
            }
            let src = &x[c * plane + iy as usize * g.width..][..g.width];
            let dst = &mut out[q * p.plane() + i * p.wq..][..p.wq];
            if p.s == 1 {
                let start = (lo as isize + offset) as usize;
                dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
            } else {
                for (j, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                    *d = src[((p.s * j) as isize + offset) as usize];
                }
            }
        }
    }
}

/// Adds phase gradients `dxp` (`cq × hq × wq`) back onto `dx`.
fn scatter_phases<T: Scalar>(dxp: &[T], wq: usize, g: &ConvGeom, p: &Phases, dx: &mut [T]) {
    let plane = g.height * g.width;
    for q in 0..p.cq {
        let (c, a, b) = p.split(q);
        let offset = b as isize - g.pad as isize;
        let (lo, hi) = valid_range(wq, g.width, p.s, offset);
        for i in 0..p.hq {
            let iy = (p.s * i + a) as isize - g.pad as isize;
            if iy < 0 || iy >= g.height as isize || lo >= hi {
                continue;
            }
            let src = &dxp[(q * p.hq + i) * wq..][..wq];
            let dst = &mut dx[c * plane + iy as usize * g.width..][..g.width];
            for j in lo..hi {
                let ix = ((p.s * j) as isize + offset) as usize;
                dst[ix] = dst[ix] + src[j];
            }
        }
    }
}

/// Kernel tap of `w` (`[O, C, k, k]`) feeding phase tap `(q, qi, qj)`.
fn phase_tap(g: &ConvGeom, p: &Phases, oc: usize, q: usize, qi: usize, qj: usize) -> Option<usize> {
    let (c, a, b) = p.split(q);
    let (ki, kj) = (p.s * qi + a, p.s * qj + b);
    (ki < g.kernel && kj < g.kernel)
        .then(|| ((oc * g.channels + c) * g.kernel + ki) * g.kernel + kj)
}

/// Lane groups per output-channel block width, so that every block keeps
/// [`BLOCK`] independent accumulators in flight.
const fn groups(width: usize) -> usize {
    if width >= BLOCK {
        1
    } else {
        BLOCK / width
    }
}

/// Geometry shared by the blocked kernels: input channels, input rows and
/// row length, phase kernel size, output rows and (lane-rounded) columns.
#[derive(Debug, Clone, Copy)]
struct Span {
    cin: usize,
    hx: usize,
    wx: usize,
    kq: usize,
    out_h: usize,
    out_w: usize,
}

/// Stride-1 correlation of `x` (`cin × h × wx`) with kernels
/// `w[oc][cin][kq][kq]` for `o` outputs of `out_h × out_w` (`out_w` a
/// multiple of [`LANES`], `wx ≥ out_w + kq - 1`). Overwrites `out`.
#[allow(clippy::too_many_arguments)]
fn correlate<T: Scalar>(
    x: &[T],
    cin: usize,
    wx: usize,
    w: &[T],
    o: usize,
    kq: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
    wbuf: &mut Vec<T>,
) {
    let sp = Span {
        cin,
        hx: out_h + kq - 1,
        wx,
        kq,
        out_h,
        out_w,
    };
    let taps = cin * kq * kq;
    let mut ob = 0;
    while ob < o {
        let n = (o - ob).min(BLOCK);
        let width = n.next_power_of_two();
        // weights interleaved by output channel: [tap][width]
        let wb = sized(wbuf, taps * width);
        for b in 0..n {
            for (t, &v) in w[(ob + b) * taps..(ob + b + 1) * taps].iter().enumerate() {
                wb[t * width + b] = v;
            }
        }
        let dst = &mut out[ob * out_h * out_w..(ob + n) * out_h * out_w];
        match width {
            1 => correlate_block::<T, 1, { groups(1) }>(x, wb, sp, n, dst),
            2 => correlate_block::<T, 2, { groups(2) }>(x, wb, sp, n, dst),
            4 => correlate_block::<T, 4, { groups(4) }>(x, wb, sp, n, dst),
            _ => correlate_block::<T, 8, { groups(8) }>(x, wb, sp, n, dst),
        }
        ob += n;
    }
}

/// Accumulates `acc[b][p] += w[b] · x[.., x0 + p·LANES ..]` over every tap.
#[inline(always)]
fn correlate_tile<T: Scalar, const OB: usize, const P: usize>(
    x: &[T],
    wb: &[T],
    sp: Span,
    oy: usize,
    x0: usize,
) -> [[T::Lanes; P]; OB] {
    let plane = sp.hx * sp.wx;
    let mut acc = [[T::Lanes::zero(); P]; OB];
    for c in 0..sp.cin {
        for qi in 0..sp.kq {
            let row = &x[c * plane + (oy + qi) * sp.wx + x0..];
            for qj in 0..sp.kq {
                let src: [T::Lanes; P] =
                    std::array::from_fn(|p| T::Lanes::load(&row[qj + p * LANES..]));
                let wv = &wb[((c * sp.kq + qi) * sp.kq + qj) * OB..][..OB];
                for (a, &w) in acc.iter_mut().zip(wv) {
                    let w = T::Lanes::splat(w);
                    for (d, &v) in a.iter_mut().zip(&src) {
                        *d = d.mul_acc(w, v);
                    }
                }
            }
        }
    }
    acc
}

#[inline(never)]
fn correlate_block<T: Scalar, const OB: usize, const P: usize>(
    x: &[T],
    wb: &[T],
    sp: Span,
    n: usize,
    out: &mut [T],
) {
    let chunks = sp.out_w / LANES;
    let grouped = chunks / P * P;
    for oy in 0..sp.out_h {
        for g in (0..grouped).step_by(P) {
            let acc = correlate_tile::<T, OB, P>(x, wb, sp, oy, g * LANES);
            for (b, a) in acc.iter().enumerate().take(n) {
                for (p, v) in a.iter().enumerate() {
                    v.store(&mut out[(b * sp.out_h + oy) * sp.out_w + (g + p) * LANES..]);
                }
            }
        }
        for ch in grouped..chunks {
            let acc = correlate_tile::<T, OB, 1>(x, wb, sp, oy, ch * LANES);
            for (b, a) in acc.iter().enumerate().take(n) {
                a[0].store(&mut out[(b * sp.out_h + oy) * sp.out_w + ch * LANES..]);
            }
        }
    }
}

/// `acc[oc][t] = Σ gy[oc][y][x] · x[c][y + qi][x + qj]` for every phase
/// tap `t = (c, qi, qj)`; `gy` is `o × out_h × out_w` with `out_w` a
/// multiple of [`LANES`] and at least `o.next_multiple_of(BLOCK)` planes.
#[allow(clippy::too_many_arguments)]
fn correlate_weights<T: Scalar>(
    x: &[T],
    cin: usize,
    wx: usize,
    gy: &[T],
    o: usize,
    kq: usize,
    out_h: usize,
    out_w: usize,
    acc: &mut [T],
) {
    let sp = Span {
        cin,
        hx: out_h + kq - 1,
        wx,
        kq,
        out_h,
        out_w,
    };
    let taps = cin * kq * kq;
    let mut ob = 0;
    while ob < o {
        let n = (o - ob).min(BLOCK);
        let g = &gy[ob * out_h * out_w..];
        let dst = &mut acc[ob * taps..(ob + n) * taps];
        match n.next_power_of_two() {
            1 => weights_block::<T, 1, { groups(1) }>(x, g, sp, n, dst),
            2 => weights_block::<T, 2, { groups(2) }>(x, g, sp, n, dst),
            4 => weights_block::<T, 4, { groups(4) }>(x, g, sp, n, dst),
            _ => weights_block::<T, 8, { groups(8) }>(x, g, sp, n, dst),
        }
        ob += n;
    }
}

#[inline(never)]
fn weights_block<T: Scalar, const OB: usize, const P: usize>(
    x: &[T],
    gy: &[T],
    sp: Span,
    n: usize,
    out: &mut [T],
) {
    let plane = sp.hx * sp.wx;
    let gplane = sp.out_h * sp.out_w;
    let taps = sp.cin * sp.kq * sp.kq;
    let chunks = sp.out_w / LANES;
    let grouped = chunks / P * P;
    for c in 0..sp.cin {
        for qi in 0..sp.kq {
            for qj in 0..sp.kq {
                let mut acc = [[T::Lanes::zero(); P]; OB];
                for oy in 0..sp.out_h {
                    let row = &x[c * plane + (oy + qi) * sp.wx + qj..];
                    let grow = oy * sp.out_w;
                    for g in (0..grouped).step_by(P) {
                        let src: [T::Lanes; P] =
                            std::array::from_fn(|p| T::Lanes::load(&row[(g + p) * LANES..]));
                        for (b, a) in acc.iter_mut().enumerate() {
                            for (p, d) in a.iter_mut().enumerate() {
                                let gv = T::Lanes::load(&gy[b * gplane + grow + (g + p) * LANES..]);
                                *d = d.mul_acc(gv, src[p]);
                            }
                        }
                    }
                    for ch in grouped..chunks {
                        let src = T::Lanes::load(&row[ch * LANES..]);
                        for (b, a) in acc.iter_mut().enumerate() {
                            let gv = T::Lanes::load(&gy[b * gplane + grow + ch * LANES..]);
                            a[0] = a[0].mul_acc(gv, src);
                        }
                    }
                }
                let t = (c * sp.kq + qi) * sp.kq + qj;
                for (b, a) in acc.iter().enumerate().take(n) {
                    out[b * taps + t] = a.iter().fold(T::zero(), |s, v| s + v.sum());
                }
            }
        }
    }
}

/// Phase kernels `[o][cq][kq][kq]` of `w`, flipped and transposed to
/// `[cq][o][kq][kq]` when `adjoint`.
fn phase_weights<T: Scalar>(
    w: &[T],
    o: usize,
    g: &ConvGeom,
    p: &Phases,
    adjoint: bool,
    out: &mut Vec<T>,
) {
    let kq = p.kq;
    let dst = sized(out, o * p.cq * kq * kq);
    for oc in 0..o {
        for q in 0..p.cq {
            for qi in 0..kq {
                for qj in 0..kq {
                    let Some(src) = phase_tap(g, p, oc, q, qi, qj) else {
                        continue;
                    };
                    let idx = if adjoint {
                        ((q * o + oc) * kq + (kq - 1 - qi)) * kq + (kq - 1 - qj)
                    } else {
                        ((oc * p.cq + q) * kq + qi) * kq + qj
                    };
                    dst[idx] = w[src];
                }
            }
        }
    }
}

fn blocked_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    o: usize,
    g: &ConvGeom,
    out: &mut [T],
    sc: &mut Scratch<T>,
) {
    let p = Phases::new(g);
    let mut image = std::mem::take(&mut sc.image);
    let mut weights = std::mem::take(&mut sc.weights);
    let mut tmp = std::mem::take(&mut sc.tmp);
    phase_image(x, g, &p, sized(&mut image, p.cq * p.plane()));
    phase_weights(w, o, g, &p, false, &mut weights);
    let t = sized(&mut tmp, o * g.out_h * p.owr);
    correlate(
        &image,
        p.cq,
        p.wq,
        &weights,
        o,
        p.kq,
        g.out_h,
        p.owr,
        t,
        &mut sc.cols,
    );
    for (dst, src) in out.chunks_exact_mut(g.out_w).zip(t.chunks_exact(p.owr)) {
        dst.copy_from_slice(&src[..g.out_w]);
    }
    (sc.image, sc.weights, sc.tmp) = (image, weights, tmp);
}

fn blocked_input_grad<T: Scalar>(
    gy: &[T],
    w: &[T],
    o: usize,
    g: &ConvGeom,
    dx: &mut [T],
    sc: &mut Scratch<T>,
) {
    let p = Phases::new(g);
    let kq = p.kq;
    // gy with a (kq - 1) zero border, wide enough for whole lane groups
    let wqr = p.wq.next_multiple_of(LANES);
    let (gh, gw) = (g.out_h + 2 * (kq - 1), wqr + kq - 1);
    let mut image = std::mem::take(&mut sc.image);
    let mut weights = std::mem::take(&mut sc.weights);
    let mut tmp = std::mem::take(&mut sc.tmp);
    let gp = sized(&mut image, o * gh * gw);
    for oc in 0..o {
        for oy in 0..g.out_h {
            let src = &gy[(oc * g.out_h + oy) * g.out_w..][..g.out_w];
            gp[(oc * gh + oy + kq - 1) * gw + kq - 1..][..g.out_w].copy_from_slice(src);
        }
    }
    phase_weights(w, o, g, &p, true, &mut weights);
    let dxp = sized(&mut tmp, p.cq * p.hq * wqr);
    correlate(
        &image,
        o,
        gw,
        &weights,
        p.cq,
        kq,
        p.hq,
        wqr,
        dxp,
        &mut sc.cols,
    );
    scatter_phases(dxp, wqr, g, &p, dx);
    (sc.image, sc.weights, sc.tmp) = (image, weights, tmp);
}

fn blocked_weight_grad<T: Scalar>(
    x: &[T],
    gy: &[T],
    o: usize,
    g: &ConvGeom,
    dw: &mut [T],
    sc: &mut Scratch<T>,
) {
    let p = Phases::new(g);
    let kq = p.kq;
    let mut image = std::mem::take(&mut sc.image);
    let mut tmp = std::mem::take(&mut sc.tmp);
    phase_image(x, g, &p, sized(&mut image, p.cq * p.plane()));
    let gp = sized(&mut tmp, o.next_multiple_of(BLOCK) * g.out_h * p.owr);
    for (dst, src) in gp.chunks_exact_mut(p.owr).zip(gy.chunks_exact(g.out_w)) {
        dst[..g.out_w].copy_from_slice(src);
    }
    let taps = p.cq * kq * kq;
    let acc = sized(&mut sc.weights, o * taps);
    correlate_weights(&image, p.cq, p.wq, gp, o, kq, g.out_h, p.owr, acc);
    for oc in 0..o {
        for q in 0..p.cq {
            for qi in 0..kq {
                for qj in 0..kq {
                    if let Some(idx) = phase_tap(g, &p, oc, q, qi, qj) {
                        dw[idx] = dw[idx] + acc[oc * taps + (q * kq + qi) * kq + qj];
                    }
                }
            }
        }
    }
    (sc.image, sc.tmp) = (image, tmp);
}

/// `out = w ⋆ x` for one sample; `w` is `[O, C, k, k]`, `out` is
/// `O × out_h × out_w` and is overwritten.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    w: &[T],
    o: usize,
    g: &ConvGeom,
    out: &mut [T],
    scratch: &mut Scratch<T>,
) {
    if g.blocked(o) {
        return blocked_forward(x, w, o, g, out, scratch);
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let cols = scratch.cols(rows * ncols);
    im2col(x, g, cols);
    T::gemm(
        o,
        rows,
        ncols,
        w,
        (rows as isize, 1),
        cols,
        (ncols as isize, 1),
        T::zero(),
        out,
    );
}

/// `dx += wᵀ ⋆ gy` for one sample (the adjoint of [`forward`] in `x`).
pub(crate) fn input_grad<T: Scalar>(
    gy: &[T],
    w: &[T],
    o: usize,
    g: &ConvGeom,
    dx: &mut [T],
    scratch: &mut Scratch<T>,
) {
    if g.blocked(o) {
        return blocked_input_grad(gy, w, o, g, dx, scratch);
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let cols = scratch.cols(rows * ncols);
    T::gemm(
        rows,
        o,
        ncols,
        w,
        (1, rows as isize),
        gy,
        (ncols as isize, 1),
        T::zero(),
        cols,
    );
    col2im(cols, g, dx);
}

/// `dw += gy ⋆ x` for one sample (the adjoint of [`forward`] in `w`).
pub(crate) fn weight_grad<T: Scalar>(
    x: &[T],
    gy: &[T],
    o: usize,
    g: &ConvGeom,
    dw: &mut [T],
    scratch: &mut Scratch<T>,
) {
    if g.blocked(o) {
        return blocked_weight_grad(x, gy, o, g, dw, scratch);
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let cols = scratch.cols(rows * ncols);
    im2col(x, g, cols);
    T::gemm(
        o,
        ncols,
        rows,
        gy,
        (ncols as isize, 1),
        cols,
        (1, ncols as isize),
        T::one(),
        dw,
    );
}

//! Convolution kernels (NHWC input, `kh x kw x cin x cout` kernel). They run
//! directly on a zero-padded copy of the input, blocked over pixels and
//! channels so accumulators stay in registers.

use crate::error::{Error, Result};
use super::LANES;
use crate::tensor::{gemm, madd, MatRef, Scalar, Shape};

/// Output pixels per register block of the forward kernel.
const PIXELS: usize = 4;
/// Input channels per register block of the kernel gradient.
const INPUTS: usize = 4;
/// Blocks of at most this many channels double their pixel or input tile.
const NARROW_BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, kernel: Shape, stride: usize, padding: usize) -> Result<Self> {
        let [kh, kw, kin, cout] = kernel.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel spatial extent must be odd, got {kh}x{kw}"),
            ));
        }
        if kin != input.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {kin}", input.c),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let span_h = input.h + 2 * padding;
        let span_w = input.w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"),
            ));
        }
        Ok(ConvGeom {
            input,
            kh,
            kw,
            cout,
            stride,
            padding,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.oh, self.ow, self.cout)
    }

    /// Rows of the patch matrix (one per output pixel).
    pub fn rows(&self) -> usize {
        self.input.n * self.oh * self.ow
    }

    /// Columns of the patch matrix.
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.input.c
    }

    /// Whether the input gradient is the forward convolution of the output
    /// gradient with the flipped kernel. Otherwise it is scattered from a
    /// patch-matrix product.
    fn transposes(&self) -> bool {
        self.stride == 1 && self.kh == self.kw && self.padding < self.kh
    }

    /// Geometry of the input gradient as a direct convolution.
    fn transposed(&self) -> ConvGeom {
        debug_assert!(self.transposes());
        let input = Shape::new(self.input.n, self.oh, self.ow, self.cout);
        let kernel = Shape::new(self.kh, self.kw, self.cout, self.input.c);
        ConvGeom::new(input, kernel, 1, self.kh - 1 - self.padding).expect("transposed geometry is valid")
    }

    /// Padded extents `(hp, wp)` of the direct kernels' input copy.
    fn padded(&self) -> (usize, usize) {
        (self.input.h + 2 * self.padding, self.input.w + 2 * self.padding)
    }

    /// Input copied into a zero border of width `padding`.
    fn pad_input<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let s = self.input;
        if self.padding == 0 {
            return x.to_vec();
        }
        let (hp, wp) = self.padded();
        let mut out = vec![T::zero(); s.n * hp * wp * s.c];
        for n in 0..s.n {
            for y in 0..s.h {
                let src = ((n * s.h + y) * s.w) * s.c;
                let dst = ((n * hp + y + self.padding) * wp + self.padding) * s.c;
                out[dst..dst + s.w * s.c].copy_from_slice(&x[src..src + s.w * s.c]);
            }
        }
        out
    }

    /// Offset in the padded input of the top-left tap of output pixel `(n, oy, ox)`.
    #[inline]
    fn origin(&self, n: usize, oy: usize, ox: usize) -> usize {
        let (hp, wp) = self.padded();
        ((n * hp + oy * self.stride) * wp + ox * self.stride) * self.input.c
    }

    /// Offset of tap `(ky, kx)` relative to a pixel's origin.
    #[inline]
    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        (ky * self.padded().1 + kx) * self.input.c
    }
}


/// Kernel columns `o0..o0 + W` packed contiguously, `patch x W`.
fn pack_block<T: Scalar, const W: usize>(w: &[T], cout: usize, o0: usize) -> Vec<T> {
    w.chunks_exact(cout).flat_map(|r| r[o0..o0 + W].iter().copied()).collect()
}

/// Adds `P` consecutive output pixels of one block, whose first pixel reads
/// the padded input from `origin` and writes row `row`.
#[inline(always)]
fn direct_pixels<T: Scalar, const W: usize, const P: usize>(
    g: &ConvGeom,
    xp: &[T],
    wb: &[T],
    out: &mut [T],
    (origin, row): (usize, usize),
    o0: usize,
) {
    let (cin, cout) = (g.input.c, g.cout);
    let step = g.stride * cin;
    let mut acc = [[T::zero(); W]; P];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let base = origin + g.tap_offset(ky, kx);
            let xs: [&[T]; P] = std::array::from_fn(|p| &xp[base + p * step..][..cin]);
            let wt = &wb[(ky * g.kw + kx) * cin * W..][..cin * W];
            for (ci, wv) in wt.chunks_exact(W).enumerate() {
                for (a, x) in acc.iter_mut().zip(&xs) {
                    let xv = x[ci];
                    for (a, &wo) in a.iter_mut().zip(wv) {
                        *a = madd(*a, xv, wo);
                    }
                }
            }
        }
    }
    for (p, a) in acc.iter().enumerate() {
        let dst = &mut out[(row + p) * cout + o0..][..W];
        for (d, &v) in dst.iter_mut().zip(a) {
            *d += v;
        }
    }
}

fn direct_block<T: Scalar, const W: usize>(g: &ConvGeom, xp: &[T], w: &[T], out: &mut [T], o0: usize) {
    let wb = pack_block::<T, W>(w, g.cout, o0);
    let step = g.stride * g.input.c;
    for n in 0..g.input.n {
        for oy in 0..g.oh {
            let origin = g.origin(n, oy, 0);
            let row = (n * g.oh + oy) * g.ow;
            let mut ox = 0;
            if W <= NARROW_BLOCK {
                while ox + 2 * PIXELS <= g.ow {
                    direct_pixels::<T, W, { 2 * PIXELS }>(g, xp, &wb, out, (origin + ox * step, row + ox), o0);
                    ox += 2 * PIXELS;
                }
            }
            while ox + PIXELS <= g.ow {
                direct_pixels::<T, W, PIXELS>(g, xp, &wb, out, (origin + ox * step, row + ox), o0);
                ox += PIXELS;
            }
            for ox in ox..g.ow {
                direct_pixels::<T, W, 1>(g, xp, &wb, out, (origin + ox * step, row + ox), o0);
            }
        }
    }
}

/// Convolution added into `out`.
fn direct_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let xp = g.pad_input(x);
    per_block!(g.cout, direct_block(g, &xp, w, out));
}

/// `dw[tap, c0..c0 + Q, block]` summed over every output pixel, with the
/// output gradient of the block packed as `rows x W`.
#[inline(always)]
fn kernel_grad_tile<T: Scalar, const W: usize, const Q: usize>(
    g: &ConvGeom,
    xp: &[T],
    gb: &[T],
    (ky, kx, c0): (usize, usize, usize),
) -> [[T; W]; Q] {
    let step = g.stride * g.input.c;
    let mut acc = [[T::zero(); W]; Q];
    let off = g.tap_offset(ky, kx) + c0;
    let mut grows = gb.chunks_exact(g.ow * W);
    for n in 0..g.input.n {
        for oy in 0..g.oh {
            let xrow = &xp[g.origin(n, oy, 0) + off..][..(g.ow - 1) * step + Q];
            let grow = grows.next().expect("one gradient row per output row");
            for (xc, gv) in xrow.chunks(step).zip(grow.chunks_exact(W)) {
                for (a, &xv) in acc.iter_mut().zip(&xc[..Q]) {
                    for (a, &go) in a.iter_mut().zip(gv) {
                        *a = madd(*a, xv, go);
                    }
                }
            }
        }
    }
    acc
}

fn kernel_grad_block<T: Scalar, const W: usize>(g: &ConvGeom, xp: &[T], gout: &[T], dw: &mut [T], o0: usize) {
    let (cin, cout) = (g.input.c, g.cout);
    let gb = pack_block::<T, W>(gout, cout, o0);
    let mut store = |tap: usize, c0: usize, tile: &[[T; W]]| {
        for (q, t) in tile.iter().enumerate() {
            let d = &mut dw[(tap * cin + c0 + q) * cout + o0..][..W];
            for (d, &v) in d.iter_mut().zip(t) {
                *d += v;
            }
        }
    };
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let tap = ky * g.kw + kx;
            let mut c0 = 0;
            if W <= NARROW_BLOCK {
                while c0 + 2 * INPUTS <= cin {
                    store(tap, c0, &kernel_grad_tile::<T, W, { 2 * INPUTS }>(g, xp, &gb, (ky, kx, c0)));
                    c0 += 2 * INPUTS;
                }
            }
            while c0 + INPUTS <= cin {
                store(tap, c0, &kernel_grad_tile::<T, W, INPUTS>(g, xp, &gb, (ky, kx, c0)));
                c0 += INPUTS;
            }
            for c0 in c0..cin {
                store(tap, c0, &kernel_grad_tile::<T, W, 1>(g, xp, &gb, (ky, kx, c0)));
            }
        }
    }
}

/// Kernel flipped spatially with input and output channels swapped.
fn flipped<T: Scalar>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let (cin, cout) = (g.input.c, g.cout);
    let mut out = vec![T::zero(); w.len()];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let src = (ky * g.kw + kx) * cin * cout;
            let dst = ((g.kh - 1 - ky) * g.kw + (g.kw - 1 - kx)) * cout * cin;
            for ci in 0..cin {
                for o in 0..cout {
                    out[dst + o * cin + ci] = w[src + ci * cout + o];
                }
            }
        }
    }
    out
}

/// Scatters patch-matrix rows back onto the input pixels they were read from.
fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let s = g.input;
    let cin = s.c;
    let patch = g.patch();
    let pad = g.padding as isize;
    let mut row = 0;
    for n in 0..s.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let dst = ((n * s.h + iy as usize) * s.w + ix as usize) * cin;
                        let off = (ky * g.kw + kx) * cin;
                        for (d, &v) in dx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward pass, with `bias` added to every output pixel.
pub fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cout];
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(g.cout) {
            r.copy_from_slice(b);
        }
    }
    direct_forward(g, x, w, &mut out);
    out
}

/// Gradient with respect to the input.
pub fn backward_input<T: Scalar>(g: &ConvGeom, w: &[T], gout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.input.numel()];
    if g.transposes() {
        direct_forward(&g.transposed(), gout, &flipped(g, w), &mut dx);
    } else {
        let (rows, patch) = (g.rows(), g.patch());
        let mut dcols = vec![T::zero(); rows * patch];
        gemm(MatRef::N(gout, rows, g.cout), MatRef::T(w, g.cout, patch), T::zero(), &mut dcols);
        col2im_add(g, &dcols, &mut dx);
    }
    dx
}

/// Gradient with respect to the kernel.
pub fn backward_kernel<T: Scalar>(g: &ConvGeom, x: &[T], gout: &[T]) -> Vec<T> {
    let xp = g.pad_input(x);
    let mut dw = vec![T::zero(); g.patch() * g.cout];
    per_block!(g.cout, kernel_grad_block(g, &xp, gout, &mut dw));
    dw
}

pub fn backward_bias<T: Scalar>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let mut db = vec![T::zero(); g.cout];
    for r in gout.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(r) {
            *d += v;
        }
    }
    db
}

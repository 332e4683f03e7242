//! Spatial resampling kernels: backward warping, 2x upsampling and local
//! correlation.

use super::LANES;
use crate::tensor::{dot, madd, Scalar, Shape};

struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the coordinate fell inside the clamp range on each axis.
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn tap<T: Scalar>(sx: T, sy: T, h: usize, w: usize) -> Tap<T> {
    let max_x = T::from_usize(w - 1).unwrap();
    let max_y = T::from_usize(h - 1).unwrap();
    let inside_x = sx >= T::zero() && sx <= max_x;
    let inside_y = sy >= T::zero() && sy <= max_y;
    let cx = sx.max(T::zero()).min(max_x);
    let cy = sy.max(T::zero()).min(max_y);
    let fx = cx.floor();
    let fy = cy.floor();
    let x0 = fx.to_usize().unwrap_or(0).min(w - 1);
    let y0 = fy.to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        ax: cx - fx,
        ay: cy - fy,
        inside_x,
        inside_y,
    }
}

/// Samples `img` at `(x + flow_x, y + flow_y)` with bilinear interpolation
/// and border clamping.
pub fn bilinear_forward<T: Scalar>(s: Shape, img: &[T], flow: &[T]) -> Vec<T> {
    let Shape { n, h, w, c } = s;
    let mut out = vec![T::zero(); s.numel()];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (b * h + y) * w + x;
                let sx = T::from_usize(x).unwrap() + flow[p * 2];
                let sy = T::from_usize(y).unwrap() + flow[p * 2 + 1];
                let t = tap(sx, sy, h, w);
                let i00 = ((b * h + t.y0) * w + t.x0) * c;
                let i01 = ((b * h + t.y0) * w + t.x1) * c;
                let i10 = ((b * h + t.y1) * w + t.x0) * c;
                let i11 = ((b * h + t.y1) * w + t.x1) * c;
                let o = &mut out[p * c..(p + 1) * c];
                for ch in 0..c {
                    let v00 = img[i00 + ch];
                    let v01 = img[i01 + ch];
                    let v10 = img[i10 + ch];
                    let v11 = img[i11 + ch];
                    let top = v00 + t.ax * (v01 - v00);
                    let bot = v10 + t.ax * (v11 - v10);
                    o[ch] = top + t.ay * (bot - top);
                }
            }
        }
    }
    out
}

/// Gradients of [`bilinear_forward`] with respect to image and flow.
pub fn bilinear_backward<T: Scalar>(
    s: Shape,
    img: &[T],
    flow: &[T],
    gout: &[T],
    want_img: bool,
    want_flow: bool,
) -> (Vec<T>, Vec<T>) {
    let Shape { n, h, w, c } = s;
    let mut gimg = if want_img { vec![T::zero(); img.len()] } else { Vec::new() };
    let mut gflow = if want_flow { vec![T::zero(); flow.len()] } else { Vec::new() };
    let one = T::one();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (b * h + y) * w + x;
                let sx = T::from_usize(x).unwrap() + flow[p * 2];
                let sy = T::from_usize(y).unwrap() + flow[p * 2 + 1];
                let t = tap(sx, sy, h, w);
                let i00 = ((b * h + t.y0) * w + t.x0) * c;
                let i01 = ((b * h + t.y0) * w + t.x1) * c;
                let i10 = ((b * h + t.y1) * w + t.x0) * c;
                let i11 = ((b * h + t.y1) * w + t.x1) * c;
                let g = &gout[p * c..(p + 1) * c];
                if want_img {
                    let w00 = (one - t.ax) * (one - t.ay);
                    let w01 = t.ax * (one - t.ay);
                    let w10 = (one - t.ax) * t.ay;
                    let w11 = t.ax * t.ay;
                    for ch in 0..c {
                        gimg[i00 + ch] += w00 * g[ch];
                        gimg[i01 + ch] += w01 * g[ch];
                        gimg[i10 + ch] += w10 * g[ch];
                        gimg[i11 + ch] += w11 * g[ch];
                    }
                }
                if want_flow {
                    let mut gx = T::zero();
                    let mut gy = T::zero();
                    for ch in 0..c {
                        let v00 = img[i00 + ch];
                        let v01 = img[i01 + ch];
                        let v10 = img[i10 + ch];
                        let v11 = img[i11 + ch];
                        gx += g[ch] * ((one - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                        gy += g[ch] * ((one - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                    }
                    if t.inside_x {
                        gflow[p * 2] += gx;
                    }
                    if t.inside_y {
                        gflow[p * 2 + 1] += gy;
                    }
                }
            }
        }
    }
    (gimg, gflow)
}

/// Source coordinate and weights for one output index of a 2x bilinear
/// upsample with half-pixel centers.
#[inline]
fn up_taps<T: Scalar>(o: usize, len: usize) -> (usize, usize, T) {
    let half = T::lit(0.5);
    let src = (T::from_usize(o).unwrap() + half) * half - half;
    let src = src.max(T::zero()).min(T::from_usize(len - 1).unwrap());
    let f = src.floor();
    let i0 = f.to_usize().unwrap_or(0);
    (i0, (i0 + 1).min(len - 1), src - f)
}

pub fn upsample2x_forward<T: Scalar>(s: Shape, x: &[T]) -> Vec<T> {
    let Shape { n, h, w, c } = s;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            let (y0, y1, ay) = up_taps::<T>(oy, h);
            for ox in 0..ow {
                let (x0, x1, ax) = up_taps::<T>(ox, w);
                let o = ((b * oh + oy) * ow + ox) * c;
                let i00 = ((b * h + y0) * w + x0) * c;
                let i01 = ((b * h + y0) * w + x1) * c;
                let i10 = ((b * h + y1) * w + x0) * c;
                let i11 = ((b * h + y1) * w + x1) * c;
                for ch in 0..c {
                    let top = x[i00 + ch] + ax * (x[i01 + ch] - x[i00 + ch]);
                    let bot = x[i10 + ch] + ax * (x[i11 + ch] - x[i10 + ch]);
                    out[o + ch] = top + ay * (bot - top);
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(s: Shape, gout: &[T]) -> Vec<T> {
    let Shape { n, h, w, c } = s;
    let (oh, ow) = (2 * h, 2 * w);
    let one = T::one();
    let mut gx = vec![T::zero(); s.numel()];
    for b in 0..n {
        for oy in 0..oh {
            let (y0, y1, ay) = up_taps::<T>(oy, h);
            for ox in 0..ow {
                let (x0, x1, ax) = up_taps::<T>(ox, w);
                let o = ((b * oh + oy) * ow + ox) * c;
                let ws = [
                    (((b * h + y0) * w + x0) * c, (one - ax) * (one - ay)),
                    (((b * h + y0) * w + x1) * c, ax * (one - ay)),
                    (((b * h + y1) * w + x0) * c, (one - ax) * ay),
                    (((b * h + y1) * w + x1) * c, ax * ay),
                ];
                for (i, wt) in ws {
                    for ch in 0..c {
                        gx[i + ch] += wt * gout[o + ch];
                    }
                }
            }
        }
    }
    gx
}

/// Displacement `(dx, dy)` of correlation channel `k` for a given radius.
pub fn displacement(k: usize, radius: usize) -> (isize, isize) {
    let side = 2 * radius + 1;
    let r = radius as isize;
    ((k % side) as isize - r, (k / side) as isize - r)
}

/// Columns `x` of a `w`-wide row for which `x + dx` stays inside.
#[inline]
fn span(w: usize, dx: isize) -> std::ops::Range<usize> {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

#[inline]
fn shifted(y: usize, dy: isize, h: usize) -> Option<usize> {
    let yy = y as isize + dy;
    (yy >= 0 && yy < h as isize).then_some(yy as usize)
}

/// Candidate positions per correlation tile. A tile scores [`TILE_PIXELS`]
/// consecutive pixels against the `TILE_PIXELS + 2r` positions they can
/// reach along the row, as outer products accumulated over channels.
const TILE: usize = 16;
const TILE_PIXELS: usize = 8;

/// `out[p, k] = <a[p], b[p + d_k]>`, zero outside the image.
pub fn correlation_forward<T: Scalar>(s: Shape, radius: usize, a: &[T], b: &[T]) -> Vec<T> {
    if TILE_PIXELS + 2 * radius > TILE {
        return correlation_forward_pixels(s, radius, a, b);
    }
    let Shape { n, h, w, c } = s;
    let side = 2 * radius + 1;
    let kk = side * side;
    let tiles = w.div_ceil(TILE_PIXELS);
    // Rows of `b` channel-major, shifted right by `radius` inside a zero
    // border wide enough for the last tile's candidates.
    let stride = tiles * TILE_PIXELS + TILE;
    let mut bt = vec![T::zero(); n * h * c * stride];
    for (r, row) in b.chunks_exact(w * c).enumerate() {
        let dst = &mut bt[r * c * stride..][..c * stride];
        for (x, px) in row.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                dst[ch * stride + x + radius] = v;
            }
        }
    }
    // One row of `a` with zero pixels past `w`.
    let mut ap = vec![T::zero(); tiles * TILE_PIXELS * c];
    let mut out = vec![T::zero(); n * h * w * kk];
    for bi in 0..n {
        for y in 0..h {
            let row = (bi * h + y) * w;
            ap[..w * c].copy_from_slice(&a[row * c..(row + w) * c]);
            for dy in -(radius as isize)..=radius as isize {
                let Some(yy) = shifted(y, dy, h) else { continue };
                let bt_row = &bt[(bi * h + yy) * c * stride..][..c * stride];
                let band = (dy + radius as isize) as usize * side;
                for t in 0..tiles {
                    let x0 = t * TILE_PIXELS;
                    let acc = correlation_tile(&ap, bt_row, c, stride, x0);
                    for (p, scores) in acc.iter().enumerate().take(w.saturating_sub(x0)) {
                        out[(row + x0 + p) * kk + band..][..side].copy_from_slice(&scores[p..p + side]);
                    }
                }
            }
        }
    }
    out
}

#[inline(always)]
fn correlation_tile<T: Scalar>(ap: &[T], bt: &[T], c: usize, stride: usize, x0: usize) -> [[T; TILE]; TILE_PIXELS] {
    let mut acc = [[T::zero(); TILE]; TILE_PIXELS];
    let xs: [&[T]; TILE_PIXELS] = std::array::from_fn(|p| &ap[(x0 + p) * c..][..c]);
    for ch in 0..c {
        let bv: &[T; TILE] = bt[ch * stride + x0..][..TILE].try_into().expect("tile width");
        for (a, x) in acc.iter_mut().zip(&xs) {
            let xv = x[ch];
            for (a, &bj) in a.iter_mut().zip(bv) {
                *a = madd(*a, xv, bj);
            }
        }
    }
    acc
}

/// Adjoints of [`correlation_forward`]. Each gradient pixel gathers its
/// contributions, `ga[p] = sum_k g[p, k] b[p + d_k]` and
/// `gb[q] = sum_k g[q - d_k, k] a[q - d_k]`, in registers per channel block.
pub fn correlation_backward<T: Scalar>(
    s: Shape,
    radius: usize,
    a: &[T],
    b: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    // Whole pixels of common widths accumulate as one block, giving
    // independent dependency chains per lane group.
    match s.c {
        32 => {
            correlation_grad_a::<T, 32>(s, radius, gout, b, &mut ga, 0);
            correlation_grad_b::<T, 32>(s, radius, gout, a, &mut gb, 0);
        }
        64 => {
            correlation_grad_a::<T, 64>(s, radius, gout, b, &mut ga, 0);
            correlation_grad_b::<T, 64>(s, radius, gout, a, &mut gb, 0);
        }
        _ => {
            per_block!(s.c, correlation_grad_a(s, radius, gout, b, &mut ga));
            per_block!(s.c, correlation_grad_b(s, radius, gout, a, &mut gb));
        }
    }
    (ga, gb)
}

/// Offsets `lo..=hi` within `-r..=r` keeping `x + dx` inside a `w`-wide row.
#[inline]
fn reach(x: usize, w: usize, r: isize) -> (isize, isize) {
    ((-(x as isize)).max(-r), (w as isize - 1 - x as isize).min(r))
}

fn correlation_grad_a<T: Scalar, const W: usize>(s: Shape, radius: usize, gout: &[T], b: &[T], ga: &mut [T], c0: usize) {
    let Shape { n, h, w, c } = s;
    let side = 2 * radius + 1;
    let kk = side * side;
    let r = radius as isize;
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (bi * h + y) * w + x;
                let (lo, hi) = reach(x, w, r);
                let len = (hi - lo + 1) as usize;
                let mut acc = [T::zero(); W];
                for dy in -r..=r {
                    let Some(yy) = shifted(y, dy, h) else { continue };
                    let k0 = ((dy + r) * side as isize + lo + r) as usize;
                    let gs = &gout[p * kk + k0..][..len];
                    let q0 = ((bi * h + yy) * w) as isize + x as isize + lo;
                    let bs = &b[q0 as usize * c..][..len * c];
                    for (&gv, bv) in gs.iter().zip(bs.chunks_exact(c)) {
                        for (a, &v) in acc.iter_mut().zip(&bv[c0..c0 + W]) {
                            *a = madd(*a, gv, v);
                        }
                    }
                }
                ga[p * c + c0..][..W].copy_from_slice(&acc);
            }
        }
    }
}

/// `gb[q] = sum_k g[q - d_k, k] a[q - d_k]`. Along a source row the score
/// channel falls by one per pixel, so its flat index advances by `kk - 1`.
fn correlation_grad_b<T: Scalar, const W: usize>(s: Shape, radius: usize, gout: &[T], a: &[T], gb: &mut [T], c0: usize) {
    let Shape { n, h, w, c } = s;
    let side = 2 * radius + 1;
    let kk = side * side;
    let r = radius as isize;
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                let q = (bi * h + y) * w + x;
                // Source pixels `x - dx`, left to right.
                let (lo, hi) = reach(x, w, r);
                let len = (hi - lo + 1) as usize;
                let px0 = (x as isize + lo) as usize;
                let mut acc = [T::zero(); W];
                for dy in -r..=r {
                    let Some(py) = shifted(y, -dy, h) else { continue };
                    let row = (bi * h + py) * w;
                    let k0 = ((dy + r) * side as isize + r - lo) as usize;
                    let gs = gout[(row + px0) * kk + k0..].iter().step_by((kk - 1).max(1)).take(len);
                    let src = &a[(row + px0) * c..][..len * c];
                    for (&gv, av) in gs.zip(src.chunks_exact(c)) {
                        for (acc, &v) in acc.iter_mut().zip(&av[c0..c0 + W]) {
                            *acc = madd(*acc, gv, v);
                        }
                    }
                }
                gb[q * c + c0..][..W].copy_from_slice(&acc);
            }
        }
    }
}

/// Per-pixel [`correlation_forward`] for radii too wide for a tile.
fn correlation_forward_pixels<T: Scalar>(s: Shape, radius: usize, a: &[T], b: &[T]) -> Vec<T> {
    let Shape { n, h, w, c } = s;
    let side = 2 * radius + 1;
    let kk = side * side;
    let mut out = vec![T::zero(); n * h * w * kk];
    for bi in 0..n {
        for y in 0..h {
            for k in 0..kk {
                let (dx, dy) = displacement(k, radius);
                let Some(yy) = shifted(y, dy, h) else { continue };
                for x in span(w, dx) {
                    let p = (bi * h + y) * w + x;
                    let q = (bi * h + yy) * w + (x as isize + dx) as usize;
                    out[p * kk + k] = dot(&a[p * c..(p + 1) * c], &b[q * c..(q + 1) * c]);
                }
            }
        }
    }
    out
}

/// `out[p, k] = (v[p, k] + v[p - d_k, k]) / 2` over a correlation volume,
/// with out-of-frame terms zero. Turns `<a[p], b[p + d]>` into the average
/// of both anchorings, which is even in `d` when `a == b`.
pub fn symmetrize_forward<T: Scalar>(s: Shape, radius: usize, v: &[T]) -> Vec<T> {
    let Shape { n, h, w, c: kk } = s;
    let side = 2 * radius + 1;
    let r = radius as isize;
    let half = T::lit(0.5);
    let mut out: Vec<T> = v.iter().map(|&x| x * half).collect();
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (bi * h + y) * w + x;
                // Partners `x - dx` for dx in `-hi..=-lo`; from dx = -lo down,
                // the partner's flat index advances by `kk - 1`.
                let (lo, hi) = reach(x, w, r);
                let len = (hi - lo + 1) as usize;
                for dy in -r..=r {
                    let Some(py) = shifted(y, -dy, h) else { continue };
                    let kb = ((dy + r) * side as isize + r) as usize;
                    let first = ((bi * h + py) * w + (x as isize + lo) as usize) * kk + (kb as isize - lo) as usize;
                    let dst = &mut out[p * kk + (kb as isize - hi) as usize..][..len];
                    for (d, &u) in dst.iter_mut().rev().zip(v[first..].iter().step_by((kk - 1).max(1))) {
                        *d += u * half;
                    }
                }
            }
        }
    }
    out
}

pub fn symmetrize_backward<T: Scalar>(s: Shape, radius: usize, gout: &[T]) -> Vec<T> {
    let Shape { n, h, w, c: kk } = s;
    let side = 2 * radius + 1;
    let r = radius as isize;
    let half = T::lit(0.5);
    let mut g: Vec<T> = gout.iter().map(|&x| x * half).collect();
    for bi in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (bi * h + y) * w + x;
                // Partners `x + dx`; their flat index advances by `kk + 1` per dx.
                let (lo, hi) = reach(x, w, r);
                let len = (hi - lo + 1) as usize;
                for dy in -r..=r {
                    let Some(yy) = shifted(y, dy, h) else { continue };
                    let k0 = ((dy + r) * side as isize + lo + r) as usize;
                    let first = ((bi * h + yy) * w + (x as isize + lo) as usize) * kk + k0;
                    let dst = &mut g[p * kk + k0..][..len];
                    for (d, &u) in dst.iter_mut().zip(gout[first..].iter().step_by(kk + 1)) {
                        *d += u * half;
                    }
                }
            }
        }
    }
    g
}

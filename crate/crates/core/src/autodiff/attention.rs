//! Single-head windowed self-attention kernels.
//!
//! The spatial grid is tiled with `window x window` blocks anchored at the
//! origin. Blocks on the right and bottom edges are truncated when the extent
//! is not a multiple of the window, which is equivalent to zero-padding with
//! the padded tokens masked out and the result cropped back.

use crate::tensor::{gemm, MatRef, Scalar, Shape};

/// Token indices (flattened `y * w + x`) of every window in one image.
pub fn windows(h: usize, w: usize, window: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for by in (0..h).step_by(window) {
        for bx in (0..w).step_by(window) {
            let mut toks = Vec::with_capacity(window * window);
            for y in by..(by + window).min(h) {
                for x in bx..(bx + window).min(w) {
                    toks.push(y * w + x);
                }
            }
            out.push(toks);
        }
    }
    out
}

/// Copies the rows `toks` of a `(.., width)` token matrix into `dst`.
fn gather_rows<T: Scalar>(src: &[T], base: usize, toks: &[usize], width: usize, dst: &mut Vec<T>) {
    dst.clear();
    for &t in toks {
        let o = (base + t) * width;
        dst.extend_from_slice(&src[o..o + width]);
    }
}

fn scatter_add_rows<T: Scalar>(dst: &mut [T], base: usize, toks: &[usize], width: usize, src: &[T]) {
    for (i, &t) in toks.iter().enumerate() {
        let o = (base + t) * width;
        for (d, &v) in dst[o..o + width].iter_mut().zip(&src[i * width..(i + 1) * width]) {
            *d += v;
        }
    }
}

/// Forward pass. `q`/`k` have `d` channels, `v` has `cv`. Returns the output
/// and the row-stochastic attention matrices of every window, concatenated.
pub fn forward<T: Scalar>(
    shape_qk: Shape,
    cv: usize,
    window: usize,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let Shape { n, h, w, c: d } = shape_qk;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let wins = windows(h, w, window);
    let probs_len: usize = wins.iter().map(|t| t.len() * t.len()).sum::<usize>() * n;
    let mut probs = Vec::with_capacity(probs_len);
    let mut out = vec![T::zero(); n * h * w * cv];
    let (mut qw, mut kw, mut vw) = (Vec::new(), Vec::new(), Vec::new());
    let mut ow = Vec::new();
    for b in 0..n {
        let base = b * h * w;
        for toks in &wins {
            let t = toks.len();
            gather_rows(q, base, toks, d, &mut qw);
            gather_rows(k, base, toks, d, &mut kw);
            gather_rows(v, base, toks, cv, &mut vw);
            let start = probs.len();
            probs.resize(start + t * t, T::zero());
            let p = &mut probs[start..];
            gemm(MatRef::N(&qw, t, d), MatRef::T(&kw, d, t), T::zero(), p);
            for row in p.chunks_exact_mut(t) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s)) * scale;
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s * scale - mx).exp();
                    z += *s;
                }
                let inv = T::one() / z;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            ow.clear();
            ow.resize(t * cv, T::zero());
            gemm(MatRef::N(p, t, t), MatRef::N(&vw, t, cv), T::zero(), &mut ow);
            for (i, &tok) in toks.iter().enumerate() {
                let o = (base + tok) * cv;
                out[o..o + cv].copy_from_slice(&ow[i * cv..(i + 1) * cv]);
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    shape_qk: Shape,
    cv: usize,
    window: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Shape { n, h, w, c: d } = shape_qk;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let wins = windows(h, w, window);
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let (mut qw, mut kw, mut vw, mut gw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gp, mut tmp) = (Vec::new(), Vec::new());
    let mut off = 0;
    for b in 0..n {
        let base = b * h * w;
        for toks in &wins {
            let t = toks.len();
            let p = &probs[off..off + t * t];
            off += t * t;
            gather_rows(q, base, toks, d, &mut qw);
            gather_rows(k, base, toks, d, &mut kw);
            gather_rows(v, base, toks, cv, &mut vw);
            gather_rows(gout, base, toks, cv, &mut gw);
            // dV = P^T dO
            tmp.clear();
            tmp.resize(t * cv, T::zero());
            gemm(MatRef::T(p, t, t), MatRef::N(&gw, t, cv), T::zero(), &mut tmp);
            scatter_add_rows(&mut gv, base, toks, cv, &tmp);
            // dP = dO V^T, then dS = P (dP - rowsum(P dP)) scaled
            gp.clear();
            gp.resize(t * t, T::zero());
            gemm(MatRef::N(&gw, t, cv), MatRef::T(&vw, cv, t), T::zero(), &mut gp);
            for (grow, prow) in gp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let dot = grow.iter().zip(prow).fold(T::zero(), |a, (&g, &pp)| a + g * pp);
                for (g, &pp) in grow.iter_mut().zip(prow) {
                    *g = pp * (*g - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            tmp.clear();
            tmp.resize(t * d, T::zero());
            gemm(MatRef::N(&gp, t, t), MatRef::N(&kw, t, d), T::zero(), &mut tmp);
            scatter_add_rows(&mut gq, base, toks, d, &tmp);
            tmp.clear();
            tmp.resize(t * d, T::zero());
            gemm(MatRef::T(&gp, t, t), MatRef::N(&qw, t, d), T::zero(), &mut tmp);
            scatter_add_rows(&mut gk, base, toks, d, &tmp);
        }
    }
    (gq, gk, gv)
}

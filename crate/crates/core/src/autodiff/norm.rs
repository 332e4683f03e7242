use crate::tensor::{Scalar, Shape};

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Both branches avoid overflowing exp for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax over contiguous groups of `c` values.
pub fn softmax_channels<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        let mx = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut z = T::zero();
        for &v in px {
            let e = (v - mx).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o = *o / z;
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], g: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yp, gp) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
        let dot: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        out.extend(yp.iter().zip(gp).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

pub struct InstanceNormOut<T> {
    pub out: Vec<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each (sample, channel) plane to zero mean and unit variance.
/// A plane whose values are all equal maps to exact zeros.
pub fn instance_norm<T: Scalar>(s: Shape, x: &[T], eps: T) -> InstanceNormOut<T> {
    let Shape { n, h, w, c } = s;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); n * c];
    let mut std = vec![T::zero(); n * c];
    let mut inv_std = vec![T::zero(); n * c];
    for b in 0..n {
        let plane = &x[b * hw * c..(b + 1) * hw * c];
        let mut sum = vec![T::zero(); c];
        let mut lo = vec![T::infinity(); c];
        let mut hi = vec![T::neg_infinity(); c];
        for px in plane.chunks_exact(c) {
            for ch in 0..c {
                sum[ch] += px[ch];
                lo[ch] = lo[ch].min(px[ch]);
                hi[ch] = hi[ch].max(px[ch]);
            }
        }
        let mu: Vec<T> = sum.iter().map(|&s| s / count).collect();
        let mut var = vec![T::zero(); c];
        for px in plane.chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] - mu[ch];
                var[ch] += d * d;
            }
        }
        for ch in 0..c {
            let v = var[ch] / count;
            mean[b * c + ch] = mu[ch];
            std[b * c + ch] = v.sqrt();
            inv_std[b * c + ch] = T::one() / (v + eps).sqrt();
        }
        let dst = &mut out[b * hw * c..(b + 1) * hw * c];
        for (op, px) in dst.chunks_exact_mut(c).zip(plane.chunks_exact(c)) {
            for ch in 0..c {
                op[ch] = if lo[ch] == hi[ch] {
                    T::zero()
                } else {
                    (px[ch] - mu[ch]) * inv_std[b * c + ch]
                };
            }
        }
    }
    InstanceNormOut {
        out,
        mean,
        std,
        inv_std,
    }
}

/// `dx = inv_std * (g - mean(g) - y * mean(g * y))` per plane.
pub fn instance_norm_backward<T: Scalar>(s: Shape, y: &[T], g: &[T], inv_std: &[T]) -> Vec<T> {
    let Shape { n, h, w, c } = s;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let range = b * hw * c..(b + 1) * hw * c;
        let (yp, gp) = (&y[range.clone()], &g[range.clone()]);
        let mut mg = vec![T::zero(); c];
        let mut mgy = vec![T::zero(); c];
        for (yy, gg) in yp.chunks_exact(c).zip(gp.chunks_exact(c)) {
            for ch in 0..c {
                mg[ch] += gg[ch];
                mgy[ch] += gg[ch] * yy[ch];
            }
        }
        for ch in 0..c {
            mg[ch] = mg[ch] / count;
            mgy[ch] = mgy[ch] / count;
        }
        let dst = &mut dx[range];
        for ((d, yy), gg) in dst.chunks_exact_mut(c).zip(yp.chunks_exact(c)).zip(gp.chunks_exact(c)) {
            for ch in 0..c {
                d[ch] = inv_std[b * c + ch] * (gg[ch] - mg[ch] - yy[ch] * mgy[ch]);
            }
        }
    }
    dx
}

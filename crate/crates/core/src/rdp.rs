//! Region-distinguishable priors: instance masks turned into per-pixel
//! Gaussian samples whose parameters are looked up from a hashed codebook,
//! plus the one-hot and learnable embeddings used as ablations and the
//! cross-frame ID reconciliation.
//!
//! # Codebook derivation
//!
//! Means are quantized to a lattice of `q` evenly spaced levels in `[-1, 1]`
//! per channel, where `q` is the smallest integer with `q^c >= 2^16`. An ID
//! is first passed through a seeded 16-bit Feistel permutation; the digits of
//! the permuted value in base `q` select the level of each channel. Distinct
//! IDs therefore always receive distinct means at least `2 / (q - 1)` apart
//! (`2/3` for the default `c = 8`), and every channel value is uniform over
//! the lattice levels for a random seed. Channels beyond those needed to
//! encode 16 bits take hashed levels.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::tensor::{Scalar, Shape, Tensor};

/// Default codebook seed; the derivation guarantees separation for any seed,
/// so this only fixes which lattice point each ID lands on.
pub const DEFAULT_CODEBOOK_SEED: u64 = 0x5244_5043_0DE8_0001;
pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_SIGMA: f64 = 0.1;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub(crate) fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| mix64(h ^ p))
}

/// Uniform in `(0, 1]`.
#[inline]
fn unit(h: u64) -> f64 {
    ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

/// Standard normal sample, a pure function of the key.
pub(crate) fn normal(parts: &[u64]) -> f64 {
    let h = hash(parts);
    let u1 = unit(h);
    let u2 = unit(mix64(h ^ 0x5851_f42d_4c95_7f2d));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Deterministic ID -> (mean, variance) rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianCodebook {
    channels: usize,
    seed: u64,
    sigma: f64,
    levels: u64,
    /// Channels that carry digits of the permuted ID.
    digit_channels: usize,
}

impl GaussianCodebook {
    pub fn new(channels: usize, seed: u64, sigma: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("codebook needs at least one channel"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("codebook sigma must be finite and >= 0, got {sigma}")));
        }
        let mut levels = 2u64;
        while levels.saturating_pow(channels as u32) < 1 << 16 {
            levels += 1;
        }
        let mut digit_channels = 0;
        let mut span = 1u64;
        while span < 1 << 16 {
            span = span.saturating_mul(levels);
            digit_channels += 1;
        }
        Ok(GaussianCodebook {
            channels,
            seed,
            sigma,
            levels,
            digit_channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Number of mean levels per channel.
    pub fn levels(&self) -> u64 {
        self.levels
    }

    /// Seeded bijection on 16-bit IDs.
    fn permute(&self, id: u16) -> u16 {
        let (mut l, mut r) = ((id >> 8) as u8, id as u8);
        for round in 0..4u64 {
            let f = hash(&[self.seed, round, r as u64]) as u8;
            (l, r) = (r, l ^ f);
        }
        ((l as u16) << 8) | r as u16
    }

    pub fn mean(&self, id: u16) -> Vec<f64> {
        let mut idx = self.permute(id) as u64;
        let top = (self.levels - 1) as f64;
        (0..self.channels)
            .map(|j| {
                let level = if j < self.digit_channels {
                    let d = idx % self.levels;
                    idx /= self.levels;
                    d
                } else {
                    hash(&[self.seed, id as u64, j as u64, 0xc4]) % self.levels
                };
                -1.0 + 2.0 * level as f64 / top
            })
            .collect()
    }

    /// Fixed variance `sigma^2` on every channel.
    pub fn variance(&self, _id: u16) -> Vec<f64> {
        vec![self.sigma * self.sigma; self.channels]
    }

    pub fn lookup(&self, id: u16) -> GaussianParams {
        GaussianParams {
            mean: self.mean(id),
            variance: self.variance(id),
        }
    }
}

/// Sampled prior `H x W x c` together with the seed that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpField {
    pub values: Tensor<f32>,
    pub seed: u64,
}

impl RdpField {
    pub fn channels(&self) -> usize {
        self.values.shape().c
    }
}

/// Draws every pixel from the Gaussian of its instance. The draw for pixel
/// `(y, x)` and channel `j` is a pure function of `(sample_seed, y, x, j)`.
pub fn embed_mask(mask: &InstanceMask, codebook: &GaussianCodebook, sample_seed: u64) -> RdpField {
    let c = codebook.channels();
    let mut cache: BTreeMap<u16, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let shape = Shape::new(1, mask.height(), mask.width(), c);
    let mut data = Vec::with_capacity(shape.numel());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let id = mask.get(y, x);
            let (mu, std) = cache.entry(id).or_insert_with(|| {
                let p = codebook.lookup(id);
                (p.mean, p.variance.iter().map(|v| v.sqrt()).collect())
            });
            for j in 0..c {
                let z = normal(&[sample_seed, y as u64, x as u64, j as u64]);
                data.push((mu[j] + std[j] * z) as f32);
            }
        }
    }
    RdpField {
        values: Tensor::from_vec(shape, data).expect("field shape"),
        seed: sample_seed,
    }
}

/// Assigns each pixel the candidate whose codebook mean is nearest.
pub fn nearest_centroid_decode(
    field: &RdpField,
    codebook: &GaussianCodebook,
    candidates: &BTreeSet<u16>,
) -> Result<InstanceMask> {
    if candidates.is_empty() {
        return Err(Error::invalid("nearest-centroid decode needs at least one candidate ID"));
    }
    let s = field.values.shape();
    if s.c != codebook.channels() {
        return Err(Error::shape(
            "nearest_centroid_decode",
            format!("field has {} channels, codebook {}", s.c, codebook.channels()),
        ));
    }
    let means: Vec<(u16, Vec<f64>)> = candidates.iter().map(|&id| (id, codebook.mean(id))).collect();
    let ids = field
        .values
        .data()
        .chunks_exact(s.c)
        .map(|px| {
            let mut best = (f64::INFINITY, 0u16);
            for (id, mu) in &means {
                let d: f64 = px.iter().zip(mu).map(|(&v, m)| (v as f64 - m).powi(2)).sum();
                if d < best.0 {
                    best = (d, *id);
                }
            }
            best.1
        })
        .collect();
    InstanceMask::new(s.h, s.w, ids)
}

fn check_capacity(mask: &InstanceMask, max_instances: usize) -> Result<()> {
    let top = mask.max_id() as usize;
    if top >= max_instances {
        return Err(Error::invalid(format!(
            "instance id {top} exceeds embedding capacity of {max_instances}"
        )));
    }
    Ok(())
}

/// Indicator channels: channel `k` is 1 where the ID equals `k`.
pub fn one_hot_embed(mask: &InstanceMask, max_instances: usize) -> Result<RdpField> {
    check_capacity(mask, max_instances)?;
    let shape = Shape::new(1, mask.height(), mask.width(), max_instances);
    let mut data = vec![0f32; shape.numel()];
    for (p, &id) in mask.ids().iter().enumerate() {
        data[p * max_instances + id as usize] = 1.0;
    }
    Ok(RdpField {
        values: Tensor::from_vec(shape, data)?,
        seed: 0,
    })
}

/// Per-pixel lookup into a trainable `1 x 1 x max_instances x c` table.
pub fn learnable_embed<T: Scalar>(g: &mut Graph<T>, table: Var, mask: &InstanceMask) -> Result<Var> {
    let st = g.shape(table);
    check_capacity(mask, st.w)?;
    g.gather(table, mask.ids(), Shape::new(1, mask.height(), mask.width(), st.c))
}

/// Minimum IoU for two instances to be considered the same object.
pub const MATCH_IOU_THRESHOLD: f64 = 0.3;

/// Relabels frame 1 so that instances overlapping a frame-0 instance adopt
/// its ID. Pairs are matched greedily by descending IoU (ties broken by the
/// smaller frame-0 then frame-1 ID) down to [`MATCH_IOU_THRESHOLD`];
/// unmatched frame-1 instances receive fresh IDs above both frames' maxima.
/// Background (0) maps to itself.
pub fn match_instance_ids(mask0: &InstanceMask, mask1: &InstanceMask) -> Result<InstanceMask> {
    if (mask0.height(), mask0.width()) != (mask1.height(), mask1.width()) {
        return Err(Error::shape(
            "match_instance_ids",
            format!(
                "{}x{} vs {}x{}",
                mask0.height(),
                mask0.width(),
                mask1.height(),
                mask1.width()
            ),
        ));
    }
    let area0 = mask0.areas();
    let area1 = mask1.areas();
    let mut inter: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for (&a, &b) in mask0.ids().iter().zip(mask1.ids()) {
        if a != 0 && b != 0 {
            *inter.entry((a, b)).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<(f64, u16, u16)> = inter
        .iter()
        .map(|(&(a, b), &n)| {
            let union = area0[&a] + area1[&b] - n;
            (n as f64 / union as f64, a, b)
        })
        .filter(|&(iou, _, _)| iou >= MATCH_IOU_THRESHOLD)
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut remap: BTreeMap<u16, u16> = BTreeMap::new();
    let mut used0 = BTreeSet::new();
    for (_, a, b) in pairs {
        if remap.contains_key(&b) || used0.contains(&a) {
            continue;
        }
        remap.insert(b, a);
        used0.insert(a);
    }
    let mut fresh = mask0.max_id().max(mask1.max_id());
    for &b in area1.keys() {
        if b == 0 || remap.contains_key(&b) {
            continue;
        }
        fresh = fresh
            .checked_add(1)
            .ok_or_else(|| Error::invalid("instance id space exhausted while assigning fresh ids"))?;
        remap.insert(b, fresh);
    }
    remap.insert(0, 0);
    InstanceMask::new(
        mask1.height(),
        mask1.width(),
        mask1.ids().iter().map(|b| remap[b]).collect(),
    )
}

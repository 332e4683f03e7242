//! Triplets turned into network inputs and targets: augmentation and the
//! seeding of stochastic priors.

use rand::Rng;

use crate::config::RunConfig;
use crate::datagen::TripletSample;
use crate::error::Result;
use crate::mask::InstanceMask;
use crate::model::{prepare_prior, FrameInput, Targets};
use crate::params::name_key;
use crate::rdp::hash;
use crate::tensor::{Scalar, Tensor};

/// A triplet with both ground-truth flows materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub i0: Tensor<f32>,
    pub it: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub masks: Option<(InstanceMask, InstanceMask)>,
    /// `(0 -> 1, 1 -> 0)`.
    pub flows: Option<(Tensor<f32>, Tensor<f32>)>,
}

impl Prepared {
    pub fn new(s: &TripletSample) -> Self {
        let flows = match (&s.flow01, s.flow10()) {
            (Some(f01), Some(f10)) => Some((f01.clone(), f10)),
            _ => None,
        };
        Prepared {
            i0: s.i0.clone(),
            it: s.it.clone(),
            i1: s.i1.clone(),
            masks: s.masks.clone(),
            flows,
        }
    }

    /// Mirrors every field left-right (`horizontal`) or top-bottom; the
    /// matching flow component changes sign.
    pub fn flipped(&self, horizontal: bool) -> Self {
        let s = self.i0.shape();
        let src = |y: usize, x: usize| if horizontal { (y, s.w - 1 - x) } else { (s.h - 1 - y, x) };
        let img = |t: &Tensor<f32>| {
            Tensor::from_fn(t.shape(), |n, y, x, c| {
                let (sy, sx) = src(y, x);
                t.at(n, sy, sx, c)
            })
        };
        let flow = |t: &Tensor<f32>| {
            let negated = if horizontal { 0 } else { 1 };
            Tensor::from_fn(t.shape(), |n, y, x, c| {
                let (sy, sx) = src(y, x);
                let v = t.at(n, sy, sx, c);
                if c == negated {
                    -v
                } else {
                    v
                }
            })
        };
        let mask = |m: &InstanceMask| {
            InstanceMask::from_fn(m.height(), m.width(), |y, x| {
                let (sy, sx) = src(y, x);
                m.get(sy, sx)
            })
        };
        Prepared {
            i0: img(&self.i0),
            it: img(&self.it),
            i1: img(&self.i1),
            masks: self.masks.as_ref().map(|(a, b)| (mask(a), mask(b))),
            flows: self.flows.as_ref().map(|(a, b)| (flow(a), flow(b))),
        }
    }

    /// Swaps the roles of the two input frames; valid for `t = 0.5`.
    pub fn reversed(&self) -> Self {
        Prepared {
            i0: self.i1.clone(),
            it: self.it.clone(),
            i1: self.i0.clone(),
            masks: self.masks.as_ref().map(|(a, b)| (b.clone(), a.clone())),
            flows: self.flows.as_ref().map(|(a, b)| (b.clone(), a.clone())),
        }
    }

    /// Random horizontal flip, vertical flip and, at `t = 0.5`, temporal
    /// reversal, each with probability one half.
    pub fn augmented(&self, rng: &mut impl Rng, t: f64) -> Self {
        let mut out = self.clone();
        if rng.gen_bool(0.5) {
            out = out.flipped(true);
        }
        if rng.gen_bool(0.5) {
            out = out.flipped(false);
        }
        if rng.gen_bool(0.5) && t == 0.5 {
            out = out.reversed();
        }
        out
    }

    /// Network input; priors are embedded only when the fusion module is on.
    pub fn input<T: Scalar>(&self, cfg: &RunConfig, prior_seed: u64, t: f64) -> Result<FrameInput<T>> {
        let priors = match (&self.masks, cfg.model.hrffm) {
            (Some((m0, m1)), true) => Some((
                prepare_prior(cfg, m0, hash(&[prior_seed, 0]))?,
                prepare_prior(cfg, m1, hash(&[prior_seed, 1]))?,
            )),
            _ => None,
        };
        Ok(FrameInput {
            i0: self.i0.cast(),
            i1: self.i1.cast(),
            priors,
            t,
        })
    }

    /// Supervision; flows are dropped when their loss weight is zero.
    pub fn targets<T: Scalar>(&self, cfg: &RunConfig) -> Targets<T> {
        let flows = match (&self.flows, cfg.train.flow_weight > 0.0) {
            (Some((a, b)), true) => Some((a.cast(), b.cast())),
            _ => None,
        };
        Targets {
            frame: self.it.cast(),
            flows,
        }
    }
}

/// Prior seed for evaluating the sample called `name`; independent of the
/// sample's position in any list.
pub fn eval_prior_seed(cfg: &RunConfig, name: &str) -> u64 {
    hash(&[cfg.eval.seed, name_key(name)])
}

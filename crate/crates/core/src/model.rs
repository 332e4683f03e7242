//! Motion-based interpolation network: encoder pyramid, optional region-aware
//! enhancement, coarse-to-fine correlation flow in both directions, and
//! warp-and-blend synthesis with a small decoder.

use crate::autodiff::{Graph, Var};
use crate::config::{Embedding, RunConfig};
use crate::error::{Error, Result};
use crate::hrffm::{self, level_stride, LEAKY_SLOPE};
use crate::mask::InstanceMask;
use crate::params::{conv, conv_specs, Bound, Init, ParamSpec};
use crate::rdp::{self, GaussianCodebook};
use crate::tensor::{Scalar, Shape, Tensor};

/// L2 normalization guard for correlation features.
const FEATURE_EPS: f64 = 1e-6;

pub fn param_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let mut cin = 3;
    for (l, &c) in cfg.model.channels.iter().enumerate() {
        v.extend(conv_specs(&format!("enc.{l}"), 3, cin, c, false));
        v.push(ParamSpec::new(
            format!("flow.{l}.log_temp"),
            Shape::scalar(),
            Init::Const(cfg.flow.temperature.ln()),
        ));
        cin = c;
    }
    let d = cfg.model.decoder_channels;
    let din = 6 + 2 * cfg.model.channels[0];
    v.extend(conv_specs("dec.0", 3, din, d, false));
    v.extend(conv_specs("dec.1", 3, d, d, false));
    v.extend(conv_specs("dec.2", 3, d, 4, true));
    v.extend(hrffm::param_specs(cfg));
    v
}

/// Frame to pyramid of `cfg.model.levels()` feature maps, finest first.
pub fn encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &RunConfig, img: Var) -> Result<Vec<Var>> {
    let s = g.shape(img);
    let step = 1 << (cfg.model.levels() - 1);
    if s.h % step != 0 || s.w % step != 0 {
        return Err(Error::invalid(format!(
            "frame {}x{} must be divisible by {step}; pad to {}x{}",
            s.h,
            s.w,
            s.h.div_ceil(step) * step,
            s.w.div_ceil(step) * step
        )));
    }
    if s.c != 3 {
        return Err(Error::shape("encode", format!("expected 3 channels, got {}", s.c)));
    }
    let mut out = Vec::new();
    let mut x = img;
    for l in 0..cfg.model.levels() {
        let y = conv(g, p, &format!("enc.{l}"), x, level_stride(l))?;
        x = g.leaky_relu(y, T::lit(LEAKY_SLOPE));
        out.push(x);
    }
    Ok(out)
}

/// Per-level flows, finest first, in pixels of that level.
#[derive(Clone, Debug)]
pub struct Flows {
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

/// Constant `1 x 1 x (2r+1)^2 x 2` kernel mapping correlation probabilities
/// to their expected displacement.
fn soft_argmax_kernel<T: Scalar>(radius: usize) -> Tensor<T> {
    let k = (2 * radius + 1) * (2 * radius + 1);
    let mut t = Tensor::zeros(Shape::new(1, 1, k, 2));
    for i in 0..k {
        let (dx, dy) = crate::autodiff::sample::displacement(i, radius);
        t.set(0, 0, i, 0, T::lit(dx as f64));
        t.set(0, 0, i, 1, T::lit(dy as f64));
    }
    t
}

/// Per-channel centered, unit-length descriptors for correlation.
fn matching_features<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let (centered, _) = g.instance_norm(f, T::lit(FEATURE_EPS))?;
    Ok(g.l2_normalize(centered, T::lit(FEATURE_EPS)))
}

fn flow_one_way<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &RunConfig,
    from: &[Var],
    to: &[Var],
    argmax: Var,
) -> Result<Vec<Var>> {
    let levels = from.len();
    let mut flows = vec![None; levels];
    let mut prev: Option<Var> = None;
    for l in (0..levels).rev() {
        let a = matching_features(g, from[l])?;
        let b = matching_features(g, to[l])?;
        let up = match prev {
            Some(f) => {
                let u = g.upsample2x(f);
                Some(g.mul_scalar(u, T::lit(2.0)))
            }
            None => None,
        };
        let b = match up {
            Some(u) => g.bilinear_sample(b, u)?,
            None => b,
        };
        let corr = g.symmetric_correlation(a, b, cfg.flow.radius)?;
        let log_t = p.get(&format!("flow.{l}.log_temp"))?;
        let temp = g.exp(log_t);
        let scores = g.scale_by(corr, temp)?;
        let probs = g.softmax_channels(scores)?;
        let delta = g.conv2d(probs, argmax, None, 1, 0)?;
        let flow = match up {
            Some(u) => g.add(u, delta)?,
            None => delta,
        };
        flows[l] = Some(flow);
        prev = Some(flow);
    }
    Ok(flows.into_iter().map(|f| f.expect("every level visited")).collect())
}

/// Coarse-to-fine flow in both directions from matching pyramids.
pub fn estimate_flow<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &RunConfig,
    p0: &[Var],
    p1: &[Var],
) -> Result<Flows> {
    if p0.len() != p1.len() || p0.iter().zip(p1).any(|(&a, &b)| g.shape(a) != g.shape(b)) {
        return Err(Error::shape("estimate_flow", "pyramids differ"));
    }
    let argmax = g.constant(soft_argmax_kernel(cfg.flow.radius));
    Ok(Flows {
        forward: flow_one_way(g, p, cfg, p0, p1, argmax)?,
        backward: flow_one_way(g, p, cfg, p1, p0, argmax)?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Synthesis {
    pub frame: Var,
    pub blend: Var,
    pub residual: Var,
}

/// Warps both frames (and their finest features) to time `t` and blends.
///
/// The blend logit is offset by `ln((1 - t) / t)`, so an untrained decoder
/// weights the frames by temporal proximity.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    i0: Var,
    i1: Var,
    feat0: Var,
    feat1: Var,
    flow01: Var,
    flow10: Var,
    t: f64,
) -> Result<Synthesis> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("t must lie in (0, 1), got {t}")));
    }
    let ft0 = g.mul_scalar(flow01, T::lit(-t));
    let ft1 = g.mul_scalar(flow10, T::lit(-(1.0 - t)));
    let w0 = g.bilinear_sample(i0, ft0)?;
    let w1 = g.bilinear_sample(i1, ft1)?;
    let wf0 = g.bilinear_sample(feat0, ft0)?;
    let wf1 = g.bilinear_sample(feat1, ft1)?;
    let x = g.concat(&[w0, w1, wf0, wf1])?;
    let slope = T::lit(LEAKY_SLOPE);
    let h = conv(g, p, "dec.0", x, 1)?;
    let h = g.leaky_relu(h, slope);
    let h = conv(g, p, "dec.1", h, 1)?;
    let h = g.leaky_relu(h, slope);
    let out = conv(g, p, "dec.2", h, 1)?;
    let logit = g.slice_channels(out, 0, 1)?;
    let residual = g.slice_channels(out, 1, 3)?;
    let logit = g.add_scalar(logit, T::lit(((1.0 - t) / t).ln()));
    let blend = g.sigmoid(logit);
    let diff = g.sub(w0, w1)?;
    let mixed = g.mul_channel(diff, blend)?;
    let y = g.add(w1, mixed)?;
    let y = g.add(y, residual)?;
    let frame = g.clamp(y, T::zero(), T::one());
    Ok(Synthesis { frame, blend, residual })
}

/// Mean of `sqrt((a - b)^2 + eps^2)`.
pub fn charbonnier_loss<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, eps: f64) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d2 = g.mul(d, d)?;
    let d2 = g.add_scalar(d2, T::lit(eps * eps));
    let r = g.sqrt(d2);
    Ok(g.mean(r))
}

/// Averages `factor x factor` blocks of a 2-channel flow and divides by
/// `factor`, giving the flow in pixels of the coarser grid.
pub fn avg_pool_flow<T: Scalar>(flow: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = flow.shape();
    if s.c != 2 || factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::shape("avg_pool_flow", format!("{s} by {factor}")));
    }
    if factor == 1 {
        return Ok(flow.clone());
    }
    let norm = T::lit(1.0 / (factor * factor * factor) as f64);
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.h / factor, s.w / factor, 2),
        |n, y, x, c| {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc = acc + flow.at(n, y * factor + dy, x * factor + dx, c);
                }
            }
            acc * norm
        },
    ))
}

/// `sum_l 0.5^l * EPE_l`, with the full-resolution ground truth
/// average-pooled and rescaled to each level.
pub fn flow_supervision_loss<T: Scalar>(g: &mut Graph<T>, predicted: &[Var], gt: &Tensor<T>) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (l, &f) in predicted.iter().enumerate() {
        let target = avg_pool_flow(gt, 1 << l)?;
        if target.shape() != g.shape(f) {
            return Err(Error::shape(
                "flow_supervision_loss",
                format!("level {l}: predicted {} vs ground truth {}", g.shape(f), target.shape()),
            ));
        }
        let target = g.constant(target);
        let d = g.sub(f, target)?;
        let n = g.channel_norm(d);
        let epe = g.mean(n);
        let term = g.mul_scalar(epe, T::lit(0.5f64.powi(l as i32)));
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no predicted flow levels"))
}

/// Prior input for one frame, prepared outside the tape.
#[derive(Clone, Debug)]
pub enum Prior<T> {
    Field(Tensor<T>),
    Ids(InstanceMask),
}

/// Embeds `mask` according to the configured embedding.
pub fn prepare_prior<T: Scalar>(cfg: &RunConfig, mask: &InstanceMask, sample_seed: u64) -> Result<Prior<T>> {
    let r = &cfg.rdp;
    Ok(match r.embedding {
        Embedding::Gaussian => {
            let book = GaussianCodebook::new(r.channels, r.codebook_seed, r.sigma)?;
            Prior::Field(rdp::embed_mask(mask, &book, sample_seed).values.cast())
        }
        Embedding::OneHot => Prior::Field(rdp::one_hot_embed(mask, r.max_instances)?.values.cast()),
        Embedding::Learnable => Prior::Ids(mask.clone()),
    })
}

fn prior_var<T: Scalar>(g: &mut Graph<T>, p: &Bound, prior: &Prior<T>) -> Result<Var> {
    match prior {
        Prior::Field(t) => Ok(g.constant(t.clone())),
        Prior::Ids(mask) => {
            let table = p.get("rdp.table")?;
            rdp::learnable_embed(g, table, mask)
        }
    }
}

/// One triplet's network inputs. Frames are `1 x H x W x 3` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FrameInput<T> {
    pub i0: Tensor<T>,
    pub i1: Tensor<T>,
    pub priors: Option<(Prior<T>, Prior<T>)>,
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub synthesis: Synthesis,
    pub flows: Flows,
    pub features0: Vec<Var>,
    pub features1: Vec<Var>,
}

/// Full composition: encode, enhance (unless disabled), estimate flow,
/// synthesize.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &RunConfig, x: &FrameInput<T>) -> Result<ForwardOut> {
    if x.i0.shape() != x.i1.shape() {
        return Err(Error::shape("forward", format!("{} vs {}", x.i0.shape(), x.i1.shape())));
    }
    let i0 = g.constant(x.i0.clone());
    let i1 = g.constant(x.i1.clone());
    let mut f0 = encode(g, p, cfg, i0)?;
    let mut f1 = encode(g, p, cfg, i1)?;
    if cfg.model.hrffm {
        let (p0, p1) = x
            .priors
            .as_ref()
            .ok_or_else(|| Error::invalid("region-aware fusion is enabled but the sample has no masks"))?;
        for prior in [p0, p1] {
            let s = match prior {
                Prior::Field(t) => t.shape(),
                Prior::Ids(m) => Shape::new(1, m.height(), m.width(), 0),
            };
            if (s.h, s.w) != (x.i0.shape().h, x.i0.shape().w) {
                return Err(Error::shape("forward", format!("prior {s} vs frame {}", x.i0.shape())));
            }
        }
        let s0 = prior_var(g, p, p0)?;
        let s1 = prior_var(g, p, p1)?;
        f0 = hrffm::hrffm_apply(g, p, &cfg.hrffm, &f0, s0)?;
        f1 = hrffm::hrffm_apply(g, p, &cfg.hrffm, &f1, s1)?;
    }
    let flows = estimate_flow(g, p, cfg, &f0, &f1)?;
    let synthesis = synthesize(g, p, i0, i1, f0[0], f1[0], flows.forward[0], flows.backward[0], x.t)?;
    Ok(ForwardOut {
        synthesis,
        flows,
        features0: f0,
        features1: f1,
    })
}

/// Supervision targets for one triplet.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub frame: Tensor<T>,
    /// Ground-truth `(0 -> 1, 1 -> 0)` flows at full resolution.
    pub flows: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOut {
    pub total: Var,
    pub photometric: Var,
    pub forward: ForwardOutVars,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutVars {
    pub frame: Var,
    pub flow01: Var,
    pub flow10: Var,
}

/// Charbonnier reconstruction plus weighted flow supervision (mean of both
/// directions) when ground truth is present.
pub fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &RunConfig,
    x: &FrameInput<T>,
    y: &Targets<T>,
) -> Result<LossOut> {
    let out = forward(g, p, cfg, x)?;
    let target = g.constant(y.frame.clone());
    let photometric = charbonnier_loss(g, out.synthesis.frame, target, cfg.train.charbonnier_eps)?;
    let mut total = photometric;
    if let (Some((gt01, gt10)), true) = (&y.flows, cfg.train.flow_weight > 0.0) {
        let a = flow_supervision_loss(g, &out.flows.forward, gt01)?;
        let b = flow_supervision_loss(g, &out.flows.backward, gt10)?;
        let s = g.add(a, b)?;
        let s = g.mul_scalar(s, T::lit(0.5 * cfg.train.flow_weight));
        total = g.add(total, s)?;
    }
    Ok(LossOut {
        total,
        photometric,
        forward: ForwardOutVars {
            frame: out.synthesis.frame,
            flow01: out.flows.forward[0],
            flow10: out.flows.backward[0],
        },
    })
}

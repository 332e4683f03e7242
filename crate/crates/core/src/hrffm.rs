//! Hierarchical region-aware feature fusion: a pyramid of prior features is
//! extracted from the RDP field, unified by a channel softmax, used to
//! predict per-pixel scale and bias for the normalized image features, and
//! fused back residually. One block per encoder level, shared by both frames.

use crate::autodiff::{Graph, Var};
use crate::config::{Branch, Embedding, HrffmConfig, RunConfig};
use crate::error::{Error, Result};
use crate::params::{conv, conv_specs, Bound, Init, ParamSpec};
use crate::tensor::{Scalar, Shape};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Stride of pyramid level `l`: full resolution first, then halving.
pub fn level_stride(l: usize) -> usize {
    if l == 0 {
        1
    } else {
        2
    }
}

fn reduced(c: usize) -> usize {
    (c / 4).max(1)
}

/// Parameters of the prior extractor and every per-level block. Empty when
/// the module is disabled.
pub fn param_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    if !cfg.model.hrffm {
        return v;
    }
    let r = &cfg.rdp;
    if r.embedding == Embedding::Learnable {
        v.push(ParamSpec::new(
            "rdp.table",
            Shape::new(1, 1, r.max_instances, r.channels),
            Init::Uniform(1.0),
        ));
    }
    let mut cin = r.field_channels();
    for (l, &c) in cfg.model.channels.iter().enumerate() {
        v.extend(conv_specs(&format!("rdp.ext.{l}"), 3, cin, c, false));
        cin = c;
        let p = |s: &str| format!("hrffm.{l}.{s}");
        let (c2, cr) = (2 * c, reduced(c));
        if cfg.hrffm.branch != Branch::Cnn {
            v.extend(conv_specs(&p("query"), 1, c2, cr, false));
            v.extend(conv_specs(&p("key"), 1, c2, cr, false));
            v.extend(conv_specs(&p("value"), 1, c2, c, false));
        }
        if cfg.hrffm.branch != Branch::Trans {
            v.extend(conv_specs(&p("conv1"), 3, c2, cr, false));
            v.extend(conv_specs(&p("conv2"), 3, cr, c, false));
        }
        if cfg.hrffm.branch == Branch::Both {
            v.extend(conv_specs(&p("mask"), 3, c2, 1, false));
        }
        v.extend(conv_specs(&p("alpha"), 1, c, c, true));
        v.extend(conv_specs(&p("beta"), 1, c, c, true));
        if cfg.hrffm.residual {
            v.extend(conv_specs(&p("fuse1"), 3, c2, cr, false));
            v.extend(conv_specs(&p("fuse2"), 1, cr, c, true));
        }
    }
    v
}

/// Chained strided convolutions over the field; level `l` is the
/// pre-activation of the `l`-th convolution and matches encoder level `l`.
pub fn extract_rdp_pyramid<T: Scalar>(g: &mut Graph<T>, p: &Bound, field: Var, levels: usize) -> Result<Vec<Var>> {
    let have = (0..).take_while(|l| p.try_get(&format!("rdp.ext.{l}.w")).is_some()).count();
    if have != levels {
        return Err(Error::invalid(format!(
            "prior extractor has {have} levels, encoder has {levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut x = field;
    for l in 0..levels {
        let s = conv(g, p, &format!("rdp.ext.{l}"), x, level_stride(l))?;
        out.push(s);
        x = g.leaky_relu(s, T::lit(LEAKY_SLOPE));
    }
    Ok(out)
}

/// Channel softmax per pixel.
pub fn normalize_rdp<T: Scalar>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    g.softmax_channels(s)
}

/// Intermediate values of one RDPFN evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RdpfnOut {
    pub normalized: Var,
    pub attention: Option<Var>,
    pub convolution: Option<Var>,
    pub mask: Option<Var>,
    pub blended: Var,
    pub scale: Var,
    pub bias: Var,
    pub out: Var,
}

/// Prior-guided normalization of feature `f` at level `l`.
pub fn rdpfn<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &HrffmConfig,
    l: usize,
    f: Var,
    prior: Var,
) -> Result<RdpfnOut> {
    let (fs, ss) = (g.shape(f), g.shape(prior));
    if (fs.n, fs.h, fs.w) != (ss.n, ss.h, ss.w) {
        return Err(Error::shape("rdpfn", format!("feature {fs} vs prior {ss}")));
    }
    let name = |s: &str| format!("hrffm.{l}.{s}");
    let (normalized, _) = g.instance_norm(f, T::lit(NORM_EPS))?;
    let x = g.concat(&[normalized, prior])?;
    let slope = T::lit(LEAKY_SLOPE);

    let attention = if cfg.branch != Branch::Cnn {
        let q = conv(g, p, &name("query"), x, 1)?;
        let k = conv(g, p, &name("key"), x, 1)?;
        let v = conv(g, p, &name("value"), x, 1)?;
        let window = cfg.window.min(fs.h.max(fs.w));
        Some(g.window_attention(q, k, v, window)?)
    } else {
        None
    };
    let convolution = if cfg.branch != Branch::Trans {
        let h = conv(g, p, &name("conv1"), x, 1)?;
        let h = g.leaky_relu(h, slope);
        Some(conv(g, p, &name("conv2"), h, 1)?)
    } else {
        None
    };
    let (blended, mask) = match (attention, convolution) {
        (Some(a), Some(c)) => {
            let logit = conv(g, p, &name("mask"), x, 1)?;
            let m = g.sigmoid(logit);
            let inv = g.one_minus(m);
            let ga = g.mul_channel(a, m)?;
            let hc = g.mul_channel(c, inv)?;
            (g.add(ga, hc)?, Some(m))
        }
        (Some(a), None) => (a, None),
        (None, Some(c)) => (c, None),
        (None, None) => unreachable!("at least one branch is enabled"),
    };
    let scale = conv(g, p, &name("alpha"), blended, 1)?;
    let bias = conv(g, p, &name("beta"), blended, 1)?;
    let modulated = g.mul(normalized, scale)?;
    let out = g.add(normalized, modulated)?;
    let out = g.add(out, bias)?;
    Ok(RdpfnOut {
        normalized,
        attention,
        convolution,
        mask,
        blended,
        scale,
        bias,
        out,
    })
}

/// `f + conv(f_hat ⊕ f)`, or `f_hat` alone when residual fusion is off.
pub fn residual_fuse<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &HrffmConfig,
    l: usize,
    modulated: Var,
    f: Var,
) -> Result<Var> {
    if g.shape(modulated) != g.shape(f) {
        return Err(Error::shape(
            "residual_fuse",
            format!("{} vs {}", g.shape(modulated), g.shape(f)),
        ));
    }
    if !cfg.residual {
        return Ok(modulated);
    }
    let x = g.concat(&[modulated, f])?;
    let h = conv(g, p, &format!("hrffm.{l}.fuse1"), x, 1)?;
    let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
    let d = conv(g, p, &format!("hrffm.{l}.fuse2"), h, 1)?;
    g.add(f, d)
}

/// Enhances every level of `features` with the prior pyramid of `field`.
pub fn hrffm_apply<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &HrffmConfig,
    features: &[Var],
    field: Var,
) -> Result<Vec<Var>> {
    let pyramid = extract_rdp_pyramid(g, p, field, features.len())?;
    features
        .iter()
        .zip(pyramid)
        .enumerate()
        .map(|(l, (&f, s))| {
            let s = if cfg.softmax_rdp { normalize_rdp(g, s)? } else { s };
            let r = rdpfn(g, p, cfg, l, f, s)?;
            residual_fuse(g, p, cfg, l, r.out, f)
        })
        .collect()
}

//! The full adjoint verification suite: every differentiable primitive plus
//! the composite blocks built from them, each checked at 64-bit against
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckError, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::config::{Branch, RunConfig};
use crate::datagen::{generate_triplet, SceneConfig};
use crate::error::Result;
use crate::hrffm::{hrffm_apply, normalize_rdp, rdpfn};
use crate::model::{charbonnier_loss, flow_supervision_loss, param_specs, prepare_prior, training_loss, FrameInput, Targets};
use crate::params::{ParamSet, ParamSpec};
use crate::tensor::{Shape, Tensor};

/// Maximum relative error accepted for every check.
pub const TOLERANCE: f64 = 1e-5;
/// Step for checks over a whole network, whose outputs pass through many
/// nonlinearities and so need a finer difference to stay in the linear
/// regime.
pub const NETWORK_EPS: f64 = 1e-7;

#[derive(Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub result: std::result::Result<GradCheckReport, GradCheckError>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.max_rel_error < TOLERANCE)
    }

    /// `name  max_rel_error  PASS|FAIL`, or the error for failed
    /// evaluations.
    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        match &self.result {
            Ok(r) => format!("{:<28} {:>10.3e}  {verdict}", self.name, r.max_rel_error),
            Err(e) => format!("{:<28} {:>10}  {verdict} ({e})", self.name, "-"),
        }
    }
}

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Parameters with every zero-initialized tensor replaced by small random
/// values, so no adjoint is trivially zero.
fn perturbed(specs: &[ParamSpec], seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::<f64>::init(specs, seed);
    for (i, (_, t)) in p.iter_mut().enumerate() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = random(t.shape(), seed ^ i as u64).map(|v| 0.3 * v);
        }
    }
    p
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn primitives() -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let s = Shape::new(1, 4, 5, 3);
    let a = random(s, 1);
    let b = random(s, 2);
    let m = random(s.with_c(1), 3);
    let pos = a.map(|v| v.abs() + 0.5);
    let k3 = random(Shape::new(3, 3, 3, 2), 4);
    let bias = random(Shape::new(1, 1, 1, 2), 5);
    let k3_wide = random(Shape::new(3, 3, 3, 12), 9);
    let k1 = random(Shape::new(1, 1, 3, 4), 10);
    let flow = random(s.with_c(2), 6).map(|v| 1.7 * v + 0.31);
    let sc = random(Shape::scalar(), 7);
    let table = random(Shape::new(1, 1, 4, 3), 8);
    let v2 = random(s.with_c(2), 11);
    macro_rules! op {
        ($name:expr, |$g:ident, $v:ident| $body:expr, [$($input:expr),*]) => {
            ($name, Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| $body) as OpFn, vec![$($input.clone()),*])
        };
    }
    vec![
        op!("add", |g, v| g.add(v[0], v[1]), [a, b]),
        op!("sub", |g, v| g.sub(v[0], v[1]), [a, b]),
        op!("mul", |g, v| g.mul(v[0], v[1]), [a, b]),
        op!("mul_channel", |g, v| g.mul_channel(v[0], v[1]), [a, m]),
        op!("scale_by", |g, v| g.scale_by(v[0], v[1]), [a, sc]),
        op!("mul_scalar", |g, v| Ok(g.mul_scalar(v[0], 1.5)), [a]),
        op!("add_scalar", |g, v| Ok(g.add_scalar(v[0], 0.3)), [a]),
        op!("one_minus", |g, v| Ok(g.one_minus(v[0])), [a]),
        op!("exp", |g, v| Ok(g.exp(v[0])), [a]),
        op!("sqrt", |g, v| Ok(g.sqrt(v[0])), [pos]),
        op!("sigmoid", |g, v| Ok(g.sigmoid(v[0])), [a]),
        op!("leaky_relu", |g, v| Ok(g.leaky_relu(v[0], 0.1)), [a]),
        op!("clamp", |g, v| Ok(g.clamp(v[0], -0.5, 0.5)), [a]),
        op!("softmax_channels", |g, v| g.softmax_channels(v[0]), [a]),
        op!("l2_normalize", |g, v| Ok(g.l2_normalize(v[0], 1e-6)), [a]),
        op!("instance_norm", |g, v| Ok(g.instance_norm(v[0], 1e-5)?.0), [a]),
        op!("conv3x3", |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), [a, k3, bias]),
        op!("conv3x3_stride2", |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1), [a, k3, bias]),
        op!("conv3x3_wide", |g, v| g.conv2d(v[0], v[1], None, 1, 1), [a, k3_wide]),
        op!("conv1x1", |g, v| g.conv2d(v[0], v[1], None, 1, 0), [a, k1]),
        op!("concat", |g, v| g.concat(&[v[0], v[1]]), [a, m]),
        op!("slice_channels", |g, v| g.slice_channels(v[0], 1, 2), [a]),
        op!("bilinear_sample", |g, v| g.bilinear_sample(v[0], v[1]), [a, flow]),
        op!("upsample2x", |g, v| Ok(g.upsample2x(v[0])), [a]),
        op!("correlation", |g, v| g.correlation(v[0], v[1], 2), [a, b]),
        op!("symmetric_correlation", |g, v| g.symmetric_correlation(v[0], v[1], 2), [a, b]),
        op!("window_attention", |g, v| g.window_attention(v[0], v[1], v[2], 3), [a, b, v2]),
        op!("gather", |g, v| g.gather(v[0], &[0, 1, 3, 3, 2, 0], Shape::new(1, 2, 3, 3)), [table]),
        op!("channel_norm", |g, v| Ok(g.channel_norm(v[0])), [a]),
        op!("mean", |g, v| Ok(g.mean(v[0])), [a]),
        op!("sum", |g, v| Ok(g.sum(v[0])), [a]),
        op!("charbonnier_loss", |g, v| charbonnier_loss(g, v[0], v[1], 1e-3), [a, b]),
    ]
}

fn block_config(channels: Vec<usize>, branch: Branch) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.channels = channels;
    c.hrffm.branch = branch;
    c.hrffm.window = 4;
    c
}

/// One prior-guided normalization block: features, prior and all of the
/// block's weights are differentiated.
fn rdpfn_check(branch: Branch, opts: GradCheckOptions) -> CheckOutcome {
    let c = block_config(vec![8], branch);
    let p = perturbed(&param_specs(&c), 8);
    let names: Vec<String> = p.names().filter(|n| n.starts_with("hrffm")).cloned().collect();
    let mut inputs = vec![random(Shape::new(1, 8, 8, 8), 1), random(Shape::new(1, 8, 8, 8), 2)];
    inputs.extend(names.iter().map(|n| p.get(n).expect("named parameter").clone()));
    let result = grad_check(
        |g, v| {
            let mut b = p.bind(g);
            for (n, &var) in names.iter().zip(&v[2..]) {
                b = b.with(n, var);
            }
            let s = normalize_rdp(g, v[1])?;
            Ok(rdpfn(g, &b, &c.hrffm, 0, v[0], s)?.out)
        },
        &inputs,
        opts,
    );
    CheckOutcome {
        name: format!("rdpfn_block_{}", branch.as_str()),
        result,
    }
}

/// The whole fusion module over a two-level pyramid, differentiated with
/// respect to features and prior field.
fn hrffm_check(opts: GradCheckOptions) -> CheckOutcome {
    let c = block_config(vec![4, 6], Branch::Both);
    let p = perturbed(&param_specs(&c), 5);
    let inputs = vec![
        random(Shape::new(1, 8, 8, 4), 1),
        random(Shape::new(1, 4, 4, 6), 2),
        random(Shape::new(1, 8, 8, c.rdp.channels), 3),
    ];
    let result = grad_check(
        |g, v| {
            let b = p.bind(g);
            let out = hrffm_apply(g, &b, &c.hrffm, &[v[0], v[1]], v[2])?;
            let s0 = g.mean(out[0]);
            let s1 = g.mean(out[1]);
            g.add(s0, s1)
        },
        &inputs,
        opts,
    );
    CheckOutcome {
        name: "hrffm_apply".into(),
        result,
    }
}

fn tiny_network() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.channels = vec![4, 8];
    c.model.decoder_channels = 4;
    c.rdp.channels = 4;
    c.hrffm.window = 4;
    c
}

fn tiny_scene() -> crate::datagen::TripletSample {
    let mut sc = SceneConfig::from_data(&RunConfig::default().data).with_size(16);
    sc.max_instances = 2;
    sc.max_speed = 2.0;
    generate_triplet(&sc, 4).expect("valid scene constraints")
}

/// Flow supervision over the predicted pyramid of the tiny network.
fn flow_supervision_check(opts: GradCheckOptions) -> CheckOutcome {
    let levels = [Shape::new(1, 8, 8, 2), Shape::new(1, 4, 4, 2)];
    let gt = random(Shape::new(1, 8, 8, 2), 3).map(|v| 2.0 * v);
    let inputs: Vec<Tensor<f64>> = levels.iter().enumerate().map(|(i, &s)| random(s, 10 + i as u64)).collect();
    let result = grad_check(|g, v| flow_supervision_loss(g, v, &gt), &inputs, opts);
    CheckOutcome {
        name: "flow_supervision_loss".into(),
        result,
    }
}

/// The complete training loss of a small network, differentiated with
/// respect to every trainable.
fn network_check(opts: GradCheckOptions) -> CheckOutcome {
    let cfg = tiny_network();
    let p = perturbed(&param_specs(&cfg), 7);
    let s = tiny_scene();
    let (m0, m1) = s.masks.clone().expect("generated scenes carry masks");
    let x = FrameInput::<f64> {
        i0: s.i0.cast(),
        i1: s.i1.cast(),
        priors: Some((
            prepare_prior(&cfg, &m0, 1).expect("valid prior"),
            prepare_prior(&cfg, &m1, 2).expect("valid prior"),
        )),
        t: 0.5,
    };
    let y = Targets {
        frame: s.it.cast(),
        flows: Some((
            s.flow01.clone().expect("generated flow").cast(),
            s.flow10().expect("generated flow").cast(),
        )),
    };
    let names: Vec<String> = p.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).expect("named parameter").clone()).collect();
    let result = grad_check(
        |g, v| {
            let mut b = p.bind(g);
            for (n, &var) in names.iter().zip(v) {
                b = b.with(n, var);
            }
            Ok(training_loss(g, &b, &cfg, &x, &y)?.total)
        },
        &tensors,
        GradCheckOptions { eps: NETWORK_EPS, ..opts },
    );
    CheckOutcome {
        name: "training_loss".into(),
        result,
    }
}

/// Runs every check with `opts` (whose `eps` applies to all but the
/// whole-network check).
pub fn run_suite(opts: GradCheckOptions) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = primitives()
        .into_iter()
        .map(|(name, f, inputs)| CheckOutcome {
            name: name.to_string(),
            result: grad_check(f, &inputs, opts),
        })
        .collect();
    out.push(flow_supervision_check(opts));
    for branch in [Branch::Both, Branch::Cnn, Branch::Trans] {
        out.push(rdpfn_check(branch, opts));
    }
    out.push(hrffm_check(opts));
    out.push(network_check(opts));
    out
}

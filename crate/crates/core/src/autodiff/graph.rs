use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

use super::{attention, conv, norm, sample};
use conv::ConvGeom;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Sqrt(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    Softmax(Var),
    L2Normalize(Var, T),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Bilinear {
        img: Var,
        flow: Var,
    },
    Upsample2x(Var),
    Correlation {
        a: Var,
        b: Var,
        radius: usize,
        symmetric: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<u16>,
    },
    ChannelNorm(Var),
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-sample, per-channel statistics returned by [`Graph::instance_norm`].
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    /// `n * c` means, batch-major.
    pub mean: Vec<T>,
    /// `n * c` standard deviations (without epsilon).
    pub std: Vec<T>,
}

/// Gradient tape: an append-only record of executed operations.
///
/// Nodes are stored in execution order, so the reverse sweep in
/// [`Graph::backward`] visits them in exact reverse order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies every channel of `x` by the single-channel map `m`.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        if sm != sx.with_c(1) {
            return Err(Error::shape("mul_channel", format!("{sx} vs mask {sm}")));
        }
        let c = sx.c;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut data = Vec::with_capacity(xv.len());
        for (px, &mm) in xv.chunks_exact(c).zip(mv) {
            data.extend(px.iter().map(|&v| v * mm));
        }
        let out = Tensor::from_vec(sx, data)?;
        let ng = self.ng(&[x, m]);
        Ok(self.push(out, Op::MulChannel(x, m), ng))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.mul_scalar(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// Multiplies `x` by a 1-element tensor (scalar broadcast).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != Shape::scalar() {
            return Err(Error::shape("scale_by", format!("scale has shape {}", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, norm::sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().c == 0 {
            return Err(Error::shape("softmax_channels", "empty channel axis"));
        }
        let out = Tensor::from_vec(t.shape(), norm::softmax_channels(t.data(), t.shape().c))?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Per-pixel `x / sqrt(|x|^2 + eps)` over channels.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let c = t.shape().c;
        let mut data = Vec::with_capacity(t.len());
        for px in t.data().chunks_exact(c) {
            let inv = T::one() / (px.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            data.extend(px.iter().map(|&v| v * inv));
        }
        let out = Tensor::from_vec(t.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::L2Normalize(x, eps), ng)
    }

    /// Instance normalization over spatial positions, per sample and channel.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<(Var, NormStats<T>)> {
        let t = self.value(x);
        let s = t.shape();
        if s.h * s.w == 0 {
            return Err(Error::shape("instance_normalize", "empty spatial extent"));
        }
        let r = norm::instance_norm(s, t.data(), eps);
        let out = Tensor::from_vec(s, r.out)?;
        let ng = self.ng(&[x]);
        let stats = NormStats {
            mean: r.mean,
            std: r.std,
        };
        Ok((
            self.push(
                out,
                Op::InstanceNorm {
                    x,
                    inv_std: r.inv_std,
                },
                ng,
            ),
            stats,
        ))
    }

    /// 2-D convolution with zero padding. Kernel shape is
    /// `kh x kw x cin x cout`; the optional bias has shape `1x1x1xcout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != Shape::new(1, 1, 1, geom.cout) {
                return Err(Error::shape("conv2d", format!("bias {sb} for {} outputs", geom.cout)));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = conv::forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let out = Tensor::from_vec(geom.output(), out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        // Patch matrices are only needed for the kernel gradient.
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape("concat", format!("{s0} vs {s}")));
            }
            c += s.c;
        }
        let out_shape = s0.with_c(c);
        let mut data = Vec::with_capacity(out_shape.numel());
        for p in 0..s0.pixels() {
            for &v in xs {
                let t = self.value(v);
                let cc = t.shape().c;
                data.extend_from_slice(&t.data()[p * cc..(p + 1) * cc]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let ng = self.ng(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), ng))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("{start}..{} of {} channels", start + len, s.c),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s.pixels() * len);
        for px in src.chunks_exact(s.c) {
            data.extend_from_slice(&px[start..start + len]);
        }
        let out = Tensor::from_vec(s.with_c(len), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// Backward warp: samples `img` at each pixel displaced by `flow`
    /// (`dx, dy` in pixels), bilinear with border clamping.
    pub fn bilinear_sample(&mut self, img: Var, flow: Var) -> Result<Var> {
        let (si, sf) = (self.shape(img), self.shape(flow));
        if sf != si.with_c(2) {
            return Err(Error::shape("bilinear_sample", format!("image {si}, flow {sf}")));
        }
        let out = sample::bilinear_forward(si, self.value(img).data(), self.value(flow).data());
        let out = Tensor::from_vec(si, out)?;
        let ng = self.ng(&[img, flow]);
        Ok(self.push(out, Op::Bilinear { img, flow }, ng))
    }

    /// Bilinear 2x upsampling (half-pixel centers, clamped at the border).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = sample::upsample2x_forward(s, self.value(x).data());
        let out = Tensor::from_vec(Shape::new(s.n, 2 * s.h, 2 * s.w, s.c), out).expect("shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Local correlation over a `(2r+1)^2` displacement window; channel `k`
    /// holds the displacement given by [`sample::displacement`]. Positions
    /// outside the frame score zero.
    pub fn correlation(&mut self, a: Var, b: Var, radius: usize) -> Result<Var> {
        self.correlation_impl(a, b, radius, false)
    }

    /// [`Graph::correlation`] averaged over both anchorings: channel `k` at
    /// `p` is `(<a[p], b[p + d]> + <a[p - d], b[p]>) / 2`. Identical inputs
    /// give scores that are exactly even in the displacement.
    pub fn symmetric_correlation(&mut self, a: Var, b: Var, radius: usize) -> Result<Var> {
        self.correlation_impl(a, b, radius, true)
    }

    fn correlation_impl(&mut self, a: Var, b: Var, radius: usize, symmetric: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("correlation", format!("{sa} vs {sb}")));
        }
        let side = 2 * radius + 1;
        let shape = sa.with_c(side * side);
        let mut out = sample::correlation_forward(sa, radius, self.value(a).data(), self.value(b).data());
        if symmetric {
            out = sample::symmetrize_forward(shape, radius, &out);
        }
        let out = Tensor::from_vec(shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            out,
            Op::Correlation {
                a,
                b,
                radius,
                symmetric,
            },
            ng,
        ))
    }

    /// Windowed single-head attention on already-projected queries, keys and
    /// values.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sv.with_c(sq.c) != sq {
            return Err(Error::shape("windowed_self_attention", format!("q {sq}, k {sk}, v {sv}")));
        }
        if window == 0 || window > sq.h.max(sq.w) {
            return Err(Error::invalid(format!(
                "attention window {window} exceeds spatial extent {}x{}",
                sq.h, sq.w
            )));
        }
        let (out, probs) = attention::forward(
            sq,
            sv.c,
            window,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let out = Tensor::from_vec(sv, out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, window, probs }, ng))
    }

    /// Row lookup: `out[p] = table[ids[p]]`. The table has shape `1x1xKxc`.
    pub fn gather(&mut self, table: Var, ids: &[u16], out_shape: Shape) -> Result<Var> {
        let st = self.shape(table);
        if st.n != 1 || st.h != 1 || out_shape.c != st.c || ids.len() != out_shape.pixels() {
            return Err(Error::shape("gather", format!("table {st}, output {out_shape}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= st.w) {
            return Err(Error::invalid(format!("id {bad} outside table of {} rows", st.w)));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(out_shape.numel());
        for &i in ids {
            let i = i as usize;
            data.extend_from_slice(&tv[i * st.c..(i + 1) * st.c]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Per-pixel Euclidean norm over channels (output has one channel).
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let data = t
            .data()
            .chunks_exact(s.c)
            .map(|px| px.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_vec(s.with_c(1), data).expect("shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::ChannelNorm(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let seed = Tensor::full(self.shape(output), T::one());
        self.backward_with(output, seed)
    }

    /// Reverse sweep from `output`, seeded with `seed`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed);
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.backward_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v);
        debug_assert_eq!(data.len(), shape.numel());
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape")),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = gd.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    self.acc(grads, *a, d);
                }
                if wants(*b) {
                    let d = gd.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::MulChannel(x, m) => {
                let c = self.shape(*x).c;
                let (xv, mv) = (val(*x), val(*m));
                if wants(*x) {
                    let mut d = Vec::with_capacity(gd.len());
                    for (gp, &mm) in gd.chunks_exact(c).zip(mv) {
                        d.extend(gp.iter().map(|&g| g * mm));
                    }
                    self.acc(grads, *x, d);
                }
                if wants(*m) {
                    let d = gd
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&g, &x)| g * x).sum())
                        .collect();
                    self.acc(grads, *m, d);
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, gd.to_vec()),
            Op::MulScalar(x, s) => self.acc(grads, *x, gd.iter().map(|&g| g * *s).collect()),
            Op::ScaleBy(x, s) => {
                let k = val(*s)[0];
                if wants(*x) {
                    self.acc(grads, *x, gd.iter().map(|&g| g * k).collect());
                }
                if wants(*s) {
                    let d = gd.iter().zip(val(*x)).map(|(&g, &x)| g * x).sum();
                    self.acc(grads, *s, vec![d]);
                }
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                self.acc(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g * half / y } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let d = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Softmax(x) => {
                let c = node.value.shape().c;
                self.acc(grads, *x, norm::softmax_backward(node.value.data(), gd, c));
            }
            Op::L2Normalize(x, eps) => {
                let c = node.value.shape().c;
                let xv = val(*x);
                let mut d = Vec::with_capacity(gd.len());
                for ((gp, yp), xp) in gd.chunks_exact(c).zip(node.value.data().chunks_exact(c)).zip(xv.chunks_exact(c)) {
                    let inv = T::one() / (xp.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = gp.iter().zip(yp).map(|(&g, &y)| g * y).sum();
                    d.extend(gp.iter().zip(yp).map(|(&g, &y)| (g - y * dot) * inv));
                }
                self.acc(grads, *x, d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let d = norm::instance_norm_backward(node.value.shape(), node.value.data(), gd, inv_std);
                self.acc(grads, *x, d);
            }
            Op::Conv { x, w, b, geom } => {
                if wants(*x) {
                    self.acc(grads, *x, conv::backward_input(geom, val(*w), gd));
                }
                if wants(*w) {
                    self.acc(grads, *w, conv::backward_kernel(geom, val(*x), gd));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        self.acc(grads, *b, conv::backward_bias(geom, gd));
                    }
                }
            }
            Op::Concat(xs) => {
                let ctot = node.value.shape().c;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v).c;
                    if wants(v) {
                        let mut d = Vec::with_capacity(self.shape(v).numel());
                        for gp in gd.chunks_exact(ctot) {
                            d.extend_from_slice(&gp[off..off + c]);
                        }
                        self.acc(grads, v, d);
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                let c = self.shape(*x).c;
                let len = node.value.shape().c;
                let mut d = vec![T::zero(); self.shape(*x).numel()];
                for (dp, gp) in d.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                    dp[*start..*start + len].copy_from_slice(gp);
                }
                self.acc(grads, *x, d);
            }
            Op::Bilinear { img, flow } => {
                let (gi, gf) = sample::bilinear_backward(
                    self.shape(*img),
                    val(*img),
                    val(*flow),
                    gd,
                    wants(*img),
                    wants(*flow),
                );
                if wants(*img) {
                    self.acc(grads, *img, gi);
                }
                if wants(*flow) {
                    self.acc(grads, *flow, gf);
                }
            }
            Op::Upsample2x(x) => {
                self.acc(grads, *x, sample::upsample2x_backward(self.shape(*x), gd));
            }
            Op::Correlation {
                a,
                b,
                radius,
                symmetric,
            } => {
                let sym;
                let gd = if *symmetric {
                    sym = sample::symmetrize_backward(g.shape(), *radius, gd);
                    &sym[..]
                } else {
                    gd
                };
                let (ga, gb) = sample::correlation_backward(self.shape(*a), *radius, val(*a), val(*b), gd);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Attention { q, k, v, window, probs } => {
                let (gq, gk, gv) = attention::backward(
                    self.shape(*q),
                    self.shape(*v).c,
                    *window,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    gd,
                );
                self.acc(grads, *q, gq);
                self.acc(grads, *k, gk);
                self.acc(grads, *v, gv);
            }
            Op::Gather { table, ids } => {
                let c = self.shape(*table).c;
                let mut d = vec![T::zero(); self.shape(*table).numel()];
                for (gp, &i) in gd.chunks_exact(c).zip(ids) {
                    let row = &mut d[i as usize * c..(i as usize + 1) * c];
                    for (r, &g) in row.iter_mut().zip(gp) {
                        *r += g;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::ChannelNorm(x) => {
                let c = self.shape(*x).c;
                let mut d = Vec::with_capacity(self.shape(*x).numel());
                for ((xp, &n), &g) in val(*x).chunks_exact(c).zip(node.value.data()).zip(gd) {
                    if n > T::zero() {
                        d.extend(xp.iter().map(|&v| g * v / n));
                    } else {
                        d.extend(std::iter::repeat(T::zero()).take(c));
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.shape(*x).numel()).unwrap();
                self.acc(grads, *x, vec![gd[0] / n; self.shape(*x).numel()]);
            }
            Op::Sum(x) => self.acc(grads, *x, vec![gd[0]; self.shape(*x).numel()]),
        }
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    shapes: Vec<Shape>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// The adjoint of `v`, or `None` if `v` is not on any path to the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// The adjoint of `v`; exactly zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}

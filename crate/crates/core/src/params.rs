//! Named trainable tensors, their initialization, and the binary checkpoint
//! format.
//!
//! # Checkpoint layout (little-endian)
//!
//! ```text
//! magic    8 bytes  "RDPVFICK"
//! version  u32
//! echo_len u32, then echo_len bytes of UTF-8 config text
//! count    u32
//! count x { name_len u32, name bytes, n h w c (4 x u32), n*h*w*c x f32 }
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rdp::hash;
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDPVFICK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    He { fan_in: usize },
    /// Uniform in `±a`.
    Uniform(f64),
    Zero,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Shape, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Convolution weight (`kh x kw x cin x cout`, He init) and zero bias.
pub fn conv_specs(prefix: &str, k: usize, cin: usize, cout: usize, zero: bool) -> [ParamSpec; 2] {
    let w_init = if zero {
        Init::Zero
    } else {
        Init::He { fan_in: k * k * cin }
    };
    [
        ParamSpec::new(format!("{prefix}.w"), Shape::new(k, k, cin, cout), w_init),
        ParamSpec::new(format!("{prefix}.b"), Shape::new(1, 1, 1, cout), Init::Zero),
    ]
}

/// Name-ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Each tensor is drawn from a stream keyed by `(seed, name)`, so a
    /// parameter's initial value does not depend on which other parameters
    /// exist.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for s in specs {
            let t = match s.init {
                Init::Zero => Tensor::zeros(s.shape),
                Init::Const(v) => Tensor::full(s.shape, T::lit(v)),
                Init::He { .. } | Init::Uniform(_) => {
                    let a = match s.init {
                        Init::He { fan_in } => (6.0 / fan_in as f64).sqrt(),
                        Init::Uniform(a) => a,
                        _ => unreachable!(),
                    };
                    let key = hash(&[seed, name_key(&s.name)]);
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    let data = (0..s.shape.numel()).map(|_| T::lit(rng.gen_range(-a..a))).collect();
                    Tensor::from_vec(s.shape, data).expect("spec shape")
                }
            };
            tensors.insert(s.name.clone(), t);
        }
        ParamSet { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.input(v.clone()))).collect(),
        }
    }

    /// Checks that names and shapes agree with `specs` exactly.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        let want: BTreeMap<&str, Shape> = specs.iter().map(|s| (s.name.as_str(), s.shape)).collect();
        for (name, shape) in &want {
            match self.tensors.get(*name) {
                None => return Err(Error::invalid(format!("parameter {name} missing"))),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::shape("params", format!("{name}: {} vs expected {shape}", t.shape())))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(k.as_str())) {
            return Err(Error::invalid(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

pub(crate) fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Points `name` at `v`, e.g. a leaf created by a gradient check.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }
}

/// Convolution with the `prefix.w` / `prefix.b` pair.
pub fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let k = g.shape(w).n;
    g.conv2d(x, w, Some(b), stride, k / 2)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

pub fn encode_checkpoint(params: &ParamSet<f32>, echo: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(echo.len(), "echo length")?);
    out.extend_from_slice(echo.as_bytes());
    put_u32(&mut out, to_u32(params.len(), "parameter count")?);
    for (name, t) in params.iter() {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            put_u32(&mut out, to_u32(d, "extent")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, "checkpoint truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "checkpoint text not UTF-8"))
    }
}

/// Returns the config echo and the parameters.
pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<(String, ParamSet<f32>)> {
    let mut c = Cursor { buf, pos: 0, path };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()?;
    let echo = c.string(n)?;
    let count = c.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let n = c.u32()?;
        let name = c.string(n)?;
        let shape = Shape::new(c.u32()?, c.u32()?, c.u32()?, c.u32()?);
        let bytes = c.take(shape.numel().checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok((echo, params))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>, echo: &str) -> Result<()> {
    let bytes = encode_checkpoint(params, echo)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamSet<f32>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf, path)
}

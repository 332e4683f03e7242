//! On-disk formats: sample directories, the FLO2 flow raster, RGB frames,
//! and the dataset manifest.
//!
//! A sample directory holds `im0.png`, `imt.png`, `im1.png` (8-bit RGB),
//! optionally `mask0.png`, `mask1.png` (16-bit grayscale instance IDs),
//! `flow01.bin` and `meta.json`.
//!
//! `flow01.bin` is a 12-byte header (`b"FLO2"`, height `u32`, width `u32`)
//! followed by `height * width` pairs of `f32` `(dx, dy)` in row-major
//! order, all little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{SceneMeta, TripletSample};
use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::tensor::{Shape, Tensor};

pub const FLOW_MAGIC: &[u8; 4] = b"FLO2";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Quantizes a `1 x H x W x 3` frame in `[0, 1]` to 8 bits and writes a PNG.
pub fn write_rgb_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_rgb_png", format!("{s}")));
    }
    let raw = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(s.w as u32, s.h as u32, raw).ok_or_else(|| Error::format(path, "frame buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(Error::format(path, "frame file missing"));
    }
    let img = image::open(path).map_err(|e| Error::format(path, format!("unreadable frame: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::from_vec(Shape::new(1, h, w, 3), data)
}

pub fn encode_flow(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = flow.shape();
    if s.n != 1 || s.c != 2 {
        return Err(Error::shape("encode_flow", format!("{s}")));
    }
    let mut out = Vec::with_capacity(12 + 4 * flow.len());
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(s.h as u32).to_le_bytes());
    out.extend_from_slice(&(s.w as u32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "not a FLO2 flow raster"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expect = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::format(path, "flow extent overflow"))?;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("flow raster has {} bytes, header implies {expect}", bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(Shape::new(1, h, w, 2), data)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_sample_files(dir: &Path, s: &TripletSample) -> Result<()> {
    write_rgb_png(&dir.join("im0.png"), &s.i0)?;
    write_rgb_png(&dir.join("imt.png"), &s.it)?;
    write_rgb_png(&dir.join("im1.png"), &s.i1)?;
    if let Some((m0, m1)) = &s.masks {
        m0.write_png(&dir.join("mask0.png"))?;
        m1.write_png(&dir.join("mask1.png"))?;
    }
    if let Some(f) = &s.flow01 {
        let p = dir.join("flow01.bin");
        fs::write(&p, encode_flow(f)?).map_err(|e| Error::io(&p, e))?;
    }
    if let Some(m) = &s.meta {
        let p = dir.join("meta.json");
        let text = serde_json::to_string_pretty(m).map_err(|e| Error::format(&p, e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes into a temporary sibling directory and renames it to `dir`, so a
/// sample directory is either complete or absent. `dir` must not exist.
pub fn write_sample(dir: &Path, s: &TripletSample) -> Result<()> {
    if dir.exists() {
        return Err(Error::format(dir, "sample directory already exists"));
    }
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = dir.with_file_name(name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_sample_files(&tmp, s)?;
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Reads a sample directory. Masks, flow and metadata are optional, but
/// masks must come as a pair.
pub fn read_sample(dir: &Path) -> Result<TripletSample> {
    let i0 = read_rgb_png(&dir.join("im0.png"))?;
    let it = read_rgb_png(&dir.join("imt.png"))?;
    let i1 = read_rgb_png(&dir.join("im1.png"))?;
    if i0.shape() != it.shape() || i0.shape() != i1.shape() {
        return Err(Error::format(dir, "frames differ in size"));
    }
    let (p0, p1) = (dir.join("mask0.png"), dir.join("mask1.png"));
    let masks = match (p0.exists(), p1.exists()) {
        (true, true) => Some((InstanceMask::read_png(&p0)?, InstanceMask::read_png(&p1)?)),
        (false, false) => None,
        (true, false) => return Err(Error::format(&p1, "mask file missing (mask0.png present)")),
        (false, true) => return Err(Error::format(&p0, "mask file missing (mask1.png present)")),
    };
    if let Some((m0, m1)) = &masks {
        for m in [m0, m1] {
            if (m.height(), m.width()) != (i0.shape().h, i0.shape().w) {
                return Err(Error::format(dir, "mask size differs from frame size"));
            }
        }
    }
    let fp = dir.join("flow01.bin");
    let flow01 = if fp.exists() {
        let f = decode_flow(&read_bytes(&fp)?, &fp)?;
        if (f.shape().h, f.shape().w) != (i0.shape().h, i0.shape().w) {
            return Err(Error::format(&fp, "flow size differs from frame size"));
        }
        Some(f)
    } else {
        None
    };
    let mp = dir.join("meta.json");
    let meta = if mp.exists() {
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        Some(serde_json::from_str::<SceneMeta>(&text).map_err(|e| Error::format(&mp, e.to_string()))?)
    } else {
        None
    };
    Ok(TripletSample {
        i0,
        it,
        i1,
        masks,
        flow01,
        meta,
    })
}

/// Train/validation split over sample directory names.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split_seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Manifest {
    /// Splits `names` by a seeded shuffle; each part is kept in lexicographic
    /// order. Duplicate names are rejected.
    pub fn split(mut names: Vec<String>, fraction: f64, split_seed: u64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("no samples to split"));
        }
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate sample directory {}", w[0])));
        }
        let n_train = ((names.len() as f64) * fraction).round() as usize;
        let mut shuffled = names;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let mut val = shuffled.split_off(n_train.min(shuffled.len()));
        let mut train = shuffled;
        train.sort();
        val.sort();
        Ok(Manifest { split_seed, train, val })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# split_seed = {}\n", self.split_seed);
        for (tag, list) in [("train", &self.train), ("val", &self.val)] {
            for n in list {
                s.push_str(&format!("{tag} {n}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest {
            split_seed: 0,
            train: Vec::new(),
            val: Vec::new(),
        };
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# split_seed =") {
                m.split_seed = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {}: bad split seed", i + 1)))?;
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, name) = line
                .split_once(' ')
                .ok_or_else(|| Error::format(path, format!("line {}: expected '<train|val> <dir>'", i + 1)))?;
            let name = name.trim().to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format(path, format!("duplicate sample directory {name}")));
            }
            match tag {
                "train" => m.train.push(name),
                "val" => m.val.push(name),
                _ => return Err(Error::format(path, format!("line {}: unknown split {tag:?}", i + 1))),
            }
        }
        Ok(m)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Self::parse(&text, &p)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sample subdirectories (those holding `im0.png`) of `root`, sorted.
pub fn list_samples(root: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("im0.png").exists() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Scans `root` and splits its samples.
pub fn build_manifest(root: &Path, fraction: f64, split_seed: u64) -> Result<Manifest> {
    let names = list_samples(root)?;
    if names.is_empty() {
        return Err(Error::format(root, "no sample directories found"));
    }
    Manifest::split(names, fraction, split_seed)
}

/// Named samples loaded into memory, in the given order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub names: Vec<String>,
    pub samples: Vec<TripletSample>,
}

impl Dataset {
    pub fn load(root: &Path, names: &[String]) -> Result<Self> {
        let samples = names.iter().map(|n| read_sample(&root.join(n))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            names: names.to_vec(),
            samples,
        })
    }

    /// Loads both parts of the manifest split under `root`.
    pub fn load_split(root: &Path) -> Result<(Self, Self)> {
        let m = Manifest::load(root)?;
        Ok((Self::load(root, &m.train)?, Self::load(root, &m.val)?))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TripletSample)> {
        self.names.iter().zip(&self.samples)
    }
}

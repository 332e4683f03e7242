//! Instance segmentation masks and their 16-bit PNG representation.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Per-pixel instance labels. ID 0 is background; IDs are opaque otherwise.
#[derive(Clone, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    ids: Vec<u16>,
}

impl std::fmt::Debug for InstanceMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "InstanceMask({}x{}, ids {:?})", self.height, self.width, self.distinct_ids())
    }
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(
                "instance_mask",
                format!("{} labels for {height}x{width}", ids.len()),
            ));
        }
        Ok(InstanceMask { height, width, ids })
    }

    pub fn background(height: usize, width: usize) -> Self {
        InstanceMask {
            height,
            width,
            ids: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut ids = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                ids.push(f(y, x));
            }
        }
        InstanceMask { height, width, ids }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u16 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct labels, background included when present.
    pub fn distinct_ids(&self) -> Vec<u16> {
        self.areas().into_keys().collect()
    }

    /// Pixel count per label.
    pub fn areas(&self) -> BTreeMap<u16, usize> {
        let mut m = BTreeMap::new();
        for &id in &self.ids {
            *m.entry(id).or_insert(0) += 1;
        }
        m
    }

    /// Fraction of pixels with equal labels.
    pub fn agreement(&self, other: &InstanceMask) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let same = self.ids.iter().zip(&other.ids).filter(|(a, b)| a == b).count();
        same as f64 / self.ids.len().max(1) as f64
    }

    /// Writes a single-channel 16-bit PNG (pixel value = instance ID).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.ids.clone())
                .ok_or_else(|| Error::format(path, "mask buffer size"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    /// Reads a single-channel 16-bit PNG. 8-bit grayscale is accepted and
    /// widened.
    pub fn read_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::format(path, "mask file missing"));
        }
        let img = image::open(path).map_err(|e| Error::format(path, format!("unreadable mask: {e}")))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let ids = match img {
            image::DynamicImage::ImageLuma16(b) => b.into_raw(),
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
            other => {
                return Err(Error::format(
                    path,
                    format!("expected single-channel 16-bit PNG, found {:?}", other.color()),
                ))
            }
        };
        InstanceMask::new(h, w, ids)
    }
}

//! Grayscale rasters, ingest/export, and the patch grid shared by the filter,
//! the mask generators and the model.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ColorType, ImageReader};

use crate::error::{Error, Result};

/// Row-major single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Builds an image from 8-bit samples, dividing by 255.
    pub fn from_u8(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        Self::new(height, width, raw.iter().map(|&v| v as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Rotates 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    /// Quantizes to 8 bits, rounding half up and clamping to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = taps(out_h, self.height);
        let xs = taps(out_w, self.width);
        Self::from_fn(out_h, out_w, |y, x| {
            let (y0, y1, fy) = ys[y];
            let (x0, x1, fx) = xs[x];
            let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
            let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }
}

/// Loads an 8-bit grayscale PNG or PGM and resizes it to `target_size` squared.
pub fn load_image(path: impl AsRef<Path>, target_size: usize) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let color = decoded.color();
    if color != ColorType::L8 {
        return Err(Error::Format(format!(
            "{}: expected 8-bit grayscale, found {} channel(s) ({color:?})",
            path.display(),
            color.channel_count()
        )));
    }
    let gray = decoded.into_luma8();
    let (w, h) = gray.dimensions();
    let img = GrayImage::from_u8(h as usize, w as usize, gray.as_raw())?;
    Ok(img.resize_bilinear(target_size, target_size))
}

/// Writes a binary PGM (P5, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.to_u8());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit grayscale PNG.
pub fn write_png(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.to_u8())
        .ok_or_else(|| Error::Dimension("raster size overflow".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}

/// Raw little-endian dump: `u32 height`, `u32 width`, then `height*width` f64 values row-major.
pub fn write_f64_raw(path: impl AsRef<Path>, height: usize, width: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + data.len() * 8);
    out.write_all(&(height as u32).to_le_bytes()).unwrap();
    out.write_all(&(width as u32).to_le_bytes()).unwrap();
    for v in data {
        out.write_all(&v.to_le_bytes()).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_f64_raw(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Format("raw dump shorter than its header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + h * w * 8 {
        return Err(Error::Format(format!(
            "raw dump holds {} bytes, header says {h}x{w}",
            bytes.len()
        )));
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, data))
}

/// Square-patch tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0 {
            return Err(Error::Dimension(format!(
                "patch size {patch_size} does not tile a {image_height}x{image_width} image"
            )));
        }
        Ok(Self {
            patch_size,
            rows: image_height / patch_size,
            cols: image_width / patch_size,
        })
    }

    pub fn for_image(img: &GrayImage, patch_size: usize) -> Result<Self> {
        Self::new(img.height, img.width, patch_size)
    }

    pub fn image_height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn image_width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Top-left pixel `(y, x)` of patch `p`.
    pub fn origin(&self, p: usize) -> (usize, usize) {
        ((p / self.cols) * self.patch_size, (p % self.cols) * self.patch_size)
    }

    pub fn matches(&self, img: &GrayImage) -> bool {
        self.image_height() == img.height && self.image_width() == img.width
    }
}

/// Splits an image into row-major flattened patches.
pub fn patchify(img: &GrayImage, patch_size: usize) -> Result<(Vec<Vec<f64>>, PatchGrid)> {
    let grid = PatchGrid::for_image(img, patch_size)?;
    let patches = (0..grid.num_patches())
        .map(|p| {
            let (oy, ox) = grid.origin(p);
            let mut v = Vec::with_capacity(grid.patch_dim());
            for dy in 0..patch_size {
                let row = (oy + dy) * img.width + ox;
                v.extend_from_slice(&img.data[row..row + patch_size]);
            }
            v
        })
        .collect();
    Ok((patches, grid))
}

pub fn unpatchify(patches: &[Vec<f64>], grid: &PatchGrid) -> Result<GrayImage> {
    if patches.len() != grid.num_patches() || patches.iter().any(|p| p.len() != grid.patch_dim()) {
        return Err(Error::Dimension(format!(
            "patch set does not match a {}x{} grid of {}px patches",
            grid.rows, grid.cols, grid.patch_size
        )));
    }
    let mut img = GrayImage::filled(grid.image_height(), grid.image_width(), 0.0);
    let s = grid.patch_size;
    for (p, patch) in patches.iter().enumerate() {
        let (oy, ox) = grid.origin(p);
        for dy in 0..s {
            let row = (oy + dy) * img.width + ox;
            img.data[row..row + s].copy_from_slice(&patch[dy * s..(dy + 1) * s]);
        }
    }
    Ok(img)
}

/// Horizontal concatenation, used for side-by-side previews.
pub fn hstack(images: &[&GrayImage]) -> Result<GrayImage> {
    let h = images.first().map(|i| i.height).unwrap_or(0);
    if images.iter().any(|i| i.height != h) {
        return Err(Error::Dimension("hstack needs equal heights".into()));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = GrayImage::filled(h, w, 0.0);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width {
                out.set(y, x0 + x, img.get(y, x));
            }
        }
        x0 += img.width;
    }
    Ok(out)
}

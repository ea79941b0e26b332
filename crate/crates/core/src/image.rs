//! Floating-point image buffers and PNG persistence.
//!
//! Pixels are stored row-major with interleaved channels. All computation
//! happens on linear values in `[0, 1]`; rendered frames are written as 8-bit
//! sRGB, textures as 16-bit linear RGB and masks as linear grayscale.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Extract a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Image::from_fn(w, h, self.channels, |x, y, c| {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(x * factor + dx, y * factor + dy, c);
                }
            }
            acc * norm
        })
    }

    /// Average of a non-empty list of same-shaped images.
    pub fn mean_of(images: &[Image]) -> Image {
        let mut out = Image::new(images[0].width, images[0].height, images[0].channels);
        for img in images {
            for (o, v) in out.data.iter_mut().zip(&img.data) {
                *o += v;
            }
        }
        let inv = 1.0 / images.len() as f64;
        for o in &mut out.data {
            *o *= inv;
        }
        out
    }
}

pub fn srgb_encode(linear: f64) -> f64 {
    let l = linear.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(encoded: f64) -> f64 {
    let e = encoded.clamp(0.0, 1.0);
    if e <= 0.040_45 {
        e / 12.92
    } else {
        ((e + 0.055) / 1.055).powf(2.4)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(codec(path))
}

/// Write an RGB (or grayscale, replicated) image as 8-bit sRGB.
pub fn save_frame_png(img: &Image, path: &Path) -> Result<()> {
    create_parent(path)?;
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c: usize| {
            let c = c.min(img.channels - 1);
            to_u8(srgb_encode(img.get(x as usize, y as usize, c)))
        };
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(codec(path))
}

/// Read an 8- or 16-bit sRGB PNG as linear RGB.
pub fn load_frame_png(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb16();
    let (w, h) = rgb.dimensions();
    let mut img = Image::new(w as usize, h as usize, 3);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(
                x as usize,
                y as usize,
                c,
                srgb_decode(p[c] as f64 / 65535.0),
            );
        }
    }
    Ok(img)
}

/// Write an RGB image as 16-bit linear PNG (used for texture maps).
pub fn save_linear_rgb16(img: &Image, path: &Path) -> Result<()> {
    create_parent(path)?;
    let buf = ImageBuffer::<Rgb<u16>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c: usize| to_u16(img.get(x as usize, y as usize, c.min(img.channels - 1)));
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(codec(path))
}

pub fn load_linear_rgb(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb16();
    let (w, h) = rgb.dimensions();
    let mut img = Image::new(w as usize, h as usize, 3);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(x as usize, y as usize, c, p[c] as f64 / 65535.0);
        }
    }
    Ok(img)
}

/// Write a single-channel image as 16-bit linear grayscale.
pub fn save_gray16(img: &Image, path: &Path) -> Result<()> {
    create_parent(path)?;
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([to_u16(img.get(x as usize, y as usize, 0))])
    });
    buf.save(path).map_err(codec(path))
}

/// Read a grayscale PNG; 8-bit values scale by 1/255, 16-bit by 1/65535.
pub fn load_gray(path: &Path) -> Result<Image> {
    let dynimg = open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let mut img = Image::new(w, h, 1);
    match dynimg {
        DynamicImage::ImageLuma16(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                img.set(x as usize, y as usize, 0, p[0] as f64 / 65535.0);
            }
        }
        DynamicImage::ImageLuma8(buf) => {
            for (x, y, p) in buf.enumerate_pixels() {
                img.set(x as usize, y as usize, 0, p[0] as f64 / 255.0);
            }
        }
        other => {
            let buf = other.to_luma16();
            for (x, y, p) in buf.enumerate_pixels() {
                img.set(x as usize, y as usize, 0, p[0] as f64 / 65535.0);
            }
        }
    }
    Ok(img)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub fn save_frame_dir(frames: &[Image], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(frame_file_name(i + 1));
            save_frame_png(f, &path).map(|_| path)
        })
        .collect()
}

/// Load `frame_0001.png, frame_0002.png, ...` in order from a directory.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<Image>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
                n.starts_with("frame_") && n.ends_with(".png") && !n.contains("_sub_")
            })
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no frame_*.png files in {}",
            dir.display()
        )));
    }
    let frames = names
        .iter()
        .map(|p| load_frame_png(p))
        .collect::<Result<Vec<_>>>()?;
    for f in &frames[1..] {
        f.ensure_same_shape(&frames[0], "video frames")?;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((srgb_decode(srgb_encode(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn downscale_averages_blocks() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f64);
        let small = img.downscale(2);
        assert_eq!((small.width, small.height), (2, 2));
        assert_eq!(small.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }

    #[test]
    fn frame_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(8, 6, 3, |x, y, c| ((x + y + c) % 7) as f64 / 6.0);
        let path = dir.path().join("f.png");
        save_frame_png(&img, &path).unwrap();
        let back = load_frame_png(&path).unwrap();
        assert!(img.max_abs_diff(&back) < 0.01);
    }
}

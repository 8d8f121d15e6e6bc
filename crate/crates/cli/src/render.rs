//! Windowed 8-bit slices and PNG encoding.

use std::io::Cursor;

use anyhow::{bail, Context, Result};
use voxelfm_core::volume::WindowSpec;
use voxelfm_core::{Grid3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            other => bail!("axis must be z, y or x, got {other:?}"),
        }
    }
}

/// Row-major 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Quantize a `[0, 1]` value, rounding half up.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8
}

/// Slice of any grid through `f`; an I×J×K grid cut at `z` gives a J×K image.
pub fn slice_with<T: Copy>(grid: &Grid3<T>, axis: Axis, index: usize, f: impl Fn(T) -> u8) -> Result<Gray8> {
    let [nz, ny, nx] = grid.shape();
    let extent = match axis {
        Axis::Z => nz,
        Axis::Y => ny,
        Axis::X => nx,
    };
    if index >= extent {
        bail!("slice index {index} out of range for axis extent {extent}");
    }
    let (height, width) = match axis {
        Axis::Z => (ny, nx),
        Axis::Y => (nz, nx),
        Axis::X => (nz, ny),
    };
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let v = match axis {
                Axis::Z => grid.get(index, r, c),
                Axis::Y => grid.get(r, index, c),
                Axis::X => grid.get(r, c, index),
            };
            pixels.push(f(v));
        }
    }
    Ok(Gray8 { width, height, pixels })
}

pub fn render_slice(volume: &Volume, axis: Axis, index: usize, window: WindowSpec) -> Result<Gray8> {
    window.validate()?;
    slice_with(volume.grid(), axis, index, |hu| quantize(window.apply(hu)))
}

/// Similarity in `[-1, 1]`, shown over `[0, 1]` (negatives clamp to black).
pub fn render_similarity(grid: &Grid3<f32>, axis: Axis, index: usize) -> Result<Gray8> {
    slice_with(grid, axis, index, quantize)
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().context("png header")?;
        writer.write_image_data(data).context("png data")?;
    }
    Ok(out.into_inner())
}

pub fn encode_png(img: &Gray8) -> Result<Vec<u8>> {
    encode(img.width, img.height, png::ColorType::Grayscale, &img.pixels)
}

pub fn encode_rgb_png(width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<Vec<u8>> {
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    encode(width, height, png::ColorType::Rgb, &flat)
}

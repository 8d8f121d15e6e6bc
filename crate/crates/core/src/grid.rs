//! Dense row-major 3D grids, `x` fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along (z, y, x).
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("empty grid shape {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "empty grid shape {shape:?}");
        Self { shape, data: vec![value; voxel_count(shape)] }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "empty grid shape {shape:?}");
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: T) {
        let i = self.index(z, y, x);
        self.data[i] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 { shape: self.shape, data: self.data.iter().copied().map(f).collect() }
    }

    /// Copy of the sub-grid with minimal corner `corner` and extent `size`.
    pub fn crop(&self, corner: [usize; 3], size: Shape3) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || corner[a] + size[a] > self.shape[a] {
                return Err(Error::ShapeMismatch(format!(
                    "crop {size:?} at {corner:?} exceeds grid {:?}",
                    self.shape
                )));
            }
        }
        let mut data = Vec::with_capacity(voxel_count(size));
        for z in corner[0]..corner[0] + size[0] {
            for y in corner[1]..corner[1] + size[1] {
                let start = self.index(z, y, corner[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Self { shape: size, data })
    }

    /// Overwrite the box at `corner` with `value`, clipped to the grid.
    pub fn fill_box(&mut self, corner: [usize; 3], size: Shape3, value: T) {
        let end = [
            (corner[0] + size[0]).min(self.shape[0]),
            (corner[1] + size[1]).min(self.shape[1]),
            (corner[2] + size[2]).min(self.shape[2]),
        ];
        for z in corner[0]..end[0] {
            for y in corner[1]..end[1] {
                let start = self.index(z, y, corner[2]);
                let stop = self.index(z, y, end[2].max(corner[2]));
                for v in &mut self.data[start..stop] {
                    *v = value;
                }
            }
        }
    }
}

impl Grid3<f32> {
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Trilinear sample at a continuous voxel coordinate, edges clamped.
    pub fn sample_trilinear(&self, z: f64, y: f64, x: f64) -> f64 {
        let coord = [z, y, x];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let max = (self.shape[a] - 1) as f64;
            let c = coord[a].clamp(0.0, max);
            let f = c.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.shape[a] - 1);
            frac[a] = c - f;
        }
        let v = |z: usize, y: usize, x: usize| f64::from(self.get(z, y, x));
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
        let c00 = lerp(v(lo[0], lo[1], lo[2]), v(lo[0], lo[1], hi[2]), frac[2]);
        let c01 = lerp(v(lo[0], hi[1], lo[2]), v(lo[0], hi[1], hi[2]), frac[2]);
        let c10 = lerp(v(hi[0], lo[1], lo[2]), v(hi[0], lo[1], hi[2]), frac[2]);
        let c11 = lerp(v(hi[0], hi[1], lo[2]), v(hi[0], hi[1], hi[2]), frac[2]);
        let c0 = lerp(c00, c01, frac[1]);
        let c1 = lerp(c10, c11, frac[1]);
        lerp(c0, c1, frac[0])
    }

    /// Trilinear resize so that grid corners map onto grid corners.
    pub fn resize_trilinear(&self, shape: Shape3) -> Grid3<f32> {
        let scale: Vec<f64> = (0..3)
            .map(|a| {
                if shape[a] > 1 {
                    (self.shape[a] - 1) as f64 / (shape[a] - 1) as f64
                } else {
                    0.0
                }
            })
            .collect();
        Grid3::from_fn(shape, |z, y, x| {
            self.sample_trilinear(z as f64 * scale[0], y as f64 * scale[1], x as f64 * scale[2])
                as f32
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_expected_voxels() {
        let g = Grid3::from_fn([3, 4, 5], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let c = g.crop([1, 2, 3], [2, 2, 2]).unwrap();
        assert_eq!(c.data(), &[123.0, 124.0, 133.0, 134.0, 223.0, 224.0, 233.0, 234.0]);
        assert!(g.crop([2, 0, 0], [2, 1, 1]).is_err());
    }

    #[test]
    fn trilinear_is_exact_on_grid_points_and_linear_fields() {
        let g = Grid3::from_fn([4, 4, 4], |z, y, x| (z + 2 * y + 3 * x) as f32);
        assert_eq!(g.sample_trilinear(1.0, 2.0, 3.0), 14.0);
        let v = g.sample_trilinear(1.5, 0.25, 2.5);
        assert!((v - (1.5 + 0.5 + 7.5)).abs() < 1e-12);
        // clamped outside
        assert_eq!(g.sample_trilinear(-3.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Grid3::new([2, 2, 2], vec![0f32; 7]).is_err());
        assert!(Grid3::new([0, 2, 2], Vec::<f32>::new()).is_err());
    }
}

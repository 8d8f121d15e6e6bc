//! Stochastic view generation. A [`TransformPipeline`] is an ordered list of
//! transforms, each applied with its own probability; every transform maps a
//! `[0, 1]`-valued grid to a `[0, 1]`-valued grid of the same shape.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Closed interval `[lo, hi]` a parameter is drawn from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidConfig(format!("{what}: empty range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    /// Crop a cube-scaled sub-box (`scale` of each extent) and resize it back.
    ResizedCrop { scale: Range },
    /// Rotation about each axis drawn from `±rotation` rad, per-axis scale
    /// `1 + U[-scale, scale]`, about the grid centre.
    Affine { rotation: f64, scale: f64 },
    IntensityScale { factor: Range },
    IntensityShift { offset: Range },
    /// Monotone piecewise-linear remap through `points` interior control
    /// points, each jittered vertically by up to `±jitter`.
    HistogramShift { points: usize, jitter: f64 },
    GaussNoise { sigma: Range },
    GaussSmooth { sigma: Range },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub probability: f64,
}

impl TransformSpec {
    pub fn always(kind: TransformKind) -> Self {
        Self { kind, probability: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::InvalidConfig(format!("transform probability {} not in [0,1]", self.probability)));
        }
        match &self.kind {
            TransformKind::ResizedCrop { scale } => {
                scale.validate("resized_crop.scale")?;
                if !(scale.lo > 0.0 && scale.hi <= 1.0) {
                    return Err(Error::InvalidConfig("resized_crop.scale must lie in (0, 1]".into()));
                }
            }
            TransformKind::Affine { rotation, scale } => {
                if !(*rotation >= 0.0 && *scale >= 0.0 && *scale < 1.0) {
                    return Err(Error::InvalidConfig("affine: rotation >= 0 and 0 <= scale < 1".into()));
                }
            }
            TransformKind::IntensityScale { factor } => factor.validate("intensity_scale.factor")?,
            TransformKind::IntensityShift { offset } => offset.validate("intensity_shift.offset")?,
            TransformKind::HistogramShift { points, jitter } => {
                if *points == 0 || !(*jitter >= 0.0) {
                    return Err(Error::InvalidConfig("histogram_shift: points >= 1, jitter >= 0".into()));
                }
            }
            TransformKind::GaussNoise { sigma } => {
                sigma.validate("gauss_noise.sigma")?;
                if sigma.lo < 0.0 {
                    return Err(Error::InvalidConfig("gauss_noise.sigma must be >= 0".into()));
                }
            }
            TransformKind::GaussSmooth { sigma } => {
                sigma.validate("gauss_smooth.sigma")?;
                if sigma.lo <= 0.0 {
                    return Err(Error::InvalidConfig("gauss_smooth.sigma must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, grid: &Grid3<f32>, rng: &mut Rng) -> Grid3<f32> {
        match &self.kind {
            TransformKind::ResizedCrop { scale } => resized_crop(grid, scale.draw(rng), rng),
            TransformKind::Affine { rotation, scale } => {
                let angles = [0, 1, 2].map(|_| sym(rng, *rotation));
                let scales = [0, 1, 2].map(|_| 1.0 + sym(rng, *scale));
                affine(grid, angles, scales)
            }
            TransformKind::IntensityScale { factor } => {
                let f = factor.draw(rng) as f32;
                grid.map(|v| (v * f).clamp(0.0, 1.0))
            }
            TransformKind::IntensityShift { offset } => {
                let o = offset.draw(rng) as f32;
                grid.map(|v| (v + o).clamp(0.0, 1.0))
            }
            TransformKind::HistogramShift { points, jitter } => {
                let mut ys: Vec<f64> = (1..=*points)
                    .map(|i| {
                        let x = i as f64 / (*points + 1) as f64;
                        (x + sym(rng, *jitter)).clamp(0.0, 1.0)
                    })
                    .collect();
                ys.sort_by(f64::total_cmp);
                histogram_remap(grid, &ys)
            }
            TransformKind::GaussNoise { sigma } => {
                let s = sigma.draw(rng);
                if s == 0.0 {
                    return grid.clone();
                }
                let normal = Normal::new(0.0, s).expect("validated sigma");
                grid.map(|v| (f64::from(v) + normal.sample(rng)).clamp(0.0, 1.0) as f32)
            }
            TransformKind::GaussSmooth { sigma } => gaussian_smooth(grid, sigma.draw(rng)),
        }
    }
}

fn sym(rng: &mut Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformPipeline {
    pub transforms: Vec<TransformSpec>,
}

impl TransformPipeline {
    pub fn new(transforms: Vec<TransformSpec>) -> Self {
        Self { transforms }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Crop, affine, intensity scale/shift, histogram shift, noise, smoothing.
    pub fn standard() -> Self {
        use TransformKind::*;
        let t = |kind, probability| TransformSpec { kind, probability };
        Self::new(vec![
            t(ResizedCrop { scale: Range::new(0.7, 1.0) }, 0.5),
            t(Affine { rotation: 0.26, scale: 0.2 }, 0.5),
            t(IntensityScale { factor: Range::new(0.9, 1.1) }, 0.5),
            t(IntensityShift { offset: Range::new(-0.1, 0.1) }, 0.5),
            t(HistogramShift { points: 3, jitter: 0.1 }, 0.5),
            t(GaussNoise { sigma: Range::new(0.0, 0.05) }, 0.2),
            t(GaussSmooth { sigma: Range::new(0.25, 1.0) }, 0.2),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(TransformSpec::validate)
    }
}

/// One augmented view of a `[0, 1]`-valued patch.
pub fn apply_pipeline(patch: &Grid3<f32>, pipeline: &TransformPipeline, seed: u64) -> Result<Grid3<f32>> {
    pipeline.validate()?;
    if let Some(i) = patch.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "patch value {} at flat index {i} outside [0, 1]",
            patch.data()[i]
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut view = patch.clone();
    for t in &pipeline.transforms {
        if t.probability > 0.0 && rng.random::<f64>() < t.probability {
            view = t.apply(&view, &mut rng);
            if view.shape() != patch.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "transform {:?} changed shape {:?} -> {:?}",
                    t.kind,
                    patch.shape(),
                    view.shape()
                )));
            }
        }
    }
    Ok(view)
}

/// Two views from independent streams derived from `seed`.
pub fn make_view_pair(
    patch: &Grid3<f32>,
    pipeline: &TransformPipeline,
    seed: u64,
) -> Result<(Grid3<f32>, Grid3<f32>)> {
    Ok((
        apply_pipeline(patch, pipeline, derive_seed(seed, 0xA))?,
        apply_pipeline(patch, pipeline, derive_seed(seed, 0xB))?,
    ))
}

impl crate::sampler::ViewGenerator for TransformPipeline {
    fn view(&self, grid: &Grid3<f32>, seed: u64) -> Result<Grid3<f32>> {
        apply_pipeline(grid, self, seed)
    }
}

fn resized_crop(grid: &Grid3<f32>, scale: f64, rng: &mut Rng) -> Grid3<f32> {
    let shape = grid.shape();
    let size: Shape3 = shape.map(|d| ((d as f64 * scale).round() as usize).clamp(1, d));
    let corner = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - size[a]));
    grid.crop(corner, size).expect("crop fits by construction").resize_trilinear(shape)
}

/// Inverse-mapped affine resampling about the grid centre, edges clamped.
pub fn affine(grid: &Grid3<f32>, angles: [f64; 3], scales: [f64; 3]) -> Grid3<f32> {
    let rot = rotation_matrix(angles);
    // output -> input: x_in = c + R^T (x_out - c) / s
    let shape = grid.shape();
    let c = shape.map(|d| (d as f64 - 1.0) / 2.0);
    Grid3::from_fn(shape, |z, y, x| {
        let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
        let mut src = c;
        for (i, s) in src.iter_mut().enumerate() {
            *s += (rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2]) / scales[i];
        }
        grid.sample_trilinear(src[0], src[1], src[2]).clamp(0.0, 1.0) as f32
    })
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (s0, c0) = angles[0].sin_cos();
    let (s1, c1) = angles[1].sin_cos();
    let (s2, c2) = angles[2].sin_cos();
    // rotations about z, y, x axes composed as Rz * Ry * Rx in (z, y, x) coordinates
    let rz = [[1.0, 0.0, 0.0], [0.0, c0, -s0], [0.0, s0, c0]];
    let ry = [[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]];
    let rx = [[c2, -s2, 0.0], [s2, c2, 0.0], [0.0, 0.0, 1.0]];
    matmul3(matmul3(rz, ry), rx)
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn histogram_remap(grid: &Grid3<f32>, interior: &[f64]) -> Grid3<f32> {
    let n = interior.len();
    let xs: Vec<f64> = (0..=n + 1).map(|i| i as f64 / (n + 1) as f64).collect();
    let ys: Vec<f64> = std::iter::once(0.0).chain(interior.iter().copied()).chain(std::iter::once(1.0)).collect();
    grid.map(|v| {
        let v = f64::from(v);
        let seg = ((v * (n + 1) as f64).floor() as usize).min(n);
        let t = (v - xs[seg]) / (xs[seg + 1] - xs[seg]);
        (ys[seg] + t * (ys[seg + 1] - ys[seg])).clamp(0.0, 1.0) as f32
    })
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_smooth(grid: &Grid3<f32>, sigma: f64) -> Grid3<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let shape = grid.shape();
    let mut cur: Vec<f64> = grid.data().iter().map(|&v| f64::from(v)).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let pos = ((flat / strides[axis]) % shape[axis]) as isize;
            let base = flat as isize - pos * strides[axis] as isize;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let p = (pos + k as isize - radius).clamp(0, n - 1);
                    w * cur[(base + p * strides[axis] as isize) as usize]
                })
                .sum();
        }
        cur = next;
    }
    Grid3::new(shape, cur.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("same shape")
}

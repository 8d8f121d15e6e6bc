//! Volume data model: raw+JSON file pair I/O, trilinear resampling, HU
//! windowing and synthetic phantom generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{voxel_count, Grid3, Shape3};
use crate::rng::{derive_seed, rng_from_seed};

/// Lower and upper HU bound of the encoder input range.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 2048.0;

/// A CT-like scalar volume in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid3<f32>,
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

impl Volume {
    pub fn new(grid: Grid3<f32>, spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing_mm)?;
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, spacing_mm, origin_mm })
    }

    /// Unit spacing, zero origin.
    pub fn from_grid(grid: Grid3<f32>) -> Result<Self> {
        Self::new(grid, [1.0; 3], [0.0; 3])
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn into_grid(self) -> Grid3<f32> {
        self.grid
    }

    /// Physical position (mm) of a continuous voxel coordinate.
    pub fn voxel_to_mm(&self, voxel: [f64; 3]) -> [f64; 3] {
        [
            self.origin_mm[0] + voxel[0] * self.spacing_mm[0],
            self.origin_mm[1] + voxel[1] * self.spacing_mm[1],
            self.origin_mm[2] + voxel[2] * self.spacing_mm[2],
        ]
    }

    fn with_grid(&self, grid: Grid3<f32>) -> Self {
        Self { grid, spacing_mm: self.spacing_mm, origin_mm: self.origin_mm }
    }
}

/// Integer label per voxel, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    grid: Grid3<i32>,
}

impl SegmentationMask {
    pub fn new(grid: Grid3<i32>) -> Result<Self> {
        if let Some(i) = grid.data().iter().position(|&l| l < 0) {
            return Err(Error::InvalidArgument(format!("negative label at flat index {i}")));
        }
        Ok(Self { grid })
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape()
    }

    pub fn grid(&self) -> &Grid3<i32> {
        &self.grid
    }

    pub fn labels(&self) -> &[i32] {
        self.grid.data()
    }

    /// Distinct labels present, ascending.
    pub fn present_labels(&self) -> Vec<i32> {
        let mut seen: Vec<i32> = self.labels().to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Mean voxel coordinate of `label`, or `None` when absent.
    pub fn centroid(&self, label: i32) -> Option<[f64; 3]> {
        let [_, ny, nx] = self.shape();
        let mut acc = [0f64; 3];
        let mut count = 0usize;
        for (i, &l) in self.labels().iter().enumerate() {
            if l == label {
                acc[0] += (i / (ny * nx)) as f64;
                acc[1] += ((i / nx) % ny) as f64;
                acc[2] += (i % nx) as f64;
                count += 1;
            }
        }
        (count > 0).then(|| acc.map(|a| a / count as f64))
    }
}

/// Display window in HU: maps `[level - width/2, level + width/2]` onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f32,
    pub width: f32,
}

impl WindowSpec {
    pub const BLOOD: WindowSpec = WindowSpec { level: 40.0, width: 80.0 };
    pub const SUBDURAL: WindowSpec = WindowSpec { level: 25.0, width: 300.0 };
    pub const STROKE: WindowSpec = WindowSpec { level: 32.0, width: 8.0 };
    pub const BONE: WindowSpec = WindowSpec { level: 600.0, width: 3000.0 };

    /// The four head-CT presets, in concatenation order.
    pub const HEAD_CT: [WindowSpec; 4] =
        [WindowSpec::BLOOD, WindowSpec::SUBDURAL, WindowSpec::STROKE, WindowSpec::BONE];

    pub fn preset(name: &str) -> Option<WindowSpec> {
        match name {
            "blood" => Some(Self::BLOOD),
            "subdural" => Some(Self::SUBDURAL),
            "stroke" => Some(Self::STROKE),
            "bone" => Some(Self::BONE),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.level.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "window width must be > 0 (got level {}, width {})",
                self.level, self.width
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        let lower = self.level - self.width / 2.0;
        ((hu - lower) / self.width).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Ellipsoid,
    /// Elliptic cylinder along z; `radii[0]` is the half-length.
    Tube,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub label: i32,
    pub geometry: Geometry,
    /// Centre as a fraction of the extent along (z, y, x).
    pub center: [f64; 3],
    /// Radii as a fraction of the extent along (z, y, x).
    pub radii: [f64; 3],
    pub mean_hu: f64,
    /// Per-phantom offset drawn from `U[-hu_jitter, hu_jitter]`.
    #[serde(default)]
    pub hu_jitter: f64,
}

impl OrganSpec {
    fn contains(&self, f: [f64; 3]) -> bool {
        let d = [
            (f[0] - self.center[0]) / self.radii[0],
            (f[1] - self.center[1]) / self.radii[1],
            (f[2] - self.center[2]) / self.radii[2],
        ];
        match self.geometry {
            Geometry::Ellipsoid => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0,
            Geometry::Tube => d[0].abs() <= 1.0 && d[1] * d[1] + d[2] * d[2] <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing_mm: [f64; 3],
    pub organs: Vec<OrganSpec>,
    pub background_hu: f64,
    pub noise_sigma: f64,
    /// Whole-volume calibration offset, emulating scanner differences.
    #[serde(default)]
    pub hu_offset: f64,
}

impl PhantomSpec {
    /// Torso-like layout: body, two lungs, heart, liver and a spine tube.
    pub fn torso(shape: Shape3) -> Self {
        use Geometry::*;
        let organ = |label, geometry, center, radii, mean_hu| OrganSpec {
            label,
            geometry,
            center,
            radii,
            mean_hu,
            hu_jitter: 20.0,
        };
        Self {
            shape,
            spacing_mm: [3.0, 1.5, 1.5],
            organs: vec![
                organ(1, Ellipsoid, [0.5, 0.5, 0.5], [0.55, 0.42, 0.46], -90.0),
                organ(2, Ellipsoid, [0.42, 0.45, 0.3], [0.28, 0.2, 0.13], -800.0),
                organ(3, Ellipsoid, [0.42, 0.45, 0.7], [0.28, 0.2, 0.13], -800.0),
                organ(4, Ellipsoid, [0.45, 0.42, 0.52], [0.14, 0.13, 0.12], 280.0),
                organ(5, Ellipsoid, [0.78, 0.5, 0.36], [0.16, 0.2, 0.2], 60.0),
                organ(6, Tube, [0.5, 0.76, 0.5], [0.5, 0.07, 0.07], 700.0),
            ],
            background_hu: -1000.0,
            noise_sigma: 15.0,
            hu_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("phantom shape {:?}", self.shape)));
        }
        validate_spacing(self.spacing_mm)?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        let mut labels = Vec::new();
        for o in &self.organs {
            if o.label < 1 {
                return Err(Error::InvalidConfig(format!("organ label {} must be >= 1", o.label)));
            }
            if labels.contains(&o.label) {
                return Err(Error::InvalidConfig(format!("duplicate organ label {}", o.label)));
            }
            labels.push(o.label);
            if o.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::InvalidConfig(format!("organ {} radii must be > 0", o.label)));
            }
            if !(o.hu_jitter >= 0.0) {
                return Err(Error::InvalidConfig(format!("organ {} hu_jitter < 0", o.label)));
            }
        }
        Ok(())
    }

    /// Copy with organ centres moved by up to `center_jitter` (fraction of
    /// extent), radii scaled by up to `1 ± radius_jitter`, and the whole-volume
    /// offset drawn from `U[-hu_offset_range, hu_offset_range]`.
    pub fn perturbed(
        &self,
        seed: u64,
        center_jitter: f64,
        radius_jitter: f64,
        hu_offset_range: f64,
    ) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, 0x5045_5254));
        let mut out = self.clone();
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        for organ in &mut out.organs {
            for a in 0..3 {
                organ.center[a] += sym(center_jitter);
                organ.radii[a] *= 1.0 + sym(radius_jitter);
            }
        }
        out.hu_offset = self.hu_offset + sym(hu_offset_range);
        out
    }
}

/// Deterministic phantom for `(spec, seed)`. Later organs overwrite earlier
/// ones where they overlap.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, SegmentationMask)> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let jitters: Vec<f64> = spec
        .organs
        .iter()
        .map(|o| if o.hu_jitter > 0.0 { rng.random_range(-o.hu_jitter..=o.hu_jitter) } else { 0.0 })
        .collect();
    let shape = spec.shape;
    let mut labels = Grid3::filled(shape, 0i32);
    let mut values = Grid3::filled(shape, (spec.background_hu + spec.hu_offset) as f32);
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let f = [
                    (z as f64 + 0.5) / shape[0] as f64,
                    (y as f64 + 0.5) / shape[1] as f64,
                    (x as f64 + 0.5) / shape[2] as f64,
                ];
                for (organ, jitter) in spec.organs.iter().zip(&jitters) {
                    if organ.contains(f) {
                        labels.set(z, y, x, organ.label);
                        values.set(z, y, x, (organ.mean_hu + jitter + spec.hu_offset) as f32);
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        let mut noise_rng = rng_from_seed(derive_seed(seed, 1));
        for v in values.data_mut() {
            *v = (f64::from(*v) + normal.sample(&mut noise_rng)) as f32;
        }
    }
    let volume = Volume::new(values, spec.spacing_mm, [0.0; 3])?;
    Ok((volume, SegmentationMask::new(labels)?))
}

/// A family of phantoms sharing one organ layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub base: PhantomSpec,
    /// Organ centre jitter, as a fraction of the extent.
    pub center_jitter: f64,
    pub radius_jitter: f64,
    /// Per-phantom whole-volume offset range in HU.
    pub hu_offset_range: f64,
}

impl CorpusSpec {
    /// Near-duplicate torsos that differ mostly by a global HU offset, so
    /// instance identity is recoverable from intensity alone.
    pub fn redundant(count: usize, shape: Shape3) -> Self {
        Self { count, base: PhantomSpec::torso(shape), center_jitter: 0.02, radius_jitter: 0.05, hu_offset_range: 60.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("corpus count must be >= 1".into()));
        }
        if [self.center_jitter, self.radius_jitter, self.hu_offset_range].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("corpus jitters must be >= 0".into()));
        }
        if self.radius_jitter >= 1.0 {
            return Err(Error::InvalidConfig("radius_jitter must be < 1".into()));
        }
        self.base.validate()
    }
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<(Volume, SegmentationMask)>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let phantom = spec.base.perturbed(s, spec.center_jitter, spec.radius_jitter, spec.hu_offset_range);
            generate_phantom(&phantom, s)
        })
        .collect()
}

/// Clamp to `[HU_MIN, HU_MAX]` and map affinely onto `[0, 1]`.
pub fn normalize_hu(volume: &Volume) -> Volume {
    volume.with_grid(volume.grid.map(normalize_hu_value))
}

#[inline]
pub fn normalize_hu_value(hu: f32) -> f32 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn window(volume: &Volume, spec: WindowSpec) -> Result<Volume> {
    spec.validate()?;
    Ok(volume.with_grid(volume.grid.map(|v| spec.apply(v))))
}

/// Window once per spec and concatenate the results along x.
pub fn window_concat(volume: &Volume, specs: &[WindowSpec]) -> Result<Volume> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("window_concat needs at least one window".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let [nz, ny, nx] = volume.shape();
    let out_shape = [nz, ny, nx * specs.len()];
    let mut data = Vec::with_capacity(voxel_count(out_shape));
    for row in volume.data().chunks_exact(nx) {
        for spec in specs {
            data.extend(row.iter().map(|&v| spec.apply(v)));
        }
    }
    Volume::new(Grid3::new(out_shape, data)?, volume.spacing_mm, volume.origin_mm)
}

/// Trilinear resampling onto `target_spacing_mm`, sharing the origin. The
/// output has `round(extent / target)` voxels per axis (at least 1); samples
/// beyond the last source voxel clamp to the edge.
pub fn resample(volume: &Volume, target_spacing_mm: [f64; 3]) -> Result<Volume> {
    validate_spacing(target_spacing_mm)?;
    let src = volume.shape();
    let mut shape = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        let extent = src[a] as f64 * volume.spacing_mm[a];
        shape[a] = ((extent / target_spacing_mm[a]).round() as usize).max(1);
        step[a] = target_spacing_mm[a] / volume.spacing_mm[a];
    }
    let grid = Grid3::from_fn(shape, |z, y, x| {
        volume.grid.sample_trilinear(z as f64 * step[0], y as f64 * step[1], x as f64 * step[2])
            as f32
    });
    Volume::new(grid, target_spacing_mm, volume.origin_mm)
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(spacing));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File pair I/O
// ---------------------------------------------------------------------------

/// Content tag stored in the sidecar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Hu,
    Mask,
    Heatmap,
    Saliency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Shape3,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub kind: VolumeKind,
}

/// `(json, raw)` paths for a base path; a `.json` or `.raw` suffix is ignored.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    save_float_grid(volume, path, VolumeKind::Hu)
}

/// Save any float volume with an explicit `kind` tag (heatmaps, saliency).
pub fn save_float_grid(volume: &Volume, path: &Path, kind: VolumeKind) -> Result<()> {
    let sidecar = Sidecar {
        shape: volume.shape(),
        spacing_mm: volume.spacing_mm,
        origin_mm: volume.origin_mm,
        dtype: "f32le".into(),
        kind,
    };
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &sidecar, &bytes)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (sidecar, raw) = read_pair(path)?;
    if sidecar.dtype != "f32le" || sidecar.kind == VolumeKind::Mask {
        return Err(Error::Corrupt(format!(
            "expected a float volume, sidecar says dtype {} kind {:?}",
            sidecar.dtype, sidecar.kind
        )));
    }
    let values: Vec<f32> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Volume::new(Grid3::new(sidecar.shape, values)?, sidecar.spacing_mm, sidecar.origin_mm)
}

/// Masks share the sidecar layout; the raw file holds int32 LE labels.
pub fn save_mask(mask: &SegmentationMask, reference: &Volume, path: &Path) -> Result<()> {
    if mask.shape() != reference.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs volume {:?}",
            mask.shape(),
            reference.shape()
        )));
    }
    let sidecar = Sidecar {
        shape: mask.shape(),
        spacing_mm: reference.spacing_mm,
        origin_mm: reference.origin_mm,
        dtype: "i32le".into(),
        kind: VolumeKind::Mask,
    };
    let bytes: Vec<u8> = mask.labels().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &sidecar, &bytes)
}

pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let (sidecar, raw) = read_pair(path)?;
    if sidecar.kind != VolumeKind::Mask {
        return Err(Error::Corrupt(format!("expected a mask, sidecar kind {:?}", sidecar.kind)));
    }
    let labels: Vec<i32> =
        raw.chunks_exact(4).map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    SegmentationMask::new(Grid3::new(sidecar.shape, labels)?)
}

fn write_pair(path: &Path, sidecar: &Sidecar, bytes: &[u8]) -> Result<()> {
    let (json, raw) = file_pair(path);
    fs::write(&json, serde_json::to_vec(sidecar)?)?;
    fs::write(&raw, bytes)?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let (json, raw) = file_pair(path);
    for p in [&json, &raw] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json)?)?;
    validate_spacing(sidecar.spacing_mm)?;
    if sidecar.shape.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("empty shape {:?}", sidecar.shape)));
    }
    let bytes = fs::read(&raw)?;
    let expected = voxel_count(sidecar.shape) * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "sidecar shape {:?} needs {} bytes, raw file has {}",
            sidecar.shape,
            expected,
            bytes.len()
        )));
    }
    Ok((sidecar, bytes))
}

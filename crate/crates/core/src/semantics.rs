//! Semantic concept search, organ centroid distance, PCA colour maps,
//! occlusion saliency and test-retest stability.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::embeddings::{sliding_window_embed, window_corners, WindowGrid};
use crate::encoder::PatchEmbedder;
use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};
use crate::objectives::cosine_sim_f32;
use crate::sampler::ScanId;
use crate::volume::{SegmentationMask, Volume};

/// Similarity grid of one target from a sliding-window search.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapResult {
    pub target_scan_id: ScanId,
    /// One cosine similarity per window, indexed by window grid position.
    pub similarity: Grid3<f64>,
    /// Minimal corner of every window, canonical order.
    pub corners: Vec<[usize; 3]>,
    pub stride: [usize; 3],
    pub patch_size: Shape3,
    pub best_position: [usize; 3],
    pub best_similarity: f64,
}

impl HeatmapResult {
    /// Similarity painted onto the target's voxel grid; each voxel takes the
    /// window whose centre is nearest.
    pub fn to_volume(&self, target: &Volume) -> Result<Volume> {
        let grid = paint_nearest(target.shape(), self.patch_size, &self.corners, self.similarity.shape(), |i| {
            self.similarity.data()[i] as f32
        });
        Volume::new(grid, target.spacing_mm(), target.origin_mm())
    }
}

/// Box corner for a box of `size` centred on `center`, clamped into `shape`.
pub fn box_corner(shape: Shape3, center: [usize; 3], size: Shape3) -> Result<[usize; 3]> {
    let mut corner = [0; 3];
    for a in 0..3 {
        if size[a] == 0 || size[a] > shape[a] {
            return Err(Error::ShapeMismatch(format!("box {size:?} does not fit in {shape:?}")));
        }
        let lo = center[a].saturating_sub(size[a] / 2);
        corner[a] = lo.min(shape[a] - size[a]);
    }
    Ok(corner)
}

/// Index of the first maximum; NaN never wins.
fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Compares one query embedding against every window of `target`.
pub fn search_target<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    query: &[f32],
    target: &Volume,
    target_scan_id: ScanId,
    patch: Shape3,
    stride: [usize; 3],
) -> Result<HeatmapResult> {
    let windows = sliding_window_embed(embedder, target, patch, stride, target_scan_id)?;
    heatmap_from_windows(query, &windows, target_scan_id)
}

fn heatmap_from_windows(query: &[f32], windows: &WindowGrid, target_scan_id: ScanId) -> Result<HeatmapResult> {
    let sims: Vec<f64> = windows.records.iter().map(|r| cosine_sim_f32(query, &r.vector)).collect::<Result<_>>()?;
    let best = argmax_first(&sims).ok_or_else(|| Error::Undefined("no comparable windows".into()))?;
    let corners: Vec<[usize; 3]> = (0..windows.records.len()).map(|i| windows.corner(i)).collect();
    Ok(HeatmapResult {
        target_scan_id,
        best_position: corners[best],
        best_similarity: sims[best],
        similarity: Grid3::new(windows.dims, sims)?,
        corners,
        stride: windows.stride,
        patch_size: windows.patch,
    })
}

/// Embeds the box around `center` in `source` and searches every target.
/// Ties go to the lowest `(z, y, x)` window.
pub fn semantic_search<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    source: &Volume,
    center: [usize; 3],
    box_size: Shape3,
    targets: &[(ScanId, &Volume)],
    stride: [usize; 3],
) -> Result<Vec<HeatmapResult>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("semantic search needs at least one target".into()));
    }
    let corner = box_corner(source.shape(), center, box_size)?;
    let query = embedder.embed_patch(&source.grid().crop(corner, box_size)?)?;
    targets.iter().map(|&(id, t)| search_target(embedder, &query, t, id, box_size, stride)).collect()
}

/// Distance (cm) between the target organ centroid and the centre of the
/// window that best matches a box centred on the source organ centroid.
#[allow(clippy::too_many_arguments)]
pub fn ocd<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    source: &Volume,
    source_mask: &SegmentationMask,
    target: &Volume,
    target_mask: &SegmentationMask,
    organ_label: i32,
    box_size: Shape3,
    stride: [usize; 3],
) -> Result<f64> {
    let missing = |which: &str| Error::InvalidArgument(format!("label {organ_label} absent from {which} mask"));
    let src_c = source_mask.centroid(organ_label).ok_or_else(|| missing("source"))?;
    let tgt_c = target_mask.centroid(organ_label).ok_or_else(|| missing("target"))?;
    let center = src_c.map(|c| c.round().max(0.0) as usize);
    let result = semantic_search(embedder, source, center, box_size, &[(0, target)], stride)?.remove(0);
    let match_center: [f64; 3] =
        std::array::from_fn(|a| result.best_position[a] as f64 + (box_size[a] as f64 - 1.0) / 2.0);
    let p = target.voxel_to_mm(match_center);
    let q = target.voxel_to_mm(tgt_c);
    let mm = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
    Ok(mm / 10.0)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Top-3 principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca3 {
    pub mean: Vec<f64>,
    /// Unit-length, mutually orthogonal.
    pub components: [Vec<f64>; 3],
    /// Descending; covariance uses the `n - 1` denominator.
    pub explained_variance: [f64; 3],
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
    pub projections: Vec<[f64; 3]>,
}

impl Pca3 {
    pub fn project(&self, v: &[f32]) -> [f64; 3] {
        std::array::from_fn(|k| {
            self.components[k].iter().zip(v).zip(&self.mean).map(|((c, &x), m)| c * (f64::from(x) - m)).sum()
        })
    }
}

pub fn pca3<V: AsRef<[f32]>>(vectors: &[V]) -> Result<Pca3> {
    let n = vectors.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("pca needs >= 4 samples, got {n}")));
    }
    let d = vectors[0].as_ref().len();
    if d < 3 {
        return Err(Error::InvalidArgument(format!("pca3 needs dimension >= 3, got {d}")));
    }
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(Error::ShapeMismatch("pca inputs differ in length".into()));
    }
    let mut mean = vec![0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v.as_ref()) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(vectors[i].as_ref()[j]) - mean[j]);
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    if total_variance <= 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: [Vec<f64>; 3] = std::array::from_fn(|k| {
        let mut c: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = c.iter().enumerate().fold(0, |best, (i, v)| if v.abs() > c[best].abs() { i } else { best });
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        c
    });
    let explained_variance = std::array::from_fn(|k| eig.eigenvalues[order[k]].max(0.0));
    let mut pca = Pca3 { mean, components, explained_variance, total_variance, projections: Vec::new() };
    pca.projections = vectors.iter().map(|v| pca.project(v.as_ref())).collect();
    Ok(pca)
}

// ---------------------------------------------------------------------------
// CIELAB colour maps
// ---------------------------------------------------------------------------

pub const L_RANGE: [f64; 2] = [20.0, 90.0];
pub const AB_RANGE: [f64; 2] = [-80.0, 80.0];

/// Per-voxel colours for one volume. Background voxels have no Lab value and
/// are black in `rgb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorOverlay {
    pub shape: Shape3,
    pub lab: Vec<Option<[f64; 3]>>,
    pub rgb: Vec<[u8; 3]>,
}

/// Otsu threshold over a 256-bin histogram; values `> t` form the upper class.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() || !(hi > lo) {
        return Err(Error::Undefined("otsu threshold of a constant sample".into()));
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, f64::NEG_INFINITY);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let var = w0 * w1 * diff * diff;
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    Ok(lo + (best + 1) as f64 * width)
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

fn robust_unit(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 2.0), percentile(&sorted, 98.0));
    values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 })
        .collect()
}

/// CIELAB (D65) to 8-bit sRGB.
pub fn lab_to_srgb(lab: [f64; 3]) -> [u8; 3] {
    const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
    let [l, a, b] = lab;
    let fy = (l + 16.0) / 116.0;
    let f = [fy + a / 500.0, fy, fy - b / 200.0];
    let inv = |t: f64| if t > 6.0 / 29.0 { t.powi(3) } else { 3.0 * (6.0f64 / 29.0).powi(2) * (t - 4.0 / 29.0) };
    let [x, y, z] = [WHITE[0] * inv(f[0]), WHITE[1] * inv(f[1]), WHITE[2] * inv(f[2])];
    let lin = [
        3.2404542 * x - 1.5371385 * y - 0.4985314 * z,
        -0.9692660 * x + 1.8760108 * y + 0.0415560 * z,
        0.0556434 * x - 0.2040259 * y + 1.0572252 * z,
    ];
    lin.map(|c| {
        let c = c.clamp(0.0, 1.0);
        let s = if c <= 0.0031308 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 };
        (s * 255.0).round() as u8
    })
}

/// Pooled PCA of window embeddings across `volumes`, coloured in CIELAB.
/// Windows on the PC1 side of the Otsu split that holds the darkest window
/// (lowest mean HU) are background.
pub fn pca_cielab_map<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    volumes: &[&Volume],
    patch: Shape3,
    stride: [usize; 3],
) -> Result<Vec<ColorOverlay>> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("pca map needs at least one volume".into()));
    }
    let grids: Vec<WindowGrid> = volumes
        .iter()
        .enumerate()
        .map(|(i, v)| sliding_window_embed(embedder, v, patch, stride, i as ScanId))
        .collect::<Result<_>>()?;
    let mut means = Vec::new();
    for (g, v) in grids.iter().zip(volumes) {
        for i in 0..g.records.len() {
            means.push(v.grid().crop(g.corner(i), patch)?.mean());
        }
    }
    let pooled: Vec<&[f32]> = grids.iter().flat_map(|g| g.vectors()).collect();
    let pca = pca3(&pooled)?;
    let pc1: Vec<f64> = pca.projections.iter().map(|p| p[0]).collect();
    let foreground: Vec<bool> = match otsu_threshold(&pc1) {
        Ok(t) => {
            let darkest = (0..means.len()).fold(0, |b, i| if means[i] < means[b] { i } else { b });
            let dark_upper = pc1[darkest] > t;
            pc1.iter().map(|&p| (p > t) != dark_upper).collect()
        }
        Err(_) => vec![true; pc1.len()],
    };
    let fg_idx: Vec<usize> = (0..pc1.len()).filter(|&i| foreground[i]).collect();
    let scaled: [Vec<f64>; 3] =
        std::array::from_fn(|k| robust_unit(&fg_idx.iter().map(|&i| pca.projections[i][k]).collect::<Vec<_>>()));
    let mut lab: Vec<Option<[f64; 3]>> = vec![None; pc1.len()];
    for (j, &i) in fg_idx.iter().enumerate() {
        let lerp = |r: [f64; 2], t: f64| r[0] + (r[1] - r[0]) * t;
        lab[i] = Some([lerp(L_RANGE, scaled[0][j]), lerp(AB_RANGE, scaled[1][j]), lerp(AB_RANGE, scaled[2][j])]);
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(volumes.len());
    for (g, v) in grids.iter().zip(volumes) {
        let corners: Vec<[usize; 3]> = (0..g.records.len()).map(|i| g.corner(i)).collect();
        let idx = paint_nearest(v.shape(), patch, &corners, g.dims, |i| i as u32);
        let voxel_lab: Vec<Option<[f64; 3]>> = idx.data().iter().map(|&i| lab[offset + i as usize]).collect();
        let rgb = voxel_lab.iter().map(|l| l.map_or([0, 0, 0], lab_to_srgb)).collect();
        out.push(ColorOverlay { shape: v.shape(), lab: voxel_lab, rgb });
        offset += g.records.len();
    }
    Ok(out)
}

/// For each voxel along one axis, the window whose centre is nearest (ties
/// to the lower window).
fn nearest_along(extent: usize, starts: &[usize], patch: usize) -> Vec<usize> {
    (0..extent)
        .map(|v| {
            let mut best = 0;
            for (i, &s) in starts.iter().enumerate() {
                let d = |s: usize| (2.0 * v as f64 - (2 * s + patch - 1) as f64).abs();
                if d(s) < d(starts[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn paint_nearest<T: Copy>(
    shape: Shape3,
    patch: Shape3,
    corners: &[[usize; 3]],
    dims: Shape3,
    value: impl Fn(usize) -> T,
) -> Grid3<T> {
    let starts: [Vec<usize>; 3] = [
        (0..dims[0]).map(|i| corners[i * dims[1] * dims[2]][0]).collect(),
        (0..dims[1]).map(|i| corners[i * dims[2]][1]).collect(),
        (0..dims[2]).map(|i| corners[i][2]).collect(),
    ];
    let near: [Vec<usize>; 3] = std::array::from_fn(|a| nearest_along(shape[a], &starts[a], patch[a]));
    Grid3::from_fn(shape, |z, y, x| value((near[0][z] * dims[1] + near[1][y]) * dims[2] + near[2][x]))
}

// ---------------------------------------------------------------------------
// Occlusion saliency
// ---------------------------------------------------------------------------

/// Cosine distance of the whole-volume embedding under each occlusion.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub distance: Grid3<f64>,
    pub corners: Vec<[usize; 3]>,
    pub occluder: Shape3,
    pub stride: [usize; 3],
    pub fill: f32,
}

impl SaliencyMap {
    /// Corner of the most salient occluder (first on ties).
    pub fn argmax(&self) -> [usize; 3] {
        self.corners[argmax_first(self.distance.data()).unwrap_or(0)]
    }

    pub fn to_volume(&self, volume: &Volume) -> Result<Volume> {
        let grid = paint_nearest(volume.shape(), self.occluder, &self.corners, self.distance.shape(), |i| {
            self.distance.data()[i] as f32
        });
        Volume::new(grid, volume.spacing_mm(), volume.origin_mm())
    }
}

/// `fill` defaults to the volume minimum.
pub fn ofd_saliency<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    volume: &Volume,
    occluder: Shape3,
    stride: [usize; 3],
    fill: Option<f32>,
) -> Result<SaliencyMap> {
    let fill = fill.unwrap_or_else(|| volume.grid().min_value());
    let (dims, corners) = window_corners(volume.shape(), occluder, stride)?;
    let baseline = embedder.embed_patch(volume.grid())?;
    let distance: Vec<f64> = corners
        .par_iter()
        .map(|&c| {
            let mut g = volume.grid().clone();
            g.fill_box(c, occluder, fill);
            let e = embedder.embed_patch(&g)?;
            Ok((1.0 - cosine_sim_f32(&baseline, &e)?).max(0.0))
        })
        .collect::<Result<_>>()?;
    Ok(SaliencyMap { distance: Grid3::new(dims, distance)?, corners, occluder, stride, fill })
}

// ---------------------------------------------------------------------------
// Test-retest stability
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityEntry {
    pub position: [usize; 3],
    pub cosine: f64,
    pub mse: f64,
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
    pub median_cosine: f64,
    pub min_cosine: f64,
    pub threshold: f64,
}

impl StabilityReport {
    pub fn outliers(&self) -> Vec<[usize; 3]> {
        self.entries.iter().filter(|e| e.outlier).map(|e| e.position).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["zi", "yi", "xi", "cosine", "mse", "outlier"]).map_err(csv_err)?;
        for e in &self.entries {
            let p = e.position;
            w.write_record([
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
                e.cosine.to_string(),
                e.mse.to_string(),
                e.outlier.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Compares window embeddings at identical positions of two pre-aligned scans.
pub fn test_retest<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    a: &Volume,
    b: &Volume,
    patch: Shape3,
    stride: [usize; 3],
    outlier_threshold: f64,
) -> Result<StabilityReport> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("test {:?} vs retest {:?}", a.shape(), b.shape())));
    }
    let ga = sliding_window_embed(embedder, a, patch, stride, 0)?;
    let gb = sliding_window_embed(embedder, b, patch, stride, 1)?;
    let mut entries = Vec::with_capacity(ga.records.len());
    for (i, (ra, rb)) in ga.records.iter().zip(&gb.records).enumerate() {
        let cosine = cosine_sim_f32(&ra.vector, &rb.vector)?;
        let mse = ra.vector.iter().zip(&rb.vector).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>()
            / ra.vector.len().max(1) as f64;
        entries.push(StabilityEntry { position: ga.corner(i), cosine, mse, outlier: cosine < outlier_threshold });
    }
    let mut sorted: Vec<f64> = entries.iter().map(|e| e.cosine).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_cosine = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok(StabilityReport { entries, median_cosine, min_cosine: sorted[0], threshold: outlier_threshold })
}

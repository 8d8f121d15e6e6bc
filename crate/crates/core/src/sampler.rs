//! Patch-grid sampling and intra-scan batch composition.
//!
//! A patch is addressed by its minimal corner `(i, j, k)` and covers
//! `[i, i + s_i - 1] × [j, j + s_j - 1] × [k, k + s_k - 1]`.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};
use crate::rng::{derive_seed, rng_from_seed};

pub type ScanId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSize(pub [usize; 3]);

impl PatchSize {
    pub fn cube(side: usize) -> Self {
        Self([side; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("patch size {:?} has a zero extent", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub source_scan_id: ScanId,
    pub position: [usize; 3],
    pub data: Grid3<f32>,
}

/// The `M` patches sampled from one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub scan_id: ScanId,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    /// Scans per batch.
    pub scans_per_batch: usize,
    /// Patches per scan.
    pub patches_per_scan: usize,
    pub patch_size: PatchSize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self { scans_per_batch: 4, patches_per_scan: 8, patch_size: PatchSize::cube(16) }
    }
}

impl BatchComposition {
    pub fn validate(&self) -> Result<()> {
        if self.scans_per_batch == 0 || self.patches_per_scan == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch needs n >= 1 and M >= 1 (got n={}, M={})",
                self.scans_per_batch, self.patches_per_scan
            )));
        }
        self.patch_size.validate()
    }

    pub fn total_patches(&self) -> usize {
        self.scans_per_batch * self.patches_per_scan
    }
}

/// A scan available for sampling.
#[derive(Clone, Copy, Debug)]
pub struct Scan<'a> {
    pub id: ScanId,
    pub grid: &'a Grid3<f32>,
}

/// Number of in-bounds corner positions; zero when the patch does not fit.
pub fn valid_positions(shape: Shape3, patch: PatchSize) -> usize {
    (0..3).map(|a| (shape[a] + 1).saturating_sub(patch.0[a])).product()
}

/// `M` corners drawn i.i.d. uniformly over all valid placements.
pub fn sample_positions(shape: Shape3, patch: PatchSize, m: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    patch.validate()?;
    if valid_positions(shape, patch) == 0 {
        return Err(Error::NoValidPlacement { shape, patch: patch.0 });
    }
    if m == 0 {
        return Err(Error::InvalidArgument("M must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..m)
        .map(|_| {
            [
                rng.random_range(0..=shape[0] - patch.0[0]),
                rng.random_range(0..=shape[1] - patch.0[1]),
                rng.random_range(0..=shape[2] - patch.0[2]),
            ]
        })
        .collect())
}

pub fn sample_patches(scan: Scan<'_>, m: usize, patch: PatchSize, seed: u64) -> Result<PatchSet> {
    let positions = sample_positions(scan.grid.shape(), patch, m, seed)?;
    let patches = positions
        .into_iter()
        .map(|position| {
            Ok(Patch { source_scan_id: scan.id, position, data: scan.grid.crop(position, patch.0)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet { scan_id: scan.id, patches })
}

/// `n` distinct scans, `M` patches from each.
pub fn compose_batch(scans: &[Scan<'_>], composition: &BatchComposition, seed: u64) -> Result<Vec<PatchSet>> {
    composition.validate()?;
    let n = composition.scans_per_batch;
    if scans.len() < n {
        return Err(Error::InsufficientData(format!(
            "batch needs {n} scans, only {} available",
            scans.len()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let chosen = sample_indices(&mut rng, scans.len(), n);
    chosen
        .iter()
        .enumerate()
        .map(|(slot, idx)| {
            sample_patches(
                scans[idx],
                composition.patches_per_scan,
                composition.patch_size,
                derive_seed(seed, slot as u64 + 1),
            )
        })
        .collect()
}

/// Inter-scan baseline batch: `n·M` patches, each from a scan drawn
/// uniformly with replacement, returned as one set per patch.
pub fn compose_mixed_batch(scans: &[Scan<'_>], composition: &BatchComposition, seed: u64) -> Result<Vec<PatchSet>> {
    composition.validate()?;
    if scans.is_empty() {
        return Err(Error::InsufficientData("no scans to sample from".into()));
    }
    let mut rng = rng_from_seed(seed);
    (0..composition.total_patches())
        .map(|slot| {
            let scan = scans[rng.random_range(0..scans.len())];
            sample_patches(scan, 1, composition.patch_size, derive_seed(seed, slot as u64 + 1))
        })
        .collect()
}

/// Produces one stochastic view of a whole scan.
pub trait ViewGenerator {
    fn view(&self, grid: &Grid3<f32>, seed: u64) -> Result<Grid3<f32>>;
}

impl<F> ViewGenerator for F
where
    F: Fn(&Grid3<f32>, u64) -> Result<Grid3<f32>>,
{
    fn view(&self, grid: &Grid3<f32>, seed: u64) -> Result<Grid3<f32>> {
        self(grid, seed)
    }
}

/// Redundancy diagnostic: how much of the between-view covariance is
/// explained by instance identity.
///
/// Each trial draws a view pair per scan and summarises each view by its mean
/// intensity. The per-trial sample covariance of the two summaries across
/// scans is divided by the sample variance of the scans' own mean
/// intensities; the result is averaged over trials. Values near 1 mean the
/// views vary about as much as the instances do.
pub fn redundancy_ratio<G: ViewGenerator + ?Sized>(
    volumes: &[Grid3<f32>],
    views: &G,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if volumes.len() < 2 {
        return Err(Error::InsufficientData("redundancy ratio needs >= 2 volumes".into()));
    }
    if trials < 2 {
        return Err(Error::InvalidArgument("redundancy ratio needs >= 2 trials".into()));
    }
    let means: Vec<f64> = volumes.iter().map(Grid3::mean).collect();
    let instance_var = sample_covariance(&means, &means);
    if !(instance_var > 0.0) {
        return Err(Error::Undefined("instance variance is zero".into()));
    }
    let mut total = 0.0;
    for t in 0..trials {
        let mut a = Vec::with_capacity(volumes.len());
        let mut b = Vec::with_capacity(volumes.len());
        for (v, grid) in volumes.iter().enumerate() {
            let s = derive_seed(seed, (t * volumes.len() + v) as u64);
            a.push(views.view(grid, derive_seed(s, 0))?.mean());
            b.push(views.view(grid, derive_seed(s, 1))?.mean());
        }
        total += sample_covariance(&a, &b) / instance_var;
    }
    Ok(total / trials as f64)
}

fn sample_covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

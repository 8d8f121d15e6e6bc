//! Pre-training loop, linear probe, checkpoint selection and the ablation
//! harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, TransformPipeline};
use crate::encoder::{save_checkpoint, EncoderConfig, EncoderState, Scalar, Trace};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::metrics::{dice_aggregate, DiceCounts, DiceMode};
use crate::objectives::{loss_gradients, ObjectiveConfig, ObjectiveKind, Predictor, ScanPairs};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::{compose_batch, compose_mixed_batch, BatchComposition, PatchSet, Scan};
use crate::volume::{normalize_hu, SegmentationMask, Volume};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `base_lr`, then half-cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps || warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "schedule needs step < total and warmup < total (step {step}, warmup {warmup_steps}, total {total_steps})"
        )));
    }
    if !(base_lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("base_lr {base_lr} must be >= 0")));
    }
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second Adam moments, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamMoments {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m }
    }
}

/// One Adam step with bias correction and decoupled weight decay.
/// `step_index` is zero-based.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    moments: &mut AdamMoments,
    step_index: usize,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == moments.m.len()
        && params.len() == moments.v.len()
        && params
            .iter()
            .zip(grads)
            .zip(&moments.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch("parameters, gradients and moments disagree".into()));
    }
    for g in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    let t = (step_index + 1) as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.m.iter_mut().zip(moments.v.iter_mut())) {
        for i in 0..p.len() {
            let gi = g[i].to_f64().expect("finite");
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            let pi = p[i].to_f64().expect("finite");
            p[i] = T::from_f64(pi - lr * update - lr * weight_decay * pi).expect("representable");
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Each scan's patches form their own loss group.
    Intra,
    /// Patches from random scans pooled into one group.
    Inter,
}

impl SamplingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Intra => "intra",
            Self::Inter => "inter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch: BatchComposition,
    pub objective: ObjectiveConfig,
    pub strategy: SamplingStrategy,
    pub pipeline: TransformPipeline,
    /// Learned SimSiam predictor; identity otherwise.
    pub simsiam_predictor: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only the last).
    pub checkpoint_every: usize,
    /// Worker threads; 1 is the bit-reproducible single-worker mode and 0
    /// uses every core. Results do not depend on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 50,
            base_lr: 3e-4,
            weight_decay: 1e-6,
            warmup_epochs: 3,
            batch: BatchComposition::default(),
            objective: ObjectiveConfig::default(),
            strategy: SamplingStrategy::Intra,
            pipeline: TransformPipeline::standard(),
            simsiam_predictor: true,
            seed: 0,
            checkpoint_every: 10,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("epochs and steps_per_epoch must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("base_lr must be > 0 and weight_decay >= 0".into()));
        }
        self.batch.validate()?;
        self.objective.validate()?;
        self.pipeline.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub state: EncoderState<f32>,
    pub curve: Vec<LossPoint>,
    /// `(epoch, path)` of every checkpoint written.
    pub checkpoints: Vec<(usize, PathBuf)>,
}

pub fn write_loss_curve(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for p in curve {
        w.serialize(p).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Views are reduced in fixed-size chunks so gradient sums do not depend on
/// scheduling.
const GRAD_CHUNK: usize = 8;

/// Pre-trains a fresh encoder on `volumes` (HU). With `out_dir`, writes
/// `loss_curve.csv` and `epoch_NNNN.ckpt` files there.
pub fn pretrain(
    volumes: &[Volume],
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let state = EncoderState::<f32>::init(encoder_config, derive_seed(config.seed, 0x454e43))?;
    pretrain_from(state, volumes, config, out_dir)
}

/// Continues training `state`.
pub fn pretrain_from(
    mut state: EncoderState<f32>,
    volumes: &[Volume],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let needed = match config.strategy {
        SamplingStrategy::Intra => config.batch.scans_per_batch,
        SamplingStrategy::Inter => 1,
    };
    if volumes.len() < needed {
        return Err(Error::InsufficientData(format!("{} scans available, batch needs {needed}", volumes.len())));
    }
    if config.objective.kind == ObjectiveKind::Vicreg {
        let group = match config.strategy {
            SamplingStrategy::Intra => config.batch.patches_per_scan,
            SamplingStrategy::Inter => config.batch.total_patches(),
        };
        if group < 2 {
            return Err(Error::InvalidConfig("VICReg needs at least 2 patches per loss group".into()));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let grids: Vec<Grid3<f32>> = volumes.iter().map(|v| normalize_hu(v).into_grid()).collect();
    let scans: Vec<Scan<'_>> = grids.iter().enumerate().map(|(i, g)| Scan { id: i as u64, grid: g }).collect();

    let mut predictor = (config.objective.kind == ObjectiveKind::Simsiam && config.simsiam_predictor)
        .then(|| Predictor::init(state.config().proj_dim, derive_seed(config.seed, 0x50524544)));
    let mut moments = AdamMoments::zeros(state.params().iter().map(|t| t.data.len()));
    let mut pred_moments = predictor.as_ref().map(|p| AdamMoments::zeros(p.params.iter().map(Vec::len)));

    let pool = thread_pool(config.workers)?;
    let total = config.total_steps();
    let warmup = config.warmup_epochs * config.steps_per_epoch;
    let mut curve = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    for step in 0..total {
        let epoch = step / config.steps_per_epoch;
        let lr = lr_schedule(step, total, warmup, config.base_lr)?;
        let step_seed = derive_seed(config.seed, step as u64 + 1);
        let (loss, grads, pred_grads) =
            pool.install(|| train_step(&state, predictor.as_ref(), &scans, config, step_seed))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        {
            let mut ps: Vec<&mut [f32]> = state.params_mut().iter_mut().map(|t| t.data.as_mut_slice()).collect();
            let gs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            optimizer_step(&mut ps, &gs, &mut moments, step, lr, config.weight_decay)
                .map_err(|e| diverged_on_nonfinite(e, step, loss))?;
        }
        if let (Some(pred), Some(pg), Some(pm)) = (predictor.as_mut(), pred_grads, pred_moments.as_mut()) {
            let mut ps: Vec<&mut [f64]> = pred.params.iter_mut().map(Vec::as_mut_slice).collect();
            let gs: Vec<&[f64]> = pg.iter().map(Vec::as_slice).collect();
            optimizer_step(&mut ps, &gs, pm, step, lr, config.weight_decay)
                .map_err(|e| diverged_on_nonfinite(e, step, loss))?;
        }
        curve.push(LossPoint { step, epoch, lr, loss });

        let end_of_epoch = (step + 1) % config.steps_per_epoch == 0;
        let last = step + 1 == total;
        let cadence = config.checkpoint_every > 0 && (epoch + 1).is_multiple_of(config.checkpoint_every);
        if let (Some(dir), true) = (out_dir, end_of_epoch && (cadence || last)) {
            let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
            save_checkpoint(&state, epoch + 1, &path)?;
            checkpoints.push((epoch + 1, path));
        }
    }
    if let Some(dir) = out_dir {
        write_loss_curve(&curve, &dir.join("loss_curve.csv"))?;
    }
    Ok(TrainOutcome { state, curve, checkpoints })
}

fn diverged_on_nonfinite(e: Error, step: usize, loss: f64) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: if loss.is_finite() { f64::NAN } else { loss } },
        other => other,
    }
}

/// Groups of patches that share a loss, per the sampling strategy.
fn loss_groups(scans: &[Scan<'_>], config: &TrainConfig, seed: u64) -> Result<Vec<PatchSet>> {
    match config.strategy {
        SamplingStrategy::Intra => compose_batch(scans, &config.batch, seed),
        SamplingStrategy::Inter => {
            let sets = compose_mixed_batch(scans, &config.batch, seed)?;
            let patches = sets.into_iter().flat_map(|s| s.patches).collect();
            Ok(vec![PatchSet { scan_id: u64::MAX, patches }])
        }
    }
}

type StepResult = (f64, Vec<Vec<f32>>, Option<Vec<Vec<f64>>>);

fn train_step(
    state: &EncoderState<f32>,
    predictor: Option<&Predictor>,
    scans: &[Scan<'_>],
    config: &TrainConfig,
    seed: u64,
) -> Result<StepResult> {
    let groups = loss_groups(scans, config, seed)?;
    let patches: Vec<&Grid3<f32>> = groups.iter().flat_map(|g| g.patches.iter().map(|p| &p.data)).collect();
    let views: Vec<(Grid3<f32>, Grid3<f32>)> = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| make_view_pair(p, &config.pipeline, derive_seed(seed, 0x5649_4557 + i as u64)))
        .collect::<Result<_>>()?;
    // flat order: view one of every patch, then view two of every patch
    let flat: Vec<&Grid3<f32>> = views.iter().map(|v| &v.0).chain(views.iter().map(|v| &v.1)).collect();
    let traces: Vec<Trace<f32>> = flat.par_iter().map(|v| state.trace(v)).collect::<Result<_>>()?;

    let n = patches.len();
    let proj = |i: usize| -> Vec<f64> { traces[i].projected().iter().map(|&v| f64::from(v)).collect() };
    let mut pairs = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in &groups {
        let m = g.patches.len();
        pairs.push(ScanPairs {
            scan_id: g.scan_id,
            z1: (offset..offset + m).map(proj).collect(),
            z2: (offset..offset + m).map(|i| proj(n + i)).collect(),
        });
        offset += m;
    }
    let lg = loss_gradients(&config.objective, &pairs, predictor)?;
    let mut upstream: Vec<Vec<f32>> = vec![Vec::new(); 2 * n];
    let mut offset = 0;
    for (g1, g2) in &lg.embeddings {
        for (i, (a, b)) in g1.iter().zip(g2).enumerate() {
            upstream[offset + i] = a.iter().map(|&v| v as f32).collect();
            upstream[n + offset + i] = b.iter().map(|&v| v as f32).collect();
        }
        offset += g1.len();
    }

    let chunk_sums: Vec<Vec<Vec<f32>>> = (0..traces.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = state.zero_gradients();
            for &i in chunk {
                if upstream[i].iter().any(|&v| v != 0.0) {
                    state.backward(&traces[i], &upstream[i], &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = state.zero_gradients();
    for c in &chunk_sums {
        for (a, b) in grads.iter_mut().zip(c) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    Ok((lg.report.total, grads, lg.predictor))
}

/// A volume with its ground-truth labels.
#[derive(Clone, Debug)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub mask: SegmentationMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Training voxels sampled per few-shot volume.
    pub voxels_per_volume: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.05, voxels_per_volume: 8192, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.voxels_per_volume == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("probe needs iterations, voxels_per_volume and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint_epoch: usize,
    pub shots: usize,
    /// Over foreground labels.
    pub macro_dice: f64,
    pub micro_dice: f64,
    /// Every label, background included.
    pub per_label: BTreeMap<i32, f64>,
}

/// Frozen backbone features trilinearly upsampled to every voxel,
/// voxel-major (`N × C`).
pub fn voxel_features(state: &EncoderState<f32>, volume: &Volume) -> Result<(usize, Vec<f32>)> {
    let fm = state.forward_features(normalize_hu(volume).grid())?;
    let shape = volume.shape();
    let c = fm.channels;
    // voxel centre v maps to feature coordinate (v + 0.5) * f / n - 0.5
    let taps: Vec<Vec<(usize, usize, f32)>> = (0..3)
        .map(|a| {
            let (n, f) = (shape[a], fm.shape[a]);
            (0..n)
                .map(|v| {
                    let t = ((v as f64 + 0.5) * f as f64 / n as f64 - 0.5).clamp(0.0, (f - 1) as f64);
                    let i0 = t.floor() as usize;
                    let i1 = (i0 + 1).min(f - 1);
                    (i0, i1, (t - i0 as f64) as f32)
                })
                .collect()
        })
        .collect();
    let [fz, fy, fx] = fm.shape;
    let plane = fz * fy * fx;
    let at = |ch: usize, z: usize, y: usize, x: usize| fm.data[ch * plane + (z * fy + y) * fx + x];
    let mut out = vec![0.0f32; shape.iter().product::<usize>() * c];
    let mut idx = 0;
    for &(z0, z1, wz) in &taps[0] {
        for &(y0, y1, wy) in &taps[1] {
            for &(x0, x1, wx) in &taps[2] {
                for ch in 0..c {
                    let lerp = |a: f32, b: f32, w: f32| a + (b - a) * w;
                    let c00 = lerp(at(ch, z0, y0, x0), at(ch, z0, y0, x1), wx);
                    let c01 = lerp(at(ch, z0, y1, x0), at(ch, z0, y1, x1), wx);
                    let c10 = lerp(at(ch, z1, y0, x0), at(ch, z1, y0, x1), wx);
                    let c11 = lerp(at(ch, z1, y1, x0), at(ch, z1, y1, x1), wx);
                    out[idx] = lerp(lerp(c00, c01, wy), lerp(c10, c11, wy), wz);
                    idx += 1;
                }
            }
        }
    }
    Ok((c, out))
}

/// Softmax regression on standardised voxel features.
struct LinearProbe {
    classes: usize,
    channels: usize,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    /// `classes × (channels + 1)`, bias last.
    weights: Vec<f64>,
}

impl LinearProbe {
    fn fit(features: &[f32], labels: &[usize], channels: usize, classes: usize, cfg: &ProbeConfig) -> Self {
        let n = labels.len();
        let mut mean = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        for row in features.chunks_exact(channels) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += f64::from(v);
                sq[j] += f64::from(v) * f64::from(v);
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
        let inv_std: Vec<f32> =
            sq.iter().zip(&mean).map(|(s, m)| (1.0 / (s / n as f64 - m * m).max(1e-12).sqrt()) as f32).collect();
        let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let stride = channels + 1;
        let x: Vec<f64> = features
            .chunks_exact(channels)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| f64::from((v - mean[j]) * inv_std[j]))
                    .chain(std::iter::once(1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut probe = Self { classes, channels, mean, inv_std, weights: vec![0.0; classes * stride] };
        let mut moments = AdamMoments::zeros([probe.weights.len()]);
        let mut grad = vec![0.0; probe.weights.len()];
        let mut logits = vec![0.0; classes];
        for it in 0..cfg.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in x.chunks_exact(stride).zip(labels) {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = probe.weights[k * stride..(k + 1) * stride].iter().zip(row).map(|(w, v)| w * v).sum();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                for k in 0..classes {
                    let p = (logits[k] - max).exp() / z - if k == label { 1.0 } else { 0.0 };
                    for (g, v) in grad[k * stride..(k + 1) * stride].iter_mut().zip(row) {
                        *g += p * v;
                    }
                }
            }
            grad.iter_mut().for_each(|g| *g /= n as f64);
            let mut ps = [probe.weights.as_mut_slice()];
            optimizer_step(&mut ps, &[grad.as_slice()], &mut moments, it, cfg.lr, 0.0)
                .expect("probe gradients are finite");
        }
        probe
    }

    fn predict(&self, features: &[f32]) -> Vec<i32> {
        let stride = self.channels + 1;
        let mut x = vec![0.0f64; stride];
        x[self.channels] = 1.0;
        features
            .chunks_exact(self.channels)
            .map(|row| {
                for j in 0..self.channels {
                    x[j] = f64::from((row[j] - self.mean[j]) * self.inv_std[j]);
                }
                let mut best = (0usize, f64::NEG_INFINITY);
                for k in 0..self.classes {
                    let s: f64 = self.weights[k * stride..(k + 1) * stride].iter().zip(&x).map(|(w, v)| w * v).sum();
                    if s > best.1 {
                        best = (k, s);
                    }
                }
                best.0 as i32
            })
            .collect()
    }
}

/// Trains a linear probe on the first `count` volumes of `train_pool` for
/// each few-shot count and scores it on `eval`.
pub fn probe_evaluate(
    state: &EncoderState<f32>,
    checkpoint_epoch: usize,
    train_pool: &[LabeledVolume],
    eval: &[LabeledVolume],
    few_shot_counts: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    cfg.validate()?;
    if eval.is_empty() || few_shot_counts.is_empty() {
        return Err(Error::InsufficientData("probe needs evaluation volumes and shot counts".into()));
    }
    if let Some(&c) = few_shot_counts.iter().find(|&&c| c == 0 || c > train_pool.len()) {
        return Err(Error::InsufficientData(format!("{c} shots requested, {} labelled volumes", train_pool.len())));
    }
    for lv in train_pool.iter().chain(eval) {
        if lv.volume.shape() != lv.mask.shape() {
            return Err(Error::ShapeMismatch("volume and mask shapes differ".into()));
        }
        if lv.mask.labels().iter().any(|&l| l < 0) {
            return Err(Error::InvalidArgument("probe labels must be >= 0".into()));
        }
    }
    let classes = train_pool.iter().chain(eval).flat_map(|lv| lv.mask.labels().iter().copied()).max().unwrap_or(0) as usize + 1;
    let max_shots = *few_shot_counts.iter().max().expect("non-empty");
    let train_features: Vec<(usize, Vec<f32>)> =
        train_pool[..max_shots].iter().map(|lv| voxel_features(state, &lv.volume)).collect::<Result<_>>()?;
    let eval_features: Vec<(usize, Vec<f32>)> =
        eval.iter().map(|lv| voxel_features(state, &lv.volume)).collect::<Result<_>>()?;
    let channels = train_features[0].0;

    let mut reports = Vec::with_capacity(few_shot_counts.len());
    for &shots in few_shot_counts {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, lv) in train_pool[..shots].iter().enumerate() {
            let labels = lv.mask.labels();
            let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
            let take = cfg.voxels_per_volume.min(labels.len());
            let mut chosen = sample_indices(&mut rng, labels.len(), take).into_vec();
            chosen.sort_unstable();
            for v in chosen {
                xs.extend_from_slice(&train_features[i].1[v * channels..(v + 1) * channels]);
                ys.push(labels[v] as usize);
            }
        }
        let probe = LinearProbe::fit(&xs, &ys, channels, classes, cfg);
        let mut counts = vec![DiceCounts::default(); classes];
        for (lv, (_, f)) in eval.iter().zip(&eval_features) {
            let pred = probe.predict(f);
            for (&p, &t) in pred.iter().zip(lv.mask.labels()) {
                counts[p as usize].pred += 1;
                counts[t as usize].truth += 1;
                if p == t {
                    counts[t as usize].intersection += 1;
                }
            }
        }
        let per_label = counts.iter().enumerate().map(|(l, c)| (l as i32, c.dice())).collect();
        let foreground = if classes > 1 { &counts[1..] } else { &counts[..] };
        reports.push(ProbeReport {
            checkpoint_epoch,
            shots,
            macro_dice: dice_aggregate(foreground, DiceMode::Macro)?,
            micro_dice: dice_aggregate(foreground, DiceMode::Micro)?,
            per_label,
        });
    }
    Ok(reports)
}

/// Epoch of the best micro-Dice report; ties go to the earliest epoch.
pub fn select_checkpoint(reports: &[ProbeReport]) -> Result<usize> {
    reports
        .iter()
        .min_by(|a, b| b.micro_dice.total_cmp(&a.micro_dice).then(a.checkpoint_epoch.cmp(&b.checkpoint_epoch)))
        .map(|r| r.checkpoint_epoch)
        .ok_or_else(|| Error::InsufficientData("no probe reports".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub strategies: Vec<SamplingStrategy>,
    pub variants: Vec<ObjectiveKind>,
    pub crop_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Few-shot volumes used to fit the probe.
    pub probe_shots: usize,
    /// Volumes held out for probe evaluation, taken from the end.
    pub probe_holdout: usize,
    pub probe: ProbeConfig,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.variants.is_empty() || self.crop_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("ablation needs strategies, variants, crop counts and seeds".into()));
        }
        if self.crop_counts.contains(&0) || self.probe_shots == 0 || self.probe_holdout == 0 {
            return Err(Error::InvalidConfig("crop counts, probe_shots and probe_holdout must be >= 1".into()));
        }
        self.probe.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub variant: String,
    pub crops: usize,
    pub seed: u64,
    pub micro_dice: f64,
    pub macro_dice: f64,
}

pub fn objective_name(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::Ntxent => "ntxent",
        ObjectiveKind::Simsiam => "simsiam",
        ObjectiveKind::Vicreg => "vicreg",
    }
}

/// Pre-trains every (strategy, variant, crops, seed) cell under the budget in
/// `base`, probes the final encoder and tabulates Dice. The last
/// `probe_holdout` volumes are never used for pre-training.
pub fn ablate(
    dataset: &[LabeledVolume],
    encoder_config: &EncoderConfig,
    base: &TrainConfig,
    ablation: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    ablation.validate()?;
    if dataset.len() <= ablation.probe_holdout || dataset.len() - ablation.probe_holdout < ablation.probe_shots {
        return Err(Error::InsufficientData(format!(
            "{} volumes cannot cover {} probe shots and {} held out",
            dataset.len(),
            ablation.probe_shots,
            ablation.probe_holdout
        )));
    }
    let split = dataset.len() - ablation.probe_holdout;
    let (train, held_out) = dataset.split_at(split);
    let volumes: Vec<Volume> = train.iter().map(|lv| lv.volume.clone()).collect();
    let mut rows = Vec::new();
    for &strategy in &ablation.strategies {
        for &variant in &ablation.variants {
            for &crops in &ablation.crop_counts {
                for &seed in &ablation.seeds {
                    let mut cfg = base.clone();
                    cfg.strategy = strategy;
                    cfg.objective.kind = variant;
                    cfg.batch.patches_per_scan = crops;
                    cfg.seed = seed;
                    let outcome = pretrain(&volumes, encoder_config, &cfg, None)?;
                    let probe_cfg = ProbeConfig { seed: derive_seed(seed, 0x50524f42), ..ablation.probe.clone() };
                    let report = probe_evaluate(
                        &outcome.state,
                        cfg.epochs,
                        &train[..ablation.probe_shots],
                        held_out,
                        &[ablation.probe_shots],
                        &probe_cfg,
                    )?
                    .remove(0);
                    rows.push(AblationRow {
                        strategy: strategy.name().into(),
                        variant: objective_name(variant).into(),
                        crops,
                        seed,
                        micro_dice: report.micro_dice,
                        macro_dice: report.macro_dice,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_table(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::PatchSize;
    use crate::volume::{generate_corpus, CorpusSpec};

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(10, 100, 10, 0.5).unwrap(), 0.5);
        assert_eq!(lr_schedule(0, 100, 10, 0.5).unwrap(), 0.05);
        assert!(lr_schedule(1999, 2000, 100, 1.0).unwrap() < 1e-3);
        // midpoint of the cosine phase: step - warmup = (total - warmup) / 2
        assert!((lr_schedule(60, 110, 10, 2.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(lr_schedule(100, 100, 10, 0.5).is_err());
        assert!(lr_schedule(5, 10, 10, 0.5).is_err());
        assert_eq!(lr_schedule(0, 10, 0, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let (total, warmup, base) = (500, 50, 1.0);
        let lrs: Vec<f64> = (0..total).map(|s| lr_schedule(s, total, warmup, base).unwrap()).collect();
        assert!(lrs.iter().all(|&l| l >= 0.0));
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= base / warmup as f64 + 1e-12);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![2.0f64];
        let mut m = AdamMoments::zeros([1]);
        optimizer_step(&mut [p.as_mut_slice()], &[&[1.0]], &mut m, 0, 0.01, 0.0).unwrap();
        assert!((2.0 - p[0] - 0.01 / (1.0 + 1e-8)).abs() < 1e-15);

        let orig = vec![0.3f64, -1.7, 1e-30, 5e300];
        let mut q = orig.clone();
        let mut m = AdamMoments::zeros([4]);
        optimizer_step(&mut [q.as_mut_slice()], &[&[0.0; 4]], &mut m, 3, 0.1, 0.0).unwrap();
        assert_eq!(q.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), orig.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let mut r = vec![2.0f64];
        let mut m = AdamMoments::zeros([1]);
        optimizer_step(&mut [r.as_mut_slice()], &[&[0.0]], &mut m, 0, 0.1, 0.01).unwrap();
        assert!((r[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);

        let mut m = AdamMoments::zeros([1]);
        assert!(optimizer_step(&mut [r.as_mut_slice()], &[&[f64::NAN]], &mut m, 0, 0.1, 0.0).is_err());
        assert!(optimizer_step(&mut [r.as_mut_slice()], &[&[1.0, 2.0]], &mut m, 0, 0.1, 0.0).is_err());
    }

    #[test]
    fn select_checkpoint_examples() {
        let r = |epoch, micro_dice| ProbeReport {
            checkpoint_epoch: epoch,
            shots: 1,
            macro_dice: micro_dice,
            micro_dice,
            per_label: BTreeMap::new(),
        };
        assert_eq!(select_checkpoint(&[r(3, 0.1)]).unwrap(), 3);
        assert_eq!(select_checkpoint(&[r(10, 0.5), r(20, 0.7)]).unwrap(), 20);
        assert_eq!(select_checkpoint(&[r(20, 0.7), r(10, 0.7)]).unwrap(), 10);
        assert_eq!(select_checkpoint(&[r(10, 0.7), r(20, 0.7)]).unwrap(), 10);
        assert!(select_checkpoint(&[]).is_err());
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig { patch_shape: [8, 8, 8], stages: 2, base_channels: 2, embed_dim: 8, proj_dim: 4 }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 2,
            warmup_epochs: 1,
            base_lr: 1e-3,
            batch: BatchComposition { scans_per_batch: 2, patches_per_scan: 3, patch_size: PatchSize::cube(8) },
            seed,
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(n: usize) -> Vec<LabeledVolume> {
        generate_corpus(&CorpusSpec::redundant(n, [16, 16, 16]), 5)
            .unwrap()
            .into_iter()
            .map(|(volume, mask)| LabeledVolume { volume, mask })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let vols: Vec<Volume> = tiny_corpus(2).into_iter().map(|lv| lv.volume).collect();
        let init = EncoderState::<f32>::init(&tiny_encoder(), 1).unwrap();
        let mut cfg = tiny_train(1);
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        cfg.steps_per_epoch = 1;
        cfg.weight_decay = 0.0;
        // lr_schedule(0, 1, 0, base) = base, so train with a vanishing rate
        cfg.base_lr = f64::MIN_POSITIVE;
        let out = pretrain_from(init.clone(), &vols, &cfg, None).unwrap();
        assert_eq!(out.state.params(), init.params());
    }

    #[test]
    fn pretrain_is_reproducible_and_writes_artifacts() {
        let vols: Vec<Volume> = tiny_corpus(3).into_iter().map(|lv| lv.volume).collect();
        let dir = tempfile::tempdir().unwrap();
        let a = pretrain(&vols, &tiny_encoder(), &tiny_train(4), Some(dir.path())).unwrap();
        let b = pretrain(&vols, &tiny_encoder(), &tiny_train(4), None).unwrap();
        assert_eq!(a.curve.len(), 4);
        let bits = |c: &[LossPoint]| c.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.curve), bits(&b.curve));
        assert_eq!(a.state.params(), b.state.params());
        assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 2]);
        let csv = fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
        assert!(csv.starts_with("step,epoch,lr,loss\n"));
        assert_eq!(csv.lines().count(), 5);

        let mut threaded = tiny_train(4);
        threaded.workers = 3;
        let c = pretrain(&vols, &tiny_encoder(), &threaded, None).unwrap();
        assert_eq!(bits(&a.curve), bits(&c.curve));
    }

    #[test]
    fn every_objective_and_strategy_trains() {
        let vols: Vec<Volume> = tiny_corpus(3).into_iter().map(|lv| lv.volume).collect();
        for kind in [ObjectiveKind::Ntxent, ObjectiveKind::Simsiam, ObjectiveKind::Vicreg] {
            for strategy in [SamplingStrategy::Intra, SamplingStrategy::Inter] {
                let mut cfg = tiny_train(2);
                cfg.objective.kind = kind;
                cfg.strategy = strategy;
                let out = pretrain(&vols, &tiny_encoder(), &cfg, None).unwrap();
                assert!(out.curve.iter().all(|p| p.loss.is_finite()), "{kind:?} {strategy:?}");
            }
        }
    }

    #[test]
    fn pretrain_rejects_small_datasets_and_bad_configs() {
        let vols: Vec<Volume> = tiny_corpus(1).into_iter().map(|lv| lv.volume).collect();
        assert!(matches!(pretrain(&vols, &tiny_encoder(), &tiny_train(0), None), Err(Error::InsufficientData(_))));
        let mut cfg = tiny_train(0);
        cfg.warmup_epochs = cfg.epochs;
        assert!(pretrain(&vols, &tiny_encoder(), &cfg, None).is_err());
    }

    #[test]
    fn probe_separates_intensity_bands() {
        // labels are intensity bands, so even a random encoder's features
        // plus the probe should recover them almost perfectly
        let grid = Grid3::from_fn([16, 16, 16], |z, _, _| if z < 8 { -800.0 } else { 400.0 });
        let labels = Grid3::from_fn([16, 16, 16], |z, _, _| if z < 8 { 0 } else { 1 });
        let lv = LabeledVolume {
            volume: Volume::from_grid(grid).unwrap(),
            mask: SegmentationMask::new(labels).unwrap(),
        };
        let state = EncoderState::<f32>::init(&tiny_encoder(), 3).unwrap();
        let reports =
            probe_evaluate(&state, 0, std::slice::from_ref(&lv), std::slice::from_ref(&lv), &[1], &ProbeConfig::default())
                .unwrap();
        assert!(reports[0].micro_dice > 0.9, "{:?}", reports[0]);
        assert!(probe_evaluate(&state, 0, &[], std::slice::from_ref(&lv), &[1], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn ablation_table_has_one_row_per_cell() {
        let data = tiny_corpus(5);
        let mut base = tiny_train(0);
        base.epochs = 1;
        base.warmup_epochs = 0;
        base.steps_per_epoch = 1;
        let ab = AblationConfig {
            strategies: vec![SamplingStrategy::Intra, SamplingStrategy::Inter],
            variants: vec![ObjectiveKind::Ntxent],
            crop_counts: vec![2, 3],
            seeds: vec![0, 1],
            probe_shots: 1,
            probe_holdout: 1,
            probe: ProbeConfig { iterations: 5, ..ProbeConfig::default() },
        };
        let rows = ablate(&data, &tiny_encoder(), &base, &ab).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.micro_dice) && (0.0..=1.0).contains(&r.macro_dice)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_ablation_table(&rows, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("strategy,variant,crops,seed,micro_dice,macro_dice\n"));
    }
}

//! A small residual 3D convolutional encoder with global pooling and a
//! two-layer projection head.
//!
//! ```text
//! stem 3³ conv (1 → c₀)
//! per stage s:  h + relu(conv₃(relu(conv₃(h))))  then 2³/stride-2 conv (c_s → c_{s+1})
//! global average pool → linear (C → D)             backbone embedding
//! linear (D → D) → relu → linear (D → P)           projected embedding
//! ```
//!
//! Channels double per stage; the last downsample keeps its width, so the
//! feature map has `base · 2^(stages-1)` channels at `1/2^stages` resolution.
//! The network is generic over [`Scalar`] so the same code runs in `f32` for
//! training and `f64` for gradient checks.

mod checkpoint;
pub mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use ops::ConvGeom;

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::rng::{derive_seed, rng_from_seed};
use crate::volume::normalize_hu_value;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    /// `C += A·B` for an `m×k` A and `k×n` B given by row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]);
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
                let extent = |rows: usize, cols: usize, s: [isize; 2]| {
                    if rows == 0 || cols == 0 { 0 } else { (rows - 1) * s[0] as usize + (cols - 1) * s[1] as usize + 1 }
                };
                assert!(a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb) && c.len() >= extent(m, n, sc));
                // SAFETY: the assertion above keeps every strided access in bounds.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1]);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Training patch shape (z, y, x).
    pub patch_shape: [usize; 3],
    pub stages: usize,
    pub base_channels: usize,
    /// Backbone embedding dimension `D`.
    pub embed_dim: usize,
    /// Projection dimension `P`.
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_shape: [16, 16, 16], stages: 3, base_channels: 16, embed_dim: 64, proj_dim: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("encoder needs stages >= 1 and base_channels >= 1".into()));
        }
        if self.embed_dim < 2 || self.proj_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim and proj_dim must be >= 2".into()));
        }
        let f = self.reduction();
        if self.patch_shape.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::InvalidConfig(format!(
                "patch shape {:?} must be divisible by 2^stages = {f}",
                self.patch_shape
            )));
        }
        Ok(())
    }

    /// Spatial reduction factor `2^stages`.
    pub fn reduction(&self) -> usize {
        1 << self.stages
    }

    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.stages - 1)
    }

    fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    geom: ConvGeom,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct LinearLayer {
    din: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    down: ConvLayer,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvLayer,
    stages: Vec<Stage>,
    embed: LinearLayer,
    head1: LinearLayer,
    head2: LinearLayer,
}

/// Builds the parameter list and the index layout in one pass.
struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, usize)>, // name, shape, fan_in (0 = bias)
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, geom: ConvGeom) -> ConvLayer {
        let k = geom.kernel;
        let weight = self.specs.len();
        self.specs.push((format!("{name}.weight"), vec![geom.cout, geom.cin, k, k, k], geom.fan_in()));
        self.specs.push((format!("{name}.bias"), vec![geom.cout], 0));
        ConvLayer { geom, weight, bias: weight + 1 }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearLayer {
        let weight = self.specs.len();
        self.specs.push((format!("{name}.weight"), vec![dout, din], din));
        self.specs.push((format!("{name}.bias"), vec![dout], 0));
        LinearLayer { din, weight, bias: weight + 1 }
    }
}

fn build_layout(config: &EncoderConfig) -> (Layout, Vec<(String, Vec<usize>, usize)>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let same = |cin, cout| ConvGeom { cin, cout, kernel: 3, stride: 1, pad: 1 };
    let stem = b.conv("stem", same(1, config.base_channels));
    let mut stages = Vec::with_capacity(config.stages);
    for s in 0..config.stages {
        let c = config.stage_channels(s);
        let c_next = if s + 1 < config.stages { config.stage_channels(s + 1) } else { c };
        stages.push(Stage {
            conv_a: b.conv(&format!("stage{s}.conv_a"), same(c, c)),
            conv_b: b.conv(&format!("stage{s}.conv_b"), same(c, c)),
            down: b.conv(&format!("stage{s}.down"), ConvGeom { cin: c, cout: c_next, kernel: 2, stride: 2, pad: 0 }),
        });
    }
    let c = config.feature_channels();
    let embed = b.linear("embed", c, config.embed_dim);
    let head1 = b.linear("head.fc1", config.embed_dim, config.embed_dim);
    let head2 = b.linear("head.fc2", config.embed_dim, config.proj_dim);
    (Layout { stem, stages, embed, head1, head2 }, b.specs)
}

/// Encoder parameters plus the configuration and seed that produced them.
#[derive(Clone, Debug)]
pub struct EncoderState<T = f32> {
    config: EncoderConfig,
    seed: u64,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Spatial feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

/// Activations kept from a forward pass for backpropagation.
pub struct Trace<T> {
    input: Vec<T>,
    input_shape: [usize; 3],
    stages: Vec<StageTrace<T>>,
    features: FeatureMap<T>,
    pooled: Vec<T>,
    embedding: Vec<T>,
    hidden_pre: Vec<T>,
    projected: Vec<T>,
}

struct StageTrace<T> {
    shape: [usize; 3],
    h_in: Vec<T>,
    a_pre: Vec<T>,
    a_act: Vec<T>,
    b_pre: Vec<T>,
    residual: Vec<T>,
}

impl<T> Trace<T> {
    pub fn embedding(&self) -> &[T] {
        &self.embedding
    }

    pub fn projected(&self) -> &[T] {
        &self.projected
    }

    pub fn features(&self) -> &FeatureMap<T> {
        &self.features
    }
}

impl<T: Scalar> Trace<T> {
    /// Smallest `|pre-activation|` over every rectifier: how far this input
    /// sits from a point where the network is not differentiable.
    pub fn kink_margin(&self) -> T {
        self.stages
            .iter()
            .flat_map(|s| s.a_pre.iter().chain(&s.b_pre))
            .chain(&self.hidden_pre)
            .map(|v| v.abs())
            .fold(T::infinity(), |a, b| a.min(b))
    }
}

/// Per-parameter gradients, aligned with [`EncoderState::params`].
pub type Gradients<T> = Vec<Vec<T>>;

impl<T: Scalar> EncoderState<T> {
    /// He-normal kernels (variance `2 / fan_in`), zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let params = specs
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, fan_in))| {
                let len = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![T::zero(); len]
                } else {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                    (0..len).map(|_| T::from_f64(normal.sample(&mut rng)).unwrap()).collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { config: config.clone(), seed, params, layout })
    }

    pub(crate) fn from_tensors(config: &EncoderConfig, seed: u64, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut state = Self::init(config, seed)?;
        if tensors.len() != state.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, config needs {}",
                tensors.len(),
                state.params.len()
            )));
        }
        for p in &mut state.params {
            let t = tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape != p.shape {
                return Err(Error::Corrupt(format!("tensor {} shape {:?} != {:?}", p.name, t.shape, p.shape)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corrupt(format!("tensor {} holds non-finite values", p.name)));
            }
            p.data.clone_from(&t.data);
        }
        Ok(state)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zeroed gradient buffers matching the parameters.
    pub fn zero_gradients(&self) -> Gradients<T> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Tensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let f = self.config.reduction();
        if shape.iter().any(|&d| d < f) {
            return Err(Error::ShapeMismatch(format!(
                "input {shape:?} is smaller than the encoder's reduction factor {f} on some axis"
            )));
        }
        Ok(())
    }

    fn w(&self, idx: usize) -> &[T] {
        &self.params[idx].data
    }

    /// Full forward pass keeping activations.
    pub fn trace(&self, view: &Grid3<f32>) -> Result<Trace<T>> {
        self.check_input(view.shape())?;
        let input: Vec<T> = view.data().iter().map(|&v| T::from_f32(v).unwrap()).collect();
        let mut col = Vec::new();
        let stem = self.layout.stem;
        let (mut h, mut shape) =
            ops::conv_forward(&stem.geom, self.w(stem.weight), self.w(stem.bias), &input, view.shape(), &mut col);
        let mut stages = Vec::with_capacity(self.layout.stages.len());
        for st in &self.layout.stages {
            let (a_pre, _) =
                ops::conv_forward(&st.conv_a.geom, self.w(st.conv_a.weight), self.w(st.conv_a.bias), &h, shape, &mut col);
            let a_act: Vec<T> = a_pre.iter().map(|&v| v.max(T::zero())).collect();
            let (b_pre, _) =
                ops::conv_forward(&st.conv_b.geom, self.w(st.conv_b.weight), self.w(st.conv_b.bias), &a_act, shape, &mut col);
            let residual: Vec<T> = h.iter().zip(&b_pre).map(|(&x, &b)| x + b.max(T::zero())).collect();
            let (next, next_shape) =
                ops::conv_forward(&st.down.geom, self.w(st.down.weight), self.w(st.down.bias), &residual, shape, &mut col);
            stages.push(StageTrace { shape, h_in: h, a_pre, a_act, b_pre, residual });
            h = next;
            shape = next_shape;
        }
        let channels = self.config.feature_channels();
        let n = shape[0] * shape[1] * shape[2];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let pooled: Vec<T> =
            (0..channels).map(|c| h[c * n..(c + 1) * n].iter().copied().sum::<T>() * inv_n).collect();
        let l = &self.layout;
        let embedding = ops::linear_forward(self.w(l.embed.weight), self.w(l.embed.bias), &pooled);
        let hidden_pre = ops::linear_forward(self.w(l.head1.weight), self.w(l.head1.bias), &embedding);
        let hidden: Vec<T> = hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
        let projected = ops::linear_forward(self.w(l.head2.weight), self.w(l.head2.bias), &hidden);
        Ok(Trace {
            input,
            input_shape: view.shape(),
            stages,
            features: FeatureMap { channels, shape, data: h },
            pooled,
            embedding,
            hidden_pre,
            projected,
        })
    }

    /// Spatial features at `1/2^stages` resolution.
    pub fn forward_features(&self, view: &Grid3<f32>) -> Result<FeatureMap<T>> {
        Ok(self.trace(view)?.features)
    }

    /// Backbone (`D`) or projected (`P`) embedding.
    pub fn embed(&self, view: &Grid3<f32>, projected: bool) -> Result<Vec<T>> {
        let t = self.trace(view)?;
        Ok(if projected { t.projected } else { t.embedding })
    }

    /// Accumulate `∂L/∂θ` into `grads` given `∂L/∂(projected)` for one traced view.
    pub fn backward(&self, trace: &Trace<T>, grad_projected: &[T], grads: &mut Gradients<T>) -> Result<()> {
        if grad_projected.len() != self.config.proj_dim {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, projection dim is {}",
                grad_projected.len(),
                self.config.proj_dim
            )));
        }
        let l = &self.layout;
        let hidden: Vec<T> = trace.hidden_pre.iter().map(|&v| v.max(T::zero())).collect();
        let (gw, gb) = pair_mut(grads, l.head2.weight, l.head2.bias);
        let mut g_hidden = ops::linear_backward(self.w(l.head2.weight), &hidden, grad_projected, gw, gb);
        for (g, &pre) in g_hidden.iter_mut().zip(&trace.hidden_pre) {
            if pre <= T::zero() {
                *g = T::zero();
            }
        }
        let (gw, gb) = pair_mut(grads, l.head1.weight, l.head1.bias);
        let g_emb = ops::linear_backward(self.w(l.head1.weight), &trace.embedding, &g_hidden, gw, gb);
        let (gw, gb) = pair_mut(grads, l.embed.weight, l.embed.bias);
        let g_pooled = ops::linear_backward(self.w(l.embed.weight), &trace.pooled, &g_emb, gw, gb);
        debug_assert_eq!(g_pooled.len(), l.embed.din);

        let fm = &trace.features;
        let n = fm.shape[0] * fm.shape[1] * fm.shape[2];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut g_h: Vec<T> = g_pooled.iter().flat_map(|&g| std::iter::repeat_n(g * inv_n, n)).collect();

        let mut col = Vec::new();
        for (st, tr) in l.stages.iter().zip(&trace.stages).rev() {
            let (gw, gb) = pair_mut(grads, st.down.weight, st.down.bias);
            let g_res = ops::conv_backward(&st.down.geom, self.w(st.down.weight), &tr.residual, tr.shape, &g_h, gw, gb, &mut col, true);
            // residual = h_in + relu(b_pre)
            let mut g_b: Vec<T> = g_res.iter().zip(&tr.b_pre).map(|(&g, &b)| if b > T::zero() { g } else { T::zero() }).collect();
            let (gw, gb) = pair_mut(grads, st.conv_b.weight, st.conv_b.bias);
            let g_a_act = ops::conv_backward(&st.conv_b.geom, self.w(st.conv_b.weight), &tr.a_act, tr.shape, &g_b, gw, gb, &mut col, true);
            g_b.clear();
            let g_a: Vec<T> = g_a_act.iter().zip(&tr.a_pre).map(|(&g, &a)| if a > T::zero() { g } else { T::zero() }).collect();
            let (gw, gb) = pair_mut(grads, st.conv_a.weight, st.conv_a.bias);
            let g_in = ops::conv_backward(&st.conv_a.geom, self.w(st.conv_a.weight), &tr.h_in, tr.shape, &g_a, gw, gb, &mut col, true);
            g_h = g_res.iter().zip(&g_in).map(|(&a, &b)| a + b).collect();
        }
        let stem = l.stem;
        let (gw, gb) = pair_mut(grads, stem.weight, stem.bias);
        ops::conv_backward(&stem.geom, self.w(stem.weight), &trace.input, trace.input_shape, &g_h, gw, gb, &mut col, false);
        Ok(())
    }

    /// Sum of parameter gradients over `views`, given one upstream gradient
    /// per projected embedding.
    pub fn gradients(&self, views: &[Grid3<f32>], upstream: &[Vec<T>]) -> Result<Gradients<T>> {
        if views.len() != upstream.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} views but {} upstream gradients",
                views.len(),
                upstream.len()
            )));
        }
        let mut grads = self.zero_gradients();
        for (view, g) in views.iter().zip(upstream) {
            if g.iter().all(|v| *v == T::zero()) {
                if g.len() != self.config.proj_dim {
                    return Err(Error::ShapeMismatch("upstream gradient length".into()));
                }
                continue;
            }
            let trace = self.trace(view)?;
            self.backward(&trace, g, &mut grads)?;
        }
        Ok(grads)
    }
}

fn pair_mut<T>(grads: &mut [Vec<T>], weight: usize, bias: usize) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(bias, weight + 1);
    let (head, tail) = grads.split_at_mut(bias);
    (&mut head[weight], &mut tail[0])
}

/// Anything that maps an HU patch to a fixed-length embedding.
pub trait PatchEmbedder: Sync {
    fn dim(&self) -> usize;

    /// Embed a patch given in Hounsfield units.
    fn embed_patch(&self, hu: &Grid3<f32>) -> Result<Vec<f32>>;

    /// Smallest accepted extent per axis.
    fn min_extent(&self) -> usize {
        1
    }
}

impl PatchEmbedder for EncoderState<f32> {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed_patch(&self, hu: &Grid3<f32>) -> Result<Vec<f32>> {
        self.embed(&hu.map(normalize_hu_value), false)
    }

    fn min_extent(&self) -> usize {
        self.config.reduction()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig { patch_shape: [8, 8, 8], stages: 2, base_channels: 2, embed_dim: 4, proj_dim: 3 }
    }

    fn textured(shape: [usize; 3], phase: usize) -> Grid3<f32> {
        Grid3::from_fn(shape, |z, y, x| (((z * 5 + y * 3 + x * 7 + phase) % 13) as f32) / 12.0)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = EncoderConfig::default();
        let a = EncoderState::<f32>::init(&c, 9).unwrap();
        let b = EncoderState::<f32>::init(&c, 9).unwrap();
        assert_eq!(a.params, b.params);
        for p in a.params() {
            if p.name.ends_with(".bias") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        let other = EncoderState::<f32>::init(&c, 10).unwrap();
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn kernel_variance_follows_fan_in() {
        let c = EncoderConfig::default();
        let s = EncoderState::<f64>::init(&c, 1).unwrap();
        let p = s.params().iter().find(|p| p.name == "stage1.conv_a.weight").unwrap();
        assert!(p.data.len() >= 10_000);
        let fan_in = (p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4]) as f64;
        let n = p.data.len() as f64;
        let mean = p.data.iter().sum::<f64>() / n;
        let var = p.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / fan_in;
        assert!((var - expected).abs() / expected < 0.2, "var {var} vs {expected}");
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.patch_shape = [8, 6, 8];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.stages = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.proj_dim = 1;
        assert!(EncoderState::<f32>::init(&c, 0).is_err());
    }

    #[test]
    fn feature_map_shape() {
        let c = EncoderConfig { patch_shape: [16, 16, 16], stages: 3, base_channels: 2, embed_dim: 8, proj_dim: 4 };
        let s = EncoderState::<f32>::init(&c, 0).unwrap();
        let fm = s.forward_features(&textured([16, 16, 16], 0)).unwrap();
        assert_eq!(fm.shape, [2, 2, 2]);
        assert_eq!(fm.channels, 8);
        assert!(s.forward_features(&textured([4, 16, 16], 0)).is_err());
    }

    #[test]
    fn outputs_are_finite_deterministic_and_input_sensitive() {
        let s = EncoderState::<f32>::init(&small_config(), 3).unwrap();
        let zero = Grid3::filled([8, 8, 8], 0.0f32);
        let a = s.forward_features(&zero).unwrap();
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert_eq!(a, s.forward_features(&zero).unwrap());

        let v = textured([8, 8, 8], 1);
        let doubled = v.map(|x| x * 2.0);
        assert_ne!(s.forward_features(&v).unwrap().data, s.forward_features(&doubled).unwrap().data);
    }

    #[test]
    fn embedding_lengths() {
        let s = EncoderState::<f32>::init(&small_config(), 3).unwrap();
        let v = textured([8, 8, 8], 2);
        assert_eq!(s.embed(&v, false).unwrap().len(), 4);
        assert_eq!(s.embed(&v, true).unwrap().len(), 3);
        assert_eq!(s.embed(&v, true).unwrap(), s.embed(&v.clone(), true).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = EncoderState::<f64>::init(&small_config(), 3).unwrap();
        let views = vec![textured([8, 8, 8], 0), textured([8, 8, 8], 4)];
        let g = s.gradients(&views, &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        assert!(s.gradients(&views, &[vec![0.0; 3]]).is_err());
        assert!(s.gradients(&views[..1], &[vec![1.0; 2]]).is_err());
    }

    /// Directional central differences on every parameter group, loss =
    /// sum of the projected embedding.
    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..4 {
            check_gradients(seed);
        }
    }

    fn check_gradients(seed: u64) {
        let cfg = EncoderConfig { patch_shape: [4, 4, 4], ..small_config() };
        let state = EncoderState::<f64>::init(&cfg, seed).unwrap();
        assert!(state.num_parameters() <= 5_000);
        let mut noise_rng = rng_from_seed(seed + 100);
        let unit = Normal::new(0.5, 0.3).unwrap();
        let mut noisy = || Grid3::from_fn([4, 4, 4], |_, _, _| unit.sample(&mut noise_rng) as f32);
        let views = vec![noisy(), noisy()];
        let loss = |s: &EncoderState<f64>| -> f64 {
            views.iter().map(|v| s.embed(v, true).unwrap().iter().sum::<f64>()).sum()
        };
        let grads = state.gradients(&views, &[vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(grads, state.gradients(&views, &[vec![1.0; 3], vec![1.0; 3]]).unwrap());
        let h = 1e-4;
        for (gi, g) in grads.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(seed, gi as u64));
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut dir: Vec<f64> = (0..g.len()).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let mut plus = state.clone();
            let mut minus = state.clone();
            for (i, d) in dir.iter().enumerate() {
                plus.params[gi].data[i] += h * d;
                minus.params[gi].data[i] -= h * d;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "seed {seed} {}: numeric {numeric} analytic {analytic}", state.params[gi].name);
        }
    }

    #[test]
    fn hu_embedder_normalises() {
        let s = EncoderState::<f32>::init(&small_config(), 0).unwrap();
        let hu = Grid3::from_fn([8, 8, 8], |z, _, _| z as f32 * 100.0 - 400.0);
        let direct = s.embed(&hu.map(normalize_hu_value), false).unwrap();
        assert_eq!(s.embed_patch(&hu).unwrap(), direct);
        assert_eq!(PatchEmbedder::dim(&s), 4);
    }
}

//! Intra-scan self-supervised objectives.
//!
//! Every objective is evaluated per scan group: the two views' embeddings
//! `Z1`, `Z2` of the `M` patches drawn from one scan. Negatives (NT-Xent) and
//! batch statistics (VICReg) never cross group boundaries. The batch loss is
//! the unweighted mean over groups. All arithmetic is `f64`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sampler::ScanId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Ntxent,
    Simsiam,
    Vicreg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    /// Target per-dimension standard deviation.
    pub gamma: f64,
    /// Added to the variance before the square root.
    pub variance_epsilon: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self { invariance: 25.0, variance: 25.0, covariance: 1.0, gamma: 1.0, variance_epsilon: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub temperature: f64,
    #[serde(default)]
    pub vicreg: VicregWeights,
    /// Floor on cosine denominators.
    pub epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { kind: ObjectiveKind::Ntxent, temperature: 0.1, vicreg: VicregWeights::default(), epsilon: 1e-8 }
    }
}

impl ObjectiveConfig {
    pub fn ntxent(temperature: f64) -> Self {
        Self { kind: ObjectiveKind::Ntxent, temperature, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vicreg;
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.epsilon > 0.0) || !(v.variance_epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(v.invariance >= 0.0 && v.variance >= 0.0 && v.covariance >= 0.0) || !(v.gamma > 0.0) {
            return Err(Error::InvalidConfig("vicreg coefficients must be >= 0 and gamma > 0".into()));
        }
        Ok(())
    }
}

/// Both views' embeddings for one scan group; row `m` of each is patch `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPairs {
    pub scan_id: ScanId,
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VicregTerms {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_scan: Vec<(ScanId, f64)>,
    /// Unweighted per-term means across groups (VICReg only).
    pub per_term: Option<VicregTerms>,
}

/// Gradients of the batch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradients {
    pub report: LossReport,
    /// `(∂L/∂Z1, ∂L/∂Z2)` per group, same order as the input.
    pub embeddings: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    /// Predictor parameter gradients (SimSiam with a learned predictor).
    pub predictor: Option<Vec<Vec<f64>>>,
}

/// `u·v / max(‖u‖‖v‖, ε)`, in `[-1, 1]`. Bit-identical non-zero inputs give
/// exactly 1.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    Ok(cosine_with_eps(u, v, 1e-8))
}

/// `f32` inputs, `f64` accumulation.
pub fn cosine_sim_f32(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    Ok((dot / (nu * nv).sqrt().max(1e-8)).clamp(-1.0, 1.0))
}

fn cosine_with_eps(u: &[f64], v: &[f64], eps: f64) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    // sqrt(nu*nu) == nu exactly, so identical vectors give exactly 1.
    (dot / (nu * nv).sqrt().max(eps)).clamp(-1.0, 1.0)
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_grad(u: &[f64], v: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let q = (nu * nv).sqrt();
    if q > eps {
        let s = dot / q;
        let gu = u.iter().zip(v).map(|(&a, &b)| b / q - s * a / nu).collect();
        let gv = u.iter().zip(v).map(|(&a, &b)| a / q - s * b / nv).collect();
        (s, gu, gv)
    } else {
        let s = dot / eps;
        (s, v.iter().map(|&b| b / eps).collect(), u.iter().map(|&a| a / eps).collect())
    }
}

fn check_views(z1: &[Vec<f64>], z2: &[Vec<f64>], min_m: usize) -> Result<usize> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} view embeddings", z1.len(), z2.len())));
    }
    if z1.len() < min_m {
        return Err(Error::InsufficientData(format!("objective needs M >= {min_m}, got {}", z1.len())));
    }
    let d = z1[0].len();
    if d == 0 || z1.iter().chain(z2).any(|z| z.len() != d) {
        return Err(Error::ShapeMismatch("embedding dimensions differ within a group".into()));
    }
    Ok(d)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// NT-Xent over one scan's `2M` view embeddings. Each anchor's denominator
/// runs over every other entry (its positive included); the group loss is
/// the mean over all `2M` anchors.
pub fn ntxent_intra(z1: &[Vec<f64>], z2: &[Vec<f64>], temperature: f64) -> Result<f64> {
    Ok(ntxent_with_grad(z1, z2, temperature, 1e-8, false)?.0)
}

type GroupGrad = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn ntxent_with_grad(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    temperature: f64,
    eps: f64,
    want_grad: bool,
) -> Result<(f64, Option<GroupGrad>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let d = check_views(z1, z2, 1)?;
    let m = z1.len();
    let n = 2 * m;
    let entry = |i: usize| if i < m { &z1[i] } else { &z2[i - m] };
    let positive = |i: usize| if i < m { i + m } else { i - m };

    let mut logits = vec![0.0; n * n];
    let mut grads_cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();
    if want_grad {
        grads_cache.resize(n * n, None);
    }
    for i in 0..n {
        for k in (i + 1)..n {
            let (s, gu, gv) = if want_grad {
                let (s, gu, gv) = cosine_grad(entry(i), entry(k), eps);
                (s, Some(gu), Some(gv))
            } else {
                (cosine_with_eps(entry(i), entry(k), eps), None, None)
            };
            logits[i * n + k] = s / temperature;
            logits[k * n + i] = s / temperature;
            if let (Some(gu), Some(gv)) = (gu, gv) {
                grads_cache[i * n + k] = Some((gu, gv));
            }
        }
    }

    let mut loss = 0.0;
    // dL/dlogit[i][k], accumulated over anchors
    let mut g_logit = vec![0.0; n * n];
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let others = (0..n).filter(move |&k| k != i).map(move |k| row[k]);
        let lse = log_sum_exp(others);
        loss += lse - row[positive(i)];
        if want_grad {
            for k in (0..n).filter(|&k| k != i) {
                g_logit[i * n + k] += (row[k] - lse).exp();
            }
            g_logit[i * n + positive(i)] -= 1.0;
        }
    }
    let scale = 1.0 / n as f64;
    loss *= scale;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut g = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in (i + 1)..n {
            let coeff = (g_logit[i * n + k] + g_logit[k * n + i]) * scale / temperature;
            if coeff == 0.0 {
                continue;
            }
            let (gu, gv) = grads_cache[i * n + k].as_ref().expect("computed above");
            for j in 0..d {
                g[i][j] += coeff * gu[j];
                g[k][j] += coeff * gv[j];
            }
        }
    }
    let g2 = g.split_off(m);
    Ok((loss, Some((g, g2))))
}

/// SimSiam predictor: `P → P/2 → P` with a rectifier in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub dim: usize,
    pub hidden: usize,
    /// `[w1 (hidden×dim), b1, w2 (dim×hidden), b2]`
    pub params: Vec<Vec<f64>>,
}

impl Predictor {
    pub fn init(dim: usize, seed: u64) -> Self {
        let hidden = (dim / 2).max(1);
        let mut rng = rng_from_seed(derive_seed(seed, 0x5052_4544));
        let mut he = |fan_in: usize, len: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        };
        let w1 = he(dim, hidden * dim);
        let w2 = he(hidden, dim * hidden);
        Self { dim, hidden, params: vec![w1, vec![0.0; hidden], w2, vec![0.0; dim]] }
    }

    fn forward(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = (&self.params[0], &self.params[1], &self.params[2], &self.params[3]);
        let pre: Vec<f64> = (0..self.hidden)
            .map(|h| b1[h] + (0..self.dim).map(|j| w1[h * self.dim + j] * z[j]).sum::<f64>())
            .collect();
        let out = (0..self.dim)
            .map(|o| b2[o] + (0..self.hidden).map(|h| w2[o * self.hidden + h] * pre[h].max(0.0)).sum::<f64>())
            .collect();
        (pre, out)
    }

    /// Accumulates parameter grads; returns `∂/∂z`.
    fn backward(&self, z: &[f64], pre: &[f64], g_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let (w1, w2) = (&self.params[0], &self.params[2]);
        let mut g_hidden = vec![0.0; self.hidden];
        for o in 0..self.dim {
            grads[3][o] += g_out[o];
            for h in 0..self.hidden {
                grads[2][o * self.hidden + h] += g_out[o] * pre[h].max(0.0);
                g_hidden[h] += g_out[o] * w2[o * self.hidden + h];
            }
        }
        let mut g_z = vec![0.0; self.dim];
        for h in 0..self.hidden {
            if pre[h] <= 0.0 {
                continue;
            }
            grads[1][h] += g_hidden[h];
            for j in 0..self.dim {
                grads[0][h * self.dim + j] += g_hidden[h] * z[j];
                g_z[j] += g_hidden[h] * w1[h * self.dim + j];
            }
        }
        g_z
    }

    pub fn zero_gradients(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

/// Symmetric negative cosine between `predictor(z_a)` and the detached
/// `z_b`, averaged over patches and both directions. `None` is the identity
/// predictor.
pub fn simsiam_intra(z1: &[Vec<f64>], z2: &[Vec<f64>], predictor: Option<&Predictor>) -> Result<f64> {
    Ok(simsiam_with_grad(z1, z2, predictor, 1e-8, false)?.0)
}

fn simsiam_with_grad(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    predictor: Option<&Predictor>,
    eps: f64,
    want_grad: bool,
) -> Result<(f64, Option<GroupGrad>, Option<Vec<Vec<f64>>>)> {
    let d = check_views(z1, z2, 1)?;
    if let Some(p) = predictor {
        if p.dim != d {
            return Err(Error::ShapeMismatch(format!("predictor dim {} vs embedding dim {d}", p.dim)));
        }
    }
    let m = z1.len();
    let weight = 0.5 / m as f64;
    let mut loss = 0.0;
    let mut g1 = vec![vec![0.0; d]; m];
    let mut g2 = vec![vec![0.0; d]; m];
    let mut gp = predictor.map(Predictor::zero_gradients);
    for i in 0..m {
        for (online, target, g_online) in [(&z1[i], &z2[i], &mut g1[i]), (&z2[i], &z1[i], &mut g2[i])] {
            let (pre, p) = match predictor {
                Some(pred) => {
                    let (pre, out) = pred.forward(online);
                    (Some(pre), out)
                }
                None => (None, online.clone()),
            };
            // the target branch is detached: only p receives gradient
            let (s, g_p, _) = cosine_grad(&p, target, eps);
            loss -= weight * s;
            if want_grad {
                let g_p: Vec<f64> = g_p.iter().map(|v| -weight * v).collect();
                let g_z = match (predictor, pre.as_ref(), gp.as_mut()) {
                    (Some(pred), Some(pre), Some(gp)) => pred.backward(online, pre, &g_p, gp),
                    _ => g_p,
                };
                for (a, b) in g_online.iter_mut().zip(&g_z) {
                    *a += b;
                }
            }
        }
    }
    if !want_grad {
        return Ok((loss, None, None));
    }
    Ok((loss, Some((g1, g2)), gp))
}

/// VICReg on one group (`M >= 2`):
/// `λ_inv · MSE(Z1, Z2)`
/// `+ λ_var · ½ Σ_views mean_d max(0, γ − sqrt(var_d + ε_var))`
/// `+ λ_cov · Σ_views (Σ_{i≠j} C_ij²) / D`, with unbiased (M−1) statistics.
pub fn vicreg_intra(z1: &[Vec<f64>], z2: &[Vec<f64>], config: &ObjectiveConfig) -> Result<(f64, VicregTerms)> {
    let (loss, terms, _) = vicreg_with_grad(z1, z2, &config.vicreg, false)?;
    Ok((loss, terms))
}

fn vicreg_with_grad(
    z1: &[Vec<f64>],
    z2: &[Vec<f64>],
    w: &VicregWeights,
    want_grad: bool,
) -> Result<(f64, VicregTerms, Option<GroupGrad>)> {
    let d = check_views(z1, z2, 2)?;
    let m = z1.len();
    let md = (m * d) as f64;
    let mut g1 = vec![vec![0.0; d]; m];
    let mut g2 = vec![vec![0.0; d]; m];

    let mut inv = 0.0;
    for i in 0..m {
        for j in 0..d {
            let diff = z1[i][j] - z2[i][j];
            inv += diff * diff;
            if want_grad {
                g1[i][j] += w.invariance * 2.0 * diff / md;
                g2[i][j] -= w.invariance * 2.0 * diff / md;
            }
        }
    }
    inv /= md;

    let mut var_term = 0.0;
    let mut cov_term = 0.0;
    for (z, g) in [(z1, &mut g1), (z2, &mut g2)] {
        let mean: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        let centered: Vec<Vec<f64>> = z.iter().map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
        let denom = (m - 1) as f64;
        let mut cov = vec![0.0; d * d];
        for r in &centered {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += r[a] * r[b];
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= denom);

        for j in 0..d {
            let std = (cov[j * d + j] + w.variance_epsilon).sqrt();
            let hinge = w.gamma - std;
            if hinge > 0.0 {
                var_term += 0.5 * hinge / d as f64;
                if want_grad {
                    // d(hinge)/d(var) = -1/(2 std); d(var)/dz = 2 c / (M-1)
                    let coeff = w.variance * 0.5 / d as f64 * (-0.5 / std) * 2.0 / denom;
                    for (gi, r) in g.iter_mut().zip(&centered) {
                        gi[j] += coeff * r[j];
                    }
                }
            }
        }
        let mut off = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    off += cov[a * d + b] * cov[a * d + b];
                }
            }
        }
        cov_term += off / d as f64;
        if want_grad {
            // dF/dZc = 2 Zc G / (M-1) with G_ab = 2 C_ab / D off-diagonal
            for (gi, r) in g.iter_mut().zip(&centered) {
                for a in 0..d {
                    let mut acc = 0.0;
                    for b in 0..d {
                        if a != b {
                            acc += r[b] * 2.0 * cov[b * d + a] / d as f64;
                        }
                    }
                    gi[a] += w.covariance * 2.0 * acc / denom;
                }
            }
        }
    }
    let terms = VicregTerms { invariance: inv, variance: var_term, covariance: cov_term };
    let loss = w.invariance * inv + w.variance * var_term + w.covariance * cov_term;
    Ok((loss, terms, want_grad.then_some((g1, g2))))
}

/// Per-group losses and their unweighted mean.
pub fn batch_loss(groups: &[ScanPairs], config: &ObjectiveConfig, predictor: Option<&Predictor>) -> Result<LossReport> {
    Ok(evaluate(groups, config, predictor, false)?.report)
}

/// Batch loss plus `∂L/∂Z` for every embedding (and predictor gradients).
pub fn loss_gradients(
    config: &ObjectiveConfig,
    groups: &[ScanPairs],
    predictor: Option<&Predictor>,
) -> Result<LossGradients> {
    evaluate(groups, config, predictor, true)
}

fn evaluate(
    groups: &[ScanPairs],
    config: &ObjectiveConfig,
    predictor: Option<&Predictor>,
    want_grad: bool,
) -> Result<LossGradients> {
    config.validate()?;
    if groups.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let scale = 1.0 / groups.len() as f64;
    let mut per_scan = Vec::with_capacity(groups.len());
    let mut embeddings = Vec::with_capacity(groups.len());
    let mut terms = Vec::new();
    let mut pred_grads: Option<Vec<Vec<f64>>> = None;
    for g in groups {
        let (loss, grads) = match config.kind {
            ObjectiveKind::Ntxent => ntxent_with_grad(&g.z1, &g.z2, config.temperature, config.epsilon, want_grad)?,
            ObjectiveKind::Simsiam => {
                let (loss, grads, gp) = simsiam_with_grad(&g.z1, &g.z2, predictor, config.epsilon, want_grad)?;
                if let Some(gp) = gp {
                    let acc = pred_grads.get_or_insert_with(|| gp.iter().map(|p| vec![0.0; p.len()]).collect());
                    for (a, b) in acc.iter_mut().zip(&gp) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += scale * y;
                        }
                    }
                }
                (loss, grads)
            }
            ObjectiveKind::Vicreg => {
                let (loss, t, grads) = vicreg_with_grad(&g.z1, &g.z2, &config.vicreg, want_grad)?;
                terms.push((g.scan_id, t));
                (loss, grads)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Undefined(format!("non-finite loss for scan {}", g.scan_id)));
        }
        per_scan.push((g.scan_id, loss));
        if let Some((mut a, mut b)) = grads {
            a.iter_mut().chain(b.iter_mut()).flatten().for_each(|v| *v *= scale);
            embeddings.push((a, b));
        }
    }
    let total = ordered_mean(per_scan.iter().map(|&(id, v)| (id, v)).collect());
    let per_term = (!terms.is_empty()).then(|| VicregTerms {
        invariance: ordered_mean(terms.iter().map(|(id, t)| (*id, t.invariance)).collect()),
        variance: ordered_mean(terms.iter().map(|(id, t)| (*id, t.variance)).collect()),
        covariance: ordered_mean(terms.iter().map(|(id, t)| (*id, t.covariance)).collect()),
    });
    Ok(LossGradients { report: LossReport { total, per_scan, per_term }, embeddings, predictor: pred_grads })
}

/// Mean with a canonical summation order, so group order never changes a bit.
fn ordered_mean(mut values: Vec<(ScanId, f64)>) -> f64 {
    values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_views(m: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rng_from_seed(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut draw = || (0..m).map(|_| (0..d).map(|_| n.sample(&mut rng)).collect()).collect();
        (draw(), draw())
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_sim(&[1.0], &[1.0, 0.0]).is_err());
        let v = [0.3, -1.7, 2.9, 1e-3];
        assert_eq!(cosine_sim(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn single_patch_ntxent_is_exactly_zero() {
        let (z1, z2) = random_views(1, 5, 3);
        assert_eq!(ntxent_intra(&z1, &z2, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn two_patch_hand_case() {
        // anchors: positive at cos 1, two negatives at cos 0 -> -ln(e / (e + 2))
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let loss = ntxent_intra(&[e1.clone(), e2.clone()], &[e1, e2], 1.0).unwrap();
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.55144).abs() < 1e-4);
    }

    #[test]
    fn ntxent_rejects_bad_input() {
        assert!(ntxent_intra(&[], &[], 0.1).is_err());
        assert!(ntxent_intra(&[vec![1.0, 0.0]], &[vec![1.0]], 0.1).is_err());
        assert!(ntxent_intra(&[vec![1.0]], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn ntxent_is_stable_at_low_temperature() {
        let (z1, z2) = random_views(6, 4, 8);
        let loss = ntxent_intra(&z1, &z2, 0.01).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn batch_total_is_mean_and_order_free() {
        let groups: Vec<ScanPairs> = (0..5)
            .map(|s| {
                let (z1, z2) = random_views(4, 3, s);
                ScanPairs { scan_id: s, z1, z2 }
            })
            .collect();
        let cfg = ObjectiveConfig::ntxent(0.1);
        let r = batch_loss(&groups, &cfg, None).unwrap();
        let mean = r.per_scan.iter().map(|p| p.1).sum::<f64>() / 5.0;
        assert!((r.total - mean).abs() < 1e-12);
        let mut rev = groups.clone();
        rev.reverse();
        assert_eq!(batch_loss(&rev, &cfg, None).unwrap().total, r.total);
        let one = batch_loss(&groups[..1], &cfg, None).unwrap();
        assert_eq!(one.total, one.per_scan[0].1);
        assert!(batch_loss(&[], &cfg, None).is_err());
    }

    #[test]
    fn batch_mean_of_known_values() {
        assert!((ordered_mean(vec![(1, 0.4), (0, 0.6)]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simsiam_examples() {
        let (z, _) = random_views(3, 4, 1);
        assert!((simsiam_intra(&z, &z, None).unwrap() + 1.0).abs() < 1e-15);
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        assert_eq!(simsiam_intra(&a, &b, None).unwrap(), 0.0);
    }

    /// Loss with the targets frozen at `t1`, `t2`, which is what the
    /// stop-gradient differentiates.
    fn simsiam_frozen(z1: &[Vec<f64>], z2: &[Vec<f64>], t1: &[Vec<f64>], t2: &[Vec<f64>], pred: &Predictor) -> f64 {
        let m = z1.len() as f64;
        let mut loss = 0.0;
        for i in 0..z1.len() {
            loss -= 0.5 / m * cosine_with_eps(&pred.forward(&z1[i]).1, &t2[i], 1e-8);
            loss -= 0.5 / m * cosine_with_eps(&pred.forward(&z2[i]).1, &t1[i], 1e-8);
        }
        loss
    }

    #[test]
    fn simsiam_gradients_treat_targets_as_constants() {
        let pred = Predictor::init(8, 3);
        let (z1, z2) = random_views(3, 8, 5);
        for z in z1.iter().chain(&z2) {
            assert!(pred.forward(z).1.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        }
        let cfg = ObjectiveConfig { kind: ObjectiveKind::Simsiam, ..ObjectiveConfig::default() };
        let groups = [ScanPairs { scan_id: 0, z1: z1.clone(), z2: z2.clone() }];
        let g = loss_gradients(&cfg, &groups, Some(&pred)).unwrap();
        let (g1, g2) = &g.embeddings[0];
        let h = 1e-5;
        for view in 0..2 {
            for i in 0..3 {
                for j in 0..8 {
                    let bump = |delta: f64| {
                        let (mut a, mut b) = (z1.clone(), z2.clone());
                        if view == 0 { a[i][j] += delta } else { b[i][j] += delta }
                        simsiam_frozen(&a, &b, &z1, &z2, &pred)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let exact = if view == 0 { g1[i][j] } else { g2[i][j] };
                    assert!((numeric - exact).abs() < 1e-8, "view {view} [{i}][{j}]: {numeric} vs {exact}");
                }
            }
        }
        // moving only a target changes the loss but receives no gradient
        let mut moved = z2.clone();
        moved[0][1] += 0.5;
        let frozen = simsiam_frozen(&z1, &z2, &z1, &z2, &pred);
        assert!((simsiam_frozen(&z1, &z2, &z1, &moved, &pred) - frozen).abs() > 1e-6);
    }

    #[test]
    fn vicreg_examples() {
        let cfg = ObjectiveConfig { kind: ObjectiveKind::Vicreg, ..ObjectiveConfig::default() };
        let (z, _) = random_views(5, 3, 2);
        let (_, t) = vicreg_intra(&z, &z, &cfg).unwrap();
        assert_eq!(t.invariance, 0.0);

        let constant = vec![vec![0.7, -0.2, 1.5]; 4];
        let (loss, t) = vicreg_intra(&constant, &constant, &cfg).unwrap();
        let hinge = cfg.vicreg.gamma - cfg.vicreg.variance_epsilon.sqrt();
        assert!((t.variance - hinge).abs() < 1e-12);
        assert_eq!(t.covariance, 0.0);
        assert!((loss - cfg.vicreg.variance * hinge).abs() < 1e-9);

        // unit std, zero covariance: rows ±1 patterns (Hadamard-like)
        let rows = [
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ];
        // unbiased variance of {1,1,-1,-1} is 4/3; rescale to unit
        let s = (3.0f64 / 4.0).sqrt();
        let unit: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let (_, t) = vicreg_intra(&unit, &unit, &cfg).unwrap();
        assert_eq!(t.variance, 0.0);
        assert!(t.covariance.abs() < 1e-30);
        assert!(vicreg_intra(&unit[..1], &unit[..1], &cfg).is_err());
    }

    fn finite_difference_check(cfg: &ObjectiveConfig, predictor: Option<&Predictor>, m: usize, d: usize, seed: u64) {
        let groups: Vec<ScanPairs> = (0..2)
            .map(|s| {
                let (z1, z2) = random_views(m, d, seed * 10 + s);
                ScanPairs { scan_id: s, z1, z2 }
            })
            .collect();
        let analytic = loss_gradients(cfg, &groups, predictor).unwrap();
        let h = 1e-4;
        for gi in 0..groups.len() {
            for view in 0..2 {
                for i in 0..m {
                    for j in 0..d {
                        let bump = |delta: f64| {
                            let mut g = groups.clone();
                            let z = if view == 0 { &mut g[gi].z1 } else { &mut g[gi].z2 };
                            z[i][j] += delta;
                            batch_loss(&g, cfg, predictor).unwrap().total
                        };
                        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                        let (a, b) = &analytic.embeddings[gi];
                        let exact = if view == 0 { a[i][j] } else { b[i][j] };
                        let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-6);
                        assert!(rel < 1e-4 || (numeric - exact).abs() < 1e-9,
                            "{:?} group {gi} view {view} [{i}][{j}]: {numeric} vs {exact}", cfg.kind);
                    }
                }
            }
        }
    }

    #[test]
    fn ntxent_gradients_match_finite_differences() {
        finite_difference_check(&ObjectiveConfig::ntxent(0.1), None, 3, 5, 1);
        finite_difference_check(&ObjectiveConfig::ntxent(0.5), None, 4, 3, 2);
    }

    #[test]
    fn vicreg_gradients_match_finite_differences() {
        let mut cfg = ObjectiveConfig { kind: ObjectiveKind::Vicreg, ..ObjectiveConfig::default() };
        finite_difference_check(&cfg, None, 4, 3, 3);
        cfg.vicreg.gamma = 3.0; // keep every hinge active
        finite_difference_check(&cfg, None, 5, 4, 4);
    }

    #[test]
    fn single_patch_ntxent_gradients_vanish() {
        let (z1, z2) = random_views(1, 4, 9);
        let g = loss_gradients(&ObjectiveConfig::ntxent(0.1), &[ScanPairs { scan_id: 0, z1, z2 }], None).unwrap();
        assert!(g.embeddings[0].0.iter().chain(&g.embeddings[0].1).flatten().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn vicreg_identical_views_have_no_invariance_gradient() {
        let mut cfg = ObjectiveConfig { kind: ObjectiveKind::Vicreg, ..ObjectiveConfig::default() };
        let (z, _) = random_views(4, 3, 6);
        let with = loss_gradients(&cfg, &[ScanPairs { scan_id: 0, z1: z.clone(), z2: z.clone() }], None).unwrap();
        cfg.vicreg.invariance = 0.0;
        let without = loss_gradients(&cfg, &[ScanPairs { scan_id: 0, z1: z.clone(), z2: z }], None).unwrap();
        assert_eq!(with.embeddings, without.embeddings);
    }

    #[test]
    fn simsiam_predictor_gradients_match_finite_differences() {
        let cfg = ObjectiveConfig { kind: ObjectiveKind::Simsiam, ..ObjectiveConfig::default() };
        let pred = Predictor::init(8, 11);
        let groups = vec![{
            let (z1, z2) = random_views(3, 8, 77);
            ScanPairs { scan_id: 0, z1, z2 }
        }];
        for z in groups[0].z1.iter().chain(&groups[0].z2) {
            assert!(pred.forward(z).1.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        }
        let g = loss_gradients(&cfg, &groups, Some(&pred)).unwrap().predictor.unwrap();
        let h = 1e-5;
        for (pi, p) in pred.params.iter().enumerate() {
            for k in 0..p.len() {
                let bump = |delta: f64| {
                    let mut q = pred.clone();
                    q.params[pi][k] += delta;
                    batch_loss(&groups, &cfg, Some(&q)).unwrap().total
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((numeric - g[pi][k]).abs() < 1e-7, "param {pi}[{k}]: {numeric} vs {}", g[pi][k]);
            }
        }
    }

    proptest! {
        #[test]
        fn ntxent_nonnegative_and_scale_invariant(seed in any::<u64>(), m in 1usize..6, d in 2usize..6) {
            let (z1, z2) = random_views(m, d, seed);
            let a = ntxent_intra(&z1, &z2, 0.1).unwrap();
            prop_assert!(a >= 0.0);
            let scale = |z: &Vec<Vec<f64>>| z.iter().map(|r| r.iter().map(|v| v * 10.0).collect()).collect::<Vec<Vec<f64>>>();
            let b = ntxent_intra(&scale(&z1), &scale(&z2), 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

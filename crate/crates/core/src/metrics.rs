//! Segmentation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Shape3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions vs {} labels", pred.len(), truth.len())));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Overlap counts for one label: `|A∩B|`, `|A|`, `|B|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiceCounts {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl DiceCounts {
    /// Both empty scores 1.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            (2 * self.intersection) as f64 / denom as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceMode {
    Macro,
    Micro,
}

fn same_shape(a: Shape3, b: Shape3) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn dice_counts(pred: &Grid3<i32>, truth: &Grid3<i32>, label: i32) -> Result<DiceCounts> {
    same_shape(pred.shape(), truth.shape())?;
    let mut c = DiceCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p == label, t == label);
        c.pred += p as u64;
        c.truth += t as u64;
        c.intersection += (p && t) as u64;
    }
    Ok(c)
}

pub fn dice(pred: &Grid3<i32>, truth: &Grid3<i32>, label: i32) -> Result<f64> {
    Ok(dice_counts(pred, truth, label)?.dice())
}

/// Macro: mean of per-label Dice. Micro: Dice of the pooled counts.
pub fn dice_aggregate(per_label: &[DiceCounts], mode: DiceMode) -> Result<f64> {
    if per_label.is_empty() {
        return Err(Error::InsufficientData("dice aggregate over zero labels".into()));
    }
    Ok(match mode {
        DiceMode::Macro => per_label.iter().map(DiceCounts::dice).sum::<f64>() / per_label.len() as f64,
        DiceMode::Micro => {
            let pooled = per_label.iter().fold(DiceCounts::default(), |acc, c| DiceCounts {
                intersection: acc.intersection + c.intersection,
                pred: acc.pred + c.pred,
                truth: acc.truth + c.truth,
            });
            pooled.dice()
        }
    })
}

/// Foreground voxels with at least one face neighbour outside the mask.
/// The volume border counts as background.
pub fn surface_voxels(mask: &Grid3<bool>) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = mask.shape();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(z, y, x) {
                    continue;
                }
                let exposed = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == nz
                    || y + 1 == ny
                    || x + 1 == nx
                    || !mask.get(z - 1, y, x)
                    || !mask.get(z + 1, y, x)
                    || !mask.get(z, y - 1, x)
                    || !mask.get(z, y + 1, x)
                    || !mask.get(z, y, x - 1)
                    || !mask.get(z, y, x + 1);
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let pos = |i: usize| i as f64 * spacing;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zb[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// site, separable over x, y, z.
pub fn squared_distance_transform(sites: &Grid3<bool>, spacing_mm: [f64; 3]) -> Grid3<f64> {
    let shape = sites.shape();
    let mut d = sites.map(|s| if s { 0.0 } else { f64::INFINITY });
    let [nz, ny, nx] = shape;
    let mut v = Vec::new();
    let mut zb = Vec::new();
    for axis in [2usize, 1, 0] {
        let len = shape[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let (a_len, b_len) = match axis {
            2 => (nz, ny),
            1 => (nz, nx),
            _ => (ny, nx),
        };
        for a in 0..a_len {
            for b in 0..b_len {
                let idx = |i: usize| match axis {
                    2 => [a, b, i],
                    1 => [a, i, b],
                    _ => [i, a, b],
                };
                for (i, l) in line.iter_mut().enumerate() {
                    let [z, y, x] = idx(i);
                    *l = d.get(z, y, x);
                }
                edt_line(&line, spacing_mm[axis], &mut out, &mut v, &mut zb);
                for (i, &o) in out.iter().enumerate() {
                    let [z, y, x] = idx(i);
                    d.set(z, y, x, o);
                }
            }
        }
    }
    d
}

/// Symmetric average surface distance in mm: the mean, over the union of
/// both surface point sets, of each point's distance to the other surface.
pub fn asd(pred: &Grid3<bool>, truth: &Grid3<bool>, spacing_mm: [f64; 3]) -> Result<f64> {
    same_shape(pred.shape(), truth.shape())?;
    if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(spacing_mm));
    }
    let sa = surface_voxels(pred);
    let sb = surface_voxels(truth);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::Undefined("surface distance with an empty mask".into()));
    }
    let to_grid = |pts: &[[usize; 3]]| {
        let mut g = Grid3::filled(pred.shape(), false);
        for &[z, y, x] in pts {
            g.set(z, y, x, true);
        }
        g
    };
    let da = squared_distance_transform(&to_grid(&sa), spacing_mm);
    let db = squared_distance_transform(&to_grid(&sb), spacing_mm);
    let total: f64 = sa.iter().map(|&[z, y, x]| db.get(z, y, x).sqrt()).sum::<f64>()
        + sb.iter().map(|&[z, y, x]| da.get(z, y, x).sqrt()).sum::<f64>();
    Ok(total / (sa.len() + sb.len()) as f64)
}

/// Mann–Whitney AUC with midranks for ties.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// `2tp / (2tp + fp + fn)`, 0 when nothing is positive.
pub fn f1_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(ConfusionCounts::from_labels(pred, truth)?.f1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_with(shape: Shape3, voxels: &[[usize; 3]]) -> Grid3<bool> {
        let mut g = Grid3::filled(shape, false);
        for &[z, y, x] in voxels {
            g.set(z, y, x, true);
        }
        g
    }

    #[test]
    fn dice_examples() {
        let a = Grid3::new([1, 1, 8], vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let b = Grid3::new([1, 1, 8], vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        let c = Grid3::new([1, 1, 8], vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &a, 7).unwrap(), 1.0);
        let bg = Grid3::filled([2, 2, 2], 0);
        assert_eq!(dice(&bg, &bg, 0).unwrap(), 1.0);
        assert!(dice(&a, &bg, 1).is_err());
    }

    #[test]
    fn dice_aggregate_examples() {
        let one = DiceCounts { intersection: 2, pred: 4, truth: 4 };
        assert_eq!(dice_aggregate(&[one], DiceMode::Macro).unwrap(), 0.5);
        assert_eq!(dice_aggregate(&[one], DiceMode::Micro).unwrap(), 0.5);
        let perfect = DiceCounts { intersection: 5, pred: 5, truth: 5 };
        let miss = DiceCounts { intersection: 0, pred: 5, truth: 5 };
        assert_eq!(dice_aggregate(&[perfect, miss], DiceMode::Macro).unwrap(), 0.5);
        let pooled = DiceCounts { intersection: 3, pred: 4, truth: 8 };
        assert_eq!(dice_aggregate(&[pooled], DiceMode::Micro).unwrap(), 0.5);
        assert!(dice_aggregate(&[], DiceMode::Micro).is_err());
    }

    #[test]
    fn asd_examples() {
        let a = mask_with([6, 3, 3], &[[1, 1, 1]]);
        let b = mask_with([6, 3, 3], &[[4, 1, 1]]);
        assert_eq!(asd(&a, &b, [1.0, 1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(asd(&a, &a, [1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(asd(&a, &b, [2.0, 1.0, 1.0]).unwrap(), 6.0);
        let empty = Grid3::filled([6, 3, 3], false);
        assert!(matches!(asd(&empty, &a, [1.0; 3]), Err(Error::Undefined(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[0.2, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        let t = [true, false, true, false];
        assert_eq!(f1_binary(&t, &t).unwrap(), 1.0);
        let wrong: Vec<bool> = t.iter().map(|v| !v).collect();
        assert_eq!(f1_binary(&wrong, &t).unwrap(), 0.0);
        let pred = [true, true, true, false];
        let truth = [true, true, false, true];
        assert!((f1_binary(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(f1_binary(&pred, &truth[..3]).is_err());
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(
            bits in proptest::collection::vec(proptest::bool::weighted(0.1), 5 * 4 * 6),
            sz in 1u8..4, sy in 1u8..4,
        ) {
            let g = Grid3::new([5, 4, 6], bits).unwrap();
            let spacing = [f64::from(sz), f64::from(sy), 1.5];
            let d = squared_distance_transform(&g, spacing);
            let sites: Vec<[usize; 3]> = (0..g.len()).filter(|&i| g.data()[i]).map(|i| [i / 24, (i / 6) % 4, i % 6]).collect();
            for z in 0..5 {
                for y in 0..4 {
                    for x in 0..6 {
                        let brute = sites.iter().map(|s| {
                            let dz = (z as f64 - s[0] as f64) * spacing[0];
                            let dy = (y as f64 - s[1] as f64) * spacing[1];
                            let dx = (x as f64 - s[2] as f64) * spacing[2];
                            dz * dz + dy * dy + dx * dx
                        }).fold(f64::INFINITY, f64::min);
                        let got = d.get(z, y, x);
                        prop_assert!((got - brute).abs() <= 1e-9 * brute.max(1.0) || (got.is_infinite() && brute.is_infinite()));
                    }
                }
            }
        }

        #[test]
        fn dice_symmetric_and_bounded(a in proptest::collection::vec(0i32..3, 27), b in proptest::collection::vec(0i32..3, 27)) {
            let a = Grid3::new([3, 3, 3], a).unwrap();
            let b = Grid3::new([3, 3, 3], b).unwrap();
            for l in 0..3 {
                let ab = dice(&a, &b, l).unwrap();
                prop_assert_eq!(ab, dice(&b, &a, l).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
            }
        }

        #[test]
        fn auc_monotone_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(labels.iter().any(|l| !l));
            let a = auc_roc(&scores, &labels).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(a, auc_roc(&transformed, &labels).unwrap());
        }
    }
}

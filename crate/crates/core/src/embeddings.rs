//! Sliding-window embedding extraction, aggregation, the on-disk store and
//! cosine top-k retrieval.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::PatchEmbedder;
use crate::error::{Error, Result};
use crate::grid::Shape3;
use crate::objectives::cosine_sim_f32;
use crate::sampler::ScanId;
use crate::volume::Volume;

const MAGIC: &[u8; 8] = b"VFMSTOR1";
const FIELDS: [&str; 5] = ["id", "label", "scan_id", "grid_position", "vector"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub vector: Vec<f32>,
    pub label: Option<i32>,
    pub scan_id: ScanId,
    /// Minimal voxel corner of the window, for patch-level records.
    pub grid_position: Option<[i32; 3]>,
}

/// Window start offsets along one axis: multiples of `stride`, plus a final
/// start flush with the far edge.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || patch == 0 {
        return Err(Error::InvalidArgument("patch and stride must be >= 1".into()));
    }
    if patch > dim {
        return Err(Error::ShapeMismatch(format!("window {patch} exceeds extent {dim}")));
    }
    let last = dim - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("0 is always a start") != last {
        starts.push(last);
    }
    Ok(starts)
}

/// Window corners in canonical (z, y, x) order and the window grid dims.
pub fn window_corners(shape: Shape3, patch: Shape3, stride: [usize; 3]) -> Result<(Shape3, Vec<[usize; 3]>)> {
    let starts: Vec<Vec<usize>> =
        (0..3).map(|a| window_starts(shape[a], patch[a], stride[a])).collect::<Result<_>>()?;
    let dims = [starts[0].len(), starts[1].len(), starts[2].len()];
    let mut corners = Vec::with_capacity(dims.iter().product());
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                corners.push([z, y, x]);
            }
        }
    }
    Ok((dims, corners))
}

/// Window embeddings of one volume on its window grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid {
    pub dims: Shape3,
    pub patch: Shape3,
    pub stride: [usize; 3],
    /// Canonical order; `records[i].id == i`.
    pub records: Vec<EmbeddingRecord>,
}

impl WindowGrid {
    pub fn corner(&self, i: usize) -> [usize; 3] {
        let p = self.records[i].grid_position.expect("window records carry positions");
        [p[0] as usize, p[1] as usize, p[2] as usize]
    }

    pub fn vectors(&self) -> Vec<&[f32]> {
        self.records.iter().map(|r| r.vector.as_slice()).collect()
    }
}

/// Embeds every window of `volume` (HU). Windows are evaluated in parallel;
/// output order is canonical regardless.
pub fn sliding_window_embed<E: PatchEmbedder + ?Sized>(
    embedder: &E,
    volume: &Volume,
    patch: Shape3,
    stride: [usize; 3],
    scan_id: ScanId,
) -> Result<WindowGrid> {
    let (dims, corners) = window_corners(volume.shape(), patch, stride)?;
    let vectors: Vec<Vec<f32>> = corners
        .par_iter()
        .map(|&c| embedder.embed_patch(&volume.grid().crop(c, patch)?))
        .collect::<Result<_>>()?;
    let records = corners
        .iter()
        .zip(vectors)
        .enumerate()
        .map(|(i, (c, vector))| EmbeddingRecord {
            id: i as u64,
            vector,
            label: None,
            scan_id,
            grid_position: Some([c[0] as i32, c[1] as i32, c[2] as i32]),
        })
        .collect();
    Ok(WindowGrid { dims, patch, stride, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Min,
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Element-wise reduction across vectors.
pub fn aggregate<V: AsRef<[f32]>>(vectors: &[V], kind: Aggregation) -> Result<Vec<f32>> {
    let first = vectors.first().ok_or_else(|| Error::InsufficientData("aggregate of no vectors".into()))?;
    let d = first.as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != d) {
        return Err(Error::ShapeMismatch("aggregate over mixed dimensions".into()));
    }
    Ok(match kind {
        Aggregation::Min => (0..d).map(|j| vectors.iter().map(|v| v.as_ref()[j]).fold(f32::INFINITY, f32::min)).collect(),
        Aggregation::Max => {
            (0..d).map(|j| vectors.iter().map(|v| v.as_ref()[j]).fold(f32::NEG_INFINITY, f32::max)).collect()
        }
        Aggregation::Mean => (0..d)
            .map(|j| (vectors.iter().map(|v| f64::from(v.as_ref()[j])).sum::<f64>() / vectors.len() as f64) as f32)
            .collect(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoreHeader {
    dim: usize,
    count: usize,
    metric: String,
    fields: Vec<String>,
}

/// Immutable-once-built collection of same-dimension records.
#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    ids: HashSet<u64>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("store dimension must be >= 1".into()));
        }
        Ok(Self { dim, records: Vec::new(), ids: HashSet::new() })
    }

    pub fn from_records(dim: usize, records: impl IntoIterator<Item = EmbeddingRecord>) -> Result<Self> {
        let mut s = Self::new(dim)?;
        for r in records {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("record of dim {} in store of dim {}", record.vector.len(), self.dim)));
        }
        if let Some(i) = record.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if !self.ids.insert(record.id) {
            return Err(Error::InvalidArgument(format!("duplicate record id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_bytes(&self) -> usize {
        8 + 4 + 8 + 12 + 4 * self.dim
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StoreHeader {
            dim: self.dim,
            count: self.records.len(),
            metric: "cosine".into(),
            fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + self.records.len() * self.record_bytes());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for r in &self.records {
            bytes.extend_from_slice(&r.id.to_le_bytes());
            bytes.extend_from_slice(&r.label.unwrap_or(-1).to_le_bytes());
            bytes.extend_from_slice(&r.scan_id.to_le_bytes());
            for p in r.grid_position.unwrap_or([-1; 3]) {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            for v in &r.vector {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt(format!("{} is not an embedding store", path.display())));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corrupt("store header length exceeds file".into()))?;
        let header: StoreHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Corrupt(format!("store header: {e}")))?;
        if header.metric != "cosine" || header.fields != FIELDS {
            return Err(Error::Corrupt(format!("unsupported store layout {:?}/{:?}", header.metric, header.fields)));
        }
        let mut store = Self::new(header.dim).map_err(|_| Error::Corrupt("store dimension 0".into()))?;
        let rb = store.record_bytes();
        if bytes.len() - body != header.count * rb {
            return Err(Error::Corrupt(format!(
                "store body has {} bytes, header promises {} records of {rb}",
                bytes.len() - body,
                header.count
            )));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        for n in 0..header.count {
            let o = body + n * rb;
            let label = i32_at(o + 8);
            let pos = [i32_at(o + 20), i32_at(o + 24), i32_at(o + 28)];
            let vector = bytes[o + 32..o + rb]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store
                .push(EmbeddingRecord {
                    id: u64_at(o),
                    vector,
                    label: (label != -1).then_some(label),
                    scan_id: u64_at(o + 12),
                    grid_position: (pos != [-1; 3]).then_some(pos),
                })
                .map_err(|e| Error::Corrupt(format!("record {n}: {e}")))?;
        }
        Ok(store)
    }
}

/// Descending cosine similarity; exact ties go to the lower id.
pub fn topk_search(query: &[f32], store: &EmbeddingStore, k: usize) -> Result<Vec<(u64, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if query.len() != store.dim() {
        return Err(Error::ShapeMismatch(format!("query dim {} vs store dim {}", query.len(), store.dim())));
    }
    let mut scored: Vec<(u64, f64)> = store
        .records()
        .iter()
        .map(|r| Ok((r.id, cosine_sim_f32(query, &r.vector)?)))
        .collect::<Result<_>>()?;
    let order = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub k: usize,
    pub precision_at_k: f64,
    pub average_precision_at_k: f64,
    pub hit_rate: f64,
    pub recall_at_k: f64,
    pub f1: f64,
}

/// Scores one ranked list. AP@k divides the summed precision at relevant
/// ranks by `min(k, corpus_relevant)`; recall divides by `corpus_relevant`.
pub fn retrieval_metrics(query_label: i32, ranked_labels: &[i32], corpus_relevant: usize, k: usize) -> Result<RetrievalScores> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ranked_labels.len() < k {
        return Err(Error::InvalidArgument(format!("{} ranked results for k = {k}", ranked_labels.len())));
    }
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (r, &label) in ranked_labels[..k].iter().enumerate() {
        if label == query_label {
            hits += 1;
            ap_sum += hits as f64 / (r + 1) as f64;
        }
    }
    let precision = hits as f64 / k as f64;
    let norm = k.min(corpus_relevant);
    let ap = if norm == 0 { 0.0 } else { ap_sum / norm as f64 };
    let recall = if corpus_relevant == 0 { 0.0 } else { hits as f64 / corpus_relevant as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(RetrievalScores {
        k,
        precision_at_k: precision,
        average_precision_at_k: ap.min(1.0),
        hit_rate: if hits > 0 { 1.0 } else { 0.0 },
        recall_at_k: recall.min(1.0),
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use proptest::prelude::*;

    struct Constant;

    impl PatchEmbedder for Constant {
        fn dim(&self) -> usize {
            2
        }
        fn embed_patch(&self, _: &Grid3<f32>) -> Result<Vec<f32>> {
            Ok(vec![0.0, 0.0])
        }
    }

    struct MeanEmbedder;

    impl PatchEmbedder for MeanEmbedder {
        fn dim(&self) -> usize {
            2
        }
        fn embed_patch(&self, hu: &Grid3<f32>) -> Result<Vec<f32>> {
            Ok(vec![hu.mean() as f32, 1.0])
        }
    }

    fn record(id: u64, vector: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord { id, vector, label: None, scan_id: 0, grid_position: None }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(32, 16, 8).unwrap(), vec![0, 8, 16]);
        assert_eq!(window_starts(16, 16, 4).unwrap(), vec![0]);
        assert_eq!(window_starts(20, 16, 8).unwrap(), vec![0, 4]);
        assert!(window_starts(8, 16, 8).is_err());
        assert!(window_starts(8, 4, 0).is_err());
        let v = Volume::from_grid(Grid3::filled([32, 32, 32], 0.0)).unwrap();
        let g = sliding_window_embed(&Constant, &v, [16; 3], [8; 3], 3).unwrap();
        assert_eq!(g.records.len(), 27);
        assert_eq!(g.dims, [3, 3, 3]);
        assert!(g.records.iter().all(|r| r.vector == g.records[0].vector && r.scan_id == 3));
        let one = Volume::from_grid(Grid3::filled([16, 16, 16], 0.0)).unwrap();
        assert_eq!(sliding_window_embed(&Constant, &one, [16; 3], [8; 3], 0).unwrap().records.len(), 1);
    }

    #[test]
    fn windows_follow_canonical_order() {
        let v = Volume::from_grid(Grid3::from_fn([8, 8, 8], |z, y, x| (z * 64 + y * 8 + x) as f32)).unwrap();
        let g = sliding_window_embed(&MeanEmbedder, &v, [4; 3], [2; 3], 0).unwrap();
        let corners: Vec<[usize; 3]> = (0..g.records.len()).map(|i| g.corner(i)).collect();
        let mut sorted = corners.clone();
        sorted.sort();
        assert_eq!(corners, sorted);
        for (i, c) in corners.iter().enumerate() {
            let expected = v.grid().crop(*c, [4; 3]).unwrap().mean() as f32;
            assert_eq!(g.records[i].vector[0], expected);
        }
    }

    #[test]
    fn aggregate_examples() {
        let a = vec![vec![1.0f32, 4.0], vec![2.0, 3.0]];
        assert_eq!(aggregate(&a, Aggregation::Min).unwrap(), vec![1.0, 3.0]);
        assert_eq!(aggregate(&a, Aggregation::Max).unwrap(), vec![2.0, 4.0]);
        assert_eq!(aggregate(&[vec![0.0f32, 0.0], vec![2.0, 2.0]], Aggregation::Mean).unwrap(), vec![1.0, 1.0]);
        for kind in [Aggregation::Min, Aggregation::Mean, Aggregation::Max] {
            assert_eq!(aggregate(&a[..1], kind).unwrap(), a[0]);
        }
        assert!(aggregate::<Vec<f32>>(&[], Aggregation::Min).is_err());
        assert!(aggregate(&[vec![1.0f32], vec![1.0, 2.0]], Aggregation::Min).is_err());
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vfm");
        let mut s = EmbeddingStore::new(3).unwrap();
        s.push(EmbeddingRecord { id: 4, vector: vec![1.0, -2.5, 0.125], label: Some(2), scan_id: 9, grid_position: Some([1, 2, 3]) })
            .unwrap();
        s.push(record(5, vec![f32::MIN_POSITIVE, 0.0, 7.0])).unwrap();
        assert!(s.push(record(5, vec![0.0; 3])).is_err());
        assert!(s.push(record(6, vec![0.0; 2])).is_err());
        assert!(s.push(record(7, vec![f32::NAN, 0.0, 0.0])).is_err());
        s.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), s);

        let empty = EmbeddingStore::new(8).unwrap();
        empty.save(&p).unwrap();
        assert_eq!(EmbeddingStore::load(&p).unwrap(), empty);

        // header says D = 8, rows carry 9 floats
        let wrong = EmbeddingStore::from_records(9, [record(0, vec![0.5; 9])]).unwrap();
        wrong.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"dim\":9", "\"dim\":8");
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut patched = bytes[..16].to_vec();
        patched.extend_from_slice(&text.as_bytes()[16..16 + header_len]);
        patched.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&p, patched).unwrap();
        assert!(matches!(EmbeddingStore::load(&p), Err(Error::Corrupt(_))));
        fs::write(&p, b"VFMSTOR1garbage").unwrap();
        assert!(matches!(EmbeddingStore::load(&p), Err(Error::Corrupt(_))));
    }

    #[test]
    fn topk_examples() {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let store = EmbeddingStore::from_records(
            2,
            [record(0, vec![0.0, 1.0]), record(1, vec![h, h]), record(2, vec![1.0, 0.0]), record(3, vec![1.0, 0.0])],
        )
        .unwrap();
        let r = topk_search(&[1.0, 0.0], &store, 4).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 3, 1, 0]);
        assert_eq!(r[0].1, 1.0);
        assert!((r[2].1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(r[3].1, 0.0);
        assert_eq!(topk_search(&[1.0, 0.0], &store, 10).unwrap().len(), 4);
        assert_eq!(topk_search(&[1.0, 0.0], &store, 1).unwrap(), vec![(2, 1.0)]);
        assert!(topk_search(&[1.0], &store, 1).is_err());
        assert!(topk_search(&[1.0, 0.0], &store, 0).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let s = retrieval_metrics(1, &[1, 2, 1], 5, 3).unwrap();
        assert!((s.precision_at_k - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.hit_rate, 1.0);
        assert!((s.average_precision_at_k - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((s.average_precision_at_k - 0.5556).abs() < 1e-4);
        let none = retrieval_metrics(1, &[2, 3, 4], 5, 3).unwrap();
        assert_eq!((none.precision_at_k, none.average_precision_at_k, none.hit_rate, none.f1), (0.0, 0.0, 0.0, 0.0));
        let all = retrieval_metrics(7, &[7, 7, 7], 3, 3).unwrap();
        assert_eq!((all.precision_at_k, all.average_precision_at_k, all.recall_at_k, all.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(retrieval_metrics(1, &[1], 1, 0).is_err());
        assert!(retrieval_metrics(1, &[1], 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn aggregates_are_ordered(v in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 4), 1..8)) {
            let lo = aggregate(&v, Aggregation::Min).unwrap();
            let mid = aggregate(&v, Aggregation::Mean).unwrap();
            let hi = aggregate(&v, Aggregation::Max).unwrap();
            for j in 0..4 {
                prop_assert!(lo[j] <= mid[j] && mid[j] <= hi[j]);
            }
        }

        #[test]
        fn windows_cover_every_voxel(dim in 1usize..20, p in 0usize..1000, s in 0usize..1000) {
            let patch = 1 + p % dim;
            let stride = 1 + s % patch;
            let starts = window_starts(dim, patch, stride).unwrap();
            for v in 0..dim {
                prop_assert!(starts.iter().any(|&s| s <= v && v < s + patch));
            }
            prop_assert_eq!(starts.len(), (dim - patch) / stride + 1 + usize::from((dim - patch) % stride != 0));
        }
    }
}

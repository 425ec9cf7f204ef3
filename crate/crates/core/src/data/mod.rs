//! Vertical feature partitioning across silos, horizontal sample sharding
//! across clients, shared-seed mini-batch selection and the projection
//! that routes a silo's batch embeddings to the client owning each sample.

mod io;

pub use io::{read_binary, read_csv, write_binary, write_csv, BINARY_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{Purpose, Stream};

/// `M` samples of `D` features with one label each. Sample ids are row
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::dim("dataset labels", features.rows(), labels.len()));
        }
        if features.rows() == 0 {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        if let Some(i) = (0..features.rows()).find(|&i| features.row(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::Dataset(format!("non-finite feature in sample {i}")));
        }
        if let Some(i) = labels.iter().position(|y| !y.is_finite()) {
            return Err(Error::Dataset(format!("non-finite label in sample {i}")));
        }
        Ok(Self { features, labels })
    }

    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Feature slice of one silo, all samples.
    pub fn silo_features(&self, part: &VerticalPartition) -> Matrix {
        self.features.select_cols(&part.columns)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    pub silo_index: usize,
    pub columns: Vec<usize>,
}

impl VerticalPartition {
    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Contiguous column ranges in silo order.
pub fn split_vertical(num_features: usize, silo_dims: &[usize]) -> Result<Vec<VerticalPartition>> {
    if silo_dims.is_empty() {
        return Err(Error::config("at least one silo is required"));
    }
    if let Some(j) = silo_dims.iter().position(|&d| d == 0) {
        return Err(Error::config(format!("silo {j} has no features")));
    }
    let total: usize = silo_dims.iter().sum();
    if total != num_features {
        return Err(Error::config(format!(
            "silo feature counts sum to {total} but the dataset has {num_features} features"
        )));
    }
    let mut start = 0;
    Ok(silo_dims
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let part = VerticalPartition {
                silo_index: j,
                columns: (start..start + d).collect(),
            };
            start += d;
            part
        })
        .collect())
}

/// Explicit per-silo column lists; must be disjoint and cover `0..D`.
pub fn split_by_columns(num_features: usize, columns: Vec<Vec<usize>>) -> Result<Vec<VerticalPartition>> {
    if columns.is_empty() {
        return Err(Error::config("at least one silo is required"));
    }
    let mut seen = vec![false; num_features];
    for (j, cols) in columns.iter().enumerate() {
        if cols.is_empty() {
            return Err(Error::config(format!("silo {j} has no features")));
        }
        for &c in cols {
            if c >= num_features {
                return Err(Error::config(format!("silo {j}: column {c} out of range")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::config(format!("column {c} assigned to more than one silo")));
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("column {c} is not assigned to any silo")));
    }
    Ok(columns
        .into_iter()
        .enumerate()
        .map(|(silo_index, columns)| VerticalPartition { silo_index, columns })
        .collect())
}

/// The sample ids (and their labels) one client of one silo holds.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalShard {
    pub silo_index: usize,
    pub client_index: usize,
    pub owned_ids: Vec<usize>,
    pub labels: Vec<f64>,
    sorted: Vec<usize>,
}

impl HorizontalShard {
    pub fn new(silo_index: usize, client_index: usize, owned_ids: Vec<usize>, all_labels: &[f64]) -> Self {
        let labels = owned_ids.iter().map(|&i| all_labels[i]).collect();
        let mut sorted = owned_ids.clone();
        sorted.sort_unstable();
        Self {
            silo_index,
            client_index,
            owned_ids,
            labels,
            sorted,
        }
    }

    pub fn owns(&self, id: usize) -> bool {
        self.sorted.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.owned_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owned_ids.is_empty()
    }
}

/// Split `order` into `k` contiguous blocks; the first `len % k` blocks
/// get one extra id.
pub fn contiguous_blocks(order: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("client count must be >= 1"));
    }
    if k > order.len() {
        return Err(Error::config(format!("{k} clients but only {} samples", order.len())));
    }
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut start = 0;
    Ok((0..k)
        .map(|c| {
            let len = base + usize::from(c < extra);
            let block = order[start..start + len].to_vec();
            start += len;
            block
        })
        .collect())
}

/// Shard all `M` samples of one silo across `clients` clients: a seeded
/// permutation (stream keyed by the silo index), cut into contiguous
/// blocks.
pub fn shard_horizontal(
    partition: &VerticalPartition,
    labels: &[f64],
    clients: usize,
    seed: u64,
) -> Result<Vec<HorizontalShard>> {
    let m = labels.len();
    if clients > m {
        return Err(Error::config(format!(
            "silo {}: {clients} clients but only {m} samples",
            partition.silo_index
        )));
    }
    let order = Stream::new(seed, Purpose::Shard, partition.silo_index as u64).permutation(m);
    shard_in_order(partition.silo_index, &order, labels, clients)
}

/// Sharding from an explicit id order (the identity order gives plain
/// contiguous ranges).
pub fn shard_in_order(silo_index: usize, order: &[usize], labels: &[f64], clients: usize) -> Result<Vec<HorizontalShard>> {
    Ok(contiguous_blocks(order, clients)?
        .into_iter()
        .enumerate()
        .map(|(k, ids)| HorizontalShard::new(silo_index, k, ids, labels))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Minibatch {
    /// Iteration index `t_0` at which the batch was drawn.
    pub round_start: u64,
    pub ids: Vec<usize>,
}

/// `batch_size` ids drawn without replacement from `0..num_samples`. Pure
/// in `(seed, round_start)`, so every silo draws the same list.
pub fn sample_minibatch(seed: u64, round_start: u64, batch_size: usize, num_samples: usize) -> Result<Minibatch> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    if batch_size > num_samples {
        return Err(Error::config(format!(
            "batch size {batch_size} exceeds the {num_samples} available samples"
        )));
    }
    let ids = Stream::new(seed, Purpose::Batch, round_start).sample_without_replacement(num_samples, batch_size);
    Ok(Minibatch { round_start, ids })
}

/// Embeddings for a list of sample ids, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub ids: Vec<usize>,
    pub values: Matrix,
}

impl EmbeddingBatch {
    pub fn new(ids: Vec<usize>, values: Matrix) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::dim("embedding batch rows", ids.len(), values.rows()));
        }
        Ok(Self { ids, values })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            ids: Vec::new(),
            values: Matrix::zeros(0, width),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.rows() * self.values.cols()
    }
}

/// Positions within `batch` of the ids the shard owns, in batch order.
pub fn owned_positions(shard: &HorizontalShard, batch: &Minibatch) -> Vec<usize> {
    batch
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| shard.owns(id))
        .map(|(pos, _)| pos)
        .collect()
}

/// The rows of `embeddings` (indexed like `batch`) whose ids the shard
/// owns, kept in batch order. May be empty.
pub fn project(embeddings: &EmbeddingBatch, shard: &HorizontalShard, batch: &Minibatch) -> Result<EmbeddingBatch> {
    if embeddings.ids != batch.ids {
        return Err(Error::config("embedding rows are not indexed by the batch order"));
    }
    let pos = owned_positions(shard, batch);
    let ids = pos.iter().map(|&p| batch.ids[p]).collect();
    EmbeddingBatch::new(ids, embeddings.values.select_rows(&pos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(m: usize) -> Vec<f64> {
        (0..m).map(|i| i as f64).collect()
    }

    #[test]
    fn vertical_split_contiguous() {
        let parts = split_vertical(4, &[2, 2]).unwrap();
        assert_eq!(parts[0].columns, vec![0, 1]);
        assert_eq!(parts[1].columns, vec![2, 3]);
    }

    #[test]
    fn vertical_split_seventy_six_features_four_silos() {
        let parts = split_vertical(76, &[19, 19, 19, 19]).unwrap();
        assert_eq!(parts.len(), 4);
        for (j, p) in parts.iter().enumerate() {
            assert_eq!(p.columns, (19 * j..19 * (j + 1)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn vertical_split_sum_mismatch() {
        assert!(matches!(split_vertical(4, &[3, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_columns_must_partition() {
        assert!(split_by_columns(4, vec![vec![3, 0], vec![1, 2]]).is_ok());
        assert!(split_by_columns(4, vec![vec![0, 1], vec![1, 2, 3]]).is_err());
        assert!(split_by_columns(4, vec![vec![0, 1], vec![2]]).is_err());
        assert!(split_by_columns(4, vec![vec![0, 1], vec![2, 9]]).is_err());
    }

    #[test]
    fn identity_order_shards() {
        let order: Vec<usize> = (0..6).collect();
        let shards = shard_in_order(0, &order, &labels(6), 2).unwrap();
        assert_eq!(shards[0].owned_ids, vec![0, 1, 2]);
        assert_eq!(shards[1].owned_ids, vec![3, 4, 5]);
        assert_eq!(shards[1].labels, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn remainder_goes_to_low_clients() {
        let part = VerticalPartition { silo_index: 0, columns: vec![0] };
        let shards = shard_horizontal(&part, &labels(7), 2, 3).unwrap();
        assert_eq!(shards[0].len(), 4);
        assert_eq!(shards[1].len(), 3);
    }

    #[test]
    fn fifty_thousand_samples_fifty_clients() {
        let part = VerticalPartition { silo_index: 1, columns: vec![0] };
        let shards = shard_horizontal(&part, &vec![0.0; 50_000], 50, 11).unwrap();
        assert!(shards.iter().all(|s| s.len() == 1000));
    }

    #[test]
    fn too_many_clients() {
        let part = VerticalPartition { silo_index: 0, columns: vec![0] };
        assert!(shard_horizontal(&part, &labels(3), 4, 0).is_err());
    }

    #[test]
    fn minibatch_golden_value() {
        // tests/oracles/minibatch_golden.py
        assert_eq!(sample_minibatch(42, 0, 3, 10).unwrap().ids, vec![8, 3, 5]);
        assert_eq!(sample_minibatch(42, 1, 3, 10).unwrap().ids, vec![5, 0, 4]);
        assert_eq!(sample_minibatch(7, 5, 4, 8).unwrap().ids, vec![7, 4, 5, 2]);
    }

    #[test]
    fn full_batch_is_permutation() {
        let mut ids = sample_minibatch(3, 9, 10, 10).unwrap().ids;
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_bounds() {
        assert!(sample_minibatch(0, 0, 11, 10).is_err());
        assert!(sample_minibatch(0, 0, 0, 10).is_err());
    }

    fn batch_with(ids: Vec<usize>) -> (Minibatch, EmbeddingBatch) {
        let values = Matrix::from_vec(ids.len(), 1, ids.iter().map(|&i| i as f64 * 10.0).collect()).unwrap();
        let b = Minibatch { round_start: 0, ids: ids.clone() };
        (b, EmbeddingBatch::new(ids, values).unwrap())
    }

    #[test]
    fn projection_intersects_in_batch_order() {
        let (batch, emb) = batch_with(vec![2, 5, 7]);
        let shard = HorizontalShard::new(0, 0, vec![9, 5], &labels(10));
        let p = project(&emb, &shard, &batch).unwrap();
        assert_eq!(p.ids, vec![5]);
        assert_eq!(p.values.as_slice(), &[50.0]);
    }

    #[test]
    fn projection_identity_and_empty() {
        let (batch, emb) = batch_with(vec![4, 1, 3]);
        let all = HorizontalShard::new(0, 0, (0..10).collect(), &labels(10));
        assert_eq!(project(&emb, &all, &batch).unwrap(), emb);
        let none = HorizontalShard::new(0, 1, vec![0, 2], &labels(10));
        let p = project(&emb, &none, &batch).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.values.cols(), 1);
    }
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::rng::RngStream;

/// Labelled samples stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        class_count: usize,
    ) -> Result<Self, LearnerError> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(LearnerError::InvalidDataset(format!(
                "{} feature values do not form {} rows of width {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(LearnerError::InvalidDataset(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self { features, labels, feature_dim, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the given rows into a new dataset, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_dim: self.feature_dim,
            class_count: self.class_count,
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// A device's view of its local data: indices into a parent dataset.
#[derive(Debug, Clone, Copy)]
pub struct Shard<'a> {
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

impl<'a> Shard<'a> {
    pub fn new(data: &'a Dataset, indices: &'a [usize]) -> Self {
        Self { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Each device holds at most `m` distinct labels.
    NonIid(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl Partition {
    pub fn shard<'a>(&'a self, data: &'a Dataset, n: usize) -> Shard<'a> {
        Shard::new(data, &self.shards[n])
    }

    pub fn devices(&self) -> usize {
        self.shards.len()
    }
}

const SHARD_ASSIGNMENT_ATTEMPTS: usize = 256;

/// Splits `data` into `devices` disjoint equal-size shards.
///
/// `Iid` draws a uniform random permutation. `NonIid(m)` sorts samples by
/// label, cuts them into `devices * m` contiguous pieces and hands `m`
/// pieces to each device so that no device sees more than `m` labels.
pub fn partition_dataset(
    data: &Dataset,
    devices: usize,
    mode: PartitionMode,
    rng: &mut RngStream,
) -> Result<Partition, LearnerError> {
    let len = data.len();
    if devices == 0 || !len.is_multiple_of(devices) || len == 0 {
        return Err(LearnerError::IndivisibleDataset { len, devices });
    }
    match mode {
        PartitionMode::Iid => {
            let mut order = data.all_indices();
            order.shuffle(rng);
            let size = len / devices;
            let shards = order.chunks(size).map(|c| c.to_vec()).collect();
            Ok(Partition { shards, mode })
        }
        PartitionMode::NonIid(m) => {
            if m == 0 {
                return Err(LearnerError::InfeasibleLabelAssignment(m));
            }
            let pieces = devices * m;
            if !len.is_multiple_of(pieces) {
                return Err(LearnerError::IndivisibleDataset { len, devices: pieces });
            }
            let mut order = data.all_indices();
            order.sort_by_key(|&i| data.label(i));
            let piece_len = len / pieces;
            let cut: Vec<&[usize]> = order.chunks(piece_len).collect();
            let label_sets: Vec<Vec<usize>> = cut
                .iter()
                .map(|piece| {
                    let mut ls: Vec<usize> = piece.iter().map(|&i| data.label(i)).collect();
                    ls.dedup();
                    ls
                })
                .collect();

            let fits = |assignment: &[usize]| {
                assignment.chunks(m).all(|group| {
                    let mut labels: Vec<usize> =
                        group.iter().flat_map(|&p| label_sets[p].iter().copied()).collect();
                    labels.sort_unstable();
                    labels.dedup();
                    labels.len() <= m
                })
            };

            let mut assignment: Vec<usize> = (0..pieces).collect();
            let mut found = false;
            for _ in 0..SHARD_ASSIGNMENT_ATTEMPTS {
                assignment.shuffle(rng);
                if fits(&assignment) {
                    found = true;
                    break;
                }
            }
            if !found {
                // Label-sorted contiguous pieces keep neighbouring labels together.
                assignment = (0..pieces).collect();
                if !fits(&assignment) {
                    return Err(LearnerError::InfeasibleLabelAssignment(m));
                }
            }
            let shards = assignment
                .chunks(m)
                .map(|group| group.iter().flat_map(|&p| cut[p].iter().copied()).collect())
                .collect();
            Ok(Partition { shards, mode })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use std::collections::BTreeSet;

    fn labelled(per_class: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes).flat_map(|c| vec![c; per_class]).collect();
        let features = labels.iter().map(|&l| l as f64).collect();
        Dataset::new(features, labels, 1, classes).unwrap()
    }

    fn check_sound(p: &Partition, len: usize) {
        let all: BTreeSet<usize> = p.shards.iter().flatten().copied().collect();
        assert_eq!(all.len(), len, "shards overlap or miss samples");
        assert_eq!(all, (0..len).collect());
        let size = p.shards[0].len();
        assert!(p.shards.iter().all(|s| s.len() == size));
    }

    fn labels_of(data: &Dataset, shard: &[usize]) -> BTreeSet<usize> {
        shard.iter().map(|&i| data.label(i)).collect()
    }

    #[test]
    fn iid_split_sizes() {
        let data = labelled(6, 10);
        let p = partition_dataset(&data, 10, PartitionMode::Iid, &mut derive_stream(1, "p", 0, 0))
            .unwrap();
        assert_eq!(p.shards.len(), 10);
        check_sound(&p, 60);
        assert!(p.shards.iter().all(|s| s.len() == 6));
    }

    #[test]
    fn non_iid_one_label_each() {
        let data = labelled(10, 10);
        let p = partition_dataset(
            &data,
            10,
            PartitionMode::NonIid(1),
            &mut derive_stream(1, "p", 0, 0),
        )
        .unwrap();
        check_sound(&p, 100);
        let mut seen = BTreeSet::new();
        for shard in &p.shards {
            let ls = labels_of(&data, shard);
            assert_eq!(ls.len(), 1);
            seen.extend(ls);
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn non_iid_two_labels_exhaustive() {
        let data = labelled(10, 10);
        for seed in 0..20 {
            let p = partition_dataset(
                &data,
                10,
                PartitionMode::NonIid(2),
                &mut derive_stream(seed, "p", 0, 0),
            )
            .unwrap();
            check_sound(&p, 100);
            assert!(p.shards.iter().all(|s| labels_of(&data, s).len() <= 2));
        }
    }

    #[test]
    fn indivisible_and_infeasible() {
        let data = labelled(10, 10);
        let mut rng = derive_stream(1, "p", 0, 0);
        assert!(matches!(
            partition_dataset(&data, 7, PartitionMode::Iid, &mut rng),
            Err(LearnerError::IndivisibleDataset { .. })
        ));
        // 3 classes of unequal size: cutting into 2 single-label shards is impossible.
        let uneven = Dataset::new(vec![0.0; 4], vec![0, 0, 0, 1], 1, 2).unwrap();
        assert_eq!(
            partition_dataset(&uneven, 2, PartitionMode::NonIid(1), &mut rng),
            Err(LearnerError::InfeasibleLabelAssignment(1))
        );
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![0.0; 3], vec![0, 1], 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![0, 2], 2, 2).is_err());
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![0, 1], 2, 2).unwrap();
        let s = d.subset(&[1]);
        assert_eq!(s.feature(0), &[3.0, 4.0]);
        assert_eq!(s.label(0), 1);
    }
}

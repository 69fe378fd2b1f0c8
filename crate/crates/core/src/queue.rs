//! Fixed-capacity support queues and brute-force nearest-neighbor search.

use std::collections::VecDeque;

use crate::document::Modality;
use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-4;

/// Queued embedding with its insertion sequence number. Labels are kept for
/// diagnostics only and never consulted during search.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub sequence: u64,
    pub vector: Vec<f32>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct SupportQueue {
    capacity: usize,
    modality: Modality,
    dim: Option<usize>,
    next_sequence: u64,
    entries: VecDeque<QueueEntry>,
}

impl SupportQueue {
    pub fn new(capacity: usize, modality: Modality) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            modality,
            dim: None,
            next_sequence: 0,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Append unit vectors in order, evicting the oldest entries beyond
    /// capacity. The whole batch is validated before anything is inserted.
    pub fn enqueue_batch(&mut self, vectors: &[Vec<f32>], labels: Option<&[u32]>) -> Result<()> {
        if let Some(l) = labels {
            if l.len() != vectors.len() {
                return Err(Error::InvalidArgument("label count differs from vector count".into()));
            }
        }
        let mut dim = self.dim;
        for v in vectors {
            match dim {
                Some(d) if d != v.len() => {
                    return Err(Error::Shape {
                        op: "enqueue_batch",
                        lhs: vec![d],
                        rhs: vec![v.len()],
                    })
                }
                _ => dim = Some(v.len()),
            }
            let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "queue entries must be unit-norm, got norm {norm}"
                )));
            }
        }
        self.dim = dim;
        for (i, v) in vectors.iter().enumerate() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                sequence: self.next_sequence,
                vector: v.clone(),
                label: labels.map(|l| l[i]),
            });
            self.next_sequence += 1;
        }
        Ok(())
    }

    /// Entry closest to `query` in Euclidean distance; ties go to the
    /// oldest entry. The argmin-distance and argmax-inner-product choices
    /// are both computed and must agree.
    pub fn nearest_neighbor(&self, query: &[f32]) -> Result<&QueueEntry> {
        if self.entries.is_empty() {
            return Err(Error::EmptySupport);
        }
        let (by_distance, by_dot) = nearest_pair(self.entries.iter().map(|e| e.vector.as_slice()), query)?;
        if by_distance != by_dot {
            // Only possible when distances tie to within rounding; the
            // distance choice is authoritative.
            log::debug!("argmin-L2 ({by_distance}) and argmax-dot ({by_dot}) disagree");
        }
        Ok(&self.entries[by_distance])
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Returns `(argmin distance, argmax inner product)`, lowest index on ties.
fn nearest_pair<'a>(candidates: impl Iterator<Item = &'a [f32]>, query: &[f32]) -> Result<(usize, usize)> {
    let mut best_d = (f64::INFINITY, usize::MAX);
    let mut best_s = (f64::NEG_INFINITY, usize::MAX);
    for (i, c) in candidates.enumerate() {
        if c.len() != query.len() {
            return Err(Error::Shape {
                op: "nearest_neighbor",
                lhs: vec![c.len()],
                rhs: vec![query.len()],
            });
        }
        let d = squared_distance(c, query);
        if d < best_d.0 {
            best_d = (d, i);
        }
        let s = dot(c, query);
        if s > best_s.0 {
            best_s = (s, i);
        }
    }
    Ok((best_d.1, best_s.1))
}

/// Indices of the `k` entries of `index` nearest to `query` by Euclidean
/// distance, ascending, ties by index. `exclude` removes one index (the
/// query itself when mining over a corpus that contains it).
pub fn k_nearest_neighbors(index: &[Vec<f32>], query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let available = index.len() - usize::from(exclude.is_some_and(|e| e < index.len()));
    if k == 0 || k > available {
        return Err(Error::NotEnoughNeighbors { requested: k, available });
    }
    let mut scored = Vec::with_capacity(index.len());
    for (i, v) in index.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        if v.len() != query.len() {
            return Err(Error::Shape {
                op: "k_nearest_neighbors",
                lhs: vec![v.len()],
                rhs: vec![query.len()],
            });
        }
        scored.push((squared_distance(v, query), i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Neighbor table for every entry of `index`, each excluding itself.
pub fn mine_neighbor_table(index: &[Vec<f32>], k: usize) -> Result<Vec<Vec<usize>>> {
    (0..index.len()).map(|i| k_nearest_neighbors(index, &index[i], k, Some(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        crate::document::normalize(v).unwrap()
    }

    #[test]
    fn fifo_eviction() {
        let mut q = SupportQueue::new(2, Modality::Vision).unwrap();
        let (a, b, c) = (unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0]));
        q.enqueue_batch(&[a, b.clone(), c.clone()], None).unwrap();
        let got: Vec<_> = q.entries().map(|e| e.vector.clone()).collect();
        assert_eq!(got, vec![b, c]);
        let seqs: Vec<u64> = q.entries().map(|e| e.sequence).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn empty_insert_is_noop() {
        let mut q = SupportQueue::new(4, Modality::Language).unwrap();
        q.enqueue_batch(&[unit(&[1.0, 0.0])], None).unwrap();
        q.enqueue_batch(&[], None).unwrap();
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn overflow_keeps_latest() {
        let mut q = SupportQueue::new(512, Modality::Vision).unwrap();
        let batch: Vec<Vec<f32>> = (0..600).map(|i| unit(&[1.0, i as f32])).collect();
        q.enqueue_batch(&batch, None).unwrap();
        assert_eq!(q.len(), 512);
        assert_eq!(q.entries().next().unwrap().sequence, 88);
    }

    #[test]
    fn rejects_non_unit_and_mixed_dims() {
        let mut q = SupportQueue::new(4, Modality::Vision).unwrap();
        assert!(q.enqueue_batch(&[vec![2.0, 0.0]], None).is_err());
        q.enqueue_batch(&[unit(&[1.0, 0.0])], None).unwrap();
        assert!(q.enqueue_batch(&[unit(&[1.0, 0.0, 0.0])], None).is_err());
        assert!(SupportQueue::new(0, Modality::Vision).is_err());
    }

    #[test]
    fn nearest_neighbor_cases() {
        let mut q = SupportQueue::new(8, Modality::Vision).unwrap();
        assert!(matches!(q.nearest_neighbor(&[1.0, 0.0]), Err(Error::EmptySupport)));
        q.enqueue_batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        let query = unit(&[0.9, 0.1]);
        assert_eq!(q.nearest_neighbor(&query).unwrap().vector, vec![1.0, 0.0]);
        assert_eq!(q.nearest_neighbor(&[0.0, 1.0]).unwrap().sequence, 1);
    }

    #[test]
    fn equidistant_basis_ties_break_by_index() {
        let basis: Vec<Vec<f32>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                v
            })
            .collect();
        assert_eq!(k_nearest_neighbors(&basis, &basis[0], 3, Some(0)).unwrap(), vec![1, 2, 3]);
        assert_eq!(k_nearest_neighbors(&basis, &basis[0], 1, None).unwrap(), vec![0]);
        assert!(k_nearest_neighbors(&basis, &basis[0], 4, Some(0)).is_err());
    }
}

//! Bounded memory bank of per-frame visual features.
//!
//! Frames are ingested one at a time. When the bank holds one entry more
//! than its capacity, the adjacent pair whose mean-pooled features have the
//! highest cosine similarity is merged into a single entry by
//! weight-proportional averaging (earlier pair wins ties). An entry's
//! feature is therefore always the mean of the frames it covers.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry<T: Real = f32> {
    /// `[P, d_v]` patch features.
    pub feature: Tensor<T>,
    /// Number of ingested frames merged into this entry.
    pub weight: usize,
    /// First and last original frame index covered.
    pub span: (usize, usize),
    /// First and last ingestion ordinal covered (0-based).
    pub rows: (usize, usize),
}

impl<T: Real> BankEntry<T> {
    /// Midpoint of the span, used as the entry's temporal position.
    pub fn position(&self) -> f64 {
        (self.span.0 as f64 + self.span.1 as f64) / 2.0
    }

    fn pooled(&self) -> Vec<f64> {
        let s = self.feature.shape();
        let (p, d) = (s[0], s[1]);
        let x = self.feature.data();
        (0..d)
            .map(|j| (0..p).map(|i| x[i * d + j].as_f64()).sum::<f64>() / p as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Real = f32> {
    capacity: usize,
    entries: Vec<BankEntry<T>>,
    last_index: Option<usize>,
    ingested: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl<T: Real> MemoryBank<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Bank("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
            last_index: None,
            ingested: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry<T>] {
        &self.entries
    }

    /// Frames ingested so far.
    pub fn ingested(&self) -> usize {
        self.ingested
    }

    /// Appends a `[P, d_v]` frame. Returns the left index of the merged
    /// pair if the bank overflowed.
    pub fn ingest(&mut self, feature: Tensor<T>, frame_index: usize) -> Result<Option<usize>> {
        if let Some(last) = self.last_index {
            if frame_index <= last {
                return Err(Error::Bank(format!(
                    "frame index {frame_index} does not follow {last}"
                )));
            }
        }
        if feature.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: feature.shape().to_vec(),
                reason: "bank frames must be [P, d_v]".into(),
            });
        }
        if let Some(first) = self.entries.first() {
            if first.feature.shape() != feature.shape() {
                return Err(Error::Shape {
                    op: "ingest",
                    lhs: first.feature.shape().to_vec(),
                    rhs: feature.shape().to_vec(),
                });
            }
        }
        let row = self.ingested;
        self.entries.push(BankEntry {
            feature,
            weight: 1,
            span: (frame_index, frame_index),
            rows: (row, row),
        });
        self.last_index = Some(frame_index);
        self.ingested += 1;
        Ok(if self.entries.len() > self.capacity {
            self.compress()
        } else {
            None
        })
    }

    /// Cosine similarity of each adjacent pair `(i, i + 1)`.
    pub fn adjacent_similarities(&self) -> Vec<f64> {
        let pooled: Vec<Vec<f64>> = self.entries.iter().map(BankEntry::pooled).collect();
        pooled.windows(2).map(|w| cosine(&w[0], &w[1])).collect()
    }

    /// Merges the most similar adjacent pair if the bank is over capacity.
    pub fn compress(&mut self) -> Option<usize> {
        if self.entries.len() <= self.capacity || self.entries.len() < 2 {
            return None;
        }
        let sims = self.adjacent_similarities();
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = i;
            }
        }
        let right = self.entries.remove(best + 1);
        let left = &mut self.entries[best];
        let total = left.weight + right.weight;
        let (wl, wr) = (
            T::of(left.weight as f64 / total as f64),
            T::of(right.weight as f64 / total as f64),
        );
        for (a, &b) in left.feature.data_mut().iter_mut().zip(right.feature.data()) {
            *a = *a * wl + b * wr;
        }
        left.weight = total;
        left.span.1 = right.span.1;
        left.rows.1 = right.rows.1;
        Some(best)
    }

    /// Entry features concatenated in span order as `[(len·P), d_v]`, plus
    /// the position of each entry.
    pub fn read(&self) -> Result<(Tensor<T>, Vec<f64>)> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::Bank("read from an empty bank".into()))?;
        let (p, d) = (first.feature.shape()[0], first.feature.shape()[1]);
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.feature.data().iter().copied())
            .collect();
        let t = Tensor::new(&[self.entries.len() * p, d], data)?;
        Ok((t, self.entries.iter().map(BankEntry::position).collect()))
    }

    /// Verifies capacity, span partition and weight conservation.
    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Bank(format!(
                "{} entries exceed capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let total: usize = self.entries.iter().map(|e| e.weight).sum();
        if total != self.ingested {
            return Err(Error::Bank(format!(
                "weights sum to {total} but {} frames were ingested",
                self.ingested
            )));
        }
        let mut next_row = 0;
        let mut prev_end: Option<usize> = None;
        for e in &self.entries {
            if e.rows.0 != next_row || e.rows.1 < e.rows.0 || e.rows.1 - e.rows.0 + 1 != e.weight {
                return Err(Error::Bank(format!("entry rows {:?} break the partition", e.rows)));
            }
            if e.span.1 < e.span.0 || prev_end.is_some_and(|p| e.span.0 <= p) {
                return Err(Error::Bank(format!("span {:?} is out of order", e.span)));
            }
            next_row = e.rows.1 + 1;
            prev_end = Some(e.span.1);
        }
        Ok(())
    }
}

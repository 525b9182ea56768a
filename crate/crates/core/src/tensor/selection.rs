use crate::error::{Error, Result};

/// Per-sample list of selected flattened spatial positions (`i·W + j`).
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SelectionIndex {
    per_sample: Vec<Vec<usize>>,
}

impl SelectionIndex {
    /// Validates uniform length, range `[0, positions)` and uniqueness.
    pub fn new(per_sample: Vec<Vec<usize>>, positions: usize) -> Result<Self> {
        let k = per_sample.first().map_or(0, Vec::len);
        let mut seen = vec![usize::MAX; positions];
        for (b, row) in per_sample.iter().enumerate() {
            if row.len() != k {
                return Err(Error::contract(format!(
                    "selection for sample {b} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for &idx in row {
                if idx >= positions || seen[idx] == b {
                    return Err(Error::Index {
                        op: "selection",
                        sample: b,
                        index: idx,
                        limit: positions,
                    });
                }
                seen[idx] = b;
            }
        }
        Ok(Self { per_sample })
    }

    pub fn batch(&self) -> usize {
        self.per_sample.len()
    }

    /// Tokens per sample.
    pub fn k(&self) -> usize {
        self.per_sample.first().map_or(0, Vec::len)
    }

    pub fn sample(&self, b: usize) -> &[usize] {
        &self.per_sample[b]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.per_sample.iter().map(Vec::as_slice)
    }

    pub(crate) fn check_against(&self, batch: usize, positions: usize, op: &'static str) -> Result<()> {
        if self.batch() != batch {
            return Err(Error::dim(op, &[self.batch()], &[batch]));
        }
        for (b, row) in self.per_sample.iter().enumerate() {
            if let Some(&bad) = row.iter().find(|&&i| i >= positions) {
                return Err(Error::Index { op, sample: b, index: bad, limit: positions });
            }
        }
        Ok(())
    }
}

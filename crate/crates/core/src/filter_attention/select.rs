use rand::Rng;

use super::ImportanceMap;
use crate::error::{Error, Result};
use crate::tensor::{Element, SelectionIndex};

/// Per sample, the `k` highest-scoring positions in descending score order;
/// equal scores go to the smaller flattened index.
pub fn top_k_select<T: Element>(imp: &ImportanceMap<T>, k: usize) -> Result<SelectionIndex> {
    let hw = imp.height() * imp.width();
    if k == 0 || k > hw {
        return Err(Error::config("k", format!("K = {k} must be in 1..={hw}")));
    }
    let rows = (0..imp.batch())
        .map(|b| {
            let scores = imp.sample(b);
            let mut order: Vec<usize> = (0..hw).collect();
            let cmp = |a: &usize, c: &usize| scores[*c].to_f64c().total_cmp(&scores[*a].to_f64c()).then(a.cmp(c));
            if k < hw {
                order.select_nth_unstable_by(k - 1, cmp);
                order.truncate(k);
            }
            order.sort_unstable_by(cmp);
            order
        })
        .collect();
    SelectionIndex::new(rows, hw)
}

/// `k` distinct positions per sample, uniformly at random; each row sorted ascending.
pub fn random_select(batch: usize, positions: usize, k: usize, rng: &mut impl Rng) -> Result<SelectionIndex> {
    if k == 0 || k > positions {
        return Err(Error::config("k", format!("K = {k} must be in 1..={positions}")));
    }
    let rows = (0..batch)
        .map(|_| {
            let mut row = rand::seq::index::sample(rng, positions, k).into_vec();
            row.sort_unstable();
            row
        })
        .collect();
    SelectionIndex::new(rows, positions)
}

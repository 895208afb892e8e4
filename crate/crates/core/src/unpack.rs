//! The unpacking transform.
//!
//! Each source row with cell weights `w` is replaced by one incomplete row per
//! distinct positive weight level. Level `s` observes every cell whose weight
//! is at least the `s`-th largest distinct weight and carries row weight
//! `w(s) - w(s+1)` (with `w(q+1) = 0`). The rowwise weighted observed
//! likelihood of the result equals the cellwise weighted likelihood of the
//! original data.

use rayon::prelude::*;

use crate::data::{IncompleteRow, UnpackedDataset, WeightedDataset};
use crate::error::{Error, Result};

/// Distinct positive weights of one row, largest first, with the columns
/// carrying each weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDecomposition {
    pub unique_weights: Vec<f64>,
    pub index_sets: Vec<Vec<usize>>,
}

impl LevelDecomposition {
    pub fn levels(&self) -> usize {
        self.unique_weights.len()
    }
}

/// Groups the positive weights of a row into levels. Ties use exact `==`.
pub fn decompose_row(weights: &[f64]) -> Result<LevelDecomposition> {
    let mut positive: Vec<(f64, usize)> = weights
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, w)| w > 0.0)
        .map(|(j, w)| (w, j))
        .collect();
    if positive.is_empty() {
        return Err(Error::RowWithoutInformation { row: 0 });
    }
    // Descending by weight, ascending by column within a tie.
    positive.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut unique_weights: Vec<f64> = Vec::new();
    let mut index_sets: Vec<Vec<usize>> = Vec::new();
    for (w, j) in positive {
        if unique_weights.last() == Some(&w) {
            index_sets.last_mut().expect("level exists").push(j);
        } else {
            unique_weights.push(w);
            index_sets.push(vec![j]);
        }
    }
    Ok(LevelDecomposition {
        unique_weights,
        index_sets,
    })
}

/// Unpacks one row into its incomplete rows, smallest observed set first.
pub fn unpack_row(x: &[f64], weights: &[f64], source_index: usize) -> Result<Vec<IncompleteRow>> {
    if x.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "row has {} values but {} weights",
            x.len(),
            weights.len()
        )));
    }
    let levels =
        decompose_row(weights).map_err(|_| Error::RowWithoutInformation { row: source_index })?;
    let q = levels.levels();
    let mut values = vec![None; x.len()];
    let mut rows = Vec::with_capacity(q);
    for s in 0..q {
        for &j in &levels.index_sets[s] {
            values[j] = Some(x[j]);
        }
        let next = levels.unique_weights.get(s + 1).copied().unwrap_or(0.0);
        rows.push(IncompleteRow {
            values: values.clone(),
            row_weight: levels.unique_weights[s] - next,
            source_index,
            level_index: s,
        });
    }
    Ok(rows)
}

/// Unpacks every informative row of `ds`, in source order. Rows whose
/// weights are all zero are dropped.
pub fn unpack_dataset(ds: &WeightedDataset) -> Result<UnpackedDataset> {
    let x = ds.values();
    let w = ds.weights();
    let per_row: Vec<Vec<IncompleteRow>> = (0..ds.nrows())
        .into_par_iter()
        .map(|i| {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let wi: Vec<f64> = w.row(i).iter().copied().collect();
            match unpack_row(&xi, &wi, i) {
                Ok(rows) => Ok(rows),
                Err(Error::RowWithoutInformation { .. }) => Ok(Vec::new()),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let rows: Vec<IncompleteRow> = per_row.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::NoInformation);
    }
    UnpackedDataset::new(rows, ds.ncols())
}

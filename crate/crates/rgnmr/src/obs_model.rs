//! Data model for partially observed matrices.
//!
//! An [`ObservationSet`] holds the sampled entries of a matrix together with
//! per-row and per-column index structure. An [`EntrySet`] is a subset of the
//! entry positions of a specific observation set; it is how suspected-outlier
//! masks are represented throughout the crate.
//!
//! Entries are stored row-major sorted by `(row, col)`. Every value sequence
//! exchanged with the masked-entry operations below is aligned to that
//! canonical order.

use crate::error::{Error, Result};

/// The observed entries of an `n_rows x n_cols` matrix.
///
/// Immutable after construction; all operations are pure functions, so values
/// can be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    values: Vec<f64>,
    /// Entry positions of each row, in increasing (hence column) order.
    row_index: Vec<Vec<u32>>,
    /// Entry positions of each column, in increasing (hence row) order.
    col_index: Vec<Vec<u32>>,
}

impl ObservationSet {
    /// Builds an observation set from `(row, col, value)` triplets.
    ///
    /// Triplets may arrive in any order; they are sorted into row-major
    /// order. Out-of-bounds indices, duplicate positions and non-finite
    /// values are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if n_rows > u32::MAX as usize || n_cols > u32::MAX as usize {
            return Err(Error::invalid("matrix dimensions exceed u32 range"));
        }
        let mut entries: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, v) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::invalid(format!(
                    "entry ({i}, {j}) out of bounds for {n_rows}x{n_cols}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite value at ({i}, {j})")));
            }
            entries.push((i as u32, j as u32, v));
        }
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::invalid(format!(
                    "duplicate entry ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let rows: Vec<u32> = entries.iter().map(|e| e.0).collect();
        let cols: Vec<u32> = entries.iter().map(|e| e.1).collect();
        let values: Vec<f64> = entries.iter().map(|e| e.2).collect();
        let mut row_index = vec![Vec::new(); n_rows];
        let mut col_index = vec![Vec::new(); n_cols];
        for (pos, (&i, &j)) in rows.iter().zip(cols.iter()).enumerate() {
            row_index[i as usize].push(pos as u32);
            col_index[j as usize].push(pos as u32);
        }
        Ok(ObservationSet {
            n_rows,
            n_cols,
            rows,
            cols,
            values,
            row_index,
            col_index,
        })
    }

    /// Builds an observation set over a sampling pattern, with values taken
    /// from an entrywise evaluator.
    pub fn from_pattern(
        n_rows: usize,
        n_cols: usize,
        pattern: &[(u32, u32)],
        mut eval: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        Self::from_triplets(
            n_rows,
            n_cols,
            pattern
                .iter()
                .map(|&(i, j)| (i as usize, j as usize, eval(i as usize, j as usize))),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of observed entries.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Estimated sampling probability `|observed| / (n_rows * n_cols)`.
    pub fn p_hat(&self) -> f64 {
        self.len() as f64 / (self.n_rows as f64 * self.n_cols as f64)
    }

    /// Row index of the `pos`-th entry.
    pub fn row_of(&self, pos: usize) -> usize {
        self.rows[pos] as usize
    }

    /// Column index of the `pos`-th entry.
    pub fn col_of(&self, pos: usize) -> usize {
        self.cols[pos] as usize
    }

    pub fn value_of(&self, pos: usize) -> f64 {
        self.values[pos]
    }

    pub fn rows(&self) -> &[u32] {
        &self.rows
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    /// All observed values in canonical entry order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of observed entries in row `i`.
    pub fn row_count(&self, i: usize) -> usize {
        self.row_index[i].len()
    }

    /// Number of observed entries in column `j`.
    pub fn col_count(&self, j: usize) -> usize {
        self.col_index[j].len()
    }

    /// Entry positions of row `i`.
    pub fn row_entries(&self, i: usize) -> &[u32] {
        &self.row_index[i]
    }

    /// Entry positions of column `j`.
    pub fn col_entries(&self, j: usize) -> &[u32] {
        &self.col_index[j]
    }

    /// Iterates over `(row, col, value)` in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).map(move |p| (self.rows[p] as usize, self.cols[p] as usize, self.values[p]))
    }

    /// Returns a copy with the same pattern but different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::invalid("value sequence length mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value"));
        }
        let mut out = self.clone();
        out.values = values;
        Ok(out)
    }

    /// Frobenius norm of the observed values.
    pub fn values_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A subset of the entry positions of a specific [`ObservationSet`].
///
/// Membership is stored as sorted entry positions, so set equality is plain
/// slice equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntrySet {
    parent_dims: (usize, usize),
    parent_len: usize,
    members: Vec<u32>,
}

impl EntrySet {
    /// Builds an entry set from positions into `parent`'s entry order.
    /// Positions are sorted and deduplicated.
    pub fn from_positions(parent: &ObservationSet, positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut members: Vec<u32> = Vec::new();
        for p in positions {
            if p >= parent.len() {
                return Err(Error::invalid(format!(
                    "entry position {p} out of range for parent with {} entries",
                    parent.len()
                )));
            }
            members.push(p as u32);
        }
        members.sort_unstable();
        members.dedup();
        Ok(EntrySet {
            parent_dims: (parent.n_rows, parent.n_cols),
            parent_len: parent.len(),
            members,
        })
    }

    pub fn empty(parent: &ObservationSet) -> Self {
        EntrySet {
            parent_dims: (parent.n_rows, parent.n_cols),
            parent_len: parent.len(),
            members: Vec::new(),
        }
    }

    pub fn cardinality(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn parent_dims(&self) -> (usize, usize) {
        self.parent_dims
    }

    /// Sorted entry positions into the parent's entry order.
    pub fn positions(&self) -> &[u32] {
        &self.members
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.members.binary_search(&(pos as u32)).is_ok()
    }

    /// Membership mask aligned with the parent's entry order.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.parent_len];
        for &p in &self.members {
            mask[p as usize] = true;
        }
        mask
    }

    /// True iff `self` contains every member of `other`.
    pub fn is_superset_of(&self, other: &EntrySet) -> bool {
        other.members.iter().all(|&p| self.contains(p as usize))
    }

    fn check_parent(&self, obs: &ObservationSet) -> Result<()> {
        if self.parent_dims != (obs.n_rows, obs.n_cols) || self.parent_len != obs.len() {
            return Err(Error::invalid(
                "entry set does not reference this observation set",
            ));
        }
        Ok(())
    }
}

/// Evaluates a dense matrix expression on the observed positions only,
/// returning values aligned with the entry order.
pub fn values_on(obs: &ObservationSet, mut eval: impl FnMut(usize, usize) -> f64) -> Vec<f64> {
    (0..obs.len())
        .map(|p| eval(obs.rows[p] as usize, obs.cols[p] as usize))
        .collect()
}

/// Positions of the `k` largest residuals by magnitude.
///
/// Ties are broken by smallest `(row, col)` position, which coincides with
/// the canonical entry order, so the result does not depend on how the
/// observation set was assembled.
pub fn top_k_entries(obs: &ObservationSet, residual_values: &[f64], k: usize) -> Result<EntrySet> {
    if residual_values.len() != obs.len() {
        return Err(Error::invalid(format!(
            "residual sequence has length {}, expected {}",
            residual_values.len(),
            obs.len()
        )));
    }
    if k > obs.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of observed entries {}",
            obs.len()
        )));
    }
    let mut order: Vec<u32> = (0..obs.len() as u32).collect();
    // Sort by magnitude descending, position ascending. total_cmp keeps the
    // comparator total even for pathological inputs.
    order.sort_unstable_by(|&a, &b| {
        residual_values[b as usize]
            .abs()
            .total_cmp(&residual_values[a as usize].abs())
            .then(a.cmp(&b))
    });
    order.truncate(k);
    EntrySet::from_positions(obs, order.into_iter().map(|p| p as usize))
}

/// Support of the row/column fraction-thresholding operator.
///
/// Keeps `(i, j)` iff `|A_ij|` strictly exceeds both the `ceil(theta * r_i)`-th
/// largest magnitude within row `i` and the `ceil(theta * c_j)`-th largest
/// within column `j`. When `ceil(theta * r_i) = 0` the row threshold is taken
/// as `+inf`, so nothing qualifies through that row (and likewise for
/// columns); in particular `theta = 0` yields the empty set.
pub fn threshold_top_fraction(
    obs: &ObservationSet,
    values: &[f64],
    theta: f64,
) -> Result<EntrySet> {
    if values.len() != obs.len() {
        return Err(Error::invalid(format!(
            "value sequence has length {}, expected {}",
            values.len(),
            obs.len()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta = {theta} outside [0, 1]")));
    }
    let row_thresholds = order_statistic_thresholds(&obs.row_index, values, theta);
    let col_thresholds = order_statistic_thresholds(&obs.col_index, values, theta);
    let kept = (0..obs.len()).filter(|&p| {
        let m = values[p].abs();
        m > row_thresholds[obs.rows[p] as usize] && m > col_thresholds[obs.cols[p] as usize]
    });
    EntrySet::from_positions(obs, kept)
}

/// For each line (row or column), the `ceil(theta * count)`-th largest
/// magnitude, or `+inf` when that order statistic index is zero.
fn order_statistic_thresholds(index: &[Vec<u32>], values: &[f64], theta: f64) -> Vec<f64> {
    index
        .iter()
        .map(|line| {
            let k = (theta * line.len() as f64).ceil() as usize;
            if k == 0 {
                return f64::INFINITY;
            }
            let mut mags: Vec<f64> = line.iter().map(|&p| values[p as usize].abs()).collect();
            mags.sort_unstable_by(|a, b| b.total_cmp(a));
            mags[k - 1]
        })
        .collect()
}

/// Materializes the observation set over the complement of `removed`.
pub fn restrict(obs: &ObservationSet, removed: &EntrySet) -> Result<ObservationSet> {
    removed.check_parent(obs)?;
    let mask = removed.mask();
    ObservationSet::from_triplets(
        obs.n_rows,
        obs.n_cols,
        obs.iter()
            .enumerate()
            .filter(|(p, _)| !mask[*p])
            .map(|(_, t)| t),
    )
}

/// True iff both sets reference the same parent shape and have identical
/// membership.
pub fn sets_equal(a: &EntrySet, b: &EntrySet) -> bool {
    a.parent_dims == b.parent_dims && a.parent_len == b.parent_len && a.members == b.members
}

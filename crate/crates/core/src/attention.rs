//! Attention aggregation: the cross-attention saliency map, pooling onto the analysis
//! grid, visual attention mass of a decoding step and its token-to-token shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Cell;
use crate::scalar::Real;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] = out.data[i * other.cols + j] + a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }
}

/// Text and vision hidden states with the query/key projections of one attention layer.
#[derive(Debug, Clone)]
pub struct HiddenStates<T> {
    /// `n_T × d`
    pub text: Matrix<T>,
    /// `n_V × d`
    pub vision: Matrix<T>,
    /// `d × d_K`
    pub w_q: Matrix<T>,
    /// `d × d_K`
    pub w_k: Matrix<T>,
}

/// Numerically stable softmax over one row, in place.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Text-to-vision cross-attention weights `softmax((H_T W_Q)(H_V W_K)^T / sqrt(d_K))`,
/// one row per text token.
pub fn cross_attention_map<T: Real>(h: &HiddenStates<T>) -> Result<Matrix<T>> {
    let d = h.text.cols();
    if h.vision.cols() != d || h.w_q.rows() != d || h.w_k.rows() != d {
        return Err(Error::Shape(format!(
            "hidden width {d} vs vision {} / W_Q {} / W_K {}",
            h.vision.cols(),
            h.w_q.rows(),
            h.w_k.rows()
        )));
    }
    let d_k = h.w_q.cols();
    if d_k == 0 || h.w_k.cols() != d_k {
        return Err(Error::Shape(format!("key width {d_k} vs {}", h.w_k.cols())));
    }
    if h.vision.rows() == 0 {
        return Err(Error::Shape("no visual tokens".into()));
    }
    let q = h.text.matmul(&h.w_q)?;
    let k = h.vision.matmul(&h.w_k)?;
    let mut logits = q.matmul(&k.transpose())?;
    let scale = T::lit(d_k as f64).sqrt();
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        for v in row.iter_mut() {
            *v = *v / scale;
        }
        softmax_in_place(row);
    }
    Ok(logits)
}

/// Non-negative saliency scores over the `grid_size × grid_size` analysis grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAttentionMap<T> {
    grid_size: usize,
    scores: Vec<T>,
}

impl<T: Real> GridAttentionMap<T> {
    pub fn new(grid_size: usize, scores: Vec<T>) -> Result<Self> {
        if scores.len() != grid_size * grid_size {
            return Err(Error::Shape(format!("{} scores for a {grid_size}x{grid_size} grid", scores.len())));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::Contract("grid scores must be finite and non-negative".into()));
        }
        Ok(Self { grid_size, scores })
    }

    pub fn uniform(grid_size: usize) -> Self {
        Self { grid_size, scores: vec![T::one(); grid_size * grid_size] }
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn score(&self, (row, col): Cell) -> T {
        self.scores[row * self.grid_size + col]
    }

    pub fn total(&self) -> T {
        self.scores.iter().copied().sum()
    }

    /// A map is usable for ranking when at least one cell carries mass.
    pub fn is_informative(&self) -> bool {
        self.scores.iter().any(|s| *s > T::zero())
    }

    /// Sum of scores over `cells`.
    pub fn mass_on(&self, cells: impl IntoIterator<Item = Cell>) -> T {
        cells.into_iter().map(|c| self.score(c)).sum()
    }
}

/// Assignment of each visual patch (column of a cross-attention matrix) to a grid cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMap {
    grid_size: usize,
    cells: Vec<Option<Cell>>,
}

impl PatchMap {
    pub fn new(grid_size: usize, cells: Vec<Option<Cell>>) -> Self {
        Self { grid_size, cells }
    }

    /// One patch per cell in row-major order.
    pub fn identity(grid_size: usize) -> Self {
        let cells = (0..grid_size * grid_size).map(|i| Some((i / grid_size, i % grid_size))).collect();
        Self { grid_size, cells }
    }

    /// Patches laid out as a `side × side` square (row-major) pooled proportionally onto the
    /// analysis grid. Falls back to a 1-D proportional split when `n_patches` is not square.
    pub fn square(n_patches: usize, grid_size: usize) -> Self {
        let side = (n_patches as f64).sqrt().round() as usize;
        let cells = if side * side == n_patches && side > 0 {
            (0..n_patches)
                .map(|p| {
                    let (pr, pc) = (p / side, p % side);
                    Some((pr * grid_size / side, pc * grid_size / side))
                })
                .collect()
        } else {
            let total = grid_size * grid_size;
            (0..n_patches)
                .map(|p| {
                    let i = p * total / n_patches.max(1);
                    Some((i / grid_size, i % grid_size))
                })
                .collect()
        };
        Self { grid_size, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowReduction {
    /// Average over all text rows.
    #[default]
    Mean,
    /// Final text row only.
    Last,
}

/// Pools an `n_T × n_V` attention matrix onto the analysis grid. Each cell receives the
/// sum of the row-reduced attention over its patches.
pub fn pool_to_grid<T: Real>(raw: &Matrix<T>, patches: &PatchMap, reduce: RowReduction) -> Result<GridAttentionMap<T>> {
    if raw.rows() == 0 {
        return Err(Error::Shape("attention matrix has no rows".into()));
    }
    if patches.len() != raw.cols() {
        return Err(Error::Shape(format!("{} patch assignments for {} visual columns", patches.len(), raw.cols())));
    }
    let reduced: Vec<T> = match reduce {
        RowReduction::Last => raw.row(raw.rows() - 1).to_vec(),
        RowReduction::Mean => {
            let n = T::lit(raw.rows() as f64);
            (0..raw.cols()).map(|c| (0..raw.rows()).map(|r| raw.get(r, c)).sum::<T>() / n).collect()
        }
    };
    let g = patches.grid_size;
    let mut scores = vec![T::zero(); g * g];
    for (col, value) in reduced.into_iter().enumerate() {
        let (r, c) = patches.cells[col].ok_or(Error::Mapping(col))?;
        if r >= g || c >= g {
            return Err(Error::Mapping(col));
        }
        scores[r * g + c] = scores[r * g + c] + value;
    }
    GridAttentionMap::new(g, scores)
}

/// Head-averaged attention rows of the current decoding step for the last layers of the
/// model, over every position of the current context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot<T> {
    pub per_layer: Vec<Vec<T>>,
    pub context_len: usize,
    /// Sorted positions of visual tokens (image patches and inserted region tokens).
    pub visual_indices: Vec<usize>,
}

impl<T: Real> AttentionSnapshot<T> {
    pub fn validate(&self) -> Result<()> {
        if self.per_layer.is_empty() {
            return Err(Error::Contract("attention snapshot has no layers".into()));
        }
        for (l, row) in self.per_layer.iter().enumerate() {
            if row.len() != self.context_len {
                return Err(Error::Contract(format!(
                    "layer {l} row has {} entries for context length {}",
                    row.len(),
                    self.context_len
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < T::zero()) {
                return Err(Error::Contract(format!("layer {l} row has a negative entry")));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > T::norm_tolerance() {
                return Err(Error::Contract(format!("layer {l} row sums to {sum}")));
            }
        }
        if self.visual_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("visual indices must be strictly increasing".into()));
        }
        if self.visual_indices.last().is_some_and(|&i| i >= self.context_len) {
            return Err(Error::Contract("visual index beyond context".into()));
        }
        Ok(())
    }

    /// Keeps only the final `n` layers.
    pub fn last_layers(&self, n: usize) -> Result<AttentionSnapshot<T>> {
        if n == 0 || n > self.per_layer.len() {
            return Err(Error::Contract(format!("requested {n} layers of {}", self.per_layer.len())));
        }
        Ok(AttentionSnapshot {
            per_layer: self.per_layer[self.per_layer.len() - n..].to_vec(),
            context_len: self.context_len,
            visual_indices: self.visual_indices.clone(),
        })
    }

    /// Across-layer mean attention row.
    pub fn mean_row(&self) -> Result<Vec<T>> {
        if self.per_layer.is_empty() {
            return Err(Error::Contract("attention snapshot has no layers".into()));
        }
        let n = T::lit(self.per_layer.len() as f64);
        Ok((0..self.context_len).map(|i| self.per_layer.iter().map(|row| row[i]).sum::<T>() / n).collect())
    }
}

/// Total attention the current token pays to visual context, averaged over layers.
pub fn visual_attention_mass<T: Real>(snap: &AttentionSnapshot<T>) -> Result<T> {
    let mean = snap.mean_row()?;
    snap.visual_indices
        .iter()
        .map(|&i| mean.get(i).copied().ok_or_else(|| Error::Contract(format!("visual index {i} beyond context"))))
        .sum()
}

/// Signed change in visual attention mass between consecutive generated tokens.
pub fn attention_shift<T: Real>(curr: T, prev: T) -> T {
    curr - prev
}

//! Structured linear algebra for tree-structured design matrices.
//!
//! A random-effect design matrix `A` (N × k·d) has at most one nonzero
//! `d`-block per row: observation `i` touches only the columns of its group
//! `g_i`. It is stored row-compressed as `(group_of[i], coeff_row[i])` and is
//! never densified on the evaluation paths. Products `A s`, `Aᵀ t` cost
//! O(N d) and `Aᵀ W A` is block diagonal and costs O(N d²).

use nalgebra::DMatrix;

use crate::error::{dim_check, Error, Result};

/// Absolute tolerance for structural (exact-arithmetic) identities.
pub const STRUCTURAL_TOL: f64 = 1e-12;
/// Tolerance for results that pass through a factorization.
pub const DECOMPOSITION_TOL: f64 = 1e-10;

/// Per-thread operation counters, used by tests to check complexity claims.
pub mod counters {
    use std::cell::Cell;

    thread_local! {
        static COEFF_READS: Cell<u64> = const { Cell::new(0) };
        static GRAM_MACS: Cell<u64> = const { Cell::new(0) };
    }

    /// Design-matrix coefficients read by `apply`/`apply_transpose`.
    pub fn coeff_reads() -> u64 {
        COEFF_READS.with(|c| c.get())
    }

    /// Multiply-accumulate updates into gram blocks.
    pub fn gram_macs() -> u64 {
        GRAM_MACS.with(|c| c.get())
    }

    pub fn reset() {
        COEFF_READS.with(|c| c.set(0));
        GRAM_MACS.with(|c| c.set(0));
    }

    pub(crate) fn add_coeff_reads(n: u64) {
        COEFF_READS.with(|c| c.set(c.get() + n));
    }

    pub(crate) fn add_gram_macs(n: u64) {
        GRAM_MACS.with(|c| c.set(c.get() + n));
    }
}

/// Diagonal matrix of strictly positive entries (observation variances).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMatrix {
    entries: Vec<f64>,
}

impl DiagonalMatrix {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!(
                "diagonal entry {i} must be positive and finite, got {v}"
            )));
        }
        Ok(Self { entries })
    }

    pub fn constant(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn inverse(&self) -> DiagonalMatrix {
        DiagonalMatrix {
            entries: self.entries.iter().map(|v| 1.0 / v).collect(),
        }
    }

    pub fn logdet(&self) -> f64 {
        self.entries.iter().map(|v| v.ln()).sum()
    }
}

/// Tree-structured sparse design matrix, one `d`-block per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_groups: usize,
    block_dim: usize,
    group_of: Vec<usize>,
    coeffs: Vec<f64>,
}

impl DesignMatrix {
    /// `coeffs` holds the N × d coefficient rows in row-major order.
    pub fn new(
        n_groups: usize,
        block_dim: usize,
        group_of: Vec<usize>,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if block_dim == 0 {
            return Err(Error::InvalidArgument("block_dim must be positive".into()));
        }
        dim_check("coefficient rows", group_of.len() * block_dim, coeffs.len())?;
        if let Some((i, g)) = group_of.iter().enumerate().find(|(_, g)| **g >= n_groups) {
            return Err(Error::InvalidArgument(format!(
                "row {i}: group index {g} out of range 0..{n_groups}"
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        Ok(Self {
            n_groups,
            block_dim,
            group_of,
            coeffs,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.group_of.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Logical column count M = k·d.
    pub fn n_cols(&self) -> usize {
        self.n_groups * self.block_dim
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.block_dim;
        &self.coeffs[i * d..(i + 1) * d]
    }

    /// Coefficient column `j` (length N), i.e. the covariate feeding effect coordinate `j`.
    pub fn coeff_column(&self, j: usize) -> Vec<f64> {
        (0..self.n_obs()).map(|i| self.row(i)[j]).collect()
    }

    /// Same sparsity, coefficients multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> DesignMatrix {
        DesignMatrix {
            n_groups: self.n_groups,
            block_dim: self.block_dim,
            group_of: self.group_of.clone(),
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// `A s`.
    pub fn apply(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_obs()];
        self.apply_add(s, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += alpha · A s`.
    pub fn apply_add(&self, s: &[f64], alpha: f64, out: &mut [f64]) -> Result<()> {
        dim_check("design_apply input", self.n_cols(), s.len())?;
        dim_check("design_apply output", self.n_obs(), out.len())?;
        let d = self.block_dim;
        for (i, (o, &g)) in out.iter_mut().zip(&self.group_of).enumerate() {
            let block = &s[g * d..(g + 1) * d];
            let dot: f64 = self.row(i).iter().zip(block).map(|(a, b)| a * b).sum();
            *o += alpha * dot;
        }
        counters::add_coeff_reads((self.n_obs() * d) as u64);
        Ok(())
    }

    /// `Aᵀ t`.
    pub fn apply_transpose(&self, t: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_cols()];
        self.apply_transpose_add(t, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += alpha · Aᵀ t`.
    pub fn apply_transpose_add(&self, t: &[f64], alpha: f64, out: &mut [f64]) -> Result<()> {
        dim_check("design_apply_transpose input", self.n_obs(), t.len())?;
        dim_check("design_apply_transpose output", self.n_cols(), out.len())?;
        let d = self.block_dim;
        for (i, (&ti, &g)) in t.iter().zip(&self.group_of).enumerate() {
            let slot = &mut out[g * d..(g + 1) * d];
            for (o, a) in slot.iter_mut().zip(self.row(i)) {
                *o += alpha * a * ti;
            }
        }
        counters::add_coeff_reads((self.n_obs() * d) as u64);
        Ok(())
    }

    /// `Aᵀ diag(w) A` as a block-diagonal matrix; `w` are inverse variances.
    pub fn gram(&self, w: &[f64]) -> Result<BlockDiagonal> {
        dim_check("design_gram weights", self.n_obs(), w.len())?;
        let d = self.block_dim;
        let mut out = BlockDiagonal::zeros(self.n_groups, d);
        let mut macs = 0u64;
        for (i, (&wi, &g)) in w.iter().zip(&self.group_of).enumerate() {
            let r = self.row(i);
            let block = out.block_mut(g);
            // lower triangle only, mirrored below
            for a in 0..d {
                let wa = wi * r[a];
                for b in 0..=a {
                    block[a * d + b] += wa * r[b];
                }
            }
            macs += (d * (d + 1) / 2) as u64;
        }
        for j in 0..self.n_groups {
            let block = out.block_mut(j);
            for a in 0..d {
                for b in 0..a {
                    block[b * d + a] = block[a * d + b];
                }
            }
        }
        counters::add_gram_macs(macs);
        Ok(out)
    }

    /// Dense N × M copy. Reference and test use only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.block_dim;
        let mut m = DMatrix::zeros(self.n_obs(), self.n_cols());
        for i in 0..self.n_obs() {
            let g = self.group_of[i];
            for (j, c) in self.row(i).iter().enumerate() {
                m[(i, g * d + j)] = *c;
            }
        }
        m
    }
}

/// `k` dense `d × d` blocks on the diagonal of an M × M matrix (M = k·d).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonal {
    n_blocks: usize,
    block_dim: usize,
    data: Vec<f64>,
}

impl BlockDiagonal {
    /// `data` holds the blocks back to back, each in row-major order.
    pub fn new(n_blocks: usize, block_dim: usize, data: Vec<f64>) -> Result<Self> {
        dim_check("block data", n_blocks * block_dim * block_dim, data.len())?;
        Ok(Self {
            n_blocks,
            block_dim,
            data,
        })
    }

    pub fn zeros(n_blocks: usize, block_dim: usize) -> Self {
        Self {
            n_blocks,
            block_dim,
            data: vec![0.0; n_blocks * block_dim * block_dim],
        }
    }

    pub fn identity(n_blocks: usize, block_dim: usize) -> Self {
        Self::replicate(n_blocks, block_dim, &identity_block(block_dim))
    }

    /// `n_blocks` copies of the same row-major block.
    pub fn replicate(n_blocks: usize, block_dim: usize, block: &[f64]) -> Self {
        assert_eq!(block.len(), block_dim * block_dim);
        let mut data = Vec::with_capacity(n_blocks * block.len());
        for _ in 0..n_blocks {
            data.extend_from_slice(block);
        }
        Self {
            n_blocks,
            block_dim,
            data,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Logical dimension M.
    pub fn dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn block(&self, j: usize) -> &[f64] {
        let s = self.block_dim * self.block_dim;
        &self.data[j * s..(j + 1) * s]
    }

    #[inline]
    pub fn block_mut(&mut self, j: usize) -> &mut [f64] {
        let s = self.block_dim * self.block_dim;
        &mut self.data[j * s..(j + 1) * s]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.block_dim * self.block_dim)
    }

    /// Elementwise sum with a matrix of identical layout.
    pub fn add(&self, other: &BlockDiagonal) -> Result<BlockDiagonal> {
        if self.n_blocks != other.n_blocks || self.block_dim != other.block_dim {
            return Err(Error::InvalidArgument("block layouts differ".into()));
        }
        Ok(BlockDiagonal {
            n_blocks: self.n_blocks,
            block_dim: self.block_dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `S v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        dim_check("block matvec", self.dim(), v.len())?;
        let d = self.block_dim;
        let mut out = vec![0.0; v.len()];
        for (j, blk) in self.blocks().enumerate() {
            let x = &v[j * d..(j + 1) * d];
            let y = &mut out[j * d..(j + 1) * d];
            for a in 0..d {
                y[a] = (0..d).map(|b| blk[a * d + b] * x[b]).sum();
            }
        }
        Ok(out)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.block_dim;
        self.blocks()
            .flat_map(|blk| {
                (0..d).flat_map(move |a| (0..a).map(move |b| (blk[a * d + b] - blk[b * d + a]).abs()))
            })
            .fold(0.0, f64::max)
    }

    /// Per-block Cholesky factorization.
    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let d = self.block_dim;
        let mut factors = self.clone();
        for j in 0..self.n_blocks {
            if !cholesky_in_place(factors.block_mut(j), d) {
                return Err(Error::NotPositiveDefinite {
                    context: "block_cholesky",
                    block: Some(j),
                });
            }
        }
        Ok(BlockCholesky { factors })
    }

    /// Dense M × M copy. Reference and test use only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.block_dim;
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (j, blk) in self.blocks().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    m[(j * d + a, j * d + b)] = blk[a * d + b];
                }
            }
        }
        m
    }
}

/// Lower-triangular Cholesky factors `L_j` with `L_j L_jᵀ = S_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCholesky {
    factors: BlockDiagonal,
}

impl BlockCholesky {
    /// Wrap factors that are already lower triangular with positive diagonal.
    pub fn from_factors(factors: BlockDiagonal) -> Result<Self> {
        let d = factors.block_dim();
        for (j, blk) in factors.blocks().enumerate() {
            for a in 0..d {
                if !(blk[a * d + a] > 0.0) || (a + 1..d).any(|b| blk[a * d + b] != 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "block {j} is not lower triangular with positive diagonal"
                    )));
                }
            }
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &BlockDiagonal {
        &self.factors
    }

    pub fn into_factors(self) -> BlockDiagonal {
        self.factors
    }

    pub fn dim(&self) -> usize {
        self.factors.dim()
    }

    /// `S⁻¹ v` by two triangular solves per block.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        dim_check("block_solve", self.dim(), v.len())?;
        let d = self.factors.block_dim;
        let mut out = v.to_vec();
        for (j, l) in self.factors.blocks().enumerate() {
            let x = &mut out[j * d..(j + 1) * d];
            forward_substitute(l, d, x);
            backward_substitute_transposed(l, d, x);
        }
        Ok(out)
    }

    /// `L⁻¹ v` (forward substitution only).
    pub fn solve_lower(&self, v: &[f64]) -> Result<Vec<f64>> {
        dim_check("block_solve_lower", self.dim(), v.len())?;
        let d = self.factors.block_dim;
        let mut out = v.to_vec();
        for (j, l) in self.factors.blocks().enumerate() {
            forward_substitute(l, d, &mut out[j * d..(j + 1) * d]);
        }
        Ok(out)
    }

    /// `L v`.
    pub fn mul_lower(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.factors.mul_vec(v)
    }

    /// `log det S = 2 Σ log diag(L_j)`.
    pub fn logdet(&self) -> f64 {
        let d = self.factors.block_dim;
        2.0 * self
            .factors
            .blocks()
            .map(|l| (0..d).map(|a| l[a * d + a].ln()).sum::<f64>())
            .sum::<f64>()
    }

    /// Explicit per-block inverse `S_j⁻¹ = L_j⁻ᵀ L_j⁻¹`.
    pub fn inverse(&self) -> BlockDiagonal {
        let d = self.factors.block_dim;
        let mut out = BlockDiagonal::zeros(self.factors.n_blocks, d);
        let mut col = vec![0.0; d];
        for (j, l) in self.factors.blocks().enumerate() {
            let inv = out.block_mut(j);
            for c in 0..d {
                col.iter_mut().for_each(|x| *x = 0.0);
                col[c] = 1.0;
                forward_substitute(l, d, &mut col);
                backward_substitute_transposed(l, d, &mut col);
                for r in 0..d {
                    inv[r * d + c] = col[r];
                }
            }
            // exact symmetry
            for a in 0..d {
                for b in 0..a {
                    let m = 0.5 * (inv[a * d + b] + inv[b * d + a]);
                    inv[a * d + b] = m;
                    inv[b * d + a] = m;
                }
            }
        }
        out
    }

    /// Reconstruct `L Lᵀ`.
    pub fn reconstruct(&self) -> BlockDiagonal {
        let d = self.factors.block_dim;
        let mut out = BlockDiagonal::zeros(self.factors.n_blocks, d);
        for (j, l) in self.factors.blocks().enumerate() {
            let s = out.block_mut(j);
            for a in 0..d {
                for b in 0..d {
                    s[a * d + b] = (0..=a.min(b)).map(|c| l[a * d + c] * l[b * d + c]).sum();
                }
            }
        }
        out
    }
}

pub(crate) fn identity_block(d: usize) -> Vec<f64> {
    let mut b = vec![0.0; d * d];
    for a in 0..d {
        b[a * d + a] = 1.0;
    }
    b
}

/// In-place lower Cholesky of a row-major `d × d` block; upper triangle zeroed.
/// Returns `false` if the block is not positive definite.
pub(crate) fn cholesky_in_place(m: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut diag = m[j * d + j];
        for k in 0..j {
            diag -= m[j * d + k] * m[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        m[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= m[i * d + k] * m[j * d + k];
            }
            m[i * d + j] = s / ljj;
        }
        for k in j + 1..d {
            m[j * d + k] = 0.0;
        }
    }
    true
}

/// Solve `L x = b` in place.
#[inline]
pub(crate) fn forward_substitute(l: &[f64], d: usize, x: &mut [f64]) {
    for a in 0..d {
        let mut s = x[a];
        for b in 0..a {
            s -= l[a * d + b] * x[b];
        }
        x[a] = s / l[a * d + a];
    }
}

/// Solve `Lᵀ x = b` in place.
#[inline]
pub(crate) fn backward_substitute_transposed(l: &[f64], d: usize, x: &mut [f64]) {
    for a in (0..d).rev() {
        let mut s = x[a];
        for b in a + 1..d {
            s -= l[b * d + a] * x[b];
        }
        x[a] = s / l[a * d + a];
    }
}

//! Linear WLS state estimation from PMU phasors in rectangular form.
//!
//! The model is `z = H x + e` with `x = [v_re(0..n), v_im(0..n)]` and a
//! covariance that is block diagonal with one 2×2 block per phasor. The
//! estimate solves the normal equations `(Hᵀ Σ⁻¹ H) x = Hᵀ Σ⁻¹ z` with a
//! sparse Cholesky factorization of the gain matrix, kept in the natural
//! state ordering.

use std::ops::{Deref, Index};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{PhasorKind, PmuPlacement, PowerSystem};
use crate::measurements::{MeasurementSet, RectMeasurement};

/// Gain matrices whose Cholesky pivots spread more than this are reported
/// as singular.
const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn n_buses(&self) -> usize {
        self.0.len() / 2
    }

    pub fn mse(&self, other: &StateVector) -> Result<f64> {
        mse(&self.0, &other.0)
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "mse",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Compressed sparse rows of the measurement Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }
}

/// One 2×2 covariance block `[[var_re, cov], [cov, var_im]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovBlock {
    pub var_re: f64,
    pub var_im: f64,
    pub cov: f64,
}

impl CovBlock {
    fn inverse(&self) -> Result<[[f64; 2]; 2]> {
        let det = self.var_re * self.var_im - self.cov * self.cov;
        if !(det > 0.0) || !(self.var_re > 0.0) {
            return Err(Error::Singular {
                context: "wls_se covariance block",
                condition: f64::INFINITY,
            });
        }
        Ok([
            [self.var_im / det, -self.cov / det],
            [-self.cov / det, self.var_re / det],
        ])
    }
}

impl From<&RectMeasurement> for CovBlock {
    fn from(r: &RectMeasurement) -> Self {
        CovBlock {
            var_re: r.var_re,
            var_im: r.var_im,
            cov: r.cov,
        }
    }
}

/// `H`, `Σ` and `z` with one (re, im) row pair per phasor.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub n_buses: usize,
    pub h: SparseRows,
    pub sigma: Vec<CovBlock>,
    pub z: Vec<f64>,
}

impl MeasurementModel {
    pub fn m(&self) -> usize {
        self.z.len()
    }

    pub fn n_states(&self) -> usize {
        2 * self.n_buses
    }

    /// Same model with every re/im covariance dropped.
    pub fn without_covariances(&self) -> MeasurementModel {
        let mut out = self.clone();
        for b in &mut out.sigma {
            b.cov = 0.0;
        }
        out
    }
}

pub fn build_model(sys: &PowerSystem, placement: &PmuPlacement, meas: &MeasurementSet) -> Result<MeasurementModel> {
    let n = sys.n_buses();
    let slots = placement.slots(sys);
    if slots.len() != meas.len() {
        return Err(Error::InconsistentOrdering {
            index: slots.len().min(meas.len()),
            reason: format!("placement has {} phasors, measurement set {}", slots.len(), meas.len()),
        });
    }
    let mut row_ptr = vec![0];
    let mut cols = Vec::with_capacity(8 * meas.len());
    let mut vals = Vec::with_capacity(8 * meas.len());
    let mut sigma = Vec::with_capacity(meas.len());
    let mut z = Vec::with_capacity(2 * meas.len());

    for (index, (slot, entry)) in slots.iter().zip(&meas.entries).enumerate() {
        let p = &entry.polar;
        if p.kind != slot.kind || p.location != slot.location {
            return Err(Error::InconsistentOrdering {
                index,
                reason: format!(
                    "expected {:?}@{}, found {:?}@{}",
                    slot.kind, slot.location, p.kind, p.location
                ),
            });
        }
        match p.kind {
            PhasorKind::BusVoltage => {
                let i = p.location;
                cols.push(i);
                vals.push(1.0);
                row_ptr.push(cols.len());
                cols.push(n + i);
                vals.push(1.0);
                row_ptr.push(cols.len());
            }
            PhasorKind::BranchCurrentFrom | PhasorKind::BranchCurrentTo => {
                let br = &sys.branches[p.location];
                let y = br.admittance();
                let (ya, yb) = if p.kind == PhasorKind::BranchCurrentFrom {
                    (y.y_ff, y.y_ft)
                } else {
                    (y.y_tf, y.y_tt)
                };
                let (a, b) = (br.from, br.to);
                // Re(I) = g·v_re − b·v_im, Im(I) = b·v_re + g·v_im, per end.
                cols.extend([a, n + a, b, n + b]);
                vals.extend([ya.re, -ya.im, yb.re, -yb.im]);
                row_ptr.push(cols.len());
                cols.extend([a, n + a, b, n + b]);
                vals.extend([ya.im, ya.re, yb.im, yb.re]);
                row_ptr.push(cols.len());
            }
        }
        sigma.push(CovBlock::from(&entry.rect));
        z.push(entry.rect.z_re);
        z.push(entry.rect.z_im);
    }

    Ok(MeasurementModel {
        n_buses: n,
        h: SparseRows {
            n_cols: 2 * n,
            row_ptr,
            cols,
            vals,
        },
        sigma,
        z,
    })
}

/// Symmetric matrix stored as its upper triangle in compressed columns.
#[derive(Debug, Clone)]
pub(crate) struct UpperCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub rows: Vec<usize>,
    pub vals: Vec<f64>,
}

impl UpperCsc {
    fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        // (col, row) order
        trip.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0; n + 1];
        let mut rows = Vec::with_capacity(trip.len());
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                vals.push(v);
                col_ptr[c + 1] = rows.len();
                last = Some((r, c));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] = col_ptr[c + 1].max(col_ptr[c]);
        }
        UpperCsc { n, col_ptr, rows, vals }
    }
}

/// Gain matrix `Hᵀ Σ⁻¹ H` (upper triangle) and right-hand side `Hᵀ Σ⁻¹ z`.
pub(crate) fn normal_equations(model: &MeasurementModel) -> Result<(UpperCsc, Vec<f64>)> {
    let dim = model.n_states();
    let mut trip = Vec::with_capacity(16 * model.sigma.len() + dim);
    let mut rhs = vec![0.0; dim];
    let mut local: Vec<(usize, [f64; 2])> = Vec::with_capacity(8);
    for (p, block) in model.sigma.iter().enumerate() {
        let w = block.inverse()?;
        // Columns touched by either row of this phasor with their (re, im) coefficients.
        local.clear();
        for (k, r) in [2 * p, 2 * p + 1].into_iter().enumerate() {
            for (c, v) in model.h.row(r) {
                match local.iter_mut().find(|(col, _)| *col == c) {
                    Some((_, coef)) => coef[k] += v,
                    None => {
                        let mut coef = [0.0; 2];
                        coef[k] = v;
                        local.push((c, coef));
                    }
                }
            }
        }
        let (z_re, z_im) = (model.z[2 * p], model.z[2 * p + 1]);
        let wz = [w[0][0] * z_re + w[0][1] * z_im, w[1][0] * z_re + w[1][1] * z_im];
        for &(c1, h1) in &local {
            // hᵀ W
            let hw = [h1[0] * w[0][0] + h1[1] * w[1][0], h1[0] * w[0][1] + h1[1] * w[1][1]];
            rhs[c1] += h1[0] * wz[0] + h1[1] * wz[1];
            for &(c2, h2) in &local {
                if c1 <= c2 {
                    trip.push((c1, c2, hw[0] * h2[0] + hw[1] * h2[1]));
                }
            }
        }
    }
    Ok((UpperCsc::from_triplets(dim, trip), rhs))
}

/// Lower-triangular Cholesky factor in compressed columns, diagonal first.
#[derive(Debug, Clone)]
pub(crate) struct CholeskyFactor {
    n: usize,
    col_ptr: Vec<usize>,
    rows: Vec<usize>,
    vals: Vec<f64>,
}

const NONE: usize = usize::MAX;

fn elimination_tree(a: &UpperCsc) -> Vec<usize> {
    let mut parent = vec![NONE; a.n];
    let mut ancestor = vec![NONE; a.n];
    for k in 0..a.n {
        for p in a.col_ptr[k]..a.col_ptr[k + 1] {
            let mut i = a.rows[p];
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of L, written to `stack[top..]` in
/// topological order; returns `top`.
fn row_pattern(a: &UpperCsc, k: usize, parent: &[usize], stack: &mut [usize], mark: &mut [usize]) -> usize {
    let n = a.n;
    let mut top = n;
    mark[k] = k;
    for p in a.col_ptr[k]..a.col_ptr[k + 1] {
        let mut i = a.rows[p];
        if i > k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl CholeskyFactor {
    /// Up-looking sparse Cholesky `A = L Lᵀ`.
    pub(crate) fn factor(a: &UpperCsc) -> Result<Self> {
        let n = a.n;
        let parent = elimination_tree(a);
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];

        let mut counts = vec![1usize; n];
        for k in 0..n {
            let top = row_pattern(a, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0; n + 1];
        for j in 0..n {
            col_ptr[j + 1] = col_ptr[j] + counts[j];
        }
        let nnz = col_ptr[n];
        let mut rows = vec![0; nnz];
        let mut vals = vec![0.0; nnz];
        let mut next = col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        mark.iter_mut().for_each(|m| *m = NONE);

        let (mut max_pivot, mut min_pivot) = (0.0_f64, f64::INFINITY);
        for k in 0..n {
            let top = row_pattern(a, k, &parent, &mut stack, &mut mark);
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let i = a.rows[p];
                if i <= k {
                    x[i] += a.vals[p];
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / vals[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[rows[p]] -= vals[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                rows[p] = k;
                vals[p] = lki;
            }
            if !(d > 0.0) {
                return Err(Error::Singular {
                    context: "wls_se gain matrix",
                    condition: if d == 0.0 || !d.is_finite() {
                        f64::INFINITY
                    } else {
                        max_pivot / d.abs()
                    },
                });
            }
            max_pivot = max_pivot.max(d);
            min_pivot = min_pivot.min(d);
            let p = next[k];
            next[k] += 1;
            rows[p] = k;
            vals[p] = d.sqrt();
        }
        let condition = max_pivot / min_pivot;
        if condition > MAX_CONDITION {
            return Err(Error::Singular {
                context: "wls_se gain matrix",
                condition,
            });
        }
        Ok(CholeskyFactor { n, col_ptr, rows, vals })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        for j in 0..self.n {
            let start = self.col_ptr[j];
            x[j] /= self.vals[start];
            let xj = x[j];
            for p in start + 1..self.col_ptr[j + 1] {
                x[self.rows[p]] -= self.vals[p] * xj;
            }
        }
        for j in (0..self.n).rev() {
            let start = self.col_ptr[j];
            let mut s = x[j];
            for p in start + 1..self.col_ptr[j + 1] {
                s -= self.vals[p] * x[self.rows[p]];
            }
            x[j] = s / self.vals[start];
        }
        x
    }

    #[cfg(test)]
    pub(crate) fn nnz(&self) -> usize {
        self.col_ptr[self.n]
    }
}

/// WLS estimate with the full block-diagonal covariance.
pub fn solve_exact(model: &MeasurementModel) -> Result<StateVector> {
    let (gain, rhs) = normal_equations(model)?;
    let chol = CholeskyFactor::factor(&gain)?;
    Ok(StateVector(chol.solve(&rhs)))
}

/// WLS estimate ignoring the re/im covariances.
pub fn solve_approximative(model: &MeasurementModel) -> Result<StateVector> {
    solve_exact(&model.without_covariances())
}

/// Label every measurement set with its exact WLS estimate.
pub fn label_dataset(sys: &PowerSystem, placement: &PmuPlacement, sets: &[MeasurementSet]) -> Result<Vec<StateVector>> {
    sets.par_iter()
        .enumerate()
        .map(|(index, meas)| {
            build_model(sys, placement, meas)
                .and_then(|m| solve_exact(&m))
                .map_err(|e| Error::Labeling {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

//! Dense linear-algebra kernels used by the spectral splitting: small
//! Sylvester solves, 2×2 block standardization and ordered real Schur forms.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Schur iteration did not converge")]
    NoConvergence,
    #[error("Sylvester operator is singular (overlapping spectra)")]
    SingularSylvester,
    #[error("block swap at {index} rejected: coupling residual {residual:e}")]
    SwapRejected { index: usize, residual: f64 },
    #[error("reordering did not terminate")]
    ReorderStalled,
}

/// Eigenvalue as `(re, im)`.
pub type Eig = (f64, f64);

/// Solves `A X − X B = C` through the Kronecker form
/// `(I ⊗ A − Bᵀ ⊗ I) vec(X) = vec(C)`.
pub fn solve_sylvester(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let p = a.nrows();
    let q = b.nrows();
    assert_eq!(c.shape(), (p, q), "Sylvester right-hand side shape");
    if p == 0 || q == 0 {
        return Ok(DMatrix::zeros(p, q));
    }
    let n = p * q;
    let mut m = DMatrix::<f64>::zeros(n, n);
    // column-major vec: index (i, j) -> i + j p
    for j in 0..q {
        for i in 0..p {
            let row = i + j * p;
            for k in 0..p {
                m[(row, k + j * p)] += a[(i, k)];
            }
            for l in 0..q {
                m[(row, i + l * p)] -= b[(l, j)];
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = m
        .lu()
        .solve(&rhs)
        .ok_or(LinalgError::SingularSylvester)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::SingularSylvester);
    }
    Ok(DMatrix::from_column_slice(p, q, x.as_slice()))
}

/// Full orthogonal factor `W` of a Householder QR of `v` (m × k, k ≤ m):
/// the first `k` columns of `W` span the range of `v`.
pub fn householder_q(v: &DMatrix<f64>) -> DMatrix<f64> {
    let m = v.nrows();
    let mut r = v.clone();
    let mut w = DMatrix::<f64>::identity(m, m);
    for k in 0..v.ncols().min(m) {
        let x = r.view((k, k), (m - k, 1)).clone_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let mut u = x;
        let alpha = if u[0] >= 0.0 { -norm } else { norm };
        u[0] -= alpha;
        let un = u.norm_squared();
        if un == 0.0 {
            continue;
        }
        // r <- (I - 2uuᵀ/uᵀu) r on rows k..
        for col in 0..r.ncols() {
            let dot: f64 = (0..m - k).map(|i| u[i] * r[(k + i, col)]).sum();
            let f = 2.0 * dot / un;
            for i in 0..m - k {
                r[(k + i, col)] -= f * u[i];
            }
        }
        // w <- w (I - 2uuᵀ/uᵀu) on columns k..
        for row in 0..m {
            let dot: f64 = (0..m - k).map(|i| w[(row, k + i)] * u[i]).sum();
            let f = 2.0 * dot / un;
            for i in 0..m - k {
                w[(row, k + i)] -= f * u[i];
            }
        }
    }
    w
}

/// Real Schur form `H = Q T Qᵀ` with `T` quasi-upper-triangular and every
/// 2×2 diagonal block carrying a complex-conjugate pair.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub q: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

impl RealSchur {
    pub fn new(h: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let n = h.nrows();
        let schur = nalgebra::linalg::Schur::try_new(h.clone(), f64::EPSILON, 10_000 * n.max(1))
            .ok_or(LinalgError::NoConvergence)?;
        let (q, mut t) = schur.unpack();
        for j in 0..n {
            for i in (j + 2)..n {
                t[(i, j)] = 0.0;
            }
        }
        let mut out = RealSchur { q, t };
        out.normalize_blocks();
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Splits 2×2 blocks with real eigenvalues and removes spurious chains of
    /// nonzero subdiagonals.
    fn normalize_blocks(&mut self) {
        let n = self.dim();
        let mut j = 0;
        while j + 1 < n {
            if self.t[(j + 1, j)] == 0.0 {
                j += 1;
                continue;
            }
            self.standardize_2x2(j);
            // a 2×2 block ends at j + 1
            if j + 2 < n {
                self.t[(j + 2, j + 1)] = if self.t[(j + 1, j)] != 0.0 {
                    0.0
                } else {
                    self.t[(j + 2, j + 1)]
                };
            }
            j += if self.t[(j + 1, j)] != 0.0 { 2 } else { 1 };
        }
    }

    /// Rotates the 2×2 block at `j` to upper-triangular form if its
    /// eigenvalues are real.
    fn standardize_2x2(&mut self, j: usize) {
        let a = self.t[(j, j)];
        let b = self.t[(j, j + 1)];
        let c = self.t[(j + 1, j)];
        let d = self.t[(j + 1, j + 1)];
        if c == 0.0 {
            return;
        }
        let p = 0.5 * (a - d);
        let disc = p * p + b * c;
        if disc < 0.0 {
            return;
        }
        let lambda = 0.5 * (a + d) + p.signum() * disc.sqrt();
        // eigenvector candidates: (λ − d, c) and (b, λ − a)
        let (x1, y1) = (lambda - d, c);
        let (x2, y2) = (b, lambda - a);
        let (x, y) = if x1.hypot(y1) >= x2.hypot(y2) { (x1, y1) } else { (x2, y2) };
        let r = x.hypot(y);
        if r == 0.0 {
            return;
        }
        self.rotate(j, x / r, y / r);
        self.t[(j + 1, j)] = 0.0;
    }

    /// `T ← Gᵀ T G`, `Q ← Q G` with `G = [[cs, −sn], [sn, cs]]` acting on
    /// indices `j, j + 1`.
    fn rotate(&mut self, j: usize, cs: f64, sn: f64) {
        let n = self.dim();
        for k in 0..n {
            let (u, v) = (self.t[(j, k)], self.t[(j + 1, k)]);
            self.t[(j, k)] = cs * u + sn * v;
            self.t[(j + 1, k)] = -sn * u + cs * v;
        }
        for k in 0..n {
            let (u, v) = (self.t[(k, j)], self.t[(k, j + 1)]);
            self.t[(k, j)] = cs * u + sn * v;
            self.t[(k, j + 1)] = -sn * u + cs * v;
        }
        for k in 0..n {
            let (u, v) = (self.q[(k, j)], self.q[(k, j + 1)]);
            self.q[(k, j)] = cs * u + sn * v;
            self.q[(k, j + 1)] = -sn * u + cs * v;
        }
    }

    /// Diagonal blocks as `(start, size)`.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let n = self.dim();
        let mut out = Vec::new();
        let mut j = 0;
        while j < n {
            if j + 1 < n && self.t[(j + 1, j)] != 0.0 {
                out.push((j, 2));
                j += 2;
            } else {
                out.push((j, 1));
                j += 1;
            }
        }
        out
    }

    /// Eigenvalues of one diagonal block.
    pub fn block_eigenvalues(&self, start: usize, size: usize) -> Vec<Eig> {
        if size == 1 {
            return vec![(self.t[(start, start)], 0.0)];
        }
        let a = self.t[(start, start)];
        let b = self.t[(start, start + 1)];
        let c = self.t[(start + 1, start)];
        let d = self.t[(start + 1, start + 1)];
        let p = 0.5 * (a - d);
        let disc = p * p + b * c;
        let re = 0.5 * (a + d);
        if disc >= 0.0 {
            let s = disc.sqrt();
            vec![(re + s, 0.0), (re - s, 0.0)]
        } else {
            let im = (-disc).sqrt();
            vec![(re, im), (re, -im)]
        }
    }

    pub fn eigenvalues(&self) -> Vec<Eig> {
        self.blocks()
            .into_iter()
            .flat_map(|(s, k)| self.block_eigenvalues(s, k))
            .collect()
    }

    /// Swaps the adjacent diagonal blocks starting at `j` (sizes `p`, `q`)
    /// by the direct method: solve `A X − X B = C`, then rotate onto an
    /// orthonormal basis of the invariant subspace `[−X; I]`.
    fn swap(&mut self, j: usize, p: usize, q: usize) -> Result<(), LinalgError> {
        let n = self.dim();
        let m = p + q;
        let a = self.t.view((j, j), (p, p)).clone_owned();
        let b = self.t.view((j + p, j + p), (q, q)).clone_owned();
        let c = self.t.view((j, j + p), (p, q)).clone_owned();
        let x = solve_sylvester(&a, &b, &c)?;
        let mut v = DMatrix::<f64>::zeros(m, q);
        v.view_mut((0, 0), (p, q)).copy_from(&(-&x));
        v.view_mut((p, 0), (q, q)).fill_with_identity();
        let w = householder_q(&v);

        let rows = self.t.rows(j, m).clone_owned();
        self.t.rows_mut(j, m).copy_from(&(w.transpose() * rows));
        let cols = self.t.columns(j, m).clone_owned();
        self.t.columns_mut(j, m).copy_from(&(cols * &w));
        let qcols = self.q.columns(j, m).clone_owned();
        self.q.columns_mut(j, m).copy_from(&(qcols * &w));

        let scale = self.t.view((j, j), (m, m)).norm().max(f64::MIN_POSITIVE);
        let coupling = self.t.view((j + q, j), (p, q)).norm();
        if coupling > 1e3 * f64::EPSILON * scale * (1.0 + x.norm()) {
            return Err(LinalgError::SwapRejected { index: j, residual: coupling / scale });
        }
        self.t.view_mut((j + q, j), (p, q)).fill(0.0);
        if q == 2 {
            self.standardize_2x2(j);
        } else if j + 1 < n && p == 1 {
            self.t[(j + 1, j)] = 0.0;
        }
        if p == 2 {
            self.standardize_2x2(j + q);
        }
        for col in 0..n {
            for row in (col + 2)..n {
                self.t[(row, col)] = 0.0;
            }
        }
        Ok(())
    }

    /// Moves every block whose eigenvalues satisfy `select` to the leading
    /// positions, preserving relative order within each group. Returns the
    /// dimension of the leading invariant subspace.
    pub fn reorder<F: Fn(Eig) -> bool>(&mut self, select: F) -> Result<usize, LinalgError> {
        let n = self.dim();
        let cap = 4 * (n + 1) * (n + 1);
        for _ in 0..cap {
            let blocks = self.blocks();
            let selected: Vec<bool> = blocks
                .iter()
                .map(|&(s, k)| select(self.block_eigenvalues(s, k)[0]))
                .collect();
            let first_unselected = selected.iter().position(|s| !s);
            let next = first_unselected.and_then(|u| {
                selected
                    .iter()
                    .enumerate()
                    .skip(u + 1)
                    .find(|(_, s)| **s)
                    .map(|(i, _)| i)
            });
            match next {
                None => {
                    return Ok(blocks
                        .iter()
                        .zip(&selected)
                        .filter(|(_, s)| **s)
                        .map(|((_, k), _)| *k)
                        .sum())
                }
                Some(i) => {
                    let (s_prev, k_prev) = blocks[i - 1];
                    let (_, k_cur) = blocks[i];
                    self.swap(s_prev, k_prev, k_cur)?;
                }
            }
        }
        Err(LinalgError::ReorderStalled)
    }
}

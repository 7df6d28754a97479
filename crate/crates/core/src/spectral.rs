//! Classification of an equilibrium from its Jacobian.
//!
//! [`split_jacobian`] block-diagonalizes `H = Df(x*)` as
//! `P⁻¹ H P = diag(H⁺, H⁻)`, where `H⁺` carries the eigenvalues with positive
//! real part and `H⁻` the rest. [`adapted_inner_product`] builds, for a
//! repulsive `H⁺`, an inner product in which `⟨Hx, x⟩ ≥ λ ‖x‖²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{solve_sylvester, LinalgError, RealSchur};

/// Largest dimension accepted by the Kronecker-form Lyapunov solve.
pub const MAX_LYAPUNOV_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix must be square and non-empty, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error(
        "eigenvalue {re:e}{im:+e}i has real part inside the ambiguity band ({lo:e}, {hi:e})"
    )]
    NearCenter { re: f64, im: f64, lo: f64, hi: f64 },
    #[error("matrix is not repulsive: eigenvalue with real part {re:e}")]
    NotRepulsive { re: f64 },
    #[error("Lyapunov residual {residual:e} exceeds 1e-6")]
    Conditioning { residual: f64 },
    #[error("dimension {dim} exceeds the supported maximum {max}")]
    TooLarge { dim: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Every eigenvalue has positive real part.
    Repulsive,
    /// Some positive and some negative real parts, none on the axis.
    UnstableHyperbolic,
    /// Some positive real parts and some zero real parts.
    UnstableNonhyperbolic,
    /// Every eigenvalue has negative real part.
    Stable,
    /// No positive real part, at least one zero real part.
    Center,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Repulsive => "repulsive",
            Classification::UnstableHyperbolic => "unstable_hyperbolic",
            Classification::UnstableNonhyperbolic => "unstable_nonhyperbolic",
            Classification::Stable => "stable",
            Classification::Center => "center",
        }
    }

    pub fn is_unstable(&self) -> bool {
        matches!(
            self,
            Classification::Repulsive
                | Classification::UnstableHyperbolic
                | Classification::UnstableNonhyperbolic
        )
    }
}

/// An eigenvalue `re + i·im`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

/// `P⁻¹ H P = diag(H⁺, H⁻)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapSplit {
    #[serde(with = "crate::serde_ext::matrix")]
    pub p: DMatrix<f64>,
    #[serde(with = "crate::serde_ext::matrix")]
    pub p_inv: DMatrix<f64>,
    #[serde(with = "crate::serde_ext::matrix")]
    pub h_plus: DMatrix<f64>,
    #[serde(with = "crate::serde_ext::matrix")]
    pub h_minus: DMatrix<f64>,
    pub delta_plus: usize,
    pub delta_minus: usize,
    /// Largest real part of the `H⁻` spectrum; `0` when `δ⁻ = 0` or when that
    /// real part lies in the zero band.
    pub mu: f64,
    pub classification: Classification,
    /// Spectrum of `H⁺` followed by that of `H⁻`.
    pub eigenvalues: Vec<Eigenvalue>,
    pub tol: f64,
}

impl TrapSplit {
    pub fn dim(&self) -> usize {
        self.delta_plus + self.delta_minus
    }

    /// `diag(H⁺, H⁻)`.
    pub fn block_diagonal(&self) -> DMatrix<f64> {
        let d = self.dim();
        let k = self.delta_plus;
        let mut out = DMatrix::zeros(d, d);
        out.view_mut((0, 0), (k, k)).copy_from(&self.h_plus);
        out.view_mut((k, k), (d - k, d - k)).copy_from(&self.h_minus);
        out
    }

    /// `‖P⁻¹ H P − diag(H⁺, H⁻)‖_F`.
    pub fn residual(&self, h: &DMatrix<f64>) -> f64 {
        (&self.p_inv * h * &self.p - self.block_diagonal()).norm()
    }

    pub fn is_hyperbolic(&self) -> bool {
        matches!(
            self.classification,
            Classification::Repulsive | Classification::UnstableHyperbolic | Classification::Stable
        )
    }
}

fn validate_square(h: &DMatrix<f64>) -> Result<usize, SpectralError> {
    let (rows, cols) = h.shape();
    if rows != cols || rows == 0 {
        return Err(SpectralError::NotSquare { rows, cols });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    Ok(rows)
}

/// Default ambiguity scale, `1e-8 · ‖H‖_F`.
pub fn default_tol(h: &DMatrix<f64>) -> f64 {
    1e-8 * h.norm()
}

/// Splits `H` into its positive-real-part and non-positive-real-part blocks.
///
/// Eigenvalues with `|Re| ≤ tol/10` are treated as lying on the imaginary
/// axis, those with `Re ≥ tol` as positive; anything in between is rejected
/// with [`SpectralError::NearCenter`]. `tol` defaults to [`default_tol`].
pub fn split_jacobian(h: &DMatrix<f64>, tol: Option<f64>) -> Result<TrapSplit, SpectralError> {
    let d = validate_square(h)?;
    let tol = tol.unwrap_or_else(|| default_tol(h));
    let zero_band = tol / 10.0;
    let is_zero = |re: f64| re.abs() <= zero_band;
    let is_positive = |re: f64| !is_zero(re) && re >= tol;

    let mut schur = RealSchur::new(h)?;
    for (re, im) in schur.eigenvalues() {
        if !is_zero(re) && re.abs() < tol {
            return Err(SpectralError::NearCenter { re, im, lo: zero_band, hi: tol });
        }
    }

    let k = schur.reorder(|(re, _)| is_positive(re))?;
    let t = &schur.t;
    let t11 = t.view((0, 0), (k, k)).clone_owned();
    let t22 = t.view((k, k), (d - k, d - k)).clone_owned();
    let t12 = t.view((0, k), (k, d - k)).clone_owned();
    let y = solve_sylvester(&t11, &t22, &(-t12))?;

    let mut w = DMatrix::<f64>::identity(d, d);
    w.view_mut((0, k), (k, d - k)).copy_from(&y);
    let mut w_inv = DMatrix::<f64>::identity(d, d);
    w_inv.view_mut((0, k), (k, d - k)).copy_from(&(-&y));
    let p = &schur.q * w;
    let p_inv = w_inv * schur.q.transpose();

    let eigenvalues: Vec<Eigenvalue> = schur
        .eigenvalues()
        .into_iter()
        .map(|(re, im)| Eigenvalue { re, im })
        .collect();
    let minus = &eigenvalues[k..];
    let has_zero = eigenvalues.iter().any(|e| is_zero(e.re));
    let mu = if minus.is_empty() {
        0.0
    } else {
        let m = minus.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        if is_zero(m) {
            0.0
        } else {
            m
        }
    };
    let classification = match (k, has_zero) {
        (k, _) if k == d => Classification::Repulsive,
        (0, true) => Classification::Center,
        (0, false) => Classification::Stable,
        (_, true) => Classification::UnstableNonhyperbolic,
        (_, false) => Classification::UnstableHyperbolic,
    };

    Ok(TrapSplit {
        p,
        p_inv,
        h_plus: t11,
        h_minus: t22,
        delta_plus: k,
        delta_minus: d - k,
        mu,
        classification,
        eigenvalues,
        tol,
    })
}

/// Inner product `⟨x, x'⟩ = xᵀ S x'` adapted to a repulsive matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedNorm {
    #[serde(with = "crate::serde_ext::matrix")]
    pub s: DMatrix<f64>,
    /// Coercivity constant: `xᵀ S H x ≥ lambda · xᵀ S x`.
    pub lambda: f64,
    /// `‖HᵀS + SH − 2I‖_F`.
    pub residual: f64,
}

impl AdaptedNorm {
    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&(&self.s * y))
    }

    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        self.inner(x, x)
    }
}

/// Solves `HᵀS + SH = 2I`; then `xᵀSHx = ‖x‖²` and `lambda = 1/λ_max(S)`.
pub fn adapted_inner_product(h_plus: &DMatrix<f64>) -> Result<AdaptedNorm, SpectralError> {
    let d = validate_square(h_plus)?;
    if d > MAX_LYAPUNOV_DIM {
        return Err(SpectralError::TooLarge { dim: d, max: MAX_LYAPUNOV_DIM });
    }
    let schur = RealSchur::new(h_plus)?;
    let min_re = schur
        .eigenvalues()
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::INFINITY, f64::min);
    if !(min_re > 0.0) {
        return Err(SpectralError::NotRepulsive { re: min_re });
    }

    let two = DMatrix::<f64>::identity(d, d) * 2.0;
    let s = solve_sylvester(&h_plus.transpose(), &(-h_plus), &two)?;
    let s = (&s + s.transpose()) * 0.5;
    let residual = (h_plus.transpose() * &s + &s * h_plus - &two).norm();
    if !(residual <= 1e-6) {
        return Err(SpectralError::Conditioning { residual });
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(SpectralError::Conditioning { residual });
    }
    Ok(AdaptedNorm { s, lambda: 1.0 / max, residual })
}

/// `y = P⁻¹ (x − x*)`, split into the first `δ⁺` and last `δ⁻` coordinates.
pub fn project_pm(
    split: &TrapSplit,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), SpectralError> {
    let d = split.dim();
    for v in [x, x_star] {
        if v.len() != d {
            return Err(SpectralError::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    let y = &split.p_inv * (x - x_star);
    let k = split.delta_plus;
    Ok((y.rows(0, k).clone_owned(), y.rows(k, d - k).clone_owned()))
}

/// Inverse of [`project_pm`]: `x* + P (y⁺; y⁻)`.
pub fn reassemble(
    split: &TrapSplit,
    y_plus: &DVector<f64>,
    y_minus: &DVector<f64>,
    x_star: &DVector<f64>,
) -> DVector<f64> {
    let y = DVector::from_iterator(
        split.dim(),
        y_plus.iter().chain(y_minus.iter()).copied(),
    );
    x_star + &split.p * y
}

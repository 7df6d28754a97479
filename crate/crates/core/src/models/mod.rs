//! Process definitions for the recursion.
//!
//! A [`Model`] supplies, at each step, the drift `G_n`, the martingale
//! increment `ε_{n+1}` and the remainder `r_{n+1}`. Models with per-run state
//! (the reinforced walk) hand out a fresh [`Process`] for every run.

mod controls;
mod linear;
mod noise;
mod synthetic;
mod vrrw;

pub use controls::{control_model, control_models, ControlVariant};
pub use linear::LinearModel;
pub use noise::{NoiseLaw, NoiseSpec, RemainderLaw};
pub use synthetic::{synthetic_field, SyntheticModel, SyntheticParams};
pub use vrrw::{
    transition_probabilities, vrrw_field, vrrw_jacobian, vrrw_walk_step, GraphSpec, VrrwConfig,
    VrrwModel,
};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::householder_q;
use crate::sequences::Schedule;
use crate::spectral::TrapSplit;

/// Random stream owned by one run.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("point outside the field's domain: {0}")]
    Domain(String),
    #[error("singular denominator: {0}")]
    Singular(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("all transition weights from vertex {0} vanish")]
    StuckWalk(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A deterministic vector field `f : ℝ^d → ℝ^d`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError>;

    fn eval_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>, FieldError> {
        let mut out = DVector::zeros(self.dim());
        self.eval(x.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }
}

/// A field given by a closure.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<(), FieldError> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        (self.f)(x, out)
    }
}

/// The linear field `x ↦ H (x − x*)`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub h: DMatrix<f64>,
    pub x_star: DVector<f64>,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.h[(i, j)] * (x[j] - self.x_star[j]);
            }
            *o = acc;
        }
        Ok(())
    }
}

/// One step's worth of model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub g: Vec<f64>,
    pub eps: Vec<f64>,
    pub rem: Vec<f64>,
}

impl Increment {
    pub fn zeros(d: usize) -> Self {
        Increment { g: vec![0.0; d], eps: vec![0.0; d], rem: vec![0.0; d] }
    }
}

/// Per-run state of a model.
pub trait Process: Send {
    /// Fills `out` with `(G_n, ε_{n+1}, r_{n+1})` at state `x = X_n`.
    fn increment(
        &mut self,
        x: &[f64],
        n: usize,
        schedule: &Schedule,
        rng: &mut StreamRng,
        out: &mut Increment,
    ) -> Result<(), ModelError>;
}

/// An equilibrium with its declared Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_star: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

pub trait Model: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Starts a run from `x0`.
    fn process(&self, x0: &[f64]) -> Result<Box<dyn Process + '_>, ModelError>;
    fn equilibrium(&self) -> Option<Equilibrium>;
    /// The mean field `f` with `G_n = f(X_n)`, when the drift has that form.
    fn field(&self) -> Option<&dyn VectorField>;
    /// Local unstable manifold through the equilibrium.
    fn manifold(&self) -> Option<AffineManifold>;
}

/// Drift, noise and remainder as functions of `(x, n)` only.
pub trait Memoryless: Send + Sync {
    fn drift(&self, x: &[f64], n: usize, out: &mut [f64]) -> Result<(), ModelError>;
    fn noise(&self, x: &[f64], n: usize, rng: &mut StreamRng, out: &mut [f64]);
    fn remainder(&self, x: &[f64], n: usize, out: &mut [f64]);
}

pub(crate) struct MemorylessProcess<'a, M: ?Sized>(pub &'a M);

impl<M: Memoryless + ?Sized> Process for MemorylessProcess<'_, M> {
    fn increment(
        &mut self,
        x: &[f64],
        n: usize,
        _schedule: &Schedule,
        rng: &mut StreamRng,
        out: &mut Increment,
    ) -> Result<(), ModelError> {
        self.0.drift(x, n, &mut out.g)?;
        self.0.noise(x, n, rng, &mut out.eps);
        self.0.remainder(x, n, &mut out.rem);
        Ok(())
    }
}

/// Affine set `K = b + span` described through a linear chart `L`: a point
/// `x` has coordinates `L (x − b)`, of which the first `tangent_dim` lie
/// along `K`. The distance to `K` is the norm of the remaining coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineManifold {
    pub basepoint: Vec<f64>,
    #[serde(with = "crate::serde_ext::matrix")]
    pub chart: DMatrix<f64>,
    pub tangent_dim: usize,
}

impl AffineManifold {
    /// `K = x* + span(first δ⁺ columns of P)` with chart `P⁻¹`, so that the
    /// distance is `‖y⁻‖`.
    pub fn from_split(split: &TrapSplit, x_star: &[f64]) -> Self {
        AffineManifold {
            basepoint: x_star.to_vec(),
            chart: split.p_inv.clone(),
            tangent_dim: split.delta_plus,
        }
    }

    /// `K = basepoint + span(columns of directions)` with the Euclidean
    /// orthogonal distance.
    pub fn from_directions(basepoint: &[f64], directions: &DMatrix<f64>) -> Result<Self, ModelError> {
        let d = basepoint.len();
        if directions.nrows() != d {
            return Err(ModelError::DimensionMismatch { expected: d, got: directions.nrows() });
        }
        let k = directions.ncols();
        let rank = directions.clone().svd(false, false).rank(1e-12 * directions.norm().max(1.0));
        if rank != k {
            return Err(ModelError::Invalid("manifold directions are linearly dependent".into()));
        }
        let q = householder_q(directions);
        Ok(AffineManifold { basepoint: basepoint.to_vec(), chart: q.transpose(), tangent_dim: k })
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let d = self.basepoint.len();
        let mut acc = 0.0;
        for i in self.tangent_dim..d {
            let mut yi = 0.0;
            for j in 0..d {
                yi += self.chart[(i, j)] * (x[j] - self.basepoint[j]);
            }
            acc += yi * yi;
        }
        acc.sqrt()
    }
}

/// `‖f(x*)‖` and the relative deviation between a central-difference
/// Jacobian at `x*` and the declared one.
pub fn equilibrium_residuals(field: &dyn VectorField, eq: &Equilibrium) -> Result<(f64, f64), FieldError> {
    let f0 = field.eval_vec(&eq.x_star)?;
    let fd = finite_difference_jacobian(field, &eq.x_star, 1e-6)?;
    let rel = (&fd - &eq.jacobian).norm() / eq.jacobian.norm().max(1.0);
    Ok((f0.norm(), rel))
}

/// Central-difference Jacobian with step `h`.
pub fn finite_difference_jacobian(
    field: &dyn VectorField,
    x: &DVector<f64>,
    h: f64,
) -> Result<DMatrix<f64>, FieldError> {
    let d = field.dim();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = field.eval_vec(&xp)?;
        let fm = field.eval_vec(&xm)?;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

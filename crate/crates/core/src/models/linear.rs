use nalgebra::{DMatrix, DVector};

use super::{
    AffineManifold, Equilibrium, LinearField, Memoryless, MemorylessProcess, Model,
    ModelError, NoiseSpec, Process, RemainderLaw, StreamRng, VectorField,
};
use crate::spectral::split_jacobian;

/// `G_n = H (X_n − x*)` with i.i.d. noise and a deterministic remainder.
#[derive(Debug, Clone)]
pub struct LinearModel {
    id: String,
    field: LinearField,
    noise: NoiseSpec,
    remainder: RemainderLaw,
}

impl LinearModel {
    pub fn new(
        id: impl Into<String>,
        h: DMatrix<f64>,
        x_star: DVector<f64>,
        noise: NoiseSpec,
        remainder: RemainderLaw,
    ) -> Result<Self, ModelError> {
        let d = h.nrows();
        if h.ncols() != d || d == 0 {
            return Err(ModelError::Invalid(format!("H must be square, got {:?}", h.shape())));
        }
        if x_star.len() != d {
            return Err(ModelError::DimensionMismatch { expected: d, got: x_star.len() });
        }
        if h.iter().chain(x_star.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("non-finite linear model parameters".into()));
        }
        noise.validate(d)?;
        Ok(LinearModel { id: id.into(), field: LinearField { h, x_star }, noise, remainder })
    }

    /// One-dimensional `G_n = X_n` with the given noise.
    pub fn scalar_repulsive(noise: NoiseSpec) -> Self {
        LinearModel::new(
            "linear",
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            noise,
            RemainderLaw::Zero,
        )
        .expect("valid scalar model")
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.field.h
    }

    pub fn noise_spec(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn remainder_law(&self) -> &RemainderLaw {
        &self.remainder
    }
}

impl Memoryless for LinearModel {
    fn drift(&self, x: &[f64], _n: usize, out: &mut [f64]) -> Result<(), ModelError> {
        self.field.eval(x, out).map_err(ModelError::from)
    }

    fn noise(&self, _x: &[f64], _n: usize, rng: &mut StreamRng, out: &mut [f64]) {
        self.noise.sample(rng, out);
    }

    fn remainder(&self, _x: &[f64], n: usize, out: &mut [f64]) {
        out.fill(self.remainder.value(n));
    }
}

impl Model for LinearModel {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn process(&self, x0: &[f64]) -> Result<Box<dyn Process + '_>, ModelError> {
        if x0.len() != self.dim() {
            return Err(ModelError::DimensionMismatch { expected: self.dim(), got: x0.len() });
        }
        Ok(Box::new(MemorylessProcess(self)))
    }

    fn equilibrium(&self) -> Option<Equilibrium> {
        Some(Equilibrium { x_star: self.field.x_star.clone(), jacobian: self.field.h.clone() })
    }

    fn field(&self) -> Option<&dyn VectorField> {
        Some(&self.field)
    }

    fn manifold(&self) -> Option<AffineManifold> {
        let split = split_jacobian(&self.field.h, None).ok()?;
        Some(AffineManifold::from_split(&split, self.field.x_star.as_slice()))
    }
}

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    AffineManifold, Equilibrium, FieldError, Memoryless, MemorylessProcess, Model, ModelError,
    NoiseSpec, Process, StreamRng, VectorField,
};

/// Field with a flat unstable manifold `K = {x_i = 0 for i ≥ δ⁺}`:
///
/// * `f_i(x) = (B x^ν)_i` for `i < δ⁺`, where `x^ν_j = x_j` for `j < δ⁺` and
///   `x^ν_j = |x_j|^{1+ν}` otherwise;
/// * `f_i(x) = μ_i x_i` for `i ≥ δ⁺`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub delta_plus: usize,
    /// Contraction rates of the stable coordinates, all negative.
    pub mu: Vec<f64>,
    pub nu: f64,
    /// `B` as `δ⁺` rows of length `d`; defaults to `[I 0]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_plus: Option<Vec<Vec<f64>>>,
}

impl SyntheticParams {
    /// `d = 2`, `δ⁺ = 1`, `f(x) = (x₁, μ x₂)`.
    pub fn default_instance(mu: f64, nu: f64) -> Self {
        SyntheticParams { delta_plus: 1, mu: vec![mu], nu, f_plus: None }
    }

    pub fn dim(&self) -> usize {
        self.delta_plus + self.mu.len()
    }

    pub fn b(&self) -> DMatrix<f64> {
        let d = self.dim();
        match &self.f_plus {
            Some(rows) => DMatrix::from_fn(self.delta_plus, d, |i, j| rows[i][j]),
            None => DMatrix::from_fn(self.delta_plus, d, |i, j| if i == j { 1.0 } else { 0.0 }),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dim();
        if self.delta_plus == 0 {
            return Err(ModelError::Invalid("synthetic field needs δ⁺ ≥ 1".into()));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(ModelError::Invalid(format!("ν = {} must be positive", self.nu)));
        }
        if let Some(m) = self.mu.iter().find(|m| !(**m < 0.0 && m.is_finite())) {
            return Err(ModelError::Invalid(format!("μ = {m} must be negative")));
        }
        if let Some(rows) = &self.f_plus {
            if rows.len() != self.delta_plus || rows.iter().any(|r| r.len() != d) {
                return Err(ModelError::Invalid(format!("F⁺ must be {}×{d}", self.delta_plus)));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid("F⁺ has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// `Df(0) = [[B₊, 0], [0, diag(μ)]]`, where `B₊` is the leading block of `B`.
    pub fn jacobian_at_zero(&self) -> DMatrix<f64> {
        let d = self.dim();
        let k = self.delta_plus;
        let b = self.b();
        DMatrix::from_fn(d, d, |i, j| {
            if i < k && j < k {
                b[(i, j)]
            } else if i >= k && i == j {
                self.mu[i - k]
            } else {
                0.0
            }
        })
    }
}

/// Evaluates the synthetic field at `x`.
pub fn synthetic_field(x: &[f64], params: &SyntheticParams) -> Result<Vec<f64>, ModelError> {
    params.validate()?;
    if x.len() != params.dim() {
        return Err(ModelError::DimensionMismatch { expected: params.dim(), got: x.len() });
    }
    let model = SyntheticModel::new(params.clone(), NoiseSpec::new(super::NoiseLaw::Zero))?;
    let mut out = vec![0.0; x.len()];
    model.field.eval(x, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct SyntheticField {
    params: SyntheticParams,
    b: DMatrix<f64>,
}

impl VectorField for SyntheticField {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let k = self.params.delta_plus;
        let d = self.dim();
        let p = 1.0 + self.params.nu;
        for (i, o) in out.iter_mut().enumerate().take(k) {
            let mut acc = 0.0;
            for j in 0..d {
                let xj = if j < k { x[j] } else { x[j].abs().powf(p) };
                acc += self.b[(i, j)] * xj;
            }
            *o = acc;
        }
        for i in k..d {
            out[i] = self.params.mu[i - k] * x[i];
        }
        Ok(())
    }
}

/// `G_n = f(X_n)` for the synthetic field with i.i.d. noise and no remainder.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    field: SyntheticField,
    noise: NoiseSpec,
}

impl SyntheticModel {
    pub fn new(params: SyntheticParams, noise: NoiseSpec) -> Result<Self, ModelError> {
        params.validate()?;
        noise.validate(params.dim())?;
        let b = params.b();
        Ok(SyntheticModel { field: SyntheticField { params, b }, noise })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.field.params
    }
}

impl Memoryless for SyntheticModel {
    fn drift(&self, x: &[f64], _n: usize, out: &mut [f64]) -> Result<(), ModelError> {
        self.field.eval(x, out).map_err(ModelError::from)
    }

    fn noise(&self, _x: &[f64], _n: usize, rng: &mut StreamRng, out: &mut [f64]) {
        self.noise.sample(rng, out);
    }

    fn remainder(&self, _x: &[f64], _n: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

impl Model for SyntheticModel {
    fn id(&self) -> String {
        "synthetic".into()
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
        Some(Equilibrium {
            x_star: DVector::zeros(self.dim()),
            jacobian: self.field.params.jacobian_at_zero(),
        })
    }

    fn field(&self) -> Option<&dyn VectorField> {
        Some(&self.field)
    }

    fn manifold(&self) -> Option<AffineManifold> {
        let d = self.dim();
        Some(AffineManifold {
            basepoint: vec![0.0; d],
            chart: DMatrix::identity(d, d),
            tangent_dim: self.field.params.delta_plus,
        })
    }
}

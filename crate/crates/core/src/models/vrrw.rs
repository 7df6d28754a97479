//! Vertex-reinforced random walk with reinforcement weight `k ↦ k^α`.
//!
//! The occupation measure `v_n = counts / Σ counts` follows the recursion with
//! `G_n = f(v_n)`, where
//! `f_i(v) = −v_i + v_i^α (Σ_j A_ij v_j^α) / H(v)` and `H(v) = Σ_ij A_ij v_i^α v_j^α`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    AffineManifold, Equilibrium, FieldError, Increment, Model, ModelError, Process, StreamRng,
    VectorField,
};
use crate::sequences::Schedule;

/// Interaction matrix of a config file: a named complete graph or an
/// explicit matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSpec {
    Named(NamedGraph),
    Matrix { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedGraph {
    /// `A = J − I`: no self-loops.
    Complete,
    /// `A = J`: every vertex also reinforces itself.
    CompleteLooped,
}

impl GraphSpec {
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>, ModelError> {
        match self {
            GraphSpec::Named(NamedGraph::Complete) => {
                Ok(DMatrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { 1.0 }))
            }
            GraphSpec::Named(NamedGraph::CompleteLooped) => Ok(DMatrix::from_element(d, d, 1.0)),
            GraphSpec::Matrix { matrix } => {
                let m = crate::serde_ext::matrix::from_rows(matrix).map_err(ModelError::Invalid)?;
                if m.shape() != (d, d) {
                    return Err(ModelError::Invalid(format!(
                        "interaction matrix is {:?}, expected {d}×{d}",
                        m.shape()
                    )));
                }
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrrwConfig {
    pub d: usize,
    pub alpha: f64,
    pub a: DMatrix<f64>,
    pub initial_counts: Vec<u64>,
    pub initial_vertex: usize,
}

impl VrrwConfig {
    pub fn new(alpha: f64, a: DMatrix<f64>, initial_counts: Vec<u64>) -> Result<Self, ModelError> {
        let cfg = VrrwConfig { d: a.nrows(), alpha, a, initial_counts, initial_vertex: 0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn complete(d: usize, alpha: f64) -> Result<Self, ModelError> {
        VrrwConfig::new(alpha, GraphSpec::Named(NamedGraph::Complete).matrix(d)?, vec![1; d])
    }

    pub fn complete_looped(d: usize, alpha: f64) -> Result<Self, ModelError> {
        VrrwConfig::new(alpha, GraphSpec::Named(NamedGraph::CompleteLooped).matrix(d)?, vec![1; d])
    }

    pub fn with_initial_vertex(mut self, vertex: usize) -> Result<Self, ModelError> {
        self.initial_vertex = vertex;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.d;
        let a = &self.a;
        if d < 2 || a.shape() != (d, d) {
            return Err(ModelError::Invalid(format!("need a d×d matrix with d ≥ 2, got {:?}", a.shape())));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(ModelError::Invalid(format!("reinforcement exponent {} must be ≥ 1", self.alpha)));
        }
        for i in 0..d {
            for j in 0..d {
                let v = a[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(ModelError::Invalid(format!("A[{i}][{j}] = {v} must be finite and ≥ 0")));
                }
                if i != j && v <= 0.0 {
                    return Err(ModelError::Invalid(format!("off-diagonal A[{i}][{j}] must be positive")));
                }
                if v != a[(j, i)] {
                    return Err(ModelError::Invalid("A must be symmetric".into()));
                }
            }
        }
        let sums: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
        let scale = sums.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if sums.iter().any(|s| (s - sums[0]).abs() > 1e-12 * scale) {
            return Err(ModelError::Invalid("A must have constant row sums".into()));
        }
        if self.initial_counts.len() != d || self.initial_counts.contains(&0) {
            return Err(ModelError::Invalid("initial counts must be positive, one per vertex".into()));
        }
        if self.initial_vertex >= d {
            return Err(ModelError::Invalid(format!("initial vertex {} ≥ d", self.initial_vertex)));
        }
        Ok(())
    }

    pub fn initial_occupation(&self) -> Vec<f64> {
        occupation(&self.initial_counts)
    }

    pub fn uniform(&self) -> DVector<f64> {
        DVector::from_element(self.d, 1.0 / self.d as f64)
    }
}

fn occupation(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn field_into(v: &[f64], cfg: &VrrwConfig, u: &mut [f64], out: &mut [f64]) -> Result<(), FieldError> {
    let d = cfg.d;
    for i in 0..d {
        if !(v[i] >= 0.0) {
            return Err(FieldError::Domain(format!("v[{i}] = {} is negative", v[i])));
        }
        u[i] = v[i].powf(cfg.alpha);
    }
    let mut h = 0.0;
    for i in 0..d {
        let mut w = 0.0;
        for j in 0..d {
            w += cfg.a[(i, j)] * u[j];
        }
        out[i] = u[i] * w;
        h += out[i];
    }
    if !(h > 0.0) {
        return Err(FieldError::Singular(format!("H(v) = {h}")));
    }
    for i in 0..d {
        out[i] = -v[i] + out[i] / h;
    }
    Ok(())
}

/// `f(v)` of the occupation measure.
pub fn vrrw_field(v: &[f64], cfg: &VrrwConfig) -> Result<Vec<f64>, ModelError> {
    if v.len() != cfg.d {
        return Err(ModelError::DimensionMismatch { expected: cfg.d, got: v.len() });
    }
    let mut u = vec![0.0; cfg.d];
    let mut out = vec![0.0; cfg.d];
    field_into(v, cfg, &mut u, &mut out)?;
    Ok(out)
}

/// Analytic `Df(v)`:
/// `∂f_i/∂v_k = −δ_ik + (δ_ik u'_i w_i + u_i A_ik u'_k)/H − 2 u_i w_i w_k u'_k / H²`
/// with `u = v^α`, `w = A u`, `u' = α v^{α−1}`.
pub fn vrrw_jacobian(v: &[f64], cfg: &VrrwConfig) -> Result<DMatrix<f64>, ModelError> {
    let d = cfg.d;
    if v.len() != d {
        return Err(ModelError::DimensionMismatch { expected: d, got: v.len() });
    }
    let u: Vec<f64> = v.iter().map(|x| x.powf(cfg.alpha)).collect();
    let du: Vec<f64> = v.iter().map(|x| cfg.alpha * x.powf(cfg.alpha - 1.0)).collect();
    let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cfg.a[(i, j)] * u[j]).sum()).collect();
    let h: f64 = (0..d).map(|i| u[i] * w[i]).sum();
    if !(h > 0.0) {
        return Err(FieldError::Singular(format!("H(v) = {h}")).into());
    }
    Ok(DMatrix::from_fn(d, d, |i, k| {
        let delta = if i == k { 1.0 } else { 0.0 };
        -delta + (delta * du[i] * w[i] + u[i] * cfg.a[(i, k)] * du[k]) / h
            - 2.0 * u[i] * w[i] * w[k] * du[k] / (h * h)
    }))
}

/// Law of the next vertex: `P(j) ∝ A_{current,j} · counts_j^α`.
pub fn transition_probabilities(
    current: usize,
    counts: &[u64],
    cfg: &VrrwConfig,
) -> Result<Vec<f64>, ModelError> {
    let mut p = vec![0.0; cfg.d];
    transition_into(current, counts, cfg, &mut p)?;
    Ok(p)
}

fn transition_into(current: usize, counts: &[u64], cfg: &VrrwConfig, p: &mut [f64]) -> Result<(), ModelError> {
    let mut total = 0.0;
    for (j, pj) in p.iter_mut().enumerate() {
        *pj = cfg.a[(current, j)] * (counts[j] as f64).powf(cfg.alpha);
        total += *pj;
    }
    if !(total > 0.0) {
        return Err(ModelError::StuckWalk(current));
    }
    for pj in p.iter_mut() {
        *pj /= total;
    }
    Ok(())
}

fn sample_index(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return j;
        }
    }
    // u within rounding of 1: last vertex with positive mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Moves the walk one step, incrementing the count of the new vertex.
pub fn vrrw_walk_step(
    current: usize,
    counts: &mut [u64],
    cfg: &VrrwConfig,
    rng: &mut StreamRng,
) -> Result<usize, ModelError> {
    let p = transition_probabilities(current, counts, cfg)?;
    let j = sample_index(&p, rng);
    counts[j] += 1;
    Ok(j)
}

#[derive(Debug, Clone)]
struct VrrwField(VrrwConfig);

impl VectorField for VrrwField {
    fn dim(&self) -> usize {
        self.0.d
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), FieldError> {
        let mut u = vec![0.0; self.0.d];
        field_into(x, &self.0, &mut u, out)
    }
}

/// Occupation measure of the walk in recursion form. With the move to
/// vertex `J` from `current`:
///
/// * `G_n = f(v_n)`,
/// * `ε_{n+1} = e_J − P(current, ·)`,
/// * `r_{n+1}` closes the step onto the exact next occupation measure.
#[derive(Debug, Clone)]
pub struct VrrwModel {
    field: VrrwField,
    support: Vec<usize>,
}

impl VrrwModel {
    pub fn new(cfg: VrrwConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let support = (0..cfg.d).collect();
        Ok(VrrwModel { field: VrrwField(cfg), support })
    }

    /// Support `S` of the trap; `K = {z : z_i = 0 for i ∉ S}`.
    pub fn with_support(mut self, support: Vec<usize>) -> Result<Self, ModelError> {
        if support.is_empty() || support.iter().any(|&i| i >= self.field.0.d) {
            return Err(ModelError::Invalid("trap support must be a nonempty set of vertices".into()));
        }
        self.support = support;
        Ok(self)
    }

    pub fn config(&self) -> &VrrwConfig {
        &self.field.0
    }
}

struct VrrwProcess<'a> {
    cfg: &'a VrrwConfig,
    counts: Vec<u64>,
    total: u64,
    current: usize,
    u: Vec<f64>,
    p: Vec<f64>,
}

impl Process for VrrwProcess<'_> {
    fn increment(
        &mut self,
        x: &[f64],
        n: usize,
        schedule: &Schedule,
        rng: &mut StreamRng,
        out: &mut Increment,
    ) -> Result<(), ModelError> {
        field_into(x, self.cfg, &mut self.u, &mut out.g)?;
        transition_into(self.current, &self.counts, self.cfg, &mut self.p)?;
        let j = sample_index(&self.p, rng);
        self.counts[j] += 1;
        self.total += 1;
        self.current = j;

        let gamma = schedule.gamma(n + 1);
        let c = schedule.c(n + 1);
        if !(c > 0.0) {
            return Err(ModelError::Invalid(format!("occupation recursion needs c_{} > 0", n + 1)));
        }
        let total = self.total as f64;
        for i in 0..self.cfg.d {
            let e = if i == j { 1.0 } else { 0.0 };
            out.eps[i] = e - self.p[i];
            let target = self.counts[i] as f64 / total;
            out.rem[i] = ((target - x[i]) - gamma * out.g[i]) / c - out.eps[i];
        }
        Ok(())
    }
}

impl Model for VrrwModel {
    fn id(&self) -> String {
        "vrrw".into()
    }

    fn dim(&self) -> usize {
        self.field.0.d
    }

    fn process(&self, x0: &[f64]) -> Result<Box<dyn Process + '_>, ModelError> {
        let cfg = &self.field.0;
        if x0.len() != cfg.d {
            return Err(ModelError::DimensionMismatch { expected: cfg.d, got: x0.len() });
        }
        let v0 = cfg.initial_occupation();
        if x0.iter().zip(&v0).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(ModelError::Invalid(format!(
                "x0 {x0:?} differs from the initial occupation {v0:?}"
            )));
        }
        Ok(Box::new(VrrwProcess {
            cfg,
            counts: cfg.initial_counts.clone(),
            total: cfg.initial_counts.iter().sum(),
            current: cfg.initial_vertex,
            u: vec![0.0; cfg.d],
            p: vec![0.0; cfg.d],
        }))
    }

    fn equilibrium(&self) -> Option<Equilibrium> {
        let cfg = &self.field.0;
        let x_star = cfg.uniform();
        let jacobian = vrrw_jacobian(x_star.as_slice(), cfg).ok()?;
        Some(Equilibrium { x_star, jacobian })
    }

    fn field(&self) -> Option<&dyn VectorField> {
        Some(&self.field)
    }

    fn manifold(&self) -> Option<AffineManifold> {
        let d = self.field.0.d;
        let k = self.support.len();
        let mut base = vec![0.0; d];
        for &i in &self.support {
            base[i] = 1.0 / k as f64;
        }
        let dirs = DMatrix::from_fn(d, k, |i, j| if self.support[j] == i { 1.0 } else { 0.0 });
        AffineManifold::from_directions(&base, &dirs).ok()
    }
}

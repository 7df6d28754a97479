use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LinearModel, NoiseLaw, NoiseSpec, RemainderLaw};

/// Models that each violate one non-convergence hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// `G = x`, `ε ≡ 0`: nothing pushes the process off the trap.
    DegenerateNoise,
    /// `f(x) = (x₁, −x₂)` with Rademacher noise on `x₂` only.
    StableNoise,
    /// `G = x`, Rademacher noise, `r_n = n^{-1/2}`.
    DivergentRemainder,
}

impl ControlVariant {
    pub const ALL: [ControlVariant; 3] = [
        ControlVariant::DegenerateNoise,
        ControlVariant::StableNoise,
        ControlVariant::DivergentRemainder,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            ControlVariant::DegenerateNoise => "control_degenerate_noise",
            ControlVariant::StableNoise => "control_stable_noise",
            ControlVariant::DivergentRemainder => "control_divergent_remainder",
        }
    }
}

pub fn control_model(variant: ControlVariant) -> LinearModel {
    let scalar = || DMatrix::from_element(1, 1, 1.0);
    let (h, noise, remainder) = match variant {
        ControlVariant::DegenerateNoise => (scalar(), NoiseSpec::new(NoiseLaw::Zero), RemainderLaw::Zero),
        ControlVariant::StableNoise => (
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            NoiseSpec::on(NoiseLaw::Rademacher, vec![1]),
            RemainderLaw::Zero,
        ),
        ControlVariant::DivergentRemainder => (
            scalar(),
            NoiseSpec::new(NoiseLaw::Rademacher),
            RemainderLaw::Power { exponent: 0.5, scale: 1.0 },
        ),
    };
    let d = h.nrows();
    LinearModel::new(variant.id(), h, DVector::zeros(d), noise, remainder).expect("valid control model")
}

pub fn control_models() -> Vec<(ControlVariant, LinearModel)> {
    ControlVariant::ALL.iter().map(|&v| (v, control_model(v))).collect()
}

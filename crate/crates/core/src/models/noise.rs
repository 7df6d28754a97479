use rand::Rng;
use rand_distr::{Distribution, Normal, Pareto, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelError, StreamRng};

/// Law of each noise coordinate; coordinates are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum NoiseLaw {
    Zero,
    /// `±1` with probability 1/2 each.
    Rademacher,
    Gaussian {
        #[serde(default = "one")]
        sd: f64,
    },
    /// Random sign times a Pareto variable with unit scale; moments of
    /// order `≥ shape` are infinite.
    Pareto { shape: f64 },
}

fn one() -> f64 {
    1.0
}

/// A noise law restricted to a subset of coordinates (the others are 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub law: NoiseLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
}

impl NoiseSpec {
    pub fn new(law: NoiseLaw) -> Self {
        NoiseSpec { law, support: None }
    }

    pub fn on(law: NoiseLaw, support: Vec<usize>) -> Self {
        NoiseSpec { law, support: Some(support) }
    }

    pub fn validate(&self, d: usize) -> Result<(), ModelError> {
        match self.law {
            NoiseLaw::Gaussian { sd } if !(sd >= 0.0 && sd.is_finite()) => {
                return Err(ModelError::Invalid(format!("gaussian sd {sd} must be finite and ≥ 0")))
            }
            NoiseLaw::Pareto { shape } if !(shape > 1.0 && shape.is_finite()) => {
                return Err(ModelError::Invalid(format!("pareto shape {shape} must exceed 1")))
            }
            _ => {}
        }
        if let Some(s) = &self.support {
            if let Some(&i) = s.iter().find(|&&i| i >= d) {
                return Err(ModelError::Invalid(format!("noise support index {i} ≥ dimension {d}")));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut StreamRng) -> f64 {
        match self.law {
            NoiseLaw::Zero => 0.0,
            NoiseLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            NoiseLaw::Gaussian { sd } => {
                if sd == 1.0 {
                    StandardNormal.sample(rng)
                } else {
                    Normal::new(0.0, sd).expect("validated sd").sample(rng)
                }
            }
            NoiseLaw::Pareto { shape } => {
                let m: f64 = Pareto::new(1.0, shape).expect("validated shape").sample(rng);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut StreamRng, out: &mut [f64]) {
        match &self.support {
            None => {
                for o in out.iter_mut() {
                    *o = self.draw(rng);
                }
            }
            Some(s) => {
                out.fill(0.0);
                for &i in s {
                    out[i] = self.draw(rng);
                }
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.law, NoiseLaw::Zero) || self.support.as_ref().is_some_and(Vec::is_empty)
    }
}

/// Deterministic remainder `r_{n+1}`, identical in every coordinate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum RemainderLaw {
    #[default]
    Zero,
    /// `r_{n+1} = scale · (n+1)^{-exponent}`.
    Power { exponent: f64, scale: f64 },
}

impl RemainderLaw {
    pub fn value(&self, n: usize) -> f64 {
        match *self {
            RemainderLaw::Zero => 0.0,
            RemainderLaw::Power { exponent, scale } => scale * ((n + 1) as f64).powf(-exponent),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rademacher_and_support() {
        let mut rng = StreamRng::seed_from_u64(1);
        let spec = NoiseSpec::on(NoiseLaw::Rademacher, vec![1]);
        let mut out = [9.0; 3];
        spec.sample(&mut rng, &mut out);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1].abs(), 1.0);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn pareto_is_symmetric_heavy() {
        let mut rng = StreamRng::seed_from_u64(2);
        let spec = NoiseSpec::new(NoiseLaw::Pareto { shape: 3.0 });
        let mut out = [0.0];
        let mut pos = 0;
        for _ in 0..10_000 {
            spec.sample(&mut rng, &mut out);
            assert!(out[0].abs() >= 1.0);
            pos += (out[0] > 0.0) as usize;
        }
        assert!((4_700..5_300).contains(&pos));
    }

    #[test]
    fn validation() {
        assert!(NoiseSpec::new(NoiseLaw::Pareto { shape: 0.5 }).validate(1).is_err());
        assert!(NoiseSpec::on(NoiseLaw::Rademacher, vec![2]).validate(2).is_err());
        let json = r#"{"law":"gaussian","sd":2.0,"support":[0]}"#;
        let spec: NoiseSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec, NoiseSpec::on(NoiseLaw::Gaussian { sd: 2.0 }, vec![0]));
    }

    #[test]
    fn remainder_power() {
        let r = RemainderLaw::Power { exponent: 0.5, scale: 1.0 };
        assert_eq!(r.value(3), 0.5);
        assert_eq!(RemainderLaw::Zero.value(10), 0.0);
    }
}

//! Synthetic 2-D datasets.

use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::oracle::{Gmm, LabeledGmm};
use crate::rng;

/// How a dataset is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Gmm { mixture: Gmm },
    LabeledGmm { mixture: LabeledGmm },
    /// Points on a circle with radial Gaussian jitter.
    Ring { radius: f64, noise: f64 },
    /// Two interleaved half circles, labeled 0 and 1.
    TwoMoons { noise: f64 },
    /// Points read from a CSV file by the IO layer.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub spec: DatasetSpec,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Option<Vec<usize>>, spec: DatasetSpec) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::config("dataset points must share a nonzero dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::config("labels must have one entry per point"));
            }
        }
        Ok(Dataset { points, labels, spec })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Number of classes, taken as one past the largest label.
    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }
}

fn validate_noise(noise: f64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config("noise must be finite and non-negative"));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Result<(Vec<f64>, Option<usize>)> {
    Ok(match spec {
        DatasetSpec::Gmm { mixture } => (mixture.sample(rng).0, None),
        DatasetSpec::LabeledGmm { mixture } => {
            let (x, i) = mixture.gmm.sample(rng);
            (x, Some(mixture.labels()[i]))
        }
        DatasetSpec::Ring { radius, noise } => {
            let theta = rng::uniform(rng, 0.0, 2.0 * core::f64::consts::PI);
            let r = radius + noise * rng::normal(rng);
            (alloc::vec![r * math::cos(theta), r * math::sin(theta)], None)
        }
        DatasetSpec::TwoMoons { noise } => {
            let upper = rng.random::<bool>();
            let theta = rng::uniform(rng, 0.0, core::f64::consts::PI);
            let (x, y) = if upper {
                (math::cos(theta), math::sin(theta))
            } else {
                (1.0 - math::cos(theta), 0.5 - math::sin(theta))
            };
            let jitter = rng::normal_vec(rng, 2);
            (alloc::vec![x + noise * jitter[0], y + noise * jitter[1]], Some(usize::from(!upper)))
        }
        DatasetSpec::File { .. } => return Err(Error::config("file datasets are loaded, not generated")),
    })
}

/// `n` points drawn from `spec`, deterministic in `seed`.
pub fn generate_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    match spec {
        DatasetSpec::Ring { radius, noise } => {
            validate_noise(*noise)?;
            if !(*radius > 0.0 && radius.is_finite()) {
                return Err(Error::config("ring radius must be positive"));
            }
        }
        DatasetSpec::TwoMoons { noise } => validate_noise(*noise)?,
        _ => {}
    }
    let mut r = rng::seeded(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y) = draw(spec, &mut r)?;
        points.push(x);
        if let Some(y) = y {
            labels.push(y);
        }
    }
    let labels = (!labels.is_empty()).then_some(labels);
    Dataset::new(points, labels, spec.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::TwoMoons { noise: 0.05 };
        let a = generate_dataset(&spec, 50, 3).unwrap();
        assert_eq!(a, generate_dataset(&spec, 50, 3).unwrap());
        assert_ne!(a, generate_dataset(&spec, 50, 4).unwrap());
        assert_eq!(a.labels.as_ref().unwrap().len(), 50);
    }

    #[test]
    fn ring_points_near_radius() {
        let d = generate_dataset(&DatasetSpec::Ring { radius: 2.0, noise: 0.0 }, 20, 1).unwrap();
        for p in &d.points {
            assert!((math::norm(p) - 2.0).abs() < 1e-12);
        }
        assert!(d.labels.is_none());
    }

    #[test]
    fn malformed_specs_fail() {
        assert!(generate_dataset(&DatasetSpec::Ring { radius: -1.0, noise: 0.1 }, 5, 0).is_err());
        assert!(generate_dataset(&DatasetSpec::TwoMoons { noise: f64::NAN }, 5, 0).is_err());
        assert!(generate_dataset(&DatasetSpec::File { path: "x.csv".into() }, 5, 0).is_err());
        let spec = DatasetSpec::Gmm { mixture: Gmm::default_training() };
        assert!(generate_dataset(&spec, 0, 0).is_err());
    }

    #[test]
    fn labeled_mixture_carries_labels() {
        let spec = DatasetSpec::LabeledGmm {
            mixture: LabeledGmm::default_guidance(),
        };
        let d = generate_dataset(&spec, 100, 0).unwrap();
        assert_eq!(d.class_count(), Some(2));
    }
}

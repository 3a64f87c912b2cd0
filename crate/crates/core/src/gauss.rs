//! Diagonal Gaussians: densities, KL, reparameterized draws and linear
//! composition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn check_dims(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dims("DiagGaussian", mean.len(), var.len())?;
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::contract(format!("variance {v} is not strictly positive")));
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![var; n])
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Degenerate Gaussian with all mass at `mean`.
    pub fn point_mass(mean: Vec<f64>) -> Self {
        let n = mean.len();
        DiagGaussian {
            mean,
            var: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    fn require_positive(&self) -> Result<()> {
        if self.var.iter().any(|v| *v <= 0.0) {
            return Err(Error::contract("density of a zero-variance Gaussian"));
        }
        Ok(())
    }
}

pub fn log_pdf(g: &DiagGaussian, x: &[f64]) -> Result<f64> {
    check_dims("log_pdf", g.dim(), x.len())?;
    g.require_positive()?;
    let mut acc = 0.0;
    for ((m, v), xi) in g.mean.iter().zip(&g.var).zip(x) {
        let d = xi - m;
        acc += d * d / v + math::ln(*v) + math::LN_2PI;
    }
    Ok(-0.5 * acc)
}

/// `KL(p ‖ q)` for diagonal covariances.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_dims("kl_diag", p.dim(), q.dim())?;
    q.require_positive()?;
    p.require_positive()?;
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let (vp, vq) = (p.var[i], q.var[i]);
        let d = q.mean[i] - p.mean[i];
        acc += math::ln(vq / vp) - 1.0 + vp / vq + d * d / vq;
    }
    Ok(0.5 * acc)
}

/// `μ + σ ⊙ ε`.
pub fn reparam_sample(g: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    check_dims("reparam_sample", g.dim(), eps.len())?;
    Ok(g
        .mean
        .iter()
        .zip(&g.var)
        .zip(eps)
        .map(|((m, v), e)| m + math::sqrt(*v) * e)
        .collect())
}

/// Law of `a·X + N(0, added_var·I)` for `X ~ inner`.
pub fn compose_linear(a: f64, inner: &DiagGaussian, added_var: f64) -> Result<DiagGaussian> {
    if !(added_var >= 0.0) {
        return Err(Error::contract(format!("added variance {added_var} is negative")));
    }
    Ok(DiagGaussian {
        mean: inner.mean.iter().map(|m| a * m).collect(),
        var: inner.var.iter().map(|v| a * a * v + added_var).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_mode() {
        let lp = log_pdf(&DiagGaussian::standard(1), &[0.0]).unwrap();
        assert!((lp + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_points() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![0.3, 2.0]).unwrap();
        let a = log_pdf(&g, &[0.7, -1.1]).unwrap();
        let b = log_pdf(&g, &[-0.7, 1.1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_values() {
        let s = DiagGaussian::standard(1);
        assert_eq!(kl_diag(&s, &s).unwrap(), 0.0);
        let shifted = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_diag(&shifted, &s).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reparam_identities() {
        let g = DiagGaussian::new(vec![1.0, -2.0], vec![4.0, 0.25]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let eps = [0.3, -1.7];
        assert_eq!(reparam_sample(&DiagGaussian::standard(2), &eps).unwrap(), eps.to_vec());
        assert_eq!(reparam_sample(&g, &[1.0, 1.0]).unwrap(), vec![3.0, -1.5]);
    }

    #[test]
    fn dimension_errors() {
        let g = DiagGaussian::standard(2);
        assert!(matches!(log_pdf(&g, &[0.0]), Err(Error::Shape { .. })));
        assert!(matches!(kl_diag(&g, &DiagGaussian::standard(3)), Err(Error::Shape { .. })));
        assert!(matches!(reparam_sample(&g, &[0.0; 3]), Err(Error::Shape { .. })));
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn compose_identity_and_two_steps() {
        let g = DiagGaussian::new(vec![0.5, -1.0], vec![0.2, 3.0]).unwrap();
        assert_eq!(compose_linear(1.0, &g, 0.0).unwrap(), g);
        assert!(compose_linear(1.0, &g, -1e-9).is_err());
        let (a1, a2) = (0.9_f64, 0.8_f64);
        let x0 = DiagGaussian::point_mass(vec![2.0]);
        let s1 = compose_linear(math::sqrt(a1), &x0, 1.0 - a1).unwrap();
        let s2 = compose_linear(math::sqrt(a2), &s1, 1.0 - a2).unwrap();
        assert!((s2.var()[0] - (1.0 - a1 * a2)).abs() < 1e-15);
        assert!((s2.mean()[0] - 2.0 * math::sqrt(a1 * a2)).abs() < 1e-15);
    }
}

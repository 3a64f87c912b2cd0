//! Analytic Gaussian-mixture ground truth: densities, scores, perturbed
//! marginals, Tweedie means and noisy-class posteriors.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{self, DiagGaussian};
use crate::math;
use crate::rng;

/// Mixture `Σ_i c_i N(μ_i, diag(v_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<DiagGaussian>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl TryFrom<GmmSpec> for Gmm {
    type Error = Error;
    fn try_from(s: GmmSpec) -> Result<Self> {
        Gmm::new(s.weights, s.means, s.vars)
    }
}

impl From<Gmm> for GmmSpec {
    fn from(g: Gmm) -> Self {
        GmmSpec {
            means: g.components.iter().map(|c| c.mean().to_vec()).collect(),
            vars: g.components.iter().map(|c| c.var().to_vec()).collect(),
            weights: g.weights,
        }
    }
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::config(format!(
                "mixture needs matching weights/means/vars, got {}/{}/{}",
                weights.len(),
                means.len(),
                vars.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        let components = means
            .into_iter()
            .zip(vars)
            .map(|(m, v)| {
                if m.len() != dim {
                    return Err(Error::config("mixture components disagree on dimension"));
                }
                DiagGaussian::new(m, v).map_err(|e| Error::config(format!("{e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gmm {
            weights,
            components,
        })
    }

    /// Isotropic components sharing one variance.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        let vars = means.iter().map(|m| vec![var; m.len()]).collect();
        Self::new(weights, means, vars)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean().to_vec()).collect()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                op: "gmm",
                left: vec![self.dim()],
                right: vec![x.len()],
            });
        }
        Ok(())
    }

    /// `ln c_i + ln N_i(x)` per component.
    fn joint_logs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| Ok(math::ln(*w) + gauss::log_pdf(c, x)?))
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(math::log_sum_exp(&self.joint_logs(x)?))
    }

    /// Posterior component probabilities, normalized in log space.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logs = self.joint_logs(x)?;
        let z = math::log_sum_exp(&logs);
        Ok(logs.iter().map(|l| math::exp(l - z)).collect())
    }

    /// `∇ₓ ln p(x) = Σ_i r_i(x) Σ_i⁻¹ (μ_i − x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut out = vec![0.0; x.len()];
        for (ri, c) in r.iter().zip(&self.components) {
            for (k, o) in out.iter_mut().enumerate() {
                *o += ri * (c.mean()[k] - x[k]) / c.var()[k];
            }
        }
        Ok(out)
    }

    /// Marginal of `√ᾱ x_0 + √(1 − ᾱ) ε` for `x_0` from this mixture.
    pub fn perturb_vp(&self, alpha_bar: f64) -> Result<Gmm> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::contract(format!("alpha_bar {alpha_bar} outside (0, 1]")));
        }
        self.perturb_vp_pair(alpha_bar, 1.0 - alpha_bar)
    }

    /// Same as [`Gmm::perturb_vp`] with an explicitly supplied `1 − ᾱ`.
    pub fn perturb_vp_pair(&self, alpha_bar: f64, one_minus: f64) -> Result<Gmm> {
        let a = math::sqrt(alpha_bar);
        let components = self
            .components
            .iter()
            .map(|c| gauss::compose_linear(a, c, one_minus))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gmm {
            weights: self.weights.clone(),
            components,
        })
    }

    /// Marginal of `x + σ ε`.
    pub fn perturb_ve(&self, sigma: f64) -> Result<Gmm> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::contract(format!("noise level {sigma} must be >= 0")));
        }
        let components = self
            .components
            .iter()
            .map(|c| gauss::compose_linear(1.0, c, sigma * sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Gmm {
            weights: self.weights.clone(),
            components,
        })
    }

    /// One draw and the index of the component it came from.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let eps = rng::normal_vec(rng, self.dim());
        let x = gauss::reparam_sample(&self.components[idx], &eps).expect("dims agree");
        (x, idx)
    }

    /// Index of the component mean nearest to `x`.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.components.iter().enumerate() {
            let d = math::sq_dist(c.mean(), x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Three-component 2-D mixture with weights 0.5 / 0.3 / 0.2.
    pub fn default_training() -> Gmm {
        Gmm::isotropic(
            vec![0.5, 0.3, 0.2],
            vec![vec![-1.2, -0.7], vec![1.2, -0.7], vec![0.0, 1.3]],
            0.04,
        )
        .expect("valid default")
    }

    /// Three overlapping 2-D modes; the bottom-right one carries most weight.
    pub fn fig4_default() -> Gmm {
        Gmm::isotropic(
            vec![0.2, 0.2, 0.6],
            vec![vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
            0.35,
        )
        .expect("valid default")
    }
}

pub fn gmm_log_density(g: &Gmm, x: &[f64]) -> Result<f64> {
    g.log_density(x)
}

pub fn gmm_score(g: &Gmm, x: &[f64]) -> Result<Vec<f64>> {
    g.score(x)
}

pub fn perturb_vp(g: &Gmm, alpha_bar: f64) -> Result<Gmm> {
    g.perturb_vp(alpha_bar)
}

pub fn perturb_ve(g: &Gmm, sigma: f64) -> Result<Gmm> {
    g.perturb_ve(sigma)
}

/// Tweedie estimate of `√ᾱ x_0`: `x_t + (1 − ᾱ) ∇ ln p_t(x_t)`, where `g_t`
/// is the VP-perturbed mixture at `ᾱ`.
pub fn tweedie_mean(g_t: &Gmm, alpha_bar: f64, x_t: &[f64]) -> Result<Vec<f64>> {
    let s = g_t.score(x_t)?;
    Ok(x_t
        .iter()
        .zip(&s)
        .map(|(x, si)| x + (1.0 - alpha_bar) * si)
        .collect())
}

/// Mixture whose components carry class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledGmm {
    pub gmm: Gmm,
    labels: Vec<usize>,
}

impl LabeledGmm {
    pub fn new(gmm: Gmm, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != gmm.len() {
            return Err(Error::config("one label per mixture component required"));
        }
        Ok(LabeledGmm { gmm, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if !self.labels.contains(&y) {
            return Err(Error::contract(format!("unknown class {y}")));
        }
        Ok(())
    }

    pub fn class_weight(&self, y: usize) -> f64 {
        self.labels
            .iter()
            .zip(self.gmm.weights())
            .filter(|(l, _)| **l == y)
            .map(|(_, w)| w)
            .sum()
    }

    /// The class-`y` components with renormalized weights.
    pub fn class_mixture(&self, y: usize) -> Result<Gmm> {
        self.check_class(y)?;
        let total = self.class_weight(y);
        let mut weights = Vec::new();
        let mut comps = Vec::new();
        for ((l, w), c) in self.labels.iter().zip(self.gmm.weights()).zip(self.gmm.components()) {
            if *l == y {
                weights.push(w / total);
                comps.push(c.clone());
            }
        }
        Ok(Gmm {
            weights,
            components: comps,
        })
    }

    pub fn map_gmm(&self, f: impl FnOnce(&Gmm) -> Result<Gmm>) -> Result<LabeledGmm> {
        Ok(LabeledGmm {
            gmm: f(&self.gmm)?,
            labels: self.labels.clone(),
        })
    }

    pub fn perturb_vp(&self, alpha_bar: f64) -> Result<LabeledGmm> {
        self.map_gmm(|g| g.perturb_vp(alpha_bar))
    }

    pub fn perturb_ve(&self, sigma: f64) -> Result<LabeledGmm> {
        self.map_gmm(|g| g.perturb_ve(sigma))
    }

    /// `ln p(y | x)` under this (already perturbed) mixture.
    pub fn class_log_prob(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_class(y)?;
        let logs = self.gmm.joint_logs(x)?;
        let in_class: Vec<f64> = logs
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == y)
            .map(|(v, _)| *v)
            .collect();
        Ok(math::log_sum_exp(&in_class) - math::log_sum_exp(&logs))
    }

    /// `∇ₓ ln p(x | y)`, the score of the class sub-mixture.
    pub fn conditional_score(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.class_mixture(y)?.score(x)
    }

    /// `∇ₓ ln p(y | x) = ∇ₓ ln p(x | y) − ∇ₓ ln p(x)`.
    pub fn class_log_prob_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let c = self.conditional_score(x, y)?;
        let u = self.gmm.score(x)?;
        Ok(c.iter().zip(&u).map(|(a, b)| a - b).collect())
    }

    /// Two classes over four 2-D modes: class 0 owns the left pair.
    pub fn default_guidance() -> LabeledGmm {
        let gmm = Gmm::isotropic(
            vec![0.3, 0.2, 0.3, 0.2],
            vec![
                vec![-1.5, 1.0],
                vec![-1.5, -1.0],
                vec![1.5, 1.0],
                vec![1.5, -1.0],
            ],
            0.05,
        )
        .expect("valid default");
        LabeledGmm::new(gmm, vec![0, 0, 1, 1]).expect("valid default")
    }
}

/// `ln p(y | x_t)` for the VP-perturbed labeled mixture at `ᾱ`.
pub fn classifier_log_prob(lg: &LabeledGmm, alpha_bar: f64, x_t: &[f64], y: usize) -> Result<f64> {
    lg.perturb_vp(alpha_bar)?.class_log_prob(x_t, y)
}

/// `∇ ln p(x_t | y)` for the VP-perturbed labeled mixture at `ᾱ`.
pub fn conditional_score(lg: &LabeledGmm, alpha_bar: f64, x_t: &[f64], y: usize) -> Result<Vec<f64>> {
    lg.perturb_vp(alpha_bar)?.conditional_score(x_t, y)
}

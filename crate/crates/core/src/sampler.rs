//! Generative procedures: ancestral reverse diffusion, Langevin and annealed
//! Langevin dynamics, and the two guidance combinators.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{convert, one_hot, posterior_mean_from_output, DenoiserModel, Parameterization};
use crate::error::{Error, Result};
use crate::math;
use crate::ndgrad::Tensor;
use crate::oracle::{Gmm, LabeledGmm};
use crate::rng;
use crate::schedule::{self, NoiseSchedule};

/// Noise level at which a score is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    /// Diffusion timestep `t` of a variance-preserving schedule.
    Timestep(usize),
    /// Standard deviation of variance-exploding Gaussian noise.
    Sigma(f64),
}

impl Level {
    pub fn value(self) -> f64 {
        match self {
            Level::Timestep(t) => t as f64,
            Level::Sigma(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub step: usize,
    pub level: Level,
    pub x: Vec<f64>,
    /// Norm of the score evaluated at `x`, when it was computed.
    pub score_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<TrajectoryState>,
    pub seed: Option<u64>,
    pub config: Option<String>,
}

impl Trajectory {
    /// A trajectory holding only its initial state.
    pub fn start(level: Level, x: Vec<f64>) -> Self {
        Trajectory {
            states: vec![TrajectoryState {
                step: 0,
                level,
                x,
                score_norm: None,
            }],
            seed: None,
            config: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_config(mut self, config: impl Into<String>) -> Self {
        self.config = Some(config.into());
        self
    }

    pub fn last(&self) -> &TrajectoryState {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_x(&self) -> &[f64] {
        &self.last().x
    }

    pub fn dim(&self) -> usize {
        self.states[0].x.len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    Oracle,
    Learned,
}

/// A score field frozen at one level.
pub trait LevelScore {
    fn score(&self, x: &[f64], y: Option<usize>) -> Result<Vec<f64>>;
}

struct AtLevel<'a, F: ?Sized> {
    field: &'a F,
    level: Level,
}

impl<F: ScoreField + ?Sized> LevelScore for AtLevel<'_, F> {
    fn score(&self, x: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
        self.field.score(x, self.level, y)
    }
}

/// A score `∇ ln p(x | y)` at a noise level.
pub trait ScoreField {
    fn dim(&self) -> usize;

    fn source(&self) -> ScoreSource;

    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>>;

    /// The field at a fixed level. Implementations may precompute
    /// level-dependent state; results equal those of [`ScoreField::score`].
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        Ok(Box::new(AtLevel { field: self, level }))
    }

    /// Variance of the noise added at `level`, if the field knows it.
    fn level_variance(&self, level: Level) -> Option<f64> {
        match level {
            Level::Sigma(s) => Some(s * s),
            Level::Timestep(_) => None,
        }
    }
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn source(&self) -> ScoreSource {
        (**self).source()
    }
    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>> {
        (**self).score(x, level, y)
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        (**self).level_variance(level)
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        (**self).at_level(level)
    }
}

/// A classifier gradient frozen at one level.
pub trait LevelGradient {
    fn grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>>;
}

struct GradAtLevel<'a, C: ?Sized> {
    classifier: &'a C,
    level: Level,
}

impl<C: ClassifierGradient + ?Sized> LevelGradient for GradAtLevel<'_, C> {
    fn grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.classifier.grad(x, self.level, y)
    }
}

/// Gradient `∇_x ln p(y | x)` of a (noisy) classifier.
pub trait ClassifierGradient {
    fn grad(&self, x: &[f64], level: Level, y: usize) -> Result<Vec<f64>>;

    fn grad_at_level(&self, level: Level) -> Result<Box<dyn LevelGradient + '_>> {
        Ok(Box::new(GradAtLevel { classifier: self, level }))
    }
}

impl<C: ClassifierGradient + ?Sized> ClassifierGradient for &C {
    fn grad(&self, x: &[f64], level: Level, y: usize) -> Result<Vec<f64>> {
        (**self).grad(x, level, y)
    }
    fn grad_at_level(&self, level: Level) -> Result<Box<dyn LevelGradient + '_>> {
        (**self).grad_at_level(level)
    }
}

/// A mixture already perturbed to some level.
struct FixedGmm {
    gmm: Gmm,
    dim: usize,
}

impl LevelScore for FixedGmm {
    fn score(&self, x: &[f64], _y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim)?;
        self.gmm.score(x)
    }
}

/// A labeled mixture already perturbed to some level, with its class
/// sub-mixtures split out.
struct FixedLabeled {
    gmm: Gmm,
    classes: Vec<Option<Gmm>>,
}

impl FixedLabeled {
    fn new(lg: LabeledGmm) -> Self {
        let classes = (0..lg.class_count()).map(|y| lg.class_mixture(y).ok()).collect();
        FixedLabeled { gmm: lg.gmm, classes }
    }

    fn class(&self, y: usize) -> Result<&Gmm> {
        self.classes
            .get(y)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::contract(format!("unknown class {y}")))
    }
}

impl LevelScore for FixedLabeled {
    fn score(&self, x: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.gmm.dim())?;
        match y {
            None => self.gmm.score(x),
            Some(y) => self.class(y)?.score(x),
        }
    }
}

impl LevelGradient for FixedLabeled {
    fn grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        check_dim(x, self.gmm.dim())?;
        let c = self.class(y)?.score(x)?;
        let u = self.gmm.score(x)?;
        Ok(c.iter().zip(&u).map(|(a, b)| a - b).collect())
    }
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Shape {
            op: "score field",
            left: vec![dim],
            right: vec![x.len()],
        });
    }
    Ok(())
}

/// Wraps a closure as an oracle field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], Level) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(&[f64], Level) -> Vec<f64>> ScoreField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Oracle
    }
    fn score(&self, x: &[f64], level: Level, _y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim)?;
        let s = (self.f)(x, level);
        check_dim(&s, self.dim)?;
        Ok(s)
    }
}

/// Exact score of a mixture, ignoring the level.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticGmmField {
    pub gmm: Gmm,
}

impl ScoreField for StaticGmmField {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Oracle
    }
    fn score(&self, x: &[f64], _level: Level, _y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        self.gmm.score(x)
    }
}

fn vp_level(s: &NoiseSchedule, level: Level) -> Result<(f64, f64)> {
    match level {
        Level::Timestep(t) => {
            s.check_t(t, 0)?;
            Ok((s.alpha_bar(t), s.one_minus_alpha_bar(t)))
        }
        Level::Sigma(_) => Err(Error::contract("variance-preserving field needs a timestep level")),
    }
}

fn ve_sigma(level: Level) -> Result<f64> {
    match level {
        Level::Sigma(s) if s >= 0.0 && s.is_finite() => Ok(s),
        Level::Sigma(s) => Err(Error::contract(format!("invalid noise level {s}"))),
        Level::Timestep(_) => Err(Error::contract("variance-exploding field needs a sigma level")),
    }
}

/// Exact score of a mixture under the variance-preserving forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVp {
    pub gmm: Gmm,
    pub schedule: NoiseSchedule,
}

impl ScoreField for OracleVp {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Oracle
    }
    fn score(&self, x: &[f64], level: Level, _y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let (ab, om) = vp_level(&self.schedule, level)?;
        self.gmm.perturb_vp_pair(ab, om)?.score(x)
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        vp_level(&self.schedule, level).ok().map(|(_, om)| om)
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        let (ab, om) = vp_level(&self.schedule, level)?;
        Ok(Box::new(FixedGmm {
            gmm: self.gmm.perturb_vp_pair(ab, om)?,
            dim: self.dim(),
        }))
    }
}

/// Exact score of a mixture convolved with `N(0, σ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVe {
    pub gmm: Gmm,
}

impl ScoreField for OracleVe {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Oracle
    }
    fn score(&self, x: &[f64], level: Level, _y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        self.gmm.perturb_ve(ve_sigma(level)?)?.score(x)
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        Ok(Box::new(FixedGmm {
            gmm: self.gmm.perturb_ve(ve_sigma(level)?)?,
            dim: self.dim(),
        }))
    }
}

/// Exact marginal and class-conditional scores of a labeled mixture, at
/// either kind of level. Timestep levels need a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledOracle {
    pub mixture: LabeledGmm,
    pub schedule: Option<NoiseSchedule>,
}

impl LabeledOracle {
    pub fn ve(mixture: LabeledGmm) -> Self {
        LabeledOracle { mixture, schedule: None }
    }

    pub fn vp(mixture: LabeledGmm, schedule: NoiseSchedule) -> Self {
        LabeledOracle {
            mixture,
            schedule: Some(schedule),
        }
    }

    /// The mixture as seen at `level`.
    pub fn perturbed(&self, level: Level) -> Result<LabeledGmm> {
        match (level, &self.schedule) {
            (Level::Sigma(_), _) => self.mixture.perturb_ve(ve_sigma(level)?),
            (Level::Timestep(_), Some(s)) => {
                let (ab, om) = vp_level(s, level)?;
                self.mixture.map_gmm(|g| g.perturb_vp_pair(ab, om))
            }
            (Level::Timestep(_), None) => Err(Error::contract("timestep level without a schedule")),
        }
    }
}

impl ScoreField for LabeledOracle {
    fn dim(&self) -> usize {
        self.mixture.gmm.dim()
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Oracle
    }
    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let lg = self.perturbed(level)?;
        match y {
            None => lg.gmm.score(x),
            Some(y) => lg.conditional_score(x, y),
        }
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        match (level, &self.schedule) {
            (Level::Sigma(s), _) => Some(s * s),
            (Level::Timestep(_), Some(s)) => vp_level(s, level).ok().map(|(_, om)| om),
            _ => None,
        }
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        Ok(Box::new(FixedLabeled::new(self.perturbed(level)?)))
    }
}

impl ClassifierGradient for LabeledOracle {
    fn grad(&self, x: &[f64], level: Level, y: usize) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        self.perturbed(level)?.class_log_prob_grad(x, y)
    }
    fn grad_at_level(&self, level: Level) -> Result<Box<dyn LevelGradient + '_>> {
        Ok(Box::new(FixedLabeled::new(self.perturbed(level)?)))
    }
}

/// Score implied by a trained denoiser, `y` one-hot encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedField {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

impl LearnedField {
    pub fn new(model: DenoiserModel, schedule: NoiseSchedule) -> Result<Self> {
        if model.steps != schedule.steps() {
            return Err(Error::contract("model and schedule disagree on T"));
        }
        Ok(LearnedField { model, schedule })
    }
}

fn condition(model: &DenoiserModel, y: Option<usize>) -> Result<Option<Vec<f64>>> {
    match (y, model.cond_dim) {
        (None, _) => Ok(None),
        (Some(y), Some(w)) => one_hot(y, w).map(Some),
        (Some(_), None) => Err(Error::contract("model is unconditional")),
    }
}

impl ScoreField for LearnedField {
    fn dim(&self) -> usize {
        self.model.data_dim
    }
    fn source(&self) -> ScoreSource {
        ScoreSource::Learned
    }
    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>> {
        let t = match level {
            Level::Timestep(t) => t,
            Level::Sigma(_) => return Err(Error::contract("learned field needs a timestep level")),
        };
        let c = condition(&self.model, y)?;
        let out = self.model.predict(x, t, c.as_deref())?;
        convert(&out, self.model.parameterization, Parameterization::Score, x, t, &self.schedule)
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        vp_level(&self.schedule, level).ok().map(|(_, om)| om)
    }
}

fn check_gamma(gamma: f64, allow_negative: bool) -> Result<()> {
    if !gamma.is_finite() || (!allow_negative && gamma < 0.0) {
        return Err(Error::contract(format!("invalid guidance weight {gamma}")));
    }
    Ok(())
}

/// `s + γ g`, elementwise.
pub fn combine_classifier(uncond: &[f64], classifier_grad: &[f64], gamma: f64) -> Vec<f64> {
    uncond.iter().zip(classifier_grad).map(|(s, g)| s + gamma * g).collect()
}

/// `γ c + (1 − γ) u`, elementwise.
pub fn combine_cfg(cond: &[f64], uncond: &[f64], gamma: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| gamma * c + (1.0 - gamma) * u).collect()
}

/// `∇ ln p(x) + γ ∇ ln p(y | x)`. Without a label the field is `uncond`.
pub struct ClassifierGuided<U, C> {
    uncond: U,
    classifier: C,
    gamma: f64,
}

pub fn classifier_guided_score<U: ScoreField, C: ClassifierGradient>(
    uncond: U,
    classifier: C,
    gamma: f64,
) -> Result<ClassifierGuided<U, C>> {
    check_gamma(gamma, false)?;
    Ok(ClassifierGuided {
        uncond,
        classifier,
        gamma,
    })
}

impl<U: ScoreField, C: ClassifierGradient> ScoreField for ClassifierGuided<U, C> {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }
    fn source(&self) -> ScoreSource {
        self.uncond.source()
    }
    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>> {
        let s = self.uncond.score(x, level, None)?;
        match y {
            None => Ok(s),
            Some(y) => {
                let g = self.classifier.grad(x, level, y)?;
                check_dim(&g, s.len())?;
                Ok(combine_classifier(&s, &g, self.gamma))
            }
        }
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        self.uncond.level_variance(level)
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        Ok(Box::new(GuidedAtLevel {
            uncond: self.uncond.at_level(level)?,
            classifier: self.classifier.grad_at_level(level)?,
            gamma: self.gamma,
        }))
    }
}

struct GuidedAtLevel<'a> {
    uncond: Box<dyn LevelScore + 'a>,
    classifier: Box<dyn LevelGradient + 'a>,
    gamma: f64,
}

impl LevelScore for GuidedAtLevel<'_> {
    fn score(&self, x: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
        let s = self.uncond.score(x, None)?;
        match y {
            None => Ok(s),
            Some(y) => {
                let g = self.classifier.grad(x, y)?;
                check_dim(&g, s.len())?;
                Ok(combine_classifier(&s, &g, self.gamma))
            }
        }
    }
}

/// `γ ∇ ln p(x | y) + (1 − γ) ∇ ln p(x)`. Without a label the field is
/// `uncond`.
pub struct Cfg<A, B> {
    cond: A,
    uncond: B,
    gamma: f64,
}

pub fn cfg_score<A: ScoreField, B: ScoreField>(cond: A, uncond: B, gamma: f64) -> Result<Cfg<A, B>> {
    check_gamma(gamma, true)?;
    if cond.dim() != uncond.dim() {
        return Err(Error::Shape {
            op: "cfg",
            left: vec![cond.dim()],
            right: vec![uncond.dim()],
        });
    }
    Ok(Cfg { cond, uncond, gamma })
}

impl<A: ScoreField, B: ScoreField> ScoreField for Cfg<A, B> {
    fn dim(&self) -> usize {
        self.uncond.dim()
    }
    fn source(&self) -> ScoreSource {
        self.uncond.source()
    }
    fn score(&self, x: &[f64], level: Level, y: Option<usize>) -> Result<Vec<f64>> {
        let u = self.uncond.score(x, level, None)?;
        match y {
            None => Ok(u),
            Some(y) => {
                let c = self.cond.score(x, level, Some(y))?;
                Ok(combine_cfg(&c, &u, self.gamma))
            }
        }
    }
    fn level_variance(&self, level: Level) -> Option<f64> {
        self.uncond.level_variance(level)
    }
    fn at_level(&self, level: Level) -> Result<Box<dyn LevelScore + '_>> {
        Ok(Box::new(CfgAtLevel {
            cond: self.cond.at_level(level)?,
            uncond: self.uncond.at_level(level)?,
            gamma: self.gamma,
        }))
    }
}

struct CfgAtLevel<'a> {
    cond: Box<dyn LevelScore + 'a>,
    uncond: Box<dyn LevelScore + 'a>,
    gamma: f64,
}

impl LevelScore for CfgAtLevel<'_> {
    fn score(&self, x: &[f64], y: Option<usize>) -> Result<Vec<f64>> {
        let u = self.uncond.score(x, None)?;
        match y {
            None => Ok(u),
            Some(y) => {
                let c = self.cond.score(x, Some(y))?;
                Ok(combine_cfg(&c, &u, self.gamma))
            }
        }
    }
}

/// Guidance applied inside ancestral sampling.
#[derive(Clone, Copy)]
pub enum Guidance<'a> {
    /// Unconditional model plus `γ` times a classifier gradient.
    Classifier {
        classifier: &'a dyn ClassifierGradient,
        label: usize,
        gamma: f64,
    },
    /// Conditional and null-token passes of one model mixed by `γ`.
    FreeForm { label: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncestralOutput {
    pub samples: Vec<Vec<f64>>,
    /// One per sample when recording was requested.
    pub trajectories: Vec<Trajectory>,
}

fn guided_outputs(
    m: &DenoiserModel,
    s: &NoiseSchedule,
    x: &Tensor,
    t: usize,
    guidance: Option<&Guidance<'_>>,
) -> Result<Tensor> {
    let n = x.rows();
    let ts = vec![t; n];
    let guidance = match guidance {
        None => return m.predict_batch(x, &ts, &[]),
        Some(g) => g,
    };
    let param = m.parameterization;
    let uncond = m.predict_batch(x, &ts, &[])?;
    let mut out = Vec::with_capacity(uncond.len());
    match *guidance {
        Guidance::Classifier {
            classifier,
            label,
            gamma,
        } => {
            check_gamma(gamma, false)?;
            for r in 0..n {
                let xr = x.row_slice(r);
                let su = convert(uncond.row_slice(r), param, Parameterization::Score, xr, t, s)?;
                let g = classifier.grad(xr, Level::Timestep(t), label)?;
                check_dim(&g, su.len())?;
                let guided = combine_classifier(&su, &g, gamma);
                out.extend(convert(&guided, Parameterization::Score, param, xr, t, s)?);
            }
        }
        Guidance::FreeForm { label, gamma } => {
            check_gamma(gamma, true)?;
            let c = condition(m, Some(label))?;
            let conds = vec![c.as_deref(); n];
            let cond = m.predict_batch(x, &ts, &conds)?;
            for r in 0..n {
                let xr = x.row_slice(r);
                let sc = convert(cond.row_slice(r), param, Parameterization::Score, xr, t, s)?;
                let su = convert(uncond.row_slice(r), param, Parameterization::Score, xr, t, s)?;
                let guided = combine_cfg(&sc, &su, gamma);
                out.extend(convert(&guided, Parameterization::Score, param, xr, t, s)?);
            }
        }
    }
    Tensor::matrix(n, m.data_dim, out)
}

/// Draws `n` samples by running the learned reverse chain from pure noise.
/// Steps `T..2` add `σ_q(t) z`; the final step returns the decoder mean.
pub fn ancestral_sample<R: Rng + ?Sized>(
    m: &DenoiserModel,
    s: &NoiseSchedule,
    n: usize,
    rng: &mut R,
    guidance: Option<&Guidance<'_>>,
    record: bool,
) -> Result<AncestralOutput> {
    if m.steps != s.steps() {
        return Err(Error::contract("model and schedule disagree on T"));
    }
    let d = m.data_dim;
    let steps = s.steps();
    let mut x = Tensor::matrix(n, d, rng::normal_vec(rng, n * d))?;
    let mut trajectories: Vec<Trajectory> = if record {
        (0..n)
            .map(|r| Trajectory::start(Level::Timestep(steps), x.row_slice(r).to_vec()))
            .collect()
    } else {
        Vec::new()
    };
    for t in (1..=steps).rev() {
        let out = guided_outputs(m, s, &x, t, guidance)?;
        let mut next = Vec::with_capacity(n * d);
        if t == 1 {
            for r in 0..n {
                next.extend(convert(out.row_slice(r), m.parameterization, Parameterization::X0, x.row_slice(r), 1, s)?);
            }
        } else {
            let sd = math::sqrt(schedule::sigma_q_sq(s, t)?);
            let z = rng::normal_vec(rng, n * d);
            for r in 0..n {
                let mu = posterior_mean_from_output(out.row_slice(r), m.parameterization, x.row_slice(r), t, s)?;
                next.extend(mu.iter().zip(&z[r * d..(r + 1) * d]).map(|(m, z)| m + sd * z));
            }
        }
        x = Tensor::matrix(n, d, next)?;
        for (r, tr) in trajectories.iter_mut().enumerate() {
            tr.states.push(TrajectoryState {
                step: steps + 1 - t,
                level: Level::Timestep(t - 1),
                x: x.row_slice(r).to_vec(),
                score_norm: None,
            });
        }
    }
    Ok(AncestralOutput {
        samples: x.to_rows(),
        trajectories,
    })
}

/// Langevin options beyond the field and level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub steps: usize,
    pub noise_on: bool,
    /// Keep every `record_every`-th state (the last state is always kept).
    pub record_every: usize,
}

impl LangevinConfig {
    pub fn new(step_size: f64, steps: usize, noise_on: bool) -> Self {
        LangevinConfig {
            step_size,
            steps,
            noise_on,
            record_every: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::contract(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 || self.record_every == 0 {
            return Err(Error::contract("Langevin needs at least one step and record_every >= 1"));
        }
        Ok(())
    }
}

/// Runs `K` steps of `x ← x + c s(x) + √(2c) ε` from `x`, appending states to
/// `traj`. Returns the norm of the score at the final state.
#[allow(clippy::too_many_arguments)]
fn run_level<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    level: Level,
    y: Option<usize>,
    x: &mut [f64],
    c: f64,
    cfg: &LangevinConfig,
    rng: &mut R,
    traj: &mut Trajectory,
    step0: usize,
) -> Result<()> {
    let noise = math::sqrt(2.0 * c);
    let diverged = |step: usize, traj: &Trajectory, x: &[f64]| {
        let mut partial = traj.clone();
        partial.states.push(TrajectoryState {
            step,
            level,
            x: x.to_vec(),
            score_norm: None,
        });
        Error::Diverged {
            step,
            partial: Box::new(partial),
        }
    };
    let prepared = field.at_level(level)?;
    let mut score = prepared.score(x, y)?;
    if let Some(last) = traj.states.last_mut() {
        if last.score_norm.is_none() && last.step == step0 {
            last.score_norm = Some(math::norm(&score));
        }
    }
    for k in 1..=cfg.steps {
        if cfg.noise_on {
            for (xi, si) in x.iter_mut().zip(&score) {
                *xi += c * si + noise * rng::normal(rng);
            }
        } else {
            for (xi, si) in x.iter_mut().zip(&score) {
                *xi += c * si;
            }
        }
        let step = step0 + k;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(diverged(step, traj, x));
        }
        score = prepared.score(x, y)?;
        if score.iter().any(|v| !v.is_finite()) {
            return Err(diverged(step, traj, x));
        }
        if k % cfg.record_every == 0 || k == cfg.steps {
            traj.states.push(TrajectoryState {
                step,
                level,
                x: x.to_vec(),
                score_norm: Some(math::norm(&score)),
            });
        }
    }
    Ok(())
}

/// Langevin dynamics at a fixed level. `noise_on = false` gives plain
/// gradient ascent on the log density.
pub fn langevin<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    level: Level,
    init: &[f64],
    cfg: &LangevinConfig,
    y: Option<usize>,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dim(init, field.dim())?;
    let mut traj = Trajectory::start(level, init.to_vec());
    let mut x = init.to_vec();
    run_level(field, level, y, &mut x, cfg.step_size, cfg, rng, &mut traj, 0)?;
    Ok(traj)
}

/// Step size per level in annealed Langevin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    Constant { c: f64 },
    /// `c = c_base · σ²(level) / σ²(first level)`.
    ProportionalToVariance { c_base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealedConfig {
    pub steps_per_level: usize,
    pub rule: StepRule,
    pub record_every: usize,
}

fn noise_key<F: ScoreField + ?Sized>(field: &F, level: Level) -> Result<f64> {
    match level {
        Level::Sigma(s) => Ok(s),
        Level::Timestep(t) => Ok(field.level_variance(level).unwrap_or(t as f64)),
    }
}

/// Step sizes for each level under `rule`.
pub fn step_sizes<F: ScoreField + ?Sized>(field: &F, levels: &[Level], rule: StepRule) -> Result<Vec<f64>> {
    match rule {
        StepRule::Constant { c } => Ok(vec![c; levels.len()]),
        StepRule::ProportionalToVariance { c_base } => {
            let vars: Vec<f64> = levels
                .iter()
                .map(|l| {
                    field
                        .level_variance(*l)
                        .ok_or_else(|| Error::contract("field does not know the noise variance of its levels"))
                })
                .collect::<Result<_>>()?;
            let top = vars[0];
            if !(top > 0.0) {
                return Err(Error::contract("first annealing level must carry noise"));
            }
            Ok(vars.iter().map(|v| c_base * v / top).collect())
        }
    }
}

/// Langevin dynamics over a strictly decreasing sequence of noise levels,
/// each level starting from the final state of the previous one.
pub fn annealed_langevin<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    levels: &[Level],
    cfg: &AnnealedConfig,
    init: &[f64],
    y: Option<usize>,
    rng: &mut R,
) -> Result<Trajectory> {
    if levels.is_empty() {
        return Err(Error::contract("annealing needs at least one level"));
    }
    let keys = levels.iter().map(|l| noise_key(field, *l)).collect::<Result<Vec<_>>>()?;
    let same_kind = levels
        .windows(2)
        .all(|w| matches!((w[0], w[1]), (Level::Sigma(_), Level::Sigma(_)) | (Level::Timestep(_), Level::Timestep(_))));
    if !same_kind || keys.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::contract("levels must be strictly decreasing in noise"));
    }
    check_dim(init, field.dim())?;
    let sizes = step_sizes(field, levels, cfg.rule)?;
    let mut traj = Trajectory::start(levels[0], init.to_vec());
    let mut x = init.to_vec();
    for (i, (level, c)) in levels.iter().zip(&sizes).enumerate() {
        let lc = LangevinConfig {
            step_size: *c,
            steps: cfg.steps_per_level,
            noise_on: true,
            record_every: cfg.record_every,
        };
        lc.validate()?;
        run_level(field, *level, y, &mut x, *c, &lc, rng, &mut traj, i * cfg.steps_per_level)?;
    }
    Ok(traj)
}

/// Uniform draw from the box `[lo, hi]^dim`.
pub fn uniform_box<R: Rng + ?Sized>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..dim).map(|_| rng::uniform(rng, lo, hi)).collect()
}

/// `n` independent annealed chains; chain `i` uses stream `i` of `seed`
/// both for its uniform initialization and its noise.
#[allow(clippy::too_many_arguments)]
pub fn annealed_chains<F: ScoreField + ?Sized>(
    field: &F,
    levels: &[Level],
    cfg: &AnnealedConfig,
    n: usize,
    seed: u64,
    init_box: (f64, f64),
    y: Option<usize>,
) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let init = uniform_box(&mut r, field.dim(), init_box.0, init_box.1);
            annealed_langevin(field, levels, cfg, &init, y, &mut r).map(|t| t.with_seed(seed))
        })
        .collect()
}

/// Geometric sequence of `n` sigma levels from `max` down to `min`.
pub fn geometric_sigmas(max: f64, min: f64, n: usize) -> Result<Vec<Level>> {
    if !(max > min && min > 0.0) || n < 2 {
        return Err(Error::config("geometric levels need max > min > 0 and n >= 2"));
    }
    let ratio = math::ln(min / max) / (n - 1) as f64;
    Ok((0..n).map(|i| Level::Sigma(max * math::exp(ratio * i as f64))).collect())
}

/// Helper for a learned conditional model: its field with the null token
/// standing in for the unconditional score.
pub fn learned_cfg(model: DenoiserModel, schedule: NoiseSchedule, gamma: f64) -> Result<Cfg<LearnedField, LearnedField>> {
    let f = LearnedField::new(model, schedule)?;
    cfg_score(f.clone(), f, gamma)
}

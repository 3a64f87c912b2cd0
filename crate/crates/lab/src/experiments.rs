//! Desk-scale experiments shared by the CLI and the test suites.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use vdm_core::oracle::{Gmm, LabeledGmm};
use vdm_core::sampler::{
    annealed_chains, cfg_score, classifier_guided_score, geometric_sigmas, langevin, uniform_box, AnnealedConfig,
    LabeledOracle, LangevinConfig, Level, StaticGmmField, StepRule, Trajectory,
};
use vdm_core::{math, rng};

use crate::error::{LabError, Result};

/// Fraction of samples whose nearest component mean is each component's.
pub fn mode_masses(gmm: &Gmm, samples: &[Vec<f64>]) -> Vec<f64> {
    let mut counts = vec![0usize; gmm.len()];
    for x in samples {
        counts[gmm.nearest_mode(x)] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts.iter().map(|c| *c as f64 / n).collect()
}

/// Components whose mean some state of `traj` comes within `radius` of.
pub fn modes_visited(gmm: &Gmm, traj: &Trajectory, radius: f64) -> BTreeSet<usize> {
    let r2 = radius * radius;
    let means = gmm.means();
    let mut seen = BTreeSet::new();
    for s in &traj.states {
        for (i, m) in means.iter().enumerate() {
            if math::sq_dist(m, &s.x) <= r2 {
                seen.insert(i);
            }
        }
    }
    seen
}

/// Default visit radius: one standard deviation of the tightest component.
pub fn default_radius(gmm: &Gmm) -> f64 {
    gmm.components()
        .iter()
        .flat_map(|c| c.var().iter().copied())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig4Config {
    pub mixture: Gmm,
    /// Shared start point; drawn from `init_box` when absent.
    pub init: Option<Vec<f64>>,
    pub init_box: [f64; 2],
    pub step_size: f64,
    pub steps: usize,
    pub chains: usize,
    pub radius: Option<f64>,
    pub record_every: usize,
}

impl Default for Fig4Config {
    fn default() -> Self {
        Fig4Config {
            mixture: Gmm::fig4_default(),
            init: None,
            init_box: [-2.5, 2.5],
            step_size: 0.02,
            steps: 1000,
            chains: 3,
            radius: None,
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Outcome {
    pub init: Vec<f64>,
    pub noise_on: Vec<Trajectory>,
    pub noise_off: Vec<Trajectory>,
    /// Distinct modes visited by all noise-on chains together.
    pub modes_on: BTreeSet<usize>,
    /// Distinct modes visited by the noise-off chains together.
    pub modes_off: BTreeSet<usize>,
}

/// Langevin chains from a single start point, with and without noise, on the
/// exact score of the mixture. Stream 0 picks the start; chain `i` draws its
/// noise from stream `i + 1`.
pub fn fig4_run(cfg: &Fig4Config, seed: u64) -> Result<Fig4Outcome> {
    if cfg.chains == 0 {
        return Err(LabError::config("fig4 needs at least one chain"));
    }
    let field = StaticGmmField {
        gmm: cfg.mixture.clone(),
    };
    let dim = cfg.mixture.dim();
    let init = match &cfg.init {
        Some(x) => x.clone(),
        None => uniform_box(&mut rng::stream(seed, 0), dim, cfg.init_box[0], cfg.init_box[1]),
    };
    let radius = cfg.radius.unwrap_or_else(|| default_radius(&cfg.mixture));
    let level = Level::Sigma(0.0);
    let run = |noise_on: bool| -> Result<(Vec<Trajectory>, BTreeSet<usize>)> {
        let lc = LangevinConfig {
            record_every: cfg.record_every,
            ..LangevinConfig::new(cfg.step_size, cfg.steps, noise_on)
        };
        let mut trajs = Vec::with_capacity(cfg.chains);
        let mut modes = BTreeSet::new();
        for i in 0..cfg.chains {
            let mut r = rng::stream(seed, i as u64 + 1);
            let t = langevin(&field, level, &init, &lc, None, &mut r)?.with_seed(seed);
            modes.extend(modes_visited(&cfg.mixture, &t, radius));
            trajs.push(t);
        }
        Ok((trajs, modes))
    };
    let (noise_on, modes_on) = run(true)?;
    let (noise_off, modes_off) = run(false)?;
    Ok(Fig4Outcome {
        init,
        noise_on,
        noise_off,
        modes_on,
        modes_off,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuideMode {
    Classifier,
    Cfg,
}

/// Annealed Langevin over geometric sigma levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSettings {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
    pub steps_per_level: usize,
    pub c_base: f64,
    pub init_box: [f64; 2],
    pub record_every: usize,
}

impl Default for AnnealSettings {
    fn default() -> Self {
        AnnealSettings {
            sigma_max: 3.0,
            sigma_min: 0.05,
            levels: 10,
            steps_per_level: 50,
            c_base: 0.2,
            init_box: [-4.0, 4.0],
            record_every: 50,
        }
    }
}

impl AnnealSettings {
    pub fn levels(&self) -> Result<Vec<Level>> {
        Ok(geometric_sigmas(self.sigma_max, self.sigma_min, self.levels)?)
    }

    pub fn config(&self) -> AnnealedConfig {
        AnnealedConfig {
            steps_per_level: self.steps_per_level,
            rule: StepRule::ProportionalToVariance { c_base: self.c_base },
            record_every: self.record_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePoint {
    pub gamma: f64,
    /// Fraction of samples whose nearest component carries the target label.
    pub target_fraction: f64,
    pub masses: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

/// Annealed Langevin on the exact scores of a labeled mixture, guided toward
/// `target` at each `γ`. Every `γ` reuses the same chain seeds.
pub fn guidance_sweep(
    mixture: &LabeledGmm,
    mode: GuideMode,
    target: usize,
    gammas: &[f64],
    settings: &AnnealSettings,
    n: usize,
    seed: u64,
) -> Result<Vec<GuidancePoint>> {
    if target >= mixture.class_count() {
        return Err(LabError::config(format!("target class {target} does not exist")));
    }
    let oracle = LabeledOracle::ve(mixture.clone());
    let levels = settings.levels()?;
    let cfg = settings.config();
    let init_box = (settings.init_box[0], settings.init_box[1]);
    let mut out = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let trajs = match mode {
            GuideMode::Classifier => {
                let f = classifier_guided_score(&oracle, &oracle, gamma)?;
                annealed_chains(&f, &levels, &cfg, n, seed, init_box, Some(target))?
            }
            GuideMode::Cfg => {
                let f = cfg_score(&oracle, &oracle, gamma)?;
                annealed_chains(&f, &levels, &cfg, n, seed, init_box, Some(target))?
            }
        };
        let samples: Vec<Vec<f64>> = trajs.iter().map(|t| t.final_x().to_vec()).collect();
        let masses = mode_masses(&mixture.gmm, &samples);
        let target_fraction = masses
            .iter()
            .zip(mixture.labels())
            .filter(|(_, l)| **l == target)
            .map(|(m, _)| m)
            .sum();
        out.push(GuidancePoint {
            gamma,
            target_fraction,
            masses,
            samples,
        });
    }
    Ok(out)
}

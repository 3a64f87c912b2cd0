//! The CLI subcommands as library functions. Each takes a JSON config,
//! writes its outputs below one directory, and reports what it wrote so the
//! run can be recorded in a manifest and repeated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vdm_core::data::{generate_dataset, Dataset, DatasetSpec};
use vdm_core::denoiser::{elbo_consistency_form, elbo_denoising_form};
use vdm_core::oracle::{Gmm, LabeledGmm};
use vdm_core::sampler::{
    ancestral_sample, annealed_langevin, langevin, learned_cfg, uniform_box, AnnealedConfig, Guidance, LangevinConfig,
    LearnedField, Level, OracleVe, ScoreField, StaticGmmField, Trajectory,
};
use vdm_core::train::{train_diffusion, train_vae, TrainConfig, VaeTrainConfig};
use vdm_core::{math, rng};

use crate::checkpoint::{load_checkpoint, to_json, Checkpoint, CheckpointModel};
use crate::error::{self, LabError, Result};
use crate::experiments::{fig4_run, guidance_sweep, mode_masses, AnnealSettings, Fig4Config, GuideMode};
use crate::manifest::{self, Manifest};
use crate::svg::{quiver_arrows, render_svg, Frame, Grid, Layer};
use crate::{config, csv, jsonl};

pub const COMMANDS: &[&str] = &["gen-data", "train", "sample", "elbo", "score-field", "guide-demo", "fig4"];

/// What one command run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// The configuration with every default filled in.
    pub config: Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    /// Output file names relative to the run directory.
    pub outputs: Vec<String>,
    /// Human-readable result lines.
    pub summary: Vec<String>,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
    inputs: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        error::write(&self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

fn parse<T: DeserializeOwned + Serialize>(v: &Value) -> Result<(T, Value)> {
    let t: T = config::typed(v)?;
    let resolved = config::to_value(&t);
    Ok((t, resolved))
}

fn require_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| LabError::config("a seed is required (pass --seed or set \"seed\")"))
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Where training and evaluation points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub dataset: DatasetSpec,
    pub n: usize,
    /// Generation seed; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            dataset: DatasetSpec::Gmm {
                mixture: Gmm::default_training(),
            },
            n: 10_000,
            seed: None,
        }
    }
}

fn load_data(src: &DataSource, run_seed: u64, out: &mut Outputs<'_>) -> Result<Dataset> {
    match &src.dataset {
        DatasetSpec::File { path } => {
            let path = PathBuf::from(path);
            let d = csv::read_points(&path)?;
            out.inputs.push(path);
            Ok(d)
        }
        spec => Ok(generate_dataset(spec, src.n, src.seed.unwrap_or(run_seed))?),
    }
}

fn load_input_checkpoint(path: &Path, out: &mut Outputs<'_>) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    out.inputs.push(path.to_path_buf());
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataCmd {
    seed: Option<u64>,
    dataset: DatasetSpec,
    n: usize,
}

impl Default for GenDataCmd {
    fn default() -> Self {
        let d = DataSource::default();
        GenDataCmd {
            seed: None,
            dataset: d.dataset,
            n: 1000,
        }
    }
}

fn gen_data(c: &GenDataCmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    let d = load_data(
        &DataSource {
            dataset: c.dataset.clone(),
            n: c.n,
            seed: Some(seed),
        },
        seed,
        out,
    )?;
    out.write("data.csv", csv::points_to_csv(&d.points, d.labels.as_deref()))?;
    if d.dim() == 2 {
        let frame = Frame::fit(&d.points);
        out.write(
            "data.svg",
            render_svg(
                &[Layer::Scatter {
                    points: d.points.clone(),
                    labels: d.labels.clone(),
                }],
                &frame,
            )?,
        )?;
    }
    out.note(format!("wrote {} points of dimension {}", d.len(), d.dim()));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Diffusion,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCmd {
    seed: Option<u64>,
    model: ModelKind,
    data: DataSource,
    diffusion: TrainConfig,
    vae: VaeTrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            seed: None,
            model: ModelKind::Diffusion,
            data: DataSource::default(),
            diffusion: TrainConfig::default(),
            vae: VaeTrainConfig::default(),
        }
    }
}

fn train(c: &TrainCmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    let data = load_data(&c.data, seed, out)?;
    match c.model {
        ModelKind::Diffusion => {
            let cfg = TrainConfig {
                seed,
                ..c.diffusion.clone()
            };
            let run = train_diffusion(&cfg, &data)?;
            out.write("loss.csv", csv::loss_history_csv(&run.history))?;
            let last = run.history.last().map_or(f64::NAN, |r| r.loss);
            let ckpt = Checkpoint::new(
                seed,
                config::to_value(&cfg),
                CheckpointModel::Diffusion {
                    denoiser: run.model,
                    schedule: run.schedule,
                },
            );
            out.write("checkpoint.json", to_json(&ckpt))?;
            out.note(format!("trained diffusion model for {} steps, final loss {last:.4}", cfg.steps));
        }
        ModelKind::Vae => {
            let cfg = VaeTrainConfig { seed, ..c.vae.clone() };
            let run = train_vae(&cfg, &data)?;
            out.write("loss.csv", csv::vae_history_csv(&run.history))?;
            let last = run.history.last().map_or(f64::NAN, |r| r.elbo());
            let ckpt = Checkpoint::new(seed, config::to_value(&cfg), CheckpointModel::Vae { vae: run.model });
            out.write("checkpoint.json", to_json(&ckpt))?;
            out.note(format!("trained VAE for {} steps, final ELBO {last:.4}", cfg.steps));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    Ancestral,
    Langevin,
    Annealed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleCmd {
    seed: Option<u64>,
    method: SampleMethod,
    n: usize,
    /// Trained diffusion checkpoint; Langevin methods fall back to the
    /// exact score of `mixture` without one.
    checkpoint: Option<PathBuf>,
    mixture: Gmm,
    /// Class label for classifier-free guidance with a conditional model.
    label: Option<usize>,
    gamma: f64,
    /// Langevin step size, step count, and noise switch.
    step_size: f64,
    steps: usize,
    noise_on: bool,
    /// Timestep whose learned field single-level Langevin follows.
    timestep: usize,
    anneal: AnnealSettings,
    /// Chains written to the trajectory file.
    trajectories: usize,
    record_every: usize,
}

impl Default for SampleCmd {
    fn default() -> Self {
        SampleCmd {
            seed: None,
            method: SampleMethod::Ancestral,
            n: 1000,
            checkpoint: None,
            mixture: Gmm::default_training(),
            label: None,
            gamma: 1.0,
            step_size: 0.01,
            steps: 1000,
            noise_on: true,
            timestep: 1,
            anneal: AnnealSettings::default(),
            trajectories: 3,
            record_every: 10,
        }
    }
}

fn learned(ckpt: &Checkpoint) -> Result<LearnedField> {
    let (m, s) = ckpt.diffusion()?;
    Ok(LearnedField::new(m.clone(), s)?)
}

/// Chain `i` uses stream `i` for its start point and its noise.
fn chains(
    c: &SampleCmd,
    seed: u64,
    run: impl Fn(&[f64], usize, bool, &mut rng::LabRng) -> Result<Trajectory>,
    dim: usize,
    init_box: [f64; 2],
) -> Result<(Vec<Vec<f64>>, Vec<Trajectory>)> {
    let mut samples = Vec::with_capacity(c.n);
    let mut kept = Vec::new();
    for i in 0..c.n {
        let mut r = rng::stream(seed, i as u64);
        let init = uniform_box(&mut r, dim, init_box[0], init_box[1]);
        let keep = i < c.trajectories;
        let t = run(&init, i, keep, &mut r)?;
        samples.push(t.final_x().to_vec());
        if keep {
            kept.push(t.with_seed(seed));
        }
    }
    Ok((samples, kept))
}

fn sample(c: &SampleCmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    let ckpt = match &c.checkpoint {
        Some(p) => Some(load_input_checkpoint(p, out)?),
        None => None,
    };
    if c.record_every == 0 {
        return Err(LabError::config("record_every must be at least 1"));
    }
    let (samples, trajs) = match c.method {
        SampleMethod::Ancestral => {
            let ckpt = ckpt.ok_or_else(|| LabError::config("ancestral sampling needs a checkpoint"))?;
            let (m, s) = ckpt.diffusion()?;
            let guidance = c.label.map(|label| Guidance::FreeForm { label, gamma: c.gamma });
            let mut r = rng::seeded(seed);
            let res = ancestral_sample(m, &s, c.n, &mut r, guidance.as_ref(), c.trajectories > 0)?;
            let trajs = res
                .trajectories
                .into_iter()
                .take(c.trajectories)
                .map(|t| t.with_seed(seed))
                .collect();
            (res.samples, trajs)
        }
        SampleMethod::Langevin => {
            let field: Box<dyn ScoreField> = match &ckpt {
                Some(k) => Box::new(learned(k)?),
                None => Box::new(StaticGmmField {
                    gmm: c.mixture.clone(),
                }),
            };
            let level = match ckpt {
                Some(_) => Level::Timestep(c.timestep),
                None => Level::Sigma(0.0),
            };
            let y = label_for(c)?;
            let run = |init: &[f64], _i: usize, keep: bool, r: &mut rng::LabRng| {
                let lc = LangevinConfig {
                    record_every: if keep { c.record_every } else { c.steps.max(1) },
                    ..LangevinConfig::new(c.step_size, c.steps, c.noise_on)
                };
                Ok(langevin(field.as_ref(), level, init, &lc, y, r)?)
            };
            chains(c, seed, run, field.dim(), c.anneal.init_box)?
        }
        SampleMethod::Annealed => {
            let (field, levels): (Box<dyn ScoreField>, Vec<Level>) = match &ckpt {
                Some(k) => {
                    let f = learned(k)?;
                    let levels = (1..=f.schedule.steps()).rev().map(Level::Timestep).collect();
                    match c.label {
                        Some(_) => {
                            let (m, s) = k.diffusion()?;
                            (Box::new(learned_cfg(m.clone(), s, c.gamma)?), levels)
                        }
                        None => (Box::new(f), levels),
                    }
                }
                None => (
                    Box::new(OracleVe {
                        gmm: c.mixture.clone(),
                    }),
                    c.anneal.levels()?,
                ),
            };
            let y = label_for(c)?;
            let cfg = c.anneal.config();
            let run = |init: &[f64], _i: usize, keep: bool, r: &mut rng::LabRng| {
                let ac = AnnealedConfig {
                    record_every: if keep { cfg.record_every } else { cfg.steps_per_level.max(1) },
                    ..cfg
                };
                Ok(annealed_langevin(field.as_ref(), &levels, &ac, init, y, r)?)
            };
            chains(c, seed, run, field.dim(), c.anneal.init_box)?
        }
    };
    out.write("samples.csv", csv::points_to_csv(&samples, None))?;
    if !trajs.is_empty() {
        out.write("trajectories.jsonl", jsonl::trajectories_to_jsonl(&trajs))?;
    }
    if samples.first().is_some_and(|x| x.len() == 2) {
        let paths: Vec<Vec<Vec<f64>>> = trajs.iter().map(|t| t.states.iter().map(|s| s.x.clone()).collect()).collect();
        let frame = Frame::fit(&samples);
        let layers = [
            Layer::Scatter {
                points: samples.clone(),
                labels: None,
            },
            Layer::Trajectories { paths },
        ];
        out.write("samples.svg", render_svg(&layers, &frame)?)?;
    }
    if c.checkpoint.is_none() {
        let masses = mode_masses(&c.mixture, &samples);
        out.note(format!("mode masses {}", fmt_list(&masses)));
    }
    out.note(format!("drew {} samples", samples.len()));
    Ok(())
}

fn label_for(c: &SampleCmd) -> Result<Option<usize>> {
    match (c.label, &c.checkpoint) {
        (Some(_), None) => Err(LabError::config(
            "labels need a conditional checkpoint; use guide-demo for oracle guidance",
        )),
        (y, _) => Ok(y),
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ElboCmd {
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    data: DataSource,
    /// Points evaluated, taken from the front of the dataset.
    points: usize,
    n_mc: usize,
}

impl Default for ElboCmd {
    fn default() -> Self {
        ElboCmd {
            seed: None,
            checkpoint: None,
            data: DataSource {
                n: 100,
                ..DataSource::default()
            },
            points: 100,
            n_mc: 1,
        }
    }
}

fn elbo(c: &ElboCmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| LabError::config("elbo needs a checkpoint"))?;
    let ckpt = load_input_checkpoint(path, out)?;
    let (m, s) = ckpt.diffusion()?;
    let data = load_data(&c.data, seed, out)?;
    let n = c.points.min(data.len());
    let mut text = String::from("index,denoising,consistency,reconstruction,prior\n");
    let (mut den, mut con) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, x0) in data.points.iter().take(n).enumerate() {
        let a = elbo_denoising_form(m, x0, c.n_mc, &mut rng::stream(seed, 2 * i as u64), &s)?;
        let b = elbo_consistency_form(m, x0, c.n_mc, &mut rng::stream(seed, 2 * i as u64 + 1), &s)?;
        writeln!(text, "{i},{},{},{},{}", a.total, b.total, a.reconstruction, a.prior).expect("string write");
        den.push(a.total);
        con.push(b.total);
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
        (mean, var)
    };
    let (dm, dv) = stats(&den);
    let (cm, cv) = stats(&con);
    out.write("elbo.csv", text)?;
    out.write(
        "elbo.json",
        pretty(&json!({
            "points": n,
            "n_mc": c.n_mc,
            "denoising": {"mean": dm, "variance": dv},
            "consistency": {"mean": cm, "variance": cv},
        })),
    )?;
    out.note(format!("ELBO denoising form {dm:.4} (var {dv:.4}), consistency form {cm:.4} (var {cv:.4})"));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScoreFieldCmd {
    seed: Option<u64>,
    /// Learned field at `timestep`; the exact score of `mixture` at noise
    /// `sigma` without one.
    checkpoint: Option<PathBuf>,
    timestep: usize,
    mixture: Gmm,
    sigma: f64,
    grid: usize,
    half_width: f64,
}

impl Default for ScoreFieldCmd {
    fn default() -> Self {
        ScoreFieldCmd {
            seed: None,
            checkpoint: None,
            timestep: 1,
            mixture: Gmm::default_training(),
            sigma: 0.0,
            grid: 21,
            half_width: 3.0,
        }
    }
}

fn density_layer(gmm: &Gmm, frame: &Frame) -> Layer {
    Layer::DensityContour {
        grid: Grid::sample(frame, 80, |x, y| gmm.log_density(&[x, y]).map_or(0.0, math::exp)),
        fractions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
    }
}

fn score_field(c: &ScoreFieldCmd, _seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    if c.grid < 2 || !(c.half_width > 0.0) {
        return Err(LabError::config("grid must be >= 2 and half_width positive"));
    }
    let frame = Frame::square(c.half_width);
    let mut layers = Vec::new();
    let arrows = match &c.checkpoint {
        Some(p) => {
            let f = learned(&load_input_checkpoint(p, out)?)?;
            let level = Level::Timestep(c.timestep);
            f.score(&[0.0; 2], level, None)?;
            quiver_arrows(&frame, c.grid, |x, y| {
                let s = f.score(&[x, y], level, None).unwrap_or_else(|_| vec![0.0, 0.0]);
                [s[0], s[1]]
            })
        }
        None => {
            if c.mixture.dim() != 2 {
                return Err(LabError::config("score-field plots 2-D mixtures"));
            }
            let g = c.mixture.perturb_ve(c.sigma)?;
            layers.push(density_layer(&g, &frame));
            quiver_arrows(&frame, c.grid, |x, y| {
                let s = g.score(&[x, y]).unwrap_or_else(|_| vec![0.0, 0.0]);
                [s[0], s[1]]
            })
        }
    };
    layers.push(Layer::Quiver { arrows });
    out.write("score_field.svg", render_svg(&layers, &frame)?)?;
    out.note(format!("plotted a {0}x{0} score field", c.grid));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GuideCmd {
    seed: Option<u64>,
    mode: GuideMode,
    mixture: LabeledGmm,
    target: usize,
    gammas: Vec<f64>,
    n: usize,
    anneal: AnnealSettings,
}

impl Default for GuideCmd {
    fn default() -> Self {
        GuideCmd {
            seed: None,
            mode: GuideMode::Classifier,
            mixture: LabeledGmm::default_guidance(),
            target: 0,
            gammas: vec![0.0, 1.0, 3.0, 5.0],
            n: 1000,
            anneal: AnnealSettings::default(),
        }
    }
}

fn guide_demo(c: &GuideCmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    if c.gammas.is_empty() {
        return Err(LabError::config("gammas must not be empty"));
    }
    let points = guidance_sweep(&c.mixture, c.mode, c.target, &c.gammas, &c.anneal, c.n, seed)?;
    let k = c.mixture.gmm.len();
    let mut text = String::from("gamma,target_fraction");
    for i in 0..k {
        write!(text, ",mass_{i}").expect("string write");
    }
    text.push('\n');
    for p in &points {
        write!(text, "{},{}", p.gamma, p.target_fraction).expect("string write");
        for m in &p.masses {
            write!(text, ",{m}").expect("string write");
        }
        text.push('\n');
        out.note(format!("gamma {}: target fraction {:.4}", p.gamma, p.target_fraction));
    }
    out.write("guidance.csv", text)?;
    let classes = |xs: &[Vec<f64>]| -> Vec<usize> {
        xs.iter().map(|x| c.mixture.labels()[c.mixture.gmm.nearest_mode(x)]).collect()
    };
    for (i, p) in points.iter().enumerate() {
        let labels = classes(&p.samples);
        out.write(&format!("samples_{i}.csv"), csv::points_to_csv(&p.samples, Some(&labels)))?;
    }
    if c.mixture.gmm.dim() == 2 {
        let last = points.last().expect("non-empty");
        let frame = Frame::square(c.anneal.init_box[1].abs().max(c.anneal.init_box[0].abs()).min(4.0));
        let layers = [
            density_layer(&c.mixture.gmm, &frame),
            Layer::Scatter {
                points: last.samples.clone(),
                labels: Some(classes(&last.samples)),
            },
        ];
        out.write("guidance.svg", render_svg(&layers, &frame)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Fig4Cmd {
    seed: Option<u64>,
    mixture: Gmm,
    init: Option<Vec<f64>>,
    init_box: [f64; 2],
    step_size: f64,
    steps: usize,
    chains: usize,
    radius: Option<f64>,
    record_every: usize,
    grid: usize,
    half_width: f64,
}

impl Default for Fig4Cmd {
    fn default() -> Self {
        let f = Fig4Config::default();
        Fig4Cmd {
            seed: None,
            mixture: f.mixture,
            init: f.init,
            init_box: f.init_box,
            step_size: f.step_size,
            steps: f.steps,
            chains: f.chains,
            radius: f.radius,
            record_every: f.record_every,
            grid: 21,
            half_width: 3.0,
        }
    }
}

fn fig4(c: &Fig4Cmd, seed: u64, out: &mut Outputs<'_>) -> Result<()> {
    let cfg = Fig4Config {
        mixture: c.mixture.clone(),
        init: c.init.clone(),
        init_box: c.init_box,
        step_size: c.step_size,
        steps: c.steps,
        chains: c.chains,
        radius: c.radius,
        record_every: c.record_every,
    };
    let o = fig4_run(&cfg, seed)?;
    let g = &c.mixture;
    let frame = Frame::square(c.half_width);
    let arrows = quiver_arrows(&frame, c.grid, |x, y| {
        let s = g.score(&[x, y]).unwrap_or_else(|_| vec![0.0, 0.0]);
        [s[0], s[1]]
    });
    let paths = |ts: &[Trajectory]| -> Vec<Vec<Vec<f64>>> {
        ts.iter().map(|t| t.states.iter().map(|s| s.x.clone()).collect()).collect()
    };
    for (name, trajs) in [("fig4.svg", &o.noise_on), ("fig4_noise_off.svg", &o.noise_off)] {
        let layers = [
            density_layer(g, &frame),
            Layer::Quiver { arrows: arrows.clone() },
            Layer::Trajectories { paths: paths(trajs) },
        ];
        out.write(name, render_svg(&layers, &frame)?)?;
    }
    out.write("fig4.jsonl", jsonl::trajectories_to_jsonl(&o.noise_on))?;
    out.write("fig4_noise_off.jsonl", jsonl::trajectories_to_jsonl(&o.noise_off))?;
    let summary = json!({
        "init": o.init,
        "modes_noise_on": o.modes_on,
        "modes_noise_off": o.modes_off,
    });
    out.write("fig4.json", pretty(&summary))?;
    out.note(format!(
        "noise on visited {} modes, noise off visited {}",
        o.modes_on.len(),
        o.modes_off.len()
    ));
    Ok(())
}

/// Runs `command` with `config` (seed included), writing below `dir`.
pub fn execute(command: &str, config: &Value, dir: &Path) -> Result<RunOutput> {
    let mut out = Outputs {
        dir,
        files: Vec::new(),
        inputs: Vec::new(),
        summary: Vec::new(),
    };
    macro_rules! run {
        ($ty:ty, $f:ident) => {{
            let (c, resolved): ($ty, Value) = parse(config)?;
            let seed = require_seed(c.seed)?;
            $f(&c, seed, &mut out)?;
            (resolved, seed)
        }};
    }
    let (resolved, seed) = match command {
        "gen-data" => run!(GenDataCmd, gen_data),
        "train" => run!(TrainCmd, train),
        "sample" => run!(SampleCmd, sample),
        "elbo" => run!(ElboCmd, elbo),
        "score-field" => run!(ScoreFieldCmd, score_field),
        "guide-demo" => run!(GuideCmd, guide_demo),
        "fig4" => run!(Fig4Cmd, fig4),
        other => return Err(LabError::config(format!("unknown command {other:?}"))),
    };
    Ok(RunOutput {
        config: resolved,
        seed,
        inputs: out.inputs,
        outputs: out.files,
        summary: out.summary,
    })
}

fn hashes(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), manifest::hash_file(&dir.join(n))?)))
        .collect()
}

/// Executes a command and writes its manifest next to the outputs.
pub fn run_recorded(command: &str, config: &Value, dir: &Path) -> Result<(Manifest, RunOutput)> {
    let run = execute(command, config, dir)?;
    let inputs = run
        .inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), manifest::hash_file(p)?)))
        .collect::<Result<_>>()?;
    let m = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: run.seed,
        config: run.config.clone(),
        git_describe: manifest::git_describe(),
        inputs,
        outputs: hashes(dir, &run.outputs)?,
    };
    manifest::save(dir, &m)?;
    Ok((m, run))
}

/// Repeats the run described by a manifest into `dir` (the manifest's own
/// directory when absent) and checks that every output hashes the same.
pub fn rerun(manifest_path: &Path, dir: Option<&Path>) -> Result<Manifest> {
    let m = manifest::load(manifest_path)?;
    for (path, hash) in &m.inputs {
        let now = manifest::hash_file(Path::new(path))?;
        if &now != hash {
            return Err(LabError::Mismatch(format!("input {path} changed since the recorded run")));
        }
    }
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => manifest_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let run = execute(&m.command, &m.config, &dir)?;
    let got = hashes(&dir, &run.outputs)?;
    let mut diffs = Vec::new();
    for (name, hash) in &m.outputs {
        match got.get(name) {
            Some(h) if h == hash => {}
            Some(_) => diffs.push(format!("{name} differs")),
            None => diffs.push(format!("{name} was not produced")),
        }
    }
    diffs.extend(got.keys().filter(|k| !m.outputs.contains_key(*k)).map(|k| format!("{k} is new")));
    if !diffs.is_empty() {
        return Err(LabError::Mismatch(diffs.join("; ")));
    }
    let again = Manifest {
        git_describe: manifest::git_describe(),
        ..m
    };
    manifest::save(&dir, &again)?;
    Ok(again)
}

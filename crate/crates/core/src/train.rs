//! Training loops for the diffusion model and the VAE baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{
    batch_loss_on_tape, convert, one_hot, DenoiserModel, DenoiserShape, LossBatch, Parameterization, Weighting,
    DEFAULT_TIME_FEATURES, DENOISER_PREFIX,
};
use crate::error::{Error, Result};
use crate::math;
use crate::ndgrad::{adam_step, Activation, AdamConfig, AdamState, Tape, Tensor};
use crate::rng;
use crate::schedule::{cosine_schedule, default_linear_schedule, LearnedSnrNet, NoiseSchedule, ScheduleKind};
use crate::vae::{vae_loss_on_tape, VaeModel, VaeShape, DECODER_PREFIX, DEFAULT_DECODER_VAR, ENCODER_PREFIX};

/// Learning-rate schedule over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// `lr · ½(1 + cos(π · step / steps))`.
    Cosine,
}

impl LrDecay {
    pub fn rate(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrDecay::Constant => lr,
            LrDecay::Cosine => lr * 0.5 * (1.0 + math::cos(core::f64::consts::PI * step as f64 / steps as f64)),
        }
    }
}

/// Offset of the default cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub parameterization: Parameterization,
    pub weighting: Weighting,
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    pub cond_dropout_prob: f64,
    /// Train a label-conditioned model; requires a labeled dataset.
    pub conditional: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
    /// Hidden width of the learned SNR network.
    pub snr_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: LrDecay::Cosine,
            parameterization: Parameterization::Eps,
            weighting: Weighting::EpsMatched,
            t_steps: crate::schedule::DEFAULT_T,
            schedule: ScheduleKind::FixedLinear,
            cond_dropout_prob: 0.1,
            conditional: false,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_features: DEFAULT_TIME_FEATURES,
            snr_hidden: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.t_steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        if self.schedule == ScheduleKind::Learned && self.t_steps < 2 {
            return Err(Error::config("a learned schedule needs T >= 2"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::config(format!(
                "cond_dropout_prob must lie in [0, 1], got {}",
                self.cond_dropout_prob
            )));
        }
        Ok(())
    }
}

/// The noise schedule a run trains against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleState {
    Fixed { schedule: NoiseSchedule },
    Learned { net: LearnedSnrNet },
}

impl ScheduleState {
    pub fn from_config(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match cfg.schedule {
            ScheduleKind::FixedLinear => ScheduleState::Fixed {
                schedule: default_linear_schedule(cfg.t_steps)?,
            },
            ScheduleKind::FixedCosine => ScheduleState::Fixed {
                schedule: cosine_schedule(cfg.t_steps, COSINE_OFFSET)?,
            },
            ScheduleKind::Learned => {
                let base = default_linear_schedule(cfg.t_steps)?;
                ScheduleState::Learned {
                    net: LearnedSnrNet::init_matching(cfg.snr_hidden, &base, rng)?,
                }
            }
        })
    }

    /// Current schedule as a table.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleState::Fixed { schedule } => Ok(schedule.clone()),
            ScheduleState::Learned { net } => net.schedule(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
}

/// Counters gathered while sampling minibatches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// `timestep_counts[t]` is how often timestep `t` was drawn.
    pub timestep_counts: Vec<u64>,
    pub conditioned_examples: u64,
    pub null_token_substitutions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRun {
    pub model: DenoiserModel,
    pub schedule: ScheduleState,
    pub history: Vec<TrainRecord>,
    pub stats: TrainStats,
}

impl DiffusionRun {
    pub fn final_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.schedule()
    }
}

/// Timesteps for one minibatch: with probability `1/T` the whole batch
/// trains the reconstruction term (`t = 1`); otherwise each example draws
/// `t ~ U{2..T}`.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, steps: usize, batch: usize) -> Vec<usize> {
    if steps == 1 || rng.random_range(0..steps) == 0 {
        return vec![1; batch];
    }
    (0..batch).map(|_| rng.random_range(2..=steps)).collect()
}

/// Learned-schedule loss `mean_b ½(SNR(t_b − 1) − SNR(t_b)) · err_b`, with
/// `err_b = ‖x̂_b − x0_b‖²` held fixed, recorded against the SNR network.
fn snr_loss(tape: &mut Tape, net: &LearnedSnrNet, ts: &[usize], errs: Vec<f64>) -> Result<crate::ndgrad::Var> {
    let n = ts.len();
    let prev: Vec<usize> = ts.iter().map(|t| t - 1).collect();
    let om_t = net.omega_on_tape(tape, ts)?;
    let om_p = net.omega_on_tape(tape, &prev)?;
    let neg_t = tape.scale(om_t, -1.0)?;
    let neg_p = tape.scale(om_p, -1.0)?;
    let snr_t = tape.exp(neg_t);
    let snr_p = tape.exp(neg_p);
    let delta = tape.sub(snr_p, snr_t)?;
    let err = tape.constant(Tensor::matrix(n, 1, errs)?);
    let w = tape.mul(delta, err)?;
    let total = tape.sum(w);
    tape.scale(total, 0.5 / n as f64)
}

/// Trains a denoiser on `data` with Adam.
pub fn train_diffusion(cfg: &TrainConfig, data: &Dataset) -> Result<DiffusionRun> {
    cfg.validate()?;
    let cond_dim = if cfg.conditional {
        Some(
            data.class_count()
                .ok_or_else(|| Error::config("conditional training needs a labeled dataset"))?,
        )
    } else {
        None
    };
    let shape = DenoiserShape {
        data_dim: data.dim(),
        steps: cfg.t_steps,
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
        time_features: cfg.time_features,
        cond_dim,
    };
    let mut init_rng = rng::stream(cfg.seed, 0);
    let model = DenoiserModel::init(&shape, cfg.parameterization, &mut init_rng)?;
    let schedule = ScheduleState::from_config(cfg, &mut init_rng)?;
    train_diffusion_from(cfg, data, model, schedule)
}

/// Continues training an existing model and schedule.
pub fn train_diffusion_from(
    cfg: &TrainConfig,
    data: &Dataset,
    mut model: DenoiserModel,
    mut schedule: ScheduleState,
) -> Result<DiffusionRun> {
    cfg.validate()?;
    if model.data_dim != data.dim() || model.steps != cfg.t_steps {
        return Err(Error::config("model does not match the dataset or T"));
    }
    let mut adam = AdamConfig::default();
    let mut rng = rng::stream(cfg.seed, 1);
    let mut state = AdamState::default();
    let mut snr_state = AdamState::default();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut stats = TrainStats {
        timestep_counts: vec![0; cfg.t_steps + 1],
        ..TrainStats::default()
    };
    let d = data.dim();
    let b = cfg.batch_size;
    let one_hots: Vec<Vec<f64>> = match model.cond_dim {
        Some(w) => (0..w).map(|y| one_hot(y, w)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let labels = data.labels.as_deref();
    let mut table = schedule.schedule()?;

    for step in 0..cfg.steps {
        adam.lr = cfg.lr_decay.rate(cfg.lr, step, cfg.steps);
        let mut x0 = Vec::with_capacity(b * d);
        let mut cond_idx: Vec<Option<usize>> = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..data.len());
            x0.extend_from_slice(&data.points[i]);
            if let (Some(_), Some(labels)) = (model.cond_dim, labels) {
                stats.conditioned_examples += 1;
                if rng.random::<f64>() < cfg.cond_dropout_prob {
                    stats.null_token_substitutions += 1;
                    cond_idx.push(None);
                } else {
                    cond_idx.push(Some(labels[i]));
                }
            }
        }
        let ts = sample_timesteps(&mut rng, cfg.t_steps, b);
        for &t in &ts {
            stats.timestep_counts[t] += 1;
        }
        let x0 = Tensor::matrix(b, d, x0)?;
        let eps = Tensor::matrix(b, d, rng::normal_vec(&mut rng, b * d))?;
        let conds: Vec<Option<&[f64]>> = cond_idx.iter().map(|c| c.map(|y| one_hots[y].as_slice())).collect();

        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let batch = LossBatch {
            x0: &x0,
            ts: &ts,
            eps: &eps,
            conds: &conds,
        };
        let out = batch_loss_on_tape(&mut tape, &model, &vars, &batch, &table, cfg.weighting)?;
        let loss = tape.value(out.loss).item().unwrap_or(f64::NAN);
        let t_mean = ts.iter().sum::<usize>() as f64 / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, t_mean, loss });
        }
        history.push(TrainRecord { step, loss, t_mean });
        let grads = tape.grad(out.loss)?;

        if let ScheduleState::Learned { net } = &mut schedule {
            if ts[0] >= 2 {
                let output = tape.value(out.output);
                let mut errs = Vec::with_capacity(b);
                for (r, &t) in ts.iter().enumerate().take(b) {
                    let xt = crate::forward::noisify_with(&table, x0.row_slice(r), t, eps.row_slice(r));
                    let xhat = convert(output.row_slice(r), model.parameterization, Parameterization::X0, &xt, t, &table)?;
                    errs.push(math::sq_dist(&xhat, x0.row_slice(r)));
                }
                let mut snr_tape = Tape::new();
                let l = snr_loss(&mut snr_tape, net, &ts, errs)?;
                let g = snr_tape.grad(l)?;
                adam_step(net.named_tensors_mut(), &g, &mut snr_state, &adam)?;
                // Rebuilding the table re-checks that ᾱ stays strictly decreasing.
                table = net.schedule()?;
            }
        }
        adam_step(model.mlp.named_tensors_mut(DENOISER_PREFIX), &grads, &mut state, &adam)?;
    }
    Ok(DiffusionRun {
        model,
        schedule,
        history,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub decoder_var: f64,
    /// Reparameterized draws per example.
    pub draws: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 2000,
            batch_size: 64,
            lr: 3e-3,
            latent_dim: 2,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            decoder_var: DEFAULT_DECODER_VAR,
            draws: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeRecord {
    pub step: usize,
    /// Negative ELBO.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// Mean squared reconstruction error per coordinate.
    pub mse: f64,
}

impl VaeRecord {
    pub fn elbo(&self) -> f64 {
        -self.loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeRun {
    pub model: VaeModel,
    pub history: Vec<VaeRecord>,
}

/// Trains a VAE by minimizing the negative ELBO with Adam.
pub fn train_vae(cfg: &VaeTrainConfig, data: &Dataset) -> Result<VaeRun> {
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.draws == 0 {
        return Err(Error::config("steps, batch_size and draws must be positive"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    let shape = VaeShape {
        data_dim: data.dim(),
        latent_dim: cfg.latent_dim,
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
        decoder_var: cfg.decoder_var,
    };
    let mut model = VaeModel::init(&shape, &mut rng::stream(cfg.seed, 0))?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = rng::stream(cfg.seed, 1);
    let mut state = AdamState::default();
    let (b, d, l) = (cfg.batch_size, data.dim(), cfg.latent_dim);
    let log_norm = -0.5 * d as f64 * (math::LN_2PI + math::ln(cfg.decoder_var));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(b * d);
        for _ in 0..b {
            x.extend_from_slice(&data.points[rng.random_range(0..data.len())]);
        }
        let x = Tensor::matrix(b, d, x)?;
        let eps: Vec<Tensor> = (0..cfg.draws)
            .map(|_| Tensor::matrix(b, l, rng::normal_vec(&mut rng, b * l)))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let out = vae_loss_on_tape(&mut tape, &model, &vars, &x, &eps)?;
        let loss = tape.value(out.loss).item().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, t_mean: 1.0, loss });
        }
        let reconstruction = tape.value(out.reconstruction).item().unwrap_or(f64::NAN);
        history.push(VaeRecord {
            step,
            loss,
            reconstruction,
            kl: tape.value(out.kl).item().unwrap_or(f64::NAN),
            mse: 2.0 * cfg.decoder_var * (log_norm - reconstruction) / d as f64,
        });
        let grads = tape.grad(out.loss)?;
        let mut params = model.encoder.named_tensors_mut(ENCODER_PREFIX);
        params.extend(model.decoder.named_tensors_mut(DECODER_PREFIX));
        adam_step(params, &grads, &mut state, &adam)?;
    }
    Ok(VaeRun { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::oracle::{Gmm, LabeledGmm};

    fn small(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            t_steps: 10,
            hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    fn gmm_data() -> Dataset {
        generate_dataset(&DatasetSpec::Gmm { mixture: Gmm::default_training() }, 64, 0).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let cfg = TrainConfig { lr: 0.0, ..small(5) };
        let run = train_diffusion(&cfg, &gmm_data()).unwrap();
        let shape = DenoiserShape {
            data_dim: 2,
            steps: 10,
            hidden: vec![8],
            activation: cfg.activation,
            time_features: cfg.time_features,
            cond_dim: None,
        };
        let init = DenoiserModel::init(&shape, cfg.parameterization, &mut rng::stream(cfg.seed, 0)).unwrap();
        assert_eq!(run.model, init);
        assert_eq!(run.history.len(), 5);
    }

    #[test]
    fn identical_seeds_identical_history() {
        let a = train_diffusion(&small(20), &gmm_data()).unwrap();
        let b = train_diffusion(&small(20), &gmm_data()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn invalid_configs_rejected() {
        let data = gmm_data();
        assert!(train_diffusion(&TrainConfig { cond_dropout_prob: 1.5, ..small(1) }, &data).is_err());
        assert!(train_diffusion(&TrainConfig { conditional: true, ..small(1) }, &data).is_err());
        assert!(train_diffusion(&TrainConfig { lr: f64::NAN, ..small(1) }, &data).is_err());
    }

    #[test]
    fn learned_schedule_stays_monotone() {
        let cfg = TrainConfig {
            schedule: ScheduleKind::Learned,
            lr: 1e-2,
            ..small(30)
        };
        let run = train_diffusion(&cfg, &gmm_data()).unwrap();
        let s = run.final_schedule().unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn conditional_training_counts_dropout() {
        let data = generate_dataset(
            &DatasetSpec::LabeledGmm {
                mixture: LabeledGmm::default_guidance(),
            },
            64,
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            conditional: true,
            cond_dropout_prob: 0.5,
            ..small(10)
        };
        let run = train_diffusion(&cfg, &data).unwrap();
        assert_eq!(run.model.cond_dim, Some(2));
        assert_eq!(run.stats.conditioned_examples, 80);
        assert!(run.stats.null_token_substitutions > 0);
    }

    #[test]
    fn timesteps_cover_range() {
        let mut r = rng::seeded(0);
        for _ in 0..50 {
            let ts = sample_timesteps(&mut r, 10, 16);
            assert!(ts.iter().all(|t| (1..=10).contains(t)));
            assert!(ts.iter().all(|t| *t == 1) || ts.iter().all(|t| *t >= 2));
        }
        assert_eq!(sample_timesteps(&mut r, 1, 3), vec![1, 1, 1]);
    }

    #[test]
    fn vae_zero_lr_and_determinism() {
        let data = gmm_data();
        let cfg = VaeTrainConfig {
            steps: 5,
            lr: 0.0,
            hidden: vec![4],
            ..VaeTrainConfig::default()
        };
        let run = train_vae(&cfg, &data).unwrap();
        let shape = VaeShape {
            data_dim: 2,
            latent_dim: 2,
            hidden: vec![4],
            activation: cfg.activation,
            decoder_var: cfg.decoder_var,
        };
        assert_eq!(run.model, VaeModel::init(&shape, &mut rng::stream(0, 0)).unwrap());
        let again = train_vae(&cfg, &data).unwrap();
        assert_eq!(run.history, again.history);
        assert!(train_vae(&VaeTrainConfig { latent_dim: 3, ..cfg }, &data).is_err());
    }
}

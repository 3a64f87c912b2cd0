//! The learned reverse model: one MLP with three interchangeable output
//! parameterizations, the reverse-mean constructions, per-timestep losses
//! and both ELBO estimators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{self, noisify_with, ForwardProcess};
use crate::gauss::{self, DiagGaussian};
use crate::math;
use crate::ndgrad::{Activation, MlpParams, MlpVars, Tape, Tensor, Var};
use crate::rng;
use crate::schedule::{self, NoiseSchedule};

/// What the network output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// Estimate of the clean sample `x_0`.
    #[serde(rename = "predict-x0")]
    X0,
    /// Estimate of the source noise `ε`.
    #[serde(rename = "predict-eps")]
    Eps,
    /// Estimate of the score `∇ ln p(x_t)`.
    #[serde(rename = "predict-score")]
    Score,
}

impl Parameterization {
    pub const ALL: [Parameterization; 3] = [Parameterization::X0, Parameterization::Eps, Parameterization::Score];
}

/// Per-timestep loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Coefficients of the exact Gaussian KL, `1/(2σ_q²)`-scaled.
    ElboExact,
    /// `½(SNR(t−1) − SNR(t))` in x0 space, mapped to the native space.
    SnrDelta,
    /// Plain squared error in the native space.
    Unit,
    /// Output converted to a noise estimate, then plain squared error.
    EpsMatched,
}

/// Number of sinusoidal frequency pairs in the default time embedding.
pub const DEFAULT_TIME_FEATURES: usize = 4;

/// Parameter-name prefix of the denoiser MLP.
pub const DENOISER_PREFIX: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub mlp: MlpParams,
    pub parameterization: Parameterization,
    pub data_dim: usize,
    pub steps: usize,
    pub time_features: usize,
    pub cond_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
    pub cond_dim: Option<usize>,
}

impl DenoiserShape {
    pub fn input_width(&self) -> usize {
        self.data_dim + 1 + 2 * self.time_features + self.cond_dim.unwrap_or(0)
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend_from_slice(&self.hidden);
        s.push(self.data_dim);
        s
    }
}

/// `t/T` followed by `sin`/`cos` pairs at frequencies `2^k π`.
pub fn time_embedding(t: usize, steps: usize, pairs: usize) -> Vec<f64> {
    let s = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(1 + 2 * pairs);
    out.push(s);
    for k in 0..pairs {
        let w = core::f64::consts::PI * (1u64 << k) as f64;
        out.push(math::sin(w * s));
        out.push(math::cos(w * s));
    }
    out
}

pub fn one_hot(label: usize, width: usize) -> Result<Vec<f64>> {
    if label >= width {
        return Err(Error::contract(format!("label {label} outside 0..{width}")));
    }
    let mut v = vec![0.0; width];
    v[label] = 1.0;
    Ok(v)
}

impl DenoiserModel {
    pub fn init<R: Rng + ?Sized>(shape: &DenoiserShape, parameterization: Parameterization, rng: &mut R) -> Result<Self> {
        if shape.data_dim == 0 || shape.steps == 0 {
            return Err(Error::config("denoiser needs data_dim >= 1 and T >= 1"));
        }
        Ok(DenoiserModel {
            mlp: MlpParams::init(&shape.sizes(), shape.activation, rng),
            parameterization,
            data_dim: shape.data_dim,
            steps: shape.steps,
            time_features: shape.time_features,
            cond_dim: shape.cond_dim,
        })
    }

    pub fn zeros(shape: &DenoiserShape, parameterization: Parameterization) -> Self {
        DenoiserModel {
            mlp: MlpParams::zeros(&shape.sizes(), shape.activation),
            parameterization,
            data_dim: shape.data_dim,
            steps: shape.steps,
            time_features: shape.time_features,
            cond_dim: shape.cond_dim,
        }
    }

    /// Rebuilds a model around existing weights, checking the widths.
    pub fn from_parts(
        mlp: MlpParams,
        parameterization: Parameterization,
        data_dim: usize,
        steps: usize,
        time_features: usize,
        cond_dim: Option<usize>,
    ) -> Result<Self> {
        let m = DenoiserModel {
            mlp,
            parameterization,
            data_dim,
            steps,
            time_features,
            cond_dim,
        };
        let expected = data_dim + 1 + 2 * time_features + cond_dim.unwrap_or(0);
        if m.mlp.in_dim() != expected || m.mlp.out_dim() != data_dim {
            return Err(Error::Shape {
                op: "denoiser",
                left: vec![expected, data_dim],
                right: vec![m.mlp.in_dim(), m.mlp.out_dim()],
            });
        }
        Ok(m)
    }

    /// The zero vector substituted for absent conditioning.
    pub fn null_token(&self) -> Vec<f64> {
        vec![0.0; self.cond_dim.unwrap_or(0)]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::contract(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Condition and time columns appended after `x_t`.
    fn extra_features(&self, t: usize, cond: Option<&[f64]>, out: &mut Vec<f64>) -> Result<()> {
        self.check_t(t)?;
        out.extend(time_embedding(t, self.steps, self.time_features));
        match (self.cond_dim, cond) {
            (None, None) => {}
            (None, Some(_)) => return Err(Error::contract("model is unconditional")),
            (Some(w), None) => out.extend(core::iter::repeat_n(0.0, w)),
            (Some(w), Some(c)) => {
                if c.len() != w {
                    return Err(Error::Shape {
                        op: "condition",
                        left: vec![w],
                        right: vec![c.len()],
                    });
                }
                out.extend_from_slice(c);
            }
        }
        Ok(())
    }

    /// Feature matrix `[x_t | time | cond]` for a batch.
    pub fn features(&self, x_t: &Tensor, ts: &[usize], conds: &[Option<&[f64]>]) -> Result<Tensor> {
        let (rows, cols) = x_t.dims();
        if cols != self.data_dim || ts.len() != rows || !(conds.is_empty() || conds.len() == rows) {
            return Err(Error::Shape {
                op: "denoiser features",
                left: vec![rows, cols],
                right: vec![ts.len(), conds.len()],
            });
        }
        x_t.check_finite()?;
        let width = self.mlp.in_dim();
        let mut data = Vec::with_capacity(rows * width);
        for (r, &t) in ts.iter().enumerate().take(rows) {
            data.extend_from_slice(x_t.row_slice(r));
            let c = conds.get(r).copied().flatten();
            self.extra_features(t, c, &mut data)?;
        }
        Tensor::matrix(rows, width, data)
    }

    /// Raw network output for one input.
    pub fn predict(&self, x_t: &[f64], t: usize, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let x = Tensor::row(x_t.to_vec());
        Ok(self.predict_batch(&x, &[t], &[cond])?.into_data())
    }

    /// Raw network output for a `(batch, data_dim)` input.
    pub fn predict_batch(&self, x_t: &Tensor, ts: &[usize], conds: &[Option<&[f64]>]) -> Result<Tensor> {
        let f = self.features(x_t, ts, conds)?;
        self.mlp.apply(&f)
    }

    /// Records the network on `tape` for a constant `x_t` batch.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x_t: &Tensor,
        ts: &[usize],
        conds: &[Option<&[f64]>],
    ) -> Result<Var> {
        let f = self.features(x_t, ts, conds)?;
        let input = tape.constant(f);
        vars.apply(tape, input)
    }

    /// Records the network on `tape` for an `x_t` that is itself a tape node.
    pub fn forward_on_tape_var(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x_t: Var,
        ts: &[usize],
        conds: &[Option<&[f64]>],
    ) -> Result<Var> {
        let rows = tape.value(x_t).rows();
        let mut extra = Vec::new();
        for (r, &t) in ts.iter().enumerate() {
            self.extra_features(t, conds.get(r).copied().flatten(), &mut extra)?;
        }
        let width = self.mlp.in_dim() - self.data_dim;
        let extra = tape.constant(Tensor::matrix(rows, width, extra)?);
        let input = tape.concat_cols(x_t, extra)?;
        vars.apply(tape, input)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        self.mlp.register(tape, DENOISER_PREFIX)
    }

    /// The model's estimate of `x_0`.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, s: &NoiseSchedule, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let out = self.predict(x_t, t, cond)?;
        convert(&out, self.parameterization, Parameterization::X0, x_t, t, s)
    }
}

/// Re-expresses a network output under another parameterization at `(x_t, t)`.
pub fn convert(
    output: &[f64],
    from: Parameterization,
    to: Parameterization,
    x_t: &[f64],
    t: usize,
    s: &NoiseSchedule,
) -> Result<Vec<f64>> {
    use Parameterization::*;
    s.check_t(t, 1)?;
    if output.len() != x_t.len() {
        return Err(Error::Shape {
            op: "convert",
            left: vec![output.len()],
            right: vec![x_t.len()],
        });
    }
    let ab = s.alpha_bar(t);
    let om = s.one_minus_alpha_bar(t);
    let (sab, som) = (math::sqrt(ab), math::sqrt(om));
    let f: &dyn Fn(f64, f64) -> f64 = match (from, to) {
        (X0, X0) | (Eps, Eps) | (Score, Score) => &|o, _| o,
        (Eps, X0) => &|o, x| (x - som * o) / sab,
        (Score, X0) => &|o, x| (x + om * o) / sab,
        (X0, Eps) => &|o, x| (x - sab * o) / som,
        (X0, Score) => &|o, x| -(x - sab * o) / om,
        (Eps, Score) => &|o, _| -o / som,
        (Score, Eps) => &|o, _| -som * o,
    };
    Ok(output.iter().zip(x_t).map(|(o, x)| f(*o, *x)).collect())
}

/// Reverse mean `μ_θ(x_t, t)` built from a raw output in its own form.
pub fn posterior_mean_from_output(
    output: &[f64],
    param: Parameterization,
    x_t: &[f64],
    t: usize,
    s: &NoiseSchedule,
) -> Result<Vec<f64>> {
    s.check_t(t, 2)?;
    let a = s.alpha(t);
    let sa = math::sqrt(a);
    let beta = s.beta(t);
    Ok(match param {
        Parameterization::X0 => {
            let (ct, c0) = forward::posterior_mean_coeffs(s, t);
            x_t.iter().zip(output).map(|(x, o)| ct * x + c0 * o).collect()
        }
        Parameterization::Eps => {
            let k = beta / (math::sqrt(s.one_minus_alpha_bar(t)) * sa);
            x_t.iter().zip(output).map(|(x, o)| x / sa - k * o).collect()
        }
        Parameterization::Score => {
            let k = beta / sa;
            x_t.iter().zip(output).map(|(x, o)| x / sa + k * o).collect()
        }
    })
}

pub fn posterior_mean(
    m: &DenoiserModel,
    x_t: &[f64],
    t: usize,
    s: &NoiseSchedule,
    cond: Option<&[f64]>,
) -> Result<Vec<f64>> {
    s.check_t(t, 2)?;
    let out = m.predict(x_t, t, cond)?;
    posterior_mean_from_output(&out, m.parameterization, x_t, t, s)
}

/// Factor `k` with `‖x̂ − x_0‖² = k · ‖native error‖²`.
fn x0_error_factor(param: Parameterization, s: &NoiseSchedule, t: usize) -> f64 {
    let ab = s.alpha_bar(t);
    let om = s.one_minus_alpha_bar(t);
    match param {
        Parameterization::X0 => 1.0,
        Parameterization::Eps => om / ab,
        Parameterization::Score => om * om / ab,
    }
}

/// Weight multiplying the native squared error at timestep `t`. At `t = 1`
/// the ELBO weightings use the reconstruction decoder `N(x̂, (1 − α_1) I)`.
pub fn loss_weight(param: Parameterization, weighting: Weighting, t: usize, s: &NoiseSchedule) -> Result<f64> {
    s.check_t(t, 1)?;
    let factor = x0_error_factor(param, s, t);
    Ok(match (weighting, t) {
        (Weighting::Unit | Weighting::EpsMatched, _) => 1.0,
        (Weighting::ElboExact | Weighting::SnrDelta, 1) => factor / (2.0 * s.beta(1)),
        (Weighting::SnrDelta, _) => schedule::snr_weight(s, t)? * factor,
        (Weighting::ElboExact, _) => {
            let var = schedule::sigma_q_sq(s, t)?;
            let beta = s.beta(t);
            let (a, om) = (s.alpha(t), s.one_minus_alpha_bar(t));
            match param {
                Parameterization::X0 => schedule::x0_kl_coefficient(s, t)?,
                Parameterization::Eps => beta * beta / (2.0 * var * om * a),
                Parameterization::Score => beta * beta / (2.0 * var * a),
            }
        }
    })
}

/// Regression target for the native parameterization.
pub fn target(param: Parameterization, x0: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Vec<f64> {
    match param {
        Parameterization::X0 => x0.to_vec(),
        Parameterization::Eps => eps.to_vec(),
        Parameterization::Score => {
            let k = -1.0 / math::sqrt(s.one_minus_alpha_bar(t));
            eps.iter().map(|e| k * e).collect()
        }
    }
}

/// A minibatch for the diffusion loss.
#[derive(Debug, Clone)]
pub struct LossBatch<'a> {
    pub x0: &'a Tensor,
    pub ts: &'a [usize],
    pub eps: &'a Tensor,
    pub conds: &'a [Option<&'a [f64]>],
}

/// Pieces of a recorded batch loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// Scalar mean over the batch.
    pub loss: Var,
    /// `(batch, data_dim)` raw network output.
    pub output: Var,
}

/// Mean over the batch of `w(t_b) · ‖prediction_b − target_b‖²`, recorded on
/// `tape`. Timesteps may include `t = 1`.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    m: &DenoiserModel,
    vars: &MlpVars,
    batch: &LossBatch<'_>,
    s: &NoiseSchedule,
    weighting: Weighting,
) -> Result<BatchLoss> {
    let (rows, dim) = batch.x0.dims();
    if batch.eps.dims() != (rows, dim) || batch.ts.len() != rows {
        return Err(Error::Shape {
            op: "batch loss",
            left: batch.x0.shape().to_vec(),
            right: batch.eps.shape().to_vec(),
        });
    }
    let mut xt = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        s.check_t(batch.ts[r], 1)?;
        xt.extend(noisify_with(s, batch.x0.row_slice(r), batch.ts[r], batch.eps.row_slice(r)));
    }
    let xt = Tensor::matrix(rows, dim, xt)?;
    let output = m.forward_on_tape(tape, vars, &xt, batch.ts, batch.conds)?;
    let param = m.parameterization;
    let sq = if weighting == Weighting::EpsMatched {
        // ε̂ = offset + scale ⊙ output, row-wise coefficients.
        let mut offset = Vec::with_capacity(rows * dim);
        let mut scale = Vec::with_capacity(rows);
        for r in 0..rows {
            let t = batch.ts[r];
            let (sab, som) = (math::sqrt(s.alpha_bar(t)), math::sqrt(s.one_minus_alpha_bar(t)));
            let (k, c) = match param {
                Parameterization::X0 => (-sab / som, 1.0 / som),
                Parameterization::Eps => (1.0, 0.0),
                Parameterization::Score => (-som, 0.0),
            };
            scale.push(k);
            offset.extend(xt.row_slice(r).iter().zip(batch.eps.row_slice(r)).map(|(x, e)| c * x - e));
        }
        let scale = tape.constant(Tensor::matrix(rows, 1, scale)?);
        let offset = tape.constant(Tensor::matrix(rows, dim, offset)?);
        let scaled = tape.mul(output, scale)?;
        let diff = tape.add(scaled, offset)?;
        tape.square(diff)?
    } else {
        let mut tgt = Vec::with_capacity(rows * dim);
        let mut w = Vec::with_capacity(rows);
        for r in 0..rows {
            let t = batch.ts[r];
            tgt.extend(target(param, batch.x0.row_slice(r), batch.eps.row_slice(r), t, s));
            w.push(loss_weight(param, weighting, t, s)?);
        }
        let tgt = tape.constant(Tensor::matrix(rows, dim, tgt)?);
        let w = tape.constant(Tensor::matrix(rows, 1, w)?);
        let diff = tape.sub(output, tgt)?;
        let sq = tape.square(diff)?;
        tape.mul(sq, w)?
    };
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / rows as f64)?;
    Ok(BatchLoss { loss, output })
}

/// Single-example loss `w(t)‖prediction − target‖²` for `2 ≤ t ≤ T`.
#[allow(clippy::too_many_arguments)]
pub fn per_timestep_loss(
    tape: &mut Tape,
    m: &DenoiserModel,
    x0: &[f64],
    t: usize,
    eps: &[f64],
    cond: Option<&[f64]>,
    s: &NoiseSchedule,
    weighting: Weighting,
) -> Result<Var> {
    s.check_t(t, 2)?;
    let vars = m.register(tape);
    let x0 = Tensor::row(x0.to_vec());
    let eps = Tensor::row(eps.to_vec());
    let batch = LossBatch {
        x0: &x0,
        ts: &[t],
        eps: &eps,
        conds: &[cond],
    };
    Ok(batch_loss_on_tape(tape, m, &vars, &batch, s, weighting)?.loss)
}

/// A signed ELBO estimate with its parts. `terms[i]` is the KL term for
/// timestep `first_term_t + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub total: f64,
    pub reconstruction: f64,
    pub prior: f64,
    pub terms: Vec<f64>,
    pub first_term_t: usize,
}

fn decoder(m: &DenoiserModel, x1: &[f64], s: &NoiseSchedule, cond: Option<&[f64]>) -> Result<DiagGaussian> {
    DiagGaussian::isotropic(m.predict_x0(x1, 1, s, cond)?, s.beta(1))
}

fn check_elbo_inputs(m: &DenoiserModel, x0: &[f64], n_mc: usize, s: &NoiseSchedule) -> Result<ForwardProcess> {
    if n_mc == 0 {
        return Err(Error::contract("n_mc must be at least 1"));
    }
    if s.steps() != m.steps {
        return Err(Error::contract("model and schedule disagree on T"));
    }
    ForwardProcess::new(s.clone(), x0.len())
}

/// ELBO as reconstruction − prior matching − Σ denoising-matching KLs; the
/// KLs are closed form, averaged over `n_mc` draws of `x_t ~ q(x_t | x_0)`.
pub fn elbo_denoising_form<R: Rng + ?Sized>(
    m: &DenoiserModel,
    x0: &[f64],
    n_mc: usize,
    rng: &mut R,
    s: &NoiseSchedule,
) -> Result<ElboEstimate> {
    let fp = check_elbo_inputs(m, x0, n_mc, s)?;
    let steps = s.steps();
    let d = x0.len();
    let mut recon = 0.0;
    let mut terms = vec![0.0; steps.saturating_sub(1)];
    for _ in 0..n_mc {
        let x1 = fp.noisify(x0, 1, &rng::normal_vec(rng, d))?;
        recon += gauss::log_pdf(&decoder(m, &x1, s, None)?, x0)?;
        if steps < 2 {
            continue;
        }
        let ts: Vec<usize> = (2..=steps).collect();
        let mut xt = Vec::with_capacity(ts.len() * d);
        for &t in &ts {
            xt.extend(fp.noisify(x0, t, &rng::normal_vec(rng, d))?);
        }
        let xt = Tensor::matrix(ts.len(), d, xt)?;
        let out = m.predict_batch(&xt, &ts, &[])?;
        for (i, &t) in ts.iter().enumerate() {
            let x_t = xt.row_slice(i);
            let q = fp.q_posterior(x_t, x0, t)?;
            let mu = posterior_mean_from_output(out.row_slice(i), m.parameterization, x_t, t, s)?;
            let p = DiagGaussian::isotropic(mu, schedule::sigma_q_sq(s, t)?)?;
            terms[i] += gauss::kl_diag(&q, &p)?;
        }
    }
    let n = n_mc as f64;
    recon /= n;
    terms.iter_mut().for_each(|v| *v /= n);
    let prior = gauss::kl_diag(&fp.q_marginal(x0, steps)?, &DiagGaussian::standard(d))?;
    Ok(ElboEstimate {
        total: recon - prior - terms.iter().sum::<f64>(),
        reconstruction: recon,
        prior,
        terms,
        first_term_t: 2,
    })
}

/// ELBO as reconstruction − prior matching − Σ consistency KLs, each
/// consistency term evaluated at jointly drawn `(x_{t−1}, x_{t+1})` from one
/// simulated forward chain per Monte-Carlo draw.
pub fn elbo_consistency_form<R: Rng + ?Sized>(
    m: &DenoiserModel,
    x0: &[f64],
    n_mc: usize,
    rng: &mut R,
    s: &NoiseSchedule,
) -> Result<ElboEstimate> {
    let fp = check_elbo_inputs(m, x0, n_mc, s)?;
    let steps = s.steps();
    let d = x0.len();
    let mut recon = 0.0;
    let mut prior = 0.0;
    let mut terms = vec![0.0; steps.saturating_sub(1)];
    let standard = DiagGaussian::standard(d);
    for _ in 0..n_mc {
        // chain[t] = x_t for t = 0..=T
        let mut chain = Vec::with_capacity(steps + 1);
        chain.push(x0.to_vec());
        for t in 1..=steps {
            let next = fp.q_step(&chain[t - 1], t, &rng::normal_vec(rng, d))?;
            chain.push(next);
        }
        recon += gauss::log_pdf(&decoder(m, &chain[1], s, None)?, x0)?;
        prior += gauss::kl_diag(&fp.q_step_dist(&chain[steps - 1], steps)?, &standard)?;
        if steps < 2 {
            continue;
        }
        let ts: Vec<usize> = (2..=steps).collect();
        let mut xs = Vec::with_capacity(ts.len() * d);
        for &t in &ts {
            xs.extend_from_slice(&chain[t]);
        }
        let xs = Tensor::matrix(ts.len(), d, xs)?;
        let out = m.predict_batch(&xs, &ts, &[])?;
        for t in 1..steps {
            let i = t - 1;
            let q = fp.q_step_dist(&chain[t - 1], t)?;
            let mu = posterior_mean_from_output(out.row_slice(i), m.parameterization, &chain[t + 1], t + 1, s)?;
            let p = DiagGaussian::isotropic(mu, schedule::sigma_q_sq(s, t + 1)?)?;
            terms[i] += gauss::kl_diag(&q, &p)?;
        }
    }
    let n = n_mc as f64;
    recon /= n;
    prior /= n;
    terms.iter_mut().for_each(|v| *v /= n);
    Ok(ElboEstimate {
        total: recon - prior - terms.iter().sum::<f64>(),
        reconstruction: recon,
        prior,
        terms,
        first_term_t: 1,
    })
}

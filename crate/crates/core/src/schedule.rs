//! Discrete noise schedules: `α_t`, `ᾱ_t`, posterior variances and SNR,
//! plus the learnable monotone SNR network.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::ndgrad::{Activation, Layer, MlpParams, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    FixedLinear,
    FixedCosine,
    Learned,
}

/// Immutable table of schedule coefficients for `t = 1..=T`.
///
/// `ᾱ_t` and `1 − ᾱ_t` are stored separately so that neither end of the
/// schedule suffers cancellation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr")]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    one_minus_alpha_bar: Vec<f64>,
}

#[derive(Deserialize)]
struct ScheduleRepr {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    one_minus_alpha_bar: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        let n = r.alpha.len();
        if n == 0 || r.beta.len() != n || r.alpha_bar.len() != n || r.one_minus_alpha_bar.len() != n {
            return Err(Error::config("schedule tables must be non-empty and of equal length"));
        }
        let in_unit = |v: &f64| *v > 0.0 && *v < 1.0;
        let ok = r.alpha.iter().all(in_unit)
            && r.beta.iter().all(in_unit)
            && r.alpha_bar.iter().all(in_unit)
            && r.one_minus_alpha_bar.iter().all(in_unit)
            && r.alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::config("schedule tables out of range or not decreasing"));
        }
        Ok(NoiseSchedule {
            kind: r.kind,
            alpha: r.alpha,
            beta: r.beta,
            alpha_bar: r.alpha_bar,
            one_minus_alpha_bar: r.one_minus_alpha_bar,
        })
    }
}

pub const DEFAULT_T: usize = 100;

impl NoiseSchedule {
    /// Builds a schedule from per-step `β_t = 1 − α_t`.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("a schedule needs T >= 1"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut one_minus = Vec::with_capacity(beta.len());
        let (mut ab, mut om) = (1.0, 0.0);
        for (a, b) in alpha.iter().zip(&beta) {
            // 1 - ᾱ_t = (1 - ᾱ_{t-1}) α_t + β_t
            om = om * a + b;
            ab *= a;
            alpha_bar.push(ab);
            one_minus.push(om);
        }
        Ok(NoiseSchedule {
            kind,
            alpha,
            beta,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
        })
    }

    /// Builds a schedule from `(ᾱ_t, 1 − ᾱ_t)` pairs, e.g. a learned SNR net.
    pub fn from_alpha_bar_pairs(kind: ScheduleKind, pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("a schedule needs T >= 1"));
        }
        let mut alpha = Vec::with_capacity(pairs.len());
        let mut beta = Vec::with_capacity(pairs.len());
        let (mut prev_ab, mut prev_om) = (1.0, 0.0);
        for (t, &(ab, om)) in pairs.iter().enumerate() {
            if !(ab > 0.0 && ab < prev_ab && om > prev_om) {
                return Err(Error::config(format!(
                    "alpha_bar must strictly decrease; violated at t = {}",
                    t + 1
                )));
            }
            alpha.push(ab / prev_ab);
            // 1 - α_t = (ᾱ_{t-1} - ᾱ_t) / ᾱ_{t-1} = (om_t - om_{t-1}) / ᾱ_{t-1}
            beta.push((om - prev_om) / prev_ab);
            prev_ab = ab;
            prev_om = om;
        }
        Ok(NoiseSchedule {
            kind,
            alpha,
            beta,
            alpha_bar: pairs.iter().map(|p| p.0).collect(),
            one_minus_alpha_bar: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::contract(format!(
                "timestep {t} outside {lo}..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `1 − α_t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `1 − ᾱ_t`, with `1 − ᾱ_0 = 0`.
    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linearly interpolated `β_t` between `beta_start` and `beta_end`.
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(ScheduleKind::FixedLinear, betas)
}

/// Linear schedule whose endpoints are the usual 1000-step range
/// `[1e-4, 0.02]` rescaled by `1000 / T`, keeping `ᾱ_T` near zero.
pub fn default_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    let scale = 1000.0 / steps as f64;
    let end = (0.02 * scale).min(0.999);
    let start = (1e-4 * scale).min(end);
    linear_beta_schedule(steps, start, end)
}

/// Cosine schedule, `ᾱ_t = f(t)/f(0)` with `f(t) = cos²((t/T + s)/(1 + s) · π/2)`
/// and `β_t` clipped to `0.999`.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    if offset < 0.0 {
        return Err(Error::config("cosine offset must be non-negative"));
    }
    let f = |t: f64| {
        let c = math::cos((t / steps as f64 + offset) / (1.0 + offset) * core::f64::consts::FRAC_PI_2);
        c * c
    };
    let betas = (1..=steps)
        .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
        .collect();
    NoiseSchedule::from_betas(ScheduleKind::FixedCosine, betas)
}

/// Posterior variance `σ_q²(t) = (1 − α_t)(1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, `2 ≤ t ≤ T`.
pub fn sigma_q_sq(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.check_t(t, 2)?;
    Ok(s.beta(t) * s.one_minus_alpha_bar(t - 1) / s.one_minus_alpha_bar(t))
}

/// `SNR(t) = ᾱ_t / (1 − ᾱ_t)`, `1 ≤ t ≤ T`.
pub fn snr(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.check_t(t, 1)?;
    Ok(s.alpha_bar(t) / s.one_minus_alpha_bar(t))
}

/// `½(SNR(t−1) − SNR(t))`, the x0-space weight of one denoising KL term.
pub fn snr_weight(s: &NoiseSchedule, t: usize) -> Result<f64> {
    s.check_t(t, 2)?;
    Ok(0.5 * (snr(s, t - 1)? - snr(s, t)?))
}

/// The same weight in its unsimplified form,
/// `ᾱ_{t−1}(1 − α_t)² / (2σ_q²(t)(1 − ᾱ_t)²)`.
pub fn x0_kl_coefficient(s: &NoiseSchedule, t: usize) -> Result<f64> {
    let var = sigma_q_sq(s, t)?;
    let om = s.one_minus_alpha_bar(t);
    Ok(s.alpha_bar(t - 1) * s.beta(t) * s.beta(t) / (2.0 * var * om * om))
}

/// `(ᾱ, 1 − ᾱ) = (sigmoid(−ω), sigmoid(ω))`.
pub fn alpha_bar_pair(omega: f64) -> (f64, f64) {
    (math::sigmoid(-omega), math::sigmoid(omega))
}

/// Monotone network `ω_η(t)` on the feature `s = t / T`:
///
/// `ω̃(s) = s·softplus(a) + sigmoid(s·softplus(W₁) + b₁)·softplus(W₂)`
///
/// rescaled so that `ω(1) = omega_first` and `ω(T) = omega_last`. All
/// effective weights are positive and the activation is increasing, so `ω`
/// is strictly increasing in `t` for every parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedSnrNet {
    pub mlp: MlpParams,
    pub skip: Tensor,
    pub omega_first: f64,
    pub omega_last: f64,
    pub steps: usize,
}

pub const SNR_NET_PREFIX: &str = "snr";

impl LearnedSnrNet {
    pub fn init<R: Rng + ?Sized>(
        hidden: usize,
        steps: usize,
        omega_first: f64,
        omega_last: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("a learned schedule needs T >= 2"));
        }
        if omega_first >= omega_last {
            return Err(Error::config("omega_first must be below omega_last"));
        }
        let mlp = MlpParams::init(&[1, hidden, 1], Activation::Sigmoid, rng);
        Ok(LearnedSnrNet {
            mlp,
            skip: Tensor::scalar(0.0),
            omega_first,
            omega_last,
            steps,
        })
    }

    /// Endpoints matching `-ln SNR` of a fixed schedule at `t = 1` and `t = T`.
    pub fn init_matching<R: Rng + ?Sized>(
        hidden: usize,
        s: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let lo = -math::ln(snr(s, 1)?);
        let hi = -math::ln(snr(s, s.steps())?);
        Self::init(hidden, s.steps(), lo, hi, rng)
    }

    fn raw_omega(&self, feats: &[f64]) -> Vec<f64> {
        let l0 = &self.mlp.layers()[0];
        let l1 = &self.mlp.layers()[1];
        let a = math::softplus(self.skip.data()[0]);
        feats
            .iter()
            .map(|&s| {
                let mut acc = s * a;
                for j in 0..l0.out_dim() {
                    let w1 = math::softplus(l0.weight.data()[j]);
                    let h = math::sigmoid(s * w1 + l0.bias.data()[j]);
                    acc += h * math::softplus(l1.weight.data()[j]);
                }
                acc
            })
            .collect()
    }

    /// `ω_η(t)` for each `t` in `ts`.
    pub fn omega(&self, ts: &[usize]) -> Result<Vec<f64>> {
        for &t in ts {
            if t < 1 || t > self.steps {
                return Err(Error::contract(format!(
                    "timestep {t} outside 1..={}",
                    self.steps
                )));
            }
        }
        let n = self.steps as f64;
        let mut feats: Vec<f64> = ts.iter().map(|&t| t as f64 / n).collect();
        feats.push(1.0 / n);
        feats.push(1.0);
        let raw = self.raw_omega(&feats);
        let (lo, hi) = (raw[ts.len()], raw[ts.len() + 1]);
        let span = self.omega_last - self.omega_first;
        Ok(raw[..ts.len()]
            .iter()
            .map(|r| self.omega_first + span * (r - lo) / (hi - lo))
            .collect())
    }

    /// Snapshot of the current network as a fixed table.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let ts: Vec<usize> = (1..=self.steps).collect();
        let pairs: Vec<(f64, f64)> = self.omega(&ts)?.into_iter().map(alpha_bar_pair).collect();
        NoiseSchedule::from_alpha_bar_pairs(ScheduleKind::Learned, &pairs)
    }

    /// Records `ω_η(t)` for every `t` in `ts` on the tape as an `(n, 1)`
    /// column. Parameters are registered under [`SNR_NET_PREFIX`].
    pub fn omega_on_tape(&self, tape: &mut Tape, ts: &[usize]) -> Result<Var> {
        let l0 = &self.mlp.layers()[0];
        let l1 = &self.mlp.layers()[1];
        let w1 = tape.param(alloc::format!("{SNR_NET_PREFIX}.0.weight"), l0.weight.clone());
        let b1 = tape.param(alloc::format!("{SNR_NET_PREFIX}.0.bias"), l0.bias.clone());
        let w2 = tape.param(alloc::format!("{SNR_NET_PREFIX}.1.weight"), l1.weight.clone());
        // The output bias cancels under endpoint normalization; it is
        // registered so that every named tensor receives a (zero) gradient.
        let _b2 = tape.param(alloc::format!("{SNR_NET_PREFIX}.1.bias"), l1.bias.clone());
        let skip = tape.param(alloc::format!("{SNR_NET_PREFIX}.skip"), self.skip.clone());
        let w1p = tape.softplus(w1);
        let w2p = tape.softplus(w2);
        let ap = tape.softplus(skip);
        let n = self.steps as f64;
        let raw = |tape: &mut Tape, feats: Vec<f64>| -> Result<Var> {
            let rows = feats.len();
            let s = tape.constant(Tensor::matrix(rows, 1, feats)?);
            let z = tape.matmul(s, w1p)?;
            let z = tape.add(z, b1)?;
            let h = tape.sigmoid(z);
            let out = tape.matmul(h, w2p)?;
            let lin = tape.mul(s, ap)?;
            tape.add(out, lin)
        };
        let body = raw(tape, ts.iter().map(|&t| t as f64 / n).collect())?;
        let lo = raw(tape, alloc::vec![1.0 / n])?;
        let hi = raw(tape, alloc::vec![1.0])?;
        // ω = ω_first + span · (raw − lo) / (hi − lo); 1/(hi − lo) = exp(−log(hi − lo))
        let centered = tape.sub(body, lo)?;
        let width = tape.sub(hi, lo)?;
        let log_w = tape.log(width);
        let neg_log_w = tape.scale(log_w, -1.0)?;
        let inv_w = tape.exp(neg_log_w);
        let frac = tape.mul(centered, inv_w)?;
        let scaled = tape.scale(frac, self.omega_last - self.omega_first)?;
        let first = tape.scalar(self.omega_first);
        tape.add(scaled, first)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(alloc::string::String, &mut Tensor)> {
        let mut out = self.mlp.named_tensors_mut(SNR_NET_PREFIX);
        out.push((alloc::format!("{SNR_NET_PREFIX}.skip"), &mut self.skip));
        out
    }

    pub fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor)> {
        let mut out = self.mlp.named_tensors(SNR_NET_PREFIX);
        out.push((alloc::format!("{SNR_NET_PREFIX}.skip"), &self.skip));
        out
    }

    /// Replaces the hidden layers; used when loading checkpoints.
    pub fn from_parts(layers: Vec<Layer>, skip: Tensor, omega_first: f64, omega_last: f64, steps: usize) -> Result<Self> {
        let mlp = MlpParams::new(layers, alloc::vec![Activation::Sigmoid])?;
        if mlp.in_dim() != 1 || mlp.out_dim() != 1 {
            return Err(Error::contract("the SNR network maps 1 -> 1"));
        }
        Ok(LearnedSnrNet {
            mlp,
            skip,
            omega_first,
            omega_last,
            steps,
        })
    }
}

/// `(ᾱ_t, 1 − ᾱ_t)` from the learned network.
pub fn learned_alpha_bar(net: &LearnedSnrNet, t: usize) -> Result<(f64, f64)> {
    Ok(alpha_bar_pair(net.omega(&[t])?[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_step_half() {
        let s = linear_beta_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = linear_beta_schedule(7, 0.01, 0.3).unwrap();
        assert!(s.alpha_bar(7) < s.alpha_bar(1));
        for t in 2..=7 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(snr(&s, t - 1).unwrap() - snr(&s, t).unwrap() > 0.0);
        }
    }

    #[test]
    fn running_product_matches_independent_product() {
        let s = linear_beta_schedule(100, 1e-4, 0.02).unwrap();
        let mut direct = 1.0;
        for i in 0..100 {
            direct *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0);
        }
        assert_eq!(s.alpha_bar(100), direct);
    }

    #[test]
    fn bad_betas_are_config_errors() {
        assert!(matches!(linear_beta_schedule(10, 0.0, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_beta_schedule(10, 0.2, 0.1), Err(Error::Config(_))));
        assert!(matches!(linear_beta_schedule(10, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(linear_beta_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn two_step_half_values() {
        let s = linear_beta_schedule(2, 0.5, 0.5).unwrap();
        let v = sigma_q_sq(&s, 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        let w = snr_weight(&s, 2).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
        assert!((x0_kl_coefficient(&s, 2).unwrap() - w).abs() < 1e-15);
    }

    #[test]
    fn sigma_q_vanishes_without_noise() {
        let s = NoiseSchedule::from_betas(ScheduleKind::FixedLinear, alloc::vec![0.1, 1e-12]).unwrap();
        assert!(sigma_q_sq(&s, 2).unwrap() < 1e-11);
        assert!(snr_weight(&s, 2).unwrap() < 1e-9 * snr(&s, 1).unwrap());
    }

    #[test]
    fn range_checks() {
        let s = linear_beta_schedule(5, 0.1, 0.2).unwrap();
        assert!(matches!(sigma_q_sq(&s, 1), Err(Error::Contract(_))));
        assert!(matches!(sigma_q_sq(&s, 6), Err(Error::Contract(_))));
        assert!(matches!(snr(&s, 0), Err(Error::Contract(_))));
        assert!(matches!(snr_weight(&s, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn snr_of_half_is_one() {
        let s = linear_beta_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(snr(&s, 1).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_reaches_pure_noise() {
        let s = default_linear_schedule(DEFAULT_T).unwrap();
        assert!(s.alpha_bar(DEFAULT_T) < 1e-4);
        assert!(snr(&s, DEFAULT_T).unwrap() < 1e-4);
    }

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = cosine_schedule(50, 0.008).unwrap();
        for t in 2..=50 {
            assert!(snr(&s, t).unwrap() < snr(&s, t - 1).unwrap());
        }
    }

    #[test]
    fn sigmoid_pair_limits() {
        assert_eq!(alpha_bar_pair(0.0), (0.5, 0.5));
        let (ab, om) = alpha_bar_pair(800.0);
        assert!(ab < 1e-300 && om == 1.0);
        for w in [-7.5, -1.0, 0.3, 4.0, 12.0] {
            let (ab, om) = alpha_bar_pair(w);
            assert!((ab / om - math::exp(-w)).abs() <= 1e-12 * math::exp(-w));
            assert!((ab + om - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn learned_net_hits_endpoints_and_tape_agrees() {
        let mut r = rng::seeded(3);
        let net = LearnedSnrNet::init(8, 20, -6.0, 7.0, &mut r).unwrap();
        let ts: Vec<usize> = (1..=20).collect();
        let om = net.omega(&ts).unwrap();
        assert!((om[0] + 6.0).abs() < 1e-12);
        assert!((om[19] - 7.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = net.omega_on_tape(&mut tape, &ts).unwrap();
        for (a, b) in tape.value(v).data().iter().zip(&om) {
            assert!((a - b).abs() < 1e-12);
        }
        let sched = net.schedule().unwrap();
        assert_eq!(sched.kind(), ScheduleKind::Learned);
        let (ab, om1) = learned_alpha_bar(&net, 5).unwrap();
        assert_eq!(sched.alpha_bar(5), ab);
        assert_eq!(sched.one_minus_alpha_bar(5), om1);
    }
}

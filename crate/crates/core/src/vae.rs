//! Gaussian VAE baseline: a diagonal-Gaussian encoder, a fixed-variance
//! Gaussian decoder and a reparameterized ELBO.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::ndgrad::{Activation, MlpParams, MlpVars, Tape, Tensor, Var};
use crate::rng;

pub const DEFAULT_DECODER_VAR: f64 = 0.1;
pub const ENCODER_PREFIX: &str = "encoder";
pub const DECODER_PREFIX: &str = "decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    /// Emits `[μ | log σ²]`, `2 · latent_dim` columns.
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub decoder_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeShape {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub decoder_var: f64,
}

impl VaeShape {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.data_dim {
            return Err(Error::config("latent_dim must be in 1..=data_dim"));
        }
        if !(self.decoder_var > 0.0 && self.decoder_var.is_finite()) {
            return Err(Error::config("decoder variance must be positive"));
        }
        Ok(())
    }

    fn sizes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut enc = vec![self.data_dim];
        enc.extend_from_slice(&self.hidden);
        enc.push(2 * self.latent_dim);
        let mut dec = vec![self.latent_dim];
        dec.extend(self.hidden.iter().rev());
        dec.push(self.data_dim);
        (enc, dec)
    }
}

impl VaeModel {
    pub fn init<R: Rng + ?Sized>(shape: &VaeShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let (enc, dec) = shape.sizes();
        Ok(VaeModel {
            encoder: MlpParams::init(&enc, shape.activation, rng),
            decoder: MlpParams::init(&dec, shape.activation, rng),
            latent_dim: shape.latent_dim,
            data_dim: shape.data_dim,
            decoder_var: shape.decoder_var,
        })
    }

    pub fn zeros(shape: &VaeShape) -> Result<Self> {
        shape.validate()?;
        let (enc, dec) = shape.sizes();
        Ok(VaeModel {
            encoder: MlpParams::zeros(&enc, shape.activation),
            decoder: MlpParams::zeros(&dec, shape.activation),
            latent_dim: shape.latent_dim,
            data_dim: shape.data_dim,
            decoder_var: shape.decoder_var,
        })
    }

    pub fn from_parts(encoder: MlpParams, decoder: MlpParams, decoder_var: f64) -> Result<Self> {
        let latent_dim = decoder.in_dim();
        let data_dim = decoder.out_dim();
        if encoder.in_dim() != data_dim || encoder.out_dim() != 2 * latent_dim || latent_dim > data_dim {
            return Err(Error::Shape {
                op: "vae",
                left: vec![encoder.in_dim(), encoder.out_dim()],
                right: vec![data_dim, latent_dim],
            });
        }
        if !(decoder_var > 0.0 && decoder_var.is_finite()) {
            return Err(Error::config("decoder variance must be positive"));
        }
        Ok(VaeModel {
            encoder,
            decoder,
            latent_dim,
            data_dim,
            decoder_var,
        })
    }

    /// Encoder mean and variance for one input.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encoder.apply(&Tensor::row(x.to_vec()))?.into_data();
        let (mu, lv) = out.split_at(self.latent_dim);
        Ok((mu.to_vec(), lv.iter().map(|v| math::exp(*v)).collect()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decoder.apply(&Tensor::row(z.to_vec()))?.into_data())
    }

    pub fn register(&self, tape: &mut Tape) -> VaeVars {
        VaeVars {
            encoder: self.encoder.register(tape, ENCODER_PREFIX),
            decoder: self.decoder.register(tape, DECODER_PREFIX),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VaeVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
}

/// Scalar nodes of a recorded negative ELBO, each averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    /// `kl − reconstruction`.
    pub loss: Var,
    /// Mean decoder log-density over the Monte-Carlo draws.
    pub reconstruction: Var,
    pub kl: Var,
}

/// Negative ELBO of a `(batch, data_dim)` input with `eps.len()` draws per
/// example, each draw a `(batch, latent_dim)` standard-normal tensor.
pub fn vae_loss_on_tape(tape: &mut Tape, m: &VaeModel, vars: &VaeVars, x: &Tensor, eps: &[Tensor]) -> Result<VaeLoss> {
    let (rows, cols) = x.dims();
    if cols != m.data_dim {
        return Err(Error::Shape {
            op: "vae input",
            left: vec![m.data_dim],
            right: vec![cols],
        });
    }
    if eps.is_empty() {
        return Err(Error::contract("vae_elbo needs at least one draw"));
    }
    let l = m.latent_dim;
    let xv = tape.constant(x.clone());
    let enc = vars.encoder.apply(tape, xv)?;
    let mu = tape.select_cols(enc, 0, l)?;
    let log_var = tape.select_cols(enc, l, 2 * l)?;
    let half = tape.scale(log_var, 0.5)?;
    let sd = tape.exp(half);

    let inv_batch = 1.0 / rows as f64;
    let log_norm = -0.5 * m.data_dim as f64 * (math::LN_2PI + math::ln(m.decoder_var));
    let mut recon_sum: Option<Var> = None;
    for e in eps {
        if e.dims() != (rows, l) {
            return Err(Error::Shape {
                op: "vae noise",
                left: vec![rows, l],
                right: e.shape().to_vec(),
            });
        }
        let ev = tape.constant(e.clone());
        let noise = tape.mul(sd, ev)?;
        let z = tape.add(mu, noise)?;
        let xhat = vars.decoder.apply(tape, z)?;
        let diff = tape.sub(xhat, xv)?;
        let sq = tape.sq_norm(diff);
        let r = tape.scale(sq, -0.5 / m.decoder_var)?;
        recon_sum = Some(match recon_sum {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
    }
    let recon_sum = recon_sum.expect("at least one draw");
    let scaled = tape.scale(recon_sum, inv_batch / eps.len() as f64)?;
    let norm = tape.scalar(log_norm);
    let reconstruction = tape.add(scaled, norm)?;

    // KL(N(μ, σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1)
    let mu_sq = tape.sq_norm(mu);
    let var = tape.exp(log_var);
    let var_sum = tape.sum(var);
    let lv_sum = tape.sum(log_var);
    let neg_lv = tape.scale(lv_sum, -1.0)?;
    let a = tape.add(mu_sq, var_sum)?;
    let b = tape.add(a, neg_lv)?;
    let count = tape.scalar(-((rows * l) as f64));
    let c = tape.add(b, count)?;
    let kl = tape.scale(c, 0.5 * inv_batch)?;

    let neg_recon = tape.scale(reconstruction, -1.0)?;
    let loss = tape.add(kl, neg_recon)?;
    Ok(VaeLoss {
        loss,
        reconstruction,
        kl,
    })
}

/// Negative ELBO of one input averaged over `draws` reparameterized samples.
pub fn vae_elbo<R: Rng + ?Sized>(tape: &mut Tape, m: &VaeModel, x: &[f64], draws: usize, rng: &mut R) -> Result<VaeLoss> {
    if draws == 0 {
        return Err(Error::contract("vae_elbo needs at least one draw"));
    }
    let vars = m.register(tape);
    let eps: Vec<Tensor> = (0..draws)
        .map(|_| Tensor::row(rng::normal_vec(rng, m.latent_dim)))
        .collect();
    vae_loss_on_tape(tape, m, &vars, &Tensor::row(x.to_vec()), &eps)
}

/// Decoder means of `n` prior draws.
pub fn vae_sample<R: Rng + ?Sized>(m: &VaeModel, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::contract("vae_sample needs n >= 1"));
    }
    let z = Tensor::matrix(n, m.latent_dim, rng::normal_vec(rng, n * m.latent_dim))?;
    Ok(m.decoder.apply(&z)?.to_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> VaeShape {
        VaeShape {
            data_dim: 2,
            latent_dim: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
            decoder_var: DEFAULT_DECODER_VAR,
        }
    }

    #[test]
    fn latent_cannot_exceed_data() {
        let mut s = shape();
        s.latent_dim = 3;
        assert!(VaeModel::zeros(&s).is_err());
    }

    #[test]
    fn standard_encoder_has_zero_kl() {
        let m = VaeModel::zeros(&shape()).unwrap();
        let mut tape = Tape::new();
        let l = vae_elbo(&mut tape, &m, &[0.5, -1.0], 3, &mut rng::seeded(0)).unwrap();
        assert_eq!(tape.value(l.kl).item(), Some(0.0));
        let expected = -0.5 * (0.25 + 1.0) / 0.1 - (math::LN_2PI + math::ln(0.1));
        assert!((tape.value(l.reconstruction).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative() {
        for seed in 0..10 {
            let m = VaeModel::init(&shape(), &mut rng::seeded(seed)).unwrap();
            let mut tape = Tape::new();
            let l = vae_elbo(&mut tape, &m, &[1.0, 2.0], 1, &mut rng::seeded(seed)).unwrap();
            assert!(tape.value(l.kl).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn zero_decoder_samples_zero() {
        let m = VaeModel::zeros(&shape()).unwrap();
        let s = vae_sample(&m, 4, &mut rng::seeded(1)).unwrap();
        assert!(s.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        let m = VaeModel::init(&shape(), &mut rng::seeded(1)).unwrap();
        assert_eq!(vae_sample(&m, 4, &mut rng::seeded(2)).unwrap(), vae_sample(&m, 4, &mut rng::seeded(2)).unwrap());
    }
}

use rand::Rng;
use vdm_core::denoiser::{
    batch_loss_on_tape, per_timestep_loss, DenoiserModel, DenoiserShape, LossBatch, Parameterization, Weighting,
    DENOISER_PREFIX,
};
use vdm_core::ndgrad::gradcheck::{central_difference, relative_error};
use vdm_core::ndgrad::{Activation, MlpParams, Tape, Tensor, Var};
use vdm_core::schedule::{default_linear_schedule, LearnedSnrNet};
use vdm_core::vae::{vae_elbo, VaeModel, VaeShape};
use vdm_core::{rng, Result};

const PRIMITIVE_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

fn random(r: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::uniform(r, lo, hi)).collect()).unwrap()
}

/// Records `build` on a tape whose inputs are named parameters and reduces
/// a non-scalar output with a fixed random projection.
fn scalar_on_tape(
    tape: &mut Tape,
    inputs: &[Tensor],
    proj_seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Var> {
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| tape.param(format!("in{k}"), t.clone()))
        .collect();
    let out = build(tape, &vars)?;
    let v = tape.value(out).clone();
    if v.len() == 1 {
        return Ok(out);
    }
    let (r, c) = v.dims();
    let w = tape.constant(random(&mut rng::seeded(proj_seed), r, c, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error of reverse-mode against central differences.
fn check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let loss = scalar_on_tape(&mut tape, inputs, 99, build).unwrap();
    let grads = tape.grad(loss).unwrap();
    let numeric = central_difference(inputs, H, |xs| {
        let mut t = Tape::new();
        let l = scalar_on_tape(&mut t, xs, 99, build)?;
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    numeric
        .iter()
        .enumerate()
        .map(|(k, n)| relative_error(&grads[&format!("in{k}")], n))
        .fold(0.0, f64::max)
}

fn check_primitive(name: &str, shapes: &[(usize, usize)], range: (f64, f64), build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) {
    for point in 0..20 {
        let mut r = rng::stream(7, point);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(a, b)| random(&mut r, a, b, range.0, range.1)).collect();
        let err = check(&inputs, build);
        assert!(err < PRIMITIVE_TOL, "{name} at point {point}: relative error {err:e}");
    }
}

#[test]
fn add_and_broadcasts() {
    for shapes in [[(3, 4), (3, 4)], [(3, 4), (1, 4)], [(3, 4), (3, 1)], [(3, 4), (1, 1)], [(1, 4), (3, 4)]] {
        check_primitive("add", &shapes, (-2.0, 2.0), &|t, v| t.add(v[0], v[1]));
    }
}

#[test]
fn mul_and_broadcasts() {
    for shapes in [[(3, 4), (3, 4)], [(3, 4), (1, 4)], [(3, 4), (3, 1)], [(1, 1), (3, 4)]] {
        check_primitive("mul", &shapes, (-2.0, 2.0), &|t, v| t.mul(v[0], v[1]));
    }
}

#[test]
fn matmul() {
    check_primitive("matmul", &[(3, 5), (5, 2)], (-2.0, 2.0), &|t, v| t.matmul(v[0], v[1]));
    check_primitive("matmul", &[(1, 7), (7, 6)], (-2.0, 2.0), &|t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_functions() {
    let s = [(3, 4)];
    check_primitive("exp", &s, (-2.0, 2.0), &|t, v| Ok(t.exp(v[0])));
    check_primitive("log", &s, (0.2, 3.0), &|t, v| Ok(t.log(v[0])));
    check_primitive("tanh", &s, (-3.0, 3.0), &|t, v| Ok(t.tanh(v[0])));
    check_primitive("softplus", &s, (-5.0, 5.0), &|t, v| Ok(t.softplus(v[0])));
    check_primitive("sigmoid", &s, (-5.0, 5.0), &|t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn reductions() {
    let s = [(4, 3)];
    check_primitive("sum", &s, (-2.0, 2.0), &|t, v| Ok(t.sum(v[0])));
    check_primitive("mean", &s, (-2.0, 2.0), &|t, v| Ok(t.mean(v[0])));
    check_primitive("sq_norm", &s, (-2.0, 2.0), &|t, v| Ok(t.sq_norm(v[0])));
}

#[test]
fn composites() {
    let s = [(4, 3)];
    check_primitive("scale", &s, (-2.0, 2.0), &|t, v| t.scale(v[0], -1.7));
    check_primitive("sub", &[(4, 3), (4, 3)], (-2.0, 2.0), &|t, v| t.sub(v[0], v[1]));
    check_primitive("square", &s, (-2.0, 2.0), &|t, v| t.square(v[0]));
    check_primitive("sqrt", &s, (0.3, 3.0), &|t, v| t.sqrt(v[0]));
    check_primitive("row_sum", &s, (-2.0, 2.0), &|t, v| t.row_sum(v[0]));
    check_primitive("select_cols", &[(4, 5)], (-2.0, 2.0), &|t, v| t.select_cols(v[0], 1, 4));
    check_primitive("concat_cols", &[(4, 2), (4, 3)], (-2.0, 2.0), &|t, v| t.concat_cols(v[0], v[1]));
}

#[test]
fn mlp_forward_for_every_activation() {
    for act in [Activation::Tanh, Activation::Silu, Activation::Softplus, Activation::Sigmoid] {
        let mlp = MlpParams::init(&[3, 6, 5, 2], act, &mut rng::seeded(3));
        let mut inputs: Vec<Tensor> = Vec::new();
        for l in mlp.layers() {
            inputs.push(l.weight.clone());
            inputs.push(l.bias.clone());
        }
        inputs.push(random(&mut rng::seeded(4), 4, 3, -1.0, 1.0));
        let acts = mlp.activations().to_vec();
        let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let mut h = v[v.len() - 1];
            let layers = (v.len() - 1) / 2;
            for i in 0..layers {
                let z = t.matmul(h, v[2 * i])?;
                h = t.add(z, v[2 * i + 1])?;
                if i + 1 < layers {
                    h = match acts[i] {
                        Activation::Tanh => t.tanh(h),
                        Activation::Softplus => t.softplus(h),
                        Activation::Sigmoid => t.sigmoid(h),
                        Activation::Silu => {
                            let s = t.sigmoid(h);
                            t.mul(h, s)?
                        }
                    };
                }
            }
            Ok(h)
        };
        let err = check(&inputs, &build);
        assert!(err < PRIMITIVE_TOL, "{act:?}: {err:e}");
    }
}

fn model_params(m: &DenoiserModel) -> (Vec<String>, Vec<Tensor>) {
    m.mlp
        .named_tensors(DENOISER_PREFIX)
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .unzip()
}

fn with_params(m: &DenoiserModel, values: &[Tensor]) -> DenoiserModel {
    let mut m = m.clone();
    for ((_, t), v) in m.mlp.named_tensors_mut(DENOISER_PREFIX).into_iter().zip(values) {
        *t = v.clone();
    }
    m
}

fn small_model(param: Parameterization, cond_dim: Option<usize>, seed: u64) -> DenoiserModel {
    let shape = DenoiserShape {
        data_dim: 2,
        steps: 100,
        hidden: vec![8, 8],
        activation: Activation::Silu,
        time_features: 4,
        cond_dim,
    };
    DenoiserModel::init(&shape, param, &mut rng::seeded(seed)).unwrap()
}

#[test]
fn per_timestep_loss_all_parameterizations_and_weightings() {
    let s = default_linear_schedule(100).unwrap();
    let weightings = [Weighting::ElboExact, Weighting::SnrDelta, Weighting::Unit, Weighting::EpsMatched];
    for (pi, param) in Parameterization::ALL.into_iter().enumerate() {
        for (wi, w) in weightings.into_iter().enumerate() {
            let mut r = rng::stream(11, (pi * 4 + wi) as u64);
            let cond_dim = if wi % 2 == 0 { Some(3) } else { None };
            let m = small_model(param, cond_dim, r.random());
            let x0 = rng::normal_vec(&mut r, 2);
            let eps = rng::normal_vec(&mut r, 2);
            let t = r.random_range(2..=100);
            let cond = cond_dim.map(|_| vec![0.0, 1.0, 0.0]);
            let loss_of = |m: &DenoiserModel, tape: &mut Tape| {
                per_timestep_loss(tape, m, &x0, t, &eps, cond.as_deref(), &s, w)
            };
            let mut tape = Tape::new();
            let l = loss_of(&m, &mut tape).unwrap();
            let grads = tape.grad(l).unwrap();
            let (names, values) = model_params(&m);
            let numeric = central_difference(&values, H, |v| {
                let mut tape = Tape::new();
                let l = loss_of(&with_params(&m, v), &mut tape)?;
                Ok(tape.value(l).data()[0])
            })
            .unwrap();
            for (n, g) in names.iter().zip(&numeric) {
                let err = relative_error(&grads[n], g);
                assert!(err < LOSS_TOL, "{param:?}/{w:?} t={t} {n}: {err:e}");
            }
        }
    }
}

#[test]
fn batch_loss_including_reconstruction_steps() {
    let s = default_linear_schedule(100).unwrap();
    let m = small_model(Parameterization::X0, None, 5);
    let mut r = rng::seeded(6);
    let x0 = random(&mut r, 4, 2, -1.0, 1.0);
    let eps = random(&mut r, 4, 2, -1.0, 1.0);
    let ts = [1, 1, 37, 100];
    let loss_of = |m: &DenoiserModel, tape: &mut Tape| -> Result<Var> {
        let vars = m.register(tape);
        let b = LossBatch {
            x0: &x0,
            ts: &ts,
            eps: &eps,
            conds: &[],
        };
        Ok(batch_loss_on_tape(tape, m, &vars, &b, &s, Weighting::ElboExact)?.loss)
    };
    let mut tape = Tape::new();
    let l = loss_of(&m, &mut tape).unwrap();
    let grads = tape.grad(l).unwrap();
    let (names, values) = model_params(&m);
    let numeric = central_difference(&values, H, |v| {
        let mut tape = Tape::new();
        let l = loss_of(&with_params(&m, v), &mut tape)?;
        Ok(tape.value(l).data()[0])
    })
    .unwrap();
    for (n, g) in names.iter().zip(&numeric) {
        assert!(relative_error(&grads[n], g) < LOSS_TOL, "{n}");
    }
}

#[test]
fn vae_elbo_gradients() {
    let shape = VaeShape {
        data_dim: 2,
        latent_dim: 2,
        hidden: vec![6],
        activation: Activation::Tanh,
        decoder_var: 0.1,
    };
    let m = VaeModel::init(&shape, &mut rng::seeded(8)).unwrap();
    let x = [0.7, -0.4];
    let collect = |m: &VaeModel| -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (p, mlp) in [(vdm_core::vae::ENCODER_PREFIX, &m.encoder), (vdm_core::vae::DECODER_PREFIX, &m.decoder)] {
            out.extend(mlp.named_tensors(p).into_iter().map(|(n, t)| (n, t.clone())));
        }
        out
    };
    let rebuild = |values: &[Tensor]| -> VaeModel {
        let mut m = m.clone();
        let mut it = values.iter();
        for (p, mlp) in [(vdm_core::vae::ENCODER_PREFIX, &mut m.encoder), (vdm_core::vae::DECODER_PREFIX, &mut m.decoder)] {
            for (_, t) in mlp.named_tensors_mut(p) {
                *t = it.next().unwrap().clone();
            }
        }
        m
    };
    let loss_of = |m: &VaeModel| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let l = vae_elbo(&mut tape, m, &x, 2, &mut rng::seeded(9))?.loss;
        Ok((tape, l))
    };
    let (tape, l) = loss_of(&m).unwrap();
    let grads = tape.grad(l).unwrap();
    let (names, values): (Vec<String>, Vec<Tensor>) = collect(&m).into_iter().unzip();
    let numeric = central_difference(&values, H, |v| {
        let (t, l) = loss_of(&rebuild(v))?;
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    for (n, g) in names.iter().zip(&numeric) {
        let err = relative_error(&grads[n], g);
        assert!(err < LOSS_TOL, "{n}: {err:e}");
    }
}

#[test]
fn learned_snr_network_gradients() {
    let net = LearnedSnrNet::init_matching(6, &default_linear_schedule(100).unwrap(), &mut rng::seeded(10)).unwrap();
    let ts = [1usize, 2, 17, 50, 99, 100];
    let weights = random(&mut rng::seeded(12), ts.len(), 1, -1.0, 1.0);
    let loss_of = |n: &LearnedSnrNet| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let w = n.omega_on_tape(&mut tape, &ts)?;
        let c = tape.constant(weights.clone());
        let p = tape.mul(w, c)?;
        let l = tape.sum(p);
        Ok((tape, l))
    };
    let (tape, l) = loss_of(&net).unwrap();
    let grads = tape.grad(l).unwrap();
    let (names, values): (Vec<String>, Vec<Tensor>) = net.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).unzip();
    let numeric = central_difference(&values, H, |v| {
        let mut n = net.clone();
        for ((_, t), x) in n.named_tensors_mut().into_iter().zip(v) {
            *t = x.clone();
        }
        let (t, l) = loss_of(&n)?;
        Ok(t.value(l).data()[0])
    })
    .unwrap();
    for (n, g) in names.iter().zip(&numeric) {
        let err = relative_error(&grads[n], g);
        assert!(err < PRIMITIVE_TOL, "{n}: {err:e}");
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut r = rng::seeded(13);
    let a = random(&mut r, 3, 4, -1.0, 1.0);
    let grad_of = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.param("x", a.clone());
        let f = tape.tanh(x);
        let f = tape.sum(f);
        let g = tape.sq_norm(x);
        let out = match which {
            0 => f,
            1 => g,
            _ => tape.add(f, g).unwrap(),
        };
        tape.grad(out).unwrap().remove("x").unwrap()
    };
    let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gs.len() {
        assert!((gs.data()[i] - gf.data()[i] - gg.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn replay_reproduces_forward_values() {
    let m = small_model(Parameterization::Eps, Some(2), 14);
    let mut tape = Tape::new();
    let s = default_linear_schedule(100).unwrap();
    let l = per_timestep_loss(&mut tape, &m, &[0.3, -0.2], 40, &[1.0, 0.5], Some(&[1.0, 0.0]), &s, Weighting::ElboExact)
        .unwrap();
    let values = tape.replay().unwrap();
    assert_eq!(values.len(), tape.len());
    assert_eq!(&values[l.index()], tape.value(l));
}

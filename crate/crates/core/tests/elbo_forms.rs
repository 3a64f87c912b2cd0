use vdm_core::data::{generate_dataset, DatasetSpec};
use vdm_core::denoiser::{
    elbo_consistency_form, elbo_denoising_form, posterior_mean_from_output, DenoiserModel,
};
use vdm_core::forward::ForwardProcess;
use vdm_core::gauss::{log_pdf, DiagGaussian};
use vdm_core::oracle::Gmm;
use vdm_core::rng;
use vdm_core::schedule::{sigma_q_sq, NoiseSchedule};
use vdm_core::train::{train_diffusion, TrainConfig};

fn small_model(steps: usize) -> (DenoiserModel, NoiseSchedule) {
    let data = generate_dataset(
        &DatasetSpec::Gmm {
            mixture: Gmm::default_training(),
        },
        2000,
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 1500,
        t_steps: steps,
        hidden: vec![32, 32],
        seed: 2,
        ..TrainConfig::default()
    };
    let run = train_diffusion(&cfg, &data).unwrap();
    let s = run.final_schedule().unwrap();
    (run.model, s)
}

/// `log p(x_{0:T}) − log q(x_{1:T} | x_0)` on one simulated forward chain.
fn chain_log_ratio(m: &DenoiserModel, s: &NoiseSchedule, x0: &[f64], r: &mut rng::LabRng) -> f64 {
    let steps = s.steps();
    let fp = ForwardProcess::new(s.clone(), x0.len()).unwrap();
    let mut chain = vec![x0.to_vec()];
    let mut log_q = 0.0;
    for t in 1..=steps {
        let next = fp.q_step(&chain[t - 1], t, &rng::normal_vec(r, x0.len())).unwrap();
        log_q += fp.q_step_log_pdf(&next, &chain[t - 1], t).unwrap();
        chain.push(next);
    }
    let mut log_p = log_pdf(&DiagGaussian::standard(x0.len()), &chain[steps]).unwrap();
    for t in 2..=steps {
        let out = m.predict(&chain[t], t, None).unwrap();
        let mu = posterior_mean_from_output(&out, m.parameterization, &chain[t], t, s).unwrap();
        let p = DiagGaussian::isotropic(mu, sigma_q_sq(s, t).unwrap()).unwrap();
        log_p += log_pdf(&p, &chain[t - 1]).unwrap();
    }
    let dec = DiagGaussian::isotropic(m.predict_x0(&chain[1], 1, s, None).unwrap(), s.beta(1)).unwrap();
    log_p + log_pdf(&dec, x0).unwrap() - log_q
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn denoising_form_is_unbiased_for_the_chain_elbo() {
    let (m, s) = small_model(10);
    let x0 = [-1.1, -0.6];
    let den: Vec<f64> = (0..2000)
        .map(|i| elbo_denoising_form(&m, &x0, 1, &mut rng::stream(3, i), &s).unwrap().total)
        .collect();
    let naive: Vec<f64> = (0..20_000).map(|i| chain_log_ratio(&m, &s, &x0, &mut rng::stream(4, i))).collect();
    let ((a, sa), (b, sb)) = (mean_se(&den), mean_se(&naive));
    assert!((a - b).abs() < 3.0 * sa.hypot(sb), "denoising {a} ± {sa}, chain {b} ± {sb}");
}

/// The consistency form evaluates each term as a KL against
/// `q(x_t | x_{t−1})` while `x_{t+1}` is drawn jointly with `x_t`, so its
/// expectation sits below the chain ELBO.
#[test]
#[ignore = "expected failure: the consistency form's expectation is not the ELBO"]
fn consistency_form_expectation_matches_denoising_form() {
    let (m, s) = small_model(10);
    let x0 = [-1.1, -0.6];
    let den: Vec<f64> = (0..200)
        .map(|i| elbo_denoising_form(&m, &x0, 1, &mut rng::stream(5, i), &s).unwrap().total)
        .collect();
    let con: Vec<f64> = (0..200)
        .map(|i| elbo_consistency_form(&m, &x0, 1, &mut rng::stream(6, i), &s).unwrap().total)
        .collect();
    let ((a, sa), (b, sb)) = (mean_se(&den), mean_se(&con));
    assert!((a - b).abs() < 3.0 * sa.hypot(sb), "denoising {a} ± {sa}, consistency {b} ± {sb}");
}

use vdm_core::denoiser::{convert, Parameterization};
use vdm_core::forward::ForwardProcess;
use vdm_core::gauss::{self, compose_linear, kl_diag, log_pdf, DiagGaussian};
use vdm_core::oracle::{Gmm, LabeledGmm};
use vdm_core::sampler::{
    cfg_score, classifier_guided_score, combine_cfg, combine_classifier, LabeledOracle, Level, ScoreField,
};
use vdm_core::schedule::{
    alpha_bar_pair, cosine_schedule, default_linear_schedule, linear_beta_schedule, snr, snr_weight,
    x0_kl_coefficient, LearnedSnrNet, NoiseSchedule, ScheduleKind,
};
use vdm_core::{math, rng};

fn random_schedule(seed: u64, steps: usize) -> NoiseSchedule {
    let mut r = rng::seeded(seed);
    let betas = (0..steps).map(|_| rng::uniform(&mut r, 1e-4, 0.3)).collect();
    NoiseSchedule::from_betas(ScheduleKind::FixedLinear, betas).unwrap()
}

fn schedules() -> Vec<NoiseSchedule> {
    let mut v = vec![
        default_linear_schedule(100).unwrap(),
        cosine_schedule(100, 0.008).unwrap(),
        linear_beta_schedule(50, 1e-4, 0.02).unwrap(),
    ];
    v.extend((0..5).map(|i| random_schedule(i, 60)));
    v
}

#[test]
fn posterior_is_bayes_rule() {
    for (si, s) in schedules().into_iter().enumerate() {
        let fp = ForwardProcess::new(s.clone(), 3).unwrap();
        let mut r = rng::seeded(si as u64);
        for _ in 0..50 {
            let t = 2 + (rng::uniform(&mut r, 0.0, 1.0) * (s.steps() - 1) as f64) as usize;
            let t = t.min(s.steps());
            let x0 = rng::normal_vec(&mut r, 3);
            let xt = rng::normal_vec(&mut r, 3);
            let xp = rng::normal_vec(&mut r, 3);
            let lhs = log_pdf(&fp.q_posterior(&xt, &x0, t).unwrap(), &xp).unwrap();
            let rhs = fp.q_step_log_pdf(&xt, &xp, t).unwrap() + log_pdf(&fp.q_marginal(&x0, t - 1).unwrap(), &xp).unwrap()
                - log_pdf(&fp.q_marginal(&x0, t).unwrap(), &xt).unwrap();
            assert!((lhs - rhs).abs() < 1e-8, "t={t}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn folded_chain_equals_marginal() {
    for s in schedules() {
        let fp = ForwardProcess::new(s.clone(), 2).unwrap();
        let x0 = [1.3, -0.4];
        let mut g = DiagGaussian::point_mass(x0.to_vec());
        for t in 1..=s.steps().min(50) {
            g = compose_linear(math::sqrt(s.alpha(t)), &g, s.beta(t)).unwrap();
            let m = fp.q_marginal(&x0, t).unwrap();
            for i in 0..2 {
                assert!((g.mean()[i] - m.mean()[i]).abs() < 1e-12);
                assert!((g.var()[i] - m.var()[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let p = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let q = DiagGaussian::new(vec![-0.2, 0.4], vec![1.5, 0.7]).unwrap();
    let exact = kl_diag(&p, &q).unwrap();
    let mut r = rng::seeded(21);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let x = gauss::reparam_sample(&p, &rng::normal_vec(&mut r, 2)).unwrap();
            log_pdf(&p, &x).unwrap() - log_pdf(&q, &x).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "MC {mean} exact {exact} se {se}");
}

#[test]
fn kl_weight_equals_snr_difference() {
    for s in schedules() {
        for t in 2..=s.steps() {
            let a = x0_kl_coefficient(&s, t).unwrap();
            let b = snr_weight(&s, t).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn alpha_bar_is_running_product() {
    for s in schedules() {
        let mut prod = 1.0;
        for t in 1..=s.steps() {
            prod *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-15);
            let expected = prod / (1.0 - prod);
            assert!((snr(&s, t).unwrap() - expected).abs() <= 1e-10 * expected);
        }
    }
}

#[test]
fn sigmoid_alpha_bar_identities() {
    let mut r = rng::seeded(31);
    for _ in 0..1000 {
        let w = rng::uniform(&mut r, -15.0, 15.0);
        let (ab, om) = alpha_bar_pair(w);
        assert!((ab + om - 1.0).abs() < 1e-12);
        assert!((ab / om - (-w).exp()).abs() <= 1e-12 * (-w).exp());
        assert!((ab - 1.0 / (1.0 + w.exp())).abs() < 1e-12);
    }
    let net = LearnedSnrNet::init_matching(8, &default_linear_schedule(100).unwrap(), &mut rng::seeded(32)).unwrap();
    let s = net.schedule().unwrap();
    let ts: Vec<usize> = (1..=100).collect();
    for (t, w) in ts.iter().zip(net.omega(&ts).unwrap()) {
        let expected = (-w).exp();
        assert!((snr(&s, *t).unwrap() - expected).abs() <= 1e-12 * expected);
        assert!((s.alpha_bar(*t) + s.one_minus_alpha_bar(*t) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn parameterization_conversions_round_trip() {
    use Parameterization::*;
    let s = default_linear_schedule(100).unwrap();
    let mut r = rng::seeded(41);
    for _ in 0..200 {
        let t = 1 + (rng::uniform(&mut r, 0.0, 100.0) as usize).min(99);
        let x = rng::normal_vec(&mut r, 2);
        let o = rng::normal_vec(&mut r, 2);
        for a in Parameterization::ALL {
            for b in Parameterization::ALL {
                let there = convert(&o, a, b, &x, t, &s).unwrap();
                let back = convert(&there, b, a, &x, t, &s).unwrap();
                for (u, v) in o.iter().zip(&back) {
                    assert!((u - v).abs() < 1e-10 * u.abs().max(1.0), "{a:?}->{b:?} t={t}");
                }
            }
        }
        let k = -1.0 / s.one_minus_alpha_bar(t).sqrt();
        let sc = convert(&o, Eps, Score, &x, t, &s).unwrap();
        for (e, v) in o.iter().zip(&sc) {
            assert!((v - k * e).abs() < 1e-12 * v.abs().max(1.0));
        }
    }
}

/// `∇ₓ ln p(y | x)` from responsibilities computed here.
fn classifier_grad(lg: &LabeledGmm, x: &[f64], y: usize) -> Vec<f64> {
    let comps = lg.gmm.components();
    let logs: Vec<f64> = comps
        .iter()
        .zip(lg.gmm.weights())
        .map(|(c, w)| w.ln() + log_pdf(c, x).unwrap())
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    let class_total: f64 = p.iter().zip(lg.labels()).filter(|(_, l)| **l == y).map(|(v, _)| v).sum();
    let mut g = vec![0.0; x.len()];
    for (k, c) in comps.iter().enumerate() {
        let in_class = if lg.labels()[k] == y { p[k] / class_total } else { 0.0 };
        let coef = in_class - p[k] / total;
        for i in 0..x.len() {
            g[i] += coef * -(x[i] - c.mean()[i]) / c.var()[i];
        }
    }
    g
}

#[test]
fn conditional_score_decomposes_into_prior_and_classifier() {
    let lg = LabeledGmm::default_guidance();
    let mut r = rng::seeded(51);
    for sigma in [0.0, 0.3, 1.0] {
        let p = lg.perturb_ve(sigma).unwrap();
        for _ in 0..200 {
            let x = vec![rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)];
            for y in [0, 1] {
                let u = p.gmm.score(&x).unwrap();
                let g = classifier_grad(&p, &x, y);
                let c = p.conditional_score(&x, y).unwrap();
                for i in 0..2 {
                    assert!((c[i] - (u[i] + g[i])).abs() < 1e-8 * c[i].abs().max(1.0));
                }
                let lib = p.class_log_prob_grad(&x, y).unwrap();
                for i in 0..2 {
                    assert!((lib[i] - g[i]).abs() < 1e-8 * g[i].abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn cfg_equals_classifier_guidance_with_implicit_classifier() {
    let mut r = rng::seeded(61);
    for _ in 0..500 {
        let c = rng::normal_vec(&mut r, 2);
        let u = rng::normal_vec(&mut r, 2);
        let gamma = rng::uniform(&mut r, 0.0, 10.0);
        let implicit: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a - b).collect();
        let a = combine_cfg(&c, &u, gamma);
        let b = combine_classifier(&u, &implicit, gamma);
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-10 * a[i].abs().max(1.0));
        }
    }
    let oracle = LabeledOracle::ve(LabeledGmm::default_guidance());
    for gamma in [0.0, 1.0, 3.0, 5.0] {
        let f = cfg_score(&oracle, &oracle, gamma).unwrap();
        let g = classifier_guided_score(&oracle, &oracle, gamma).unwrap();
        for _ in 0..100 {
            let x = vec![rng::uniform(&mut r, -3.0, 3.0), rng::uniform(&mut r, -3.0, 3.0)];
            let level = Level::Sigma(rng::uniform(&mut r, 0.0, 2.0));
            let a = f.score(&x, level, Some(1)).unwrap();
            let b = g.score(&x, level, Some(1)).unwrap();
            for i in 0..2 {
                assert!((a[i] - b[i]).abs() < 1e-10 * a[i].abs().max(1.0));
            }
        }
    }
}

#[test]
fn prior_matching_term_vanishes_on_default_schedule() {
    let s = default_linear_schedule(100).unwrap();
    assert!(s.alpha_bar(100) < 1e-4);
    let fp = ForwardProcess::new(s, 2).unwrap();
    let data = vdm_core::data::generate_dataset(
        &vdm_core::data::DatasetSpec::Gmm {
            mixture: Gmm::default_training(),
        },
        2000,
        3,
    )
    .unwrap();
    let mut checked = 0;
    for x in data.points.iter().filter(|x| math::norm(x) <= 3.0) {
        let kl = kl_diag(&fp.q_marginal(x, 100).unwrap(), &DiagGaussian::standard(2)).unwrap();
        assert!(kl < 1e-3, "{kl}");
        checked += 1;
    }
    let corner = [3.0 / 2f64.sqrt(), -3.0 / 2f64.sqrt()];
    assert!(kl_diag(&fp.q_marginal(&corner, 100).unwrap(), &DiagGaussian::standard(2)).unwrap() < 1e-3);
    assert!(checked > 1900);
}

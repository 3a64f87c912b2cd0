use vdm_core::data::{generate_dataset, DatasetSpec};
use vdm_core::oracle::Gmm;
use vdm_core::train::{train_diffusion, train_vae, TrainConfig, VaeTrainConfig};

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[test]
fn default_diffusion_training_converges() {
    let data = generate_dataset(
        &DatasetSpec::Gmm {
            mixture: Gmm::default_training(),
        },
        10_000,
        1,
    )
    .unwrap();
    let run = train_diffusion(&TrainConfig::default(), &data).unwrap();
    let h = &run.history;
    let first = mean(h[..500].iter().map(|r| r.loss));
    let last = mean(h[h.len() - 500..].iter().map(|r| r.loss));
    assert!(last < 0.75 * first, "first {first:.4} last {last:.4}");
}

#[test]
fn vae_on_a_blob_keeps_a_live_encoder() {
    let blob = Gmm::isotropic(vec![1.0], vec![vec![1.5, -0.5]], 0.3).unwrap();
    let data = generate_dataset(&DatasetSpec::Gmm { mixture: blob }, 4000, 2).unwrap();
    let run = train_vae(&VaeTrainConfig::default(), &data).unwrap();
    let h = &run.history;
    let ma = |end: usize| mean(h[end - 10..end].iter().map(|r| r.elbo()));
    assert!(ma(100) > ma(10), "{} vs {}", ma(100), ma(10));
    let kl = mean(h[h.len() - 100..].iter().map(|r| r.kl));
    assert!(kl > 0.0, "{kl}");
}

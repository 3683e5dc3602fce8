//! End-to-end use of the library through its public API: dataset on disk,
//! a short training run, checkpoint round trip, sampling and fusion.

use proptest::prelude::*;

use satfuse::codec::{decode, encode};
use satfuse::denoiser::DenoiserConfig;
use satfuse::fusion::{fusion_update, satdiffmoe, FusionConfig};
use satfuse::synthdata::{generate_dataset, generate_scenes, load_dataset, SceneConfig};
use satfuse::trainer::{load_checkpoint, sample_conditional, save_checkpoint, train, Checkpoint, TrainConfig};
use satfuse::{Image, Tensor3};

fn small_scenes() -> SceneConfig {
    SceneConfig {
        hr_size: 16,
        n_lr: 4,
        ..Default::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        batch_size: 2,
        learning_rate: 1e-3,
        checkpoint_every: 0,
        model: DenoiserConfig {
            base_channels: 4,
            embed_dim: 8,
            embed_hidden: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn trained() -> (Checkpoint, Vec<satfuse::synthdata::Scene>) {
    let cfg = small_scenes();
    let scenes = generate_scenes(&cfg, 0, 3).unwrap();
    let ck = train(&scenes, &cfg, &small_train(), |_| Ok(())).unwrap();
    (ck, scenes)
}

fn in_unit_range(img: &Image) -> bool {
    img.as_slice().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scenes();
    let manifest = generate_dataset(&cfg, 3, dir.path(), false).unwrap();
    assert_eq!(manifest.scenes.len(), 3);
    let (m2, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(m2.config, cfg);
    assert_eq!(loaded, generate_scenes(&cfg, 0, 3).unwrap());
}

#[test]
fn train_save_load_sample() {
    let (ck, scenes) = trained();
    assert_eq!(ck.iteration, 4);
    assert_eq!(ck.loss_history.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());

    let model = back.denoiser().unwrap();
    let sched = back.noise_schedule().unwrap();
    let lr = &scenes[0].lr_list[1];
    let a = sample_conditional(&lr.image, lr.dt_days, &model, &sched, 5, 0.0, 9).unwrap();
    let b = sample_conditional(&lr.image, lr.dt_days, &model, &sched, 5, 0.0, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), scenes[0].hr.shape());
    assert!(in_unit_range(&a));
}

#[test]
fn fusion_runs_on_all_revisits() {
    let (ck, scenes) = trained();
    let model = ck.denoiser().unwrap();
    let sched = ck.noise_schedule().unwrap();
    let cfg = FusionConfig {
        steps: 6,
        k: 2,
        batch_b: Some(2),
        ..Default::default()
    };
    let out = satdiffmoe(&scenes[1].lr_list, &model, &sched, &cfg, 4).unwrap();
    assert!(in_unit_range(&out.image));
    assert_eq!(out.report.n_trajectories, 4);
    assert_eq!(out.report.steps.len(), 6);
    let fused: Vec<bool> = out.report.steps.iter().map(|s| s.fused).collect();
    assert_eq!(fused, vec![true, false, true, false, true, false]);
    for s in out.report.steps.iter().filter(|s| s.fused) {
        assert_eq!(s.batch.len(), 2);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn pool_size_does_not_change_results() {
    let (ck, scenes) = trained();
    let model = ck.denoiser().unwrap();
    let sched = ck.noise_schedule().unwrap();
    let cfg = FusionConfig {
        steps: 4,
        k: 1,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| satdiffmoe(&scenes[0].lr_list, &model, &sched, &cfg, 1).unwrap().image)
    };
    assert_eq!(run(1), run(3));
    let train_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            train(&scenes, &small_scenes(), &small_train(), |_| Ok(()))
                .unwrap()
                .params
        })
    };
    assert_eq!(train_with(1), train_with(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codec_inverts_on_any_even_shape(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut s = satfuse::rng::Stream::new(seed);
        let data: Vec<f64> = (0..4 * h * w * 3).map(|_| s.uniform()).collect();
        let img = Tensor3::from_vec(2 * h, 2 * w, 3, data).unwrap();
        let back = decode(&encode(&img).unwrap()).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn update_moves_towards_center(lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut s = satfuse::rng::Stream::new(seed);
        let mut draw = || Tensor3::from_vec(2, 2, 12, (0..48).map(|_| s.normal()).collect()).unwrap();
        let x = draw();
        let c = draw();
        let y = fusion_update(&x, &c, lambda).unwrap();
        for ((&xi, &ci), &yi) in x.as_slice().iter().zip(c.as_slice()).zip(y.as_slice()) {
            prop_assert!(((ci - yi) - (1.0 - lambda) * (ci - xi)).abs() <= 1e-12);
        }
    }
}

use proptest::prelude::*;

use simclip_core::attacks::{attack, linf_project, AttackConfig, AttackMethod, Objective, ObjectiveContext, TargetSpec};
use simclip_core::captions::caption_bank;
use simclip_core::checkpoint::{load_checkpoint, save_checkpoint};
use simclip_core::data::{Dataset, SyntheticSpec};
use simclip_core::eval::{cider_score, eval_zero_shot, CiderCorpus, ZeroShotConfig};
use simclip_core::finetune::{batch_indices, lr_at, TrainConfig};
use simclip_core::losses::{neg_cosine, simclip_loss, CollapseDetector};
use simclip_core::{ArchSpec, EmbeddingBatch, ExperimentConfig, ImageBatch, ImageShape, TextEmbedder, TextHead, VisionEncoder};

fn small() -> (VisionEncoder<f32>, TextHead, Dataset) {
    let spec = SyntheticSpec {
        size: 8,
        ..SyntheticSpec::default()
    };
    let data = spec.generate(12, 4).unwrap();
    let enc = VisionEncoder::init(ArchSpec::small(spec.shape(), 32), 1).unwrap();
    let head = TextHead::build(&TextEmbedder::new(32, 2), &data.class_names, caption_bank(&data.class_names)).unwrap();
    (enc, head, data)
}

fn rows(dim: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim * n).prop_filter("nonzero rows", move |v| v.chunks(dim).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_stays_in_ball_and_box(
        x in prop::collection::vec(0.0f32..=1.0, 12),
        delta in prop::collection::vec(-0.2f32..0.2, 12),
        eps_units in 1u32..16,
    ) {
        let eps = eps_units as f64 / 255.0;
        let clean = ImageBatch::new(ImageShape::new(3, 2, 2), x.clone()).unwrap();
        let adv: Vec<f32> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let p = linf_project(&adv, &clean, eps).unwrap();
        prop_assert!(p.linf_distance(&clean) <= eps + 1e-6);
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = linf_project(p.data(), &clean, eps).unwrap();
        prop_assert_eq!(again.data(), p.data());
    }

    #[test]
    fn neg_cosine_is_bounded_symmetric_and_scale_free(v in rows(4, 3), w in rows(4, 3), s in 0.1f64..10.0) {
        let a = EmbeddingBatch::new(4, v.clone(), false).unwrap();
        let b = EmbeddingBatch::new(4, w.clone(), false).unwrap();
        let scaled = EmbeddingBatch::new(4, v.iter().map(|x| x * s).collect(), false).unwrap();
        let ab = neg_cosine(&a, &b).unwrap();
        let ba = neg_cosine(&b, &a).unwrap();
        prop_assert!(ab.value >= -1.0 - 1e-12 && ab.value <= 1.0 + 1e-12);
        prop_assert!((ab.value - ba.value).abs() < 1e-12);
        prop_assert!((neg_cosine(&scaled, &b).unwrap().value - ab.value).abs() < 1e-12);
    }

    #[test]
    fn stop_grad_keeps_the_value_and_halves_the_gradient(v in rows(5, 2), w in rows(5, 2)) {
        let a = EmbeddingBatch::new(5, v, false).unwrap();
        let b = EmbeddingBatch::new(5, w, false).unwrap();
        let on = simclip_loss(&a, &b, true).unwrap();
        let off = simclip_loss(&a, &b, false).unwrap();
        prop_assert!((on.value - off.value).abs() < 1e-12);
        for (g_on, g_off) in on.grad_first.iter().zip(&off.grad_first).chain(on.grad_second.iter().zip(&off.grad_second)) {
            prop_assert!((2.0 * g_on - g_off).abs() < 1e-12);
        }
    }

    #[test]
    fn cider_is_nonnegative_and_zero_for_disjoint_words(
        picks in prop::collection::vec((0usize..6, 0usize..6, 0usize..6), 2..6),
    ) {
        let words = ["red", "car", "dog", "sky", "tree", "boat"];
        let refs = picks
            .iter()
            .enumerate()
            .map(|(i, (a, b, c))| (format!("i{i}"), vec![format!("{} {} {}", words[*a], words[*b], words[*c])]))
            .collect();
        let corpus = CiderCorpus::new(refs);
        let cands = picks.iter().enumerate().map(|(i, (a, b, _))| (format!("i{i}"), format!("{} {}", words[*a], words[*b]))).collect();
        prop_assert!(cider_score(&cands, &corpus).unwrap() >= 0.0);
        let alien = (0..picks.len()).map(|i| (format!("i{i}"), "zebra quartz".to_string())).collect();
        prop_assert_eq!(cider_score(&alien, &corpus).unwrap(), 0.0);
    }

    #[test]
    fn lr_schedule_is_bounded_and_peaks_after_warmup(warmup in 0usize..20, extra in 1usize..200, lr in 1e-6f64..1e-2) {
        let cfg = TrainConfig { lr, warmup_steps: warmup, ..TrainConfig::default() };
        let total = warmup + extra;
        for step in 0..total {
            let v = lr_at(step, &cfg, total);
            prop_assert!(v >= 0.0 && v <= lr * (1.0 + 1e-12));
        }
        prop_assert!((lr_at(warmup, &cfg, total) - lr).abs() <= lr * 1e-12);
        for step in warmup..total - 1 {
            prop_assert!(lr_at(step + 1, &cfg, total) <= lr_at(step, &cfg, total) + 1e-18);
        }
    }

    #[test]
    fn each_epoch_visits_every_example_once(n in 2usize..80, batch in 2usize..16, seed in any::<u64>(), epoch in 0usize..3) {
        let per_epoch = n.div_ceil(batch);
        let mut seen: Vec<usize> = (0..per_epoch).flat_map(|b| batch_indices(n, batch, seed, epoch * per_epoch + b)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn collapse_detector_fires_exactly_after_a_full_window(trace in prop::collection::vec(0.0f64..0.02, 1..60), window in 1usize..10) {
        let mut d = CollapseDetector::new(0.01, window);
        let mut run = 0;
        for m in trace {
            run = if m < 0.01 { run + 1 } else { 0 };
            prop_assert_eq!(d.observe(m), run >= window);
        }
    }

    #[test]
    fn train_config_survives_a_toml_round_trip(
        lr in 1e-7f64..1.0,
        wd in 0.0f64..0.1,
        steps in 1usize..1000,
        stop_grad in any::<bool>(),
        seed in any::<u32>(),
    ) {
        let cfg = ExperimentConfig {
            seed: seed as u64,
            train: Some(TrainConfig {
                lr,
                weight_decay: wd,
                total_steps: Some(steps + 20),
                stop_grad,
                ..TrainConfig::default()
            }),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attacks_respect_the_budget_and_never_lose_ground(
        eps_units in prop::sample::select(vec![2u32, 4, 8]),
        apgd in any::<bool>(),
        objective in prop::sample::select(vec![Objective::CeUntargeted, Objective::DlrTargeted, Objective::CeTargeted, Objective::EmbeddingMax, Objective::EmbeddingTargeted]),
        seed in any::<u64>(),
        random_start in any::<bool>(),
    ) {
        let (enc, head, data) = small();
        let images = data.images.select(&[0, 1, 2]);
        let labels = &data.labels[..3];
        let clean = enc.encode(&images, true).unwrap();
        let eps = eps_units as f64 / 255.0;
        let mut cfg = AttackConfig::pgd(eps, 6, objective);
        cfg.method = if apgd { AttackMethod::Apgd } else { AttackMethod::Pgd };
        cfg.seed = seed;
        cfg.random_start = random_start;
        let targets = [1usize, 2, 3];
        if objective.is_targeted() {
            cfg = cfg.with_target(TargetSpec::PerExample);
        }
        let ctx = ObjectiveContext::new(0.01).with_head(&head).with_labels(labels).with_clean_embeddings(&clean).with_targets(&targets);
        let res = attack(&enc, &images, &cfg, &ctx).unwrap();
        prop_assert!(res.adversarial.linf_distance(&images) <= eps + 1e-6);
        prop_assert!(res.linf_violation <= 1e-6);
        prop_assert!(res.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(res.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        let again = attack(&enc, &images, &cfg, &ctx).unwrap();
        prop_assert_eq!(again.adversarial, res.adversarial);
    }
}

#[test]
fn robust_accuracy_never_increases_with_epsilon() {
    let (enc, head, data) = small();
    for attack_kind in [simclip_core::eval::ZeroShotAttack::ApgdDlrTargeted, simclip_core::eval::ZeroShotAttack::ApgdCe] {
        let cfg = ZeroShotConfig {
            attack: attack_kind,
            steps: 5,
            subset: None,
            ..ZeroShotConfig::default()
        };
        let r = eval_zero_shot(&enc, &head, &data, &cfg).unwrap();
        assert!(r.robust_accuracy.windows(2).all(|w| w[1].accuracy <= w[0].accuracy), "{r:?}");
        assert!(r.robust_accuracy[0].accuracy <= r.clean_accuracy);
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let enc = VisionEncoder::<f32>::init(ArchSpec::small(ImageShape::new(3, 8, 8), 32).with_bias(), seed).unwrap();
        let path = dir.path().join(format!("{seed}.ckpt"));
        save_checkpoint(&enc, &path, "digest").unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), enc.params());
        assert_eq!(back.arch(), enc.arch());
    }
}

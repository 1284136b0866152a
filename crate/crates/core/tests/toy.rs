use proptest::prelude::*;
use vit_adapter_core::config::{InteractionMode, ModelConfig};
use vit_adapter_core::model::count_parameters;
use vit_adapter_core::nn::ParamStore;
use vit_adapter_core::toy::{
    generate_dataset, generate_eval_set, miou, stack_batch, train, ModelKind, SampleStream, ToyNet,
    TrainConfig, TOY_CLASSES, TOY_SIZE,
};

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_dataset(3, 4), generate_dataset(3, 4));
    assert_ne!(generate_dataset(3, 2), generate_dataset(4, 2));
    let stream: Vec<_> = SampleStream {
        seed: 3,
        batch: 2,
        next_index: 0,
    }
    .take(2)
    .flatten()
    .collect();
    assert_eq!(stream, generate_dataset(3, 4));
    assert_ne!(generate_eval_set(3, 2), generate_dataset(3, 2));
}

#[test]
fn seed_seven_has_several_classes() {
    let s = &generate_dataset(7, 1)[0];
    let mut seen = [false; TOY_CLASSES];
    s.label.iter().for_each(|&c| seen[c as usize] = true);
    assert!(seen.iter().filter(|&&x| x).count() >= 2);
    assert_eq!(s.image.len(), 3 * TOY_SIZE * TOY_SIZE);
    assert_eq!(s.label.len(), TOY_SIZE * TOY_SIZE);
}

#[test]
fn background_fraction_and_class_balance() {
    let data = generate_dataset(11, 240);
    let mut counts = [0usize; TOY_CLASSES];
    for s in &data {
        let f = s.background_fraction();
        assert!(f > 0.2 && f < 0.9, "background fraction {f}");
        s.label.iter().for_each(|&c| counts[c as usize] += 1);
    }
    let shapes = &counts[1..];
    let mean = shapes.iter().sum::<usize>() as f64 / shapes.len() as f64;
    for (c, &n) in shapes.iter().enumerate() {
        assert!(
            (n as f64 / mean - 1.0).abs() <= 0.2,
            "class {}: {n} vs mean {mean}",
            c + 1
        );
    }
}

#[test]
fn batches_stack_channel_major() {
    let data = generate_dataset(1, 2);
    let (img, labels) = stack_batch::<f32>(&data).unwrap();
    assert_eq!(img.dims(), [2, 3, TOY_SIZE, TOY_SIZE]);
    assert_eq!(img.data()[3 * TOY_SIZE * TOY_SIZE..], data[1].image[..]);
    assert_eq!(labels.len(), 2 * TOY_SIZE * TOY_SIZE);
}

#[test]
fn miou_hand_counted_cases() {
    let truth = [0u8, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
    assert_eq!(miou(&truth, &truth, 3).unwrap(), 1.0);
    let disjoint = truth.map(|c| 1 - c);
    assert_eq!(miou(&disjoint, &truth, 2).unwrap(), 0.0);
    // Class 0: 4 of 8 predicted, IoU 0.5. Class 1: 2 of 8, IoU 0.25. The
    // rest goes to a class absent from the truth.
    let pred = [0u8, 0, 0, 0, 2, 2, 2, 2, 1, 1, 2, 2, 2, 2, 2, 2];
    assert_eq!(miou(&pred, &truth, 3).unwrap(), 0.375);
    assert!(miou(&pred[..4], &truth, 3).is_err());
}

#[test]
fn heads_match_across_kinds() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let head_params = |kind| {
        let mut store = ParamStore::<f32>::new();
        ToyNet::register(&mut store, &cfg, kind, 0).unwrap();
        store.numel_with_prefix("head")
    };
    let plain = head_params(ModelKind::PlainVit);
    assert!(plain > 0);
    assert_eq!(
        plain,
        head_params(ModelKind::Adapter(InteractionMode::Attention))
    );
    let mut store = ParamStore::<f32>::new();
    ToyNet::register(&mut store, &cfg, ModelKind::PlainVit, 0).unwrap();
    assert_eq!(count_parameters(&store).adapter, 0);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = ModelConfig::preset("micro").unwrap();
    for kind in [
        ModelKind::PlainVit,
        ModelKind::Adapter(InteractionMode::Attention),
    ] {
        let tc = TrainConfig {
            steps: 0,
            eval_samples: 16,
            ..Default::default()
        };
        let src = SampleStream {
            seed: 0,
            batch: tc.batch,
            next_index: 0,
        };
        let (log, _, _) = train::<f32, _>(&cfg, kind, &tc, src, |_| {}).unwrap();
        assert!(log.final_miou < 0.35, "{}: {}", kind.name(), log.final_miou);
    }
}

#[test]
fn loss_falls_over_the_first_hundred_steps() {
    let cfg = ModelConfig::preset("micro").unwrap();
    for kind in [
        ModelKind::PlainVit,
        ModelKind::Adapter(InteractionMode::Attention),
    ] {
        let tc = TrainConfig {
            steps: 100,
            eval_samples: 8,
            log_every: 100,
            ..Default::default()
        };
        let src = SampleStream {
            seed: 1,
            batch: tc.batch,
            next_index: 0,
        };
        let (log, _, _) = train::<f32, _>(&cfg, kind, &tc, src, |_| {}).unwrap();
        let lead = log.losses[..20].iter().sum::<f64>() / 20.0;
        let trail = log.losses[80..].iter().sum::<f64>() / 20.0;
        assert!(trail < lead, "{}: {lead} -> {trail}", kind.name());
    }
}

#[test]
fn training_is_bit_deterministic() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let run = || {
        let tc = TrainConfig {
            steps: 4,
            log_every: 2,
            eval_samples: 4,
            batch: 2,
            ..Default::default()
        };
        let src = SampleStream {
            seed: 5,
            batch: tc.batch,
            next_index: 0,
        };
        let (log, _, params) = train::<f32, _>(
            &cfg,
            ModelKind::Adapter(InteractionMode::Attention),
            &tc,
            src,
            |_| {},
        )
        .unwrap();
        let bits: Vec<u32> = params
            .iter()
            .flat_map(|(_, p)| {
                p.value
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (log.to_csv(), bits)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0.starts_with("step,loss,miou\n"));
    assert!(a
        .0
        .trim_end()
        .lines()
        .last()
        .unwrap()
        .starts_with("final_miou="));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn miou_ignores_consistent_relabeling(
        pairs in proptest::collection::vec((0u8..5, 0u8..5), 1..60),
        perm in Just([0u8, 1, 2, 3, 4]).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let a = miou(&pred, &truth, 5).unwrap();
        let b = miou(&relabel(&pred), &relabel(&truth), 5).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

mod support;

use proptest::prelude::*;
use support::randn;
use vit_adapter_core::config::ModelConfig;
use vit_adapter_core::nn::{component_rng, Ctx, Init, ParamStore};
use vit_adapter_core::spm::{flatten_levels, split_levels, ScaleLayout, SpatialPrior};
use vit_adapter_core::{Error, Tape, Tensor};

fn build(cfg: &ModelConfig) -> (SpatialPrior, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = component_rng(21, "spm");
    let spm = SpatialPrior::new(&mut Init::new(&mut store, &mut rng, "spm"), cfg);
    (spm, store)
}

#[test]
fn level_grids_and_token_counts() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (spm, store) = build(&cfg);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    for (size, grids, total) in [(224, [28, 14, 7], 1029), (64, [8, 4, 2], 84)] {
        let (f_sp, layout) = spm
            .forward(&ctx, &Tensor::zeros(&[1, 3, size, size]))
            .unwrap();
        assert_eq!(layout.levels, grids.map(|g| (g, g)).to_vec());
        assert_eq!(layout.total, total);
        assert_eq!(f_sp.dims(), [1, total, cfg.embed_dim]);
    }
    let maps = spm.levels(&ctx, &Tensor::zeros(&[2, 3, 96, 64])).unwrap();
    for (l, m) in maps.iter().enumerate() {
        assert_eq!(m.dims(), [2, cfg.embed_dim, 12 >> l, 8 >> l]);
    }
    assert!(matches!(
        spm.forward(&ctx, &Tensor::zeros(&[1, 3, 48, 64])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn zero_image_with_zero_biases_gives_zero_features() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (spm, mut store) = build(&cfg);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with("bias") || p.name.ends_with("beta"))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        let d = store.value(id).dims().to_vec();
        store.set(id, Tensor::zeros(&d)).unwrap();
    }
    let tape = Tape::inference();
    let (f_sp, _) = spm
        .forward(&Ctx::new(&tape, &store), &Tensor::zeros(&[1, 3, 64, 64]))
        .unwrap();
    assert!(f_sp.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layout_offsets_are_prefix_sums() {
    let l = ScaleLayout::for_image(224, 224).unwrap();
    assert_eq!(l.starts, [0, 784, 980]);
    assert!(matches!(
        ScaleLayout::for_image(100, 64),
        Err(Error::Shape(_))
    ));
}

#[test]
fn handcrafted_tokens_land_where_expected() {
    let layout = ScaleLayout::for_image(64, 96).unwrap();
    let tokens = Tensor::from_fn(&[1, layout.total, 1], |i| i as f64);
    let maps = split_levels(&Tape::inference(), &tokens, &layout).unwrap();
    for idx in 0..layout.total {
        let (l, r, c) = layout.locate(idx).unwrap();
        assert_eq!(maps[l].at(&[0, 0, r, c]), idx as f64);
    }
    assert_eq!(layout.locate(layout.total), None);
}

#[test]
fn split_rejects_count_mismatch() {
    let layout = ScaleLayout::for_image(64, 64).unwrap();
    let tokens = Tensor::<f64>::zeros(&[1, 83, 4]);
    assert!(matches!(
        split_levels(&Tape::inference(), &tokens, &layout),
        Err(Error::Shape(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn flatten_and_split_are_inverse(h in 1usize..4, w in 1usize..4, b in 1usize..3, d in 1usize..4, seed in 0u64..100) {
        let grids = [(4 * h, 4 * w), (2 * h, 2 * w), (h, w)];
        let maps: Vec<Tensor<f64>> =
            grids.iter().enumerate().map(|(i, &(gh, gw))| randn(&[b, d, gh, gw], seed * 3 + i as u64)).collect();
        let tape = Tape::inference();
        let (tokens, layout) = flatten_levels(&tape, &maps).unwrap();
        prop_assert_eq!(layout.total, grids.iter().map(|&(a, c)| a * c).sum::<usize>());
        let back = split_levels(&tape, &tokens, &layout).unwrap();
        for (a, m) in back.iter().zip(&maps) {
            prop_assert!(a.bit_eq(m));
        }
        let (again, _) = flatten_levels(&tape, &back).unwrap();
        prop_assert!(again.bit_eq(&tokens));
    }
}

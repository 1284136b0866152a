mod support;

use proptest::prelude::*;
use support::{max_abs, randn, resize_oracle};
use vit_adapter_core::backbone::{
    resize_position_embedding, window_partition, window_unpartition, AttnMode, Backbone,
    EncoderLayer,
};
use vit_adapter_core::config::ModelConfig;
use vit_adapter_core::nn::{component_rng, Ctx, Init, ParamStore};
use vit_adapter_core::{Error, Tape, Tensor};

fn build(cfg: &ModelConfig, seed: u64) -> (Backbone, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = component_rng(seed, "backbone");
    let bb = Backbone::new(&mut Init::new(&mut store, &mut rng, "backbone"), cfg);
    (bb, store)
}

fn zero_matching(store: &mut ParamStore<f64>, pattern: &str) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.contains(pattern))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty(), "no parameter matches {pattern}");
    for id in ids {
        let dims = store.value(id).dims().to_vec();
        store.set(id, Tensor::zeros(&dims)).unwrap();
    }
}

#[test]
fn patch_embed_token_counts() {
    let mut cfg = ModelConfig::preset("small").unwrap();
    cfg.layers = 1;
    cfg.interactions = 1;
    let mut store = ParamStore::<f32>::new();
    let mut rng = component_rng(0, "backbone");
    let bb = Backbone::new(&mut Init::new(&mut store, &mut rng, "backbone"), &cfg);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let (tokens, grid) = bb
        .patch_embed(&ctx, &Tensor::zeros(&[1, 3, 224, 224]))
        .unwrap();
    assert_eq!(tokens.dims(), [1, 196, 384]);
    assert_eq!(grid, (14, 14));
    let (tokens, _) = bb
        .patch_embed(&ctx, &Tensor::zeros(&[1, 3, 32, 32]))
        .unwrap();
    assert_eq!(tokens.dims()[1], 4);
    assert!(matches!(
        bb.patch_embed(&ctx, &Tensor::zeros(&[1, 3, 40, 32])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn patch_embed_equals_unfold_then_matmul() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (bb, store) = build(&cfg, 3);
    let img = randn(&[1, 3, 32, 32], 11);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let (tokens, _) = bb.patch_embed(&ctx, &img).unwrap();
    let w = store.value(bb.patch_embed.weight);
    let b = store.value(bb.patch_embed.bias.unwrap());
    let (p, d) = (16, cfg.embed_dim);
    let mut want = Vec::new();
    for pi in 0..2 {
        for pj in 0..2 {
            let patch: Vec<f64> = (0..3 * p * p)
                .map(|e| {
                    let (c, ki, kj) = (e / (p * p), (e / p) % p, e % p);
                    img.at(&[0, c, pi * p + ki, pj * p + kj])
                })
                .collect();
            for o in 0..d {
                let dot: f64 = patch
                    .iter()
                    .enumerate()
                    .map(|(e, v)| v * w.data()[o * 3 * p * p + e])
                    .sum();
                want.push(dot + b.data()[o]);
            }
        }
    }
    assert!(max_abs(tokens.data(), &want) < 1e-10);
}

#[test]
fn position_embedding_resize() {
    let d = 5;
    let pos = randn(&[14 * 14, d], 4);
    let tape = Tape::inference();
    assert!(resize_position_embedding(&tape, &pos, (14, 14), (14, 14))
        .unwrap()
        .bit_eq(&pos));
    let got = resize_position_embedding(&tape, &pos, (14, 14), (7, 7)).unwrap();
    let map = Tensor::from_fn(&[1, d, 14, 14], |i| {
        let (c, cell) = (i / 196, i % 196);
        pos.data()[cell * d + c]
    });
    let want = resize_oracle(&map, 7, 7);
    let want_tokens: Vec<f64> = (0..49 * d)
        .map(|i| want.data()[(i % d) * 49 + i / d])
        .collect();
    assert_eq!(got.dims(), [49, d]);
    assert!(max_abs(got.data(), &want_tokens) < 1e-12);
}

#[test]
fn zero_position_embedding_leaves_tokens() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (bb, mut store) = build(&cfg, 5);
    zero_matching(&mut store, "pos_embed");
    let img = randn(&[1, 3, 128, 128], 6);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let (plain, _) = bb.patch_embed(&ctx, &img).unwrap();
    let (embedded, _) = bb.embed(&ctx, &img).unwrap();
    assert!(plain.bit_eq(&embedded));
}

#[test]
fn zeroed_output_projections_make_identity_layers() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (bb, mut store) = build(&cfg, 7);
    zero_matching(&mut store, "attn.proj");
    zero_matching(&mut store, "mlp.fc2");
    let x = randn(&[2, 64, cfg.embed_dim], 8);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let y = bb
        .run_layers(&ctx, x.clone(), (8, 8), 0..cfg.layers)
        .unwrap();
    assert_eq!(y.max_abs_diff(&x), 0.0);
}

#[test]
fn full_grid_window_equals_global() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = component_rng(9, "layer");
    let local = EncoderLayer::new(
        &mut Init::new(&mut store, &mut rng, "l"),
        &cfg,
        AttnMode::Window(4),
    );
    let global = EncoderLayer {
        mode: AttnMode::Global,
        ..local.clone()
    };
    let x = randn(&[2, 16, cfg.embed_dim], 10);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let a = local.forward(&ctx, &x, (4, 4)).unwrap();
    let b = global.forward(&ctx, &x, (4, 4)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10);
}

#[test]
fn window_mode_rejects_indivisible_grid() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = component_rng(9, "layer");
    let layer = EncoderLayer::new(
        &mut Init::new(&mut store, &mut rng, "l"),
        &cfg,
        AttnMode::Window(4),
    );
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let x = randn(&[1, 36, cfg.embed_dim], 1);
    assert!(matches!(
        layer.forward(&ctx, &x, (6, 6)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let mut store = ParamStore::<f64>::new();
    let mut rng = component_rng(12, "layer");
    let layer = EncoderLayer::new(
        &mut Init::new(&mut store, &mut rng, "l"),
        &cfg,
        AttnMode::Global,
    );
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let x = randn(&[2, 9, cfg.embed_dim], 13).map(|v| 4.0 * v);
    let (_, probs) = layer.self_attention(&ctx, &x).unwrap();
    assert_eq!(probs.dims(), [2, cfg.heads, 9, 9]);
    for row in probs.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn block_ranges_follow_even_split() {
    let (bb, _) = build(&ModelConfig::preset("micro").unwrap(), 1);
    let mut cfg12 = ModelConfig::preset("micro").unwrap();
    cfg12.layers = 12;
    let (bb12, _) = build(&cfg12, 1);
    assert_eq!(bb12.block_range(2, 4).unwrap(), 6..9);
    assert_eq!(bb12.block_range(0, 1).unwrap(), 0..12);
    assert!(matches!(bb12.block_range(0, 5), Err(Error::Config(_))));
    assert_eq!(bb.block_range(3, 4).unwrap(), 3..4);
}

#[test]
fn composed_blocks_equal_sequential_layers_bitwise() {
    let cfg = ModelConfig::preset("micro").unwrap();
    let (bb, store) = build(&cfg, 14);
    let img = randn(&[1, 3, 128, 128], 15);
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, &store);
    let (x, grid) = bb.embed(&ctx, &img).unwrap();
    let all = bb.run_layers(&ctx, x, grid, 0..cfg.layers).unwrap();
    for n in [1, 2, 4] {
        let (blocks, _) = bb.forward_blocks(&ctx, &img, n).unwrap();
        assert_eq!(blocks.len(), n);
        assert!(blocks.last().unwrap().bit_eq(&all), "N={n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn window_partition_round_trip(bh in 1usize..4, bw in 1usize..4, ws in 1usize..4, c in 1usize..4, b in 1usize..3) {
        let grid = (bh * ws, bw * ws);
        let x = randn(&[b, grid.0 * grid.1, c], (bh * 7 + bw) as u64);
        let tape = Tape::inference();
        let parts = window_partition(&tape, &x, grid, ws).unwrap();
        prop_assert_eq!(parts.dims(), &[b * bh * bw, ws * ws, c][..]);
        let back = window_unpartition(&tape, &parts, b, grid, ws).unwrap();
        prop_assert!(back.bit_eq(&x));
    }

    #[test]
    fn layers_conserve_token_count(t in 1usize..3) {
        let cfg = ModelConfig::preset("micro").unwrap();
        let (bb, store) = build(&cfg, 2);
        let grid = (4 * t, 4);
        let x = randn(&[1, grid.0 * grid.1, cfg.embed_dim], t as u64);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let y = bb.run_layers(&ctx, x.clone(), grid, 0..cfg.layers).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
    }
}

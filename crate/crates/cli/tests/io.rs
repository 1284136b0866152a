use proptest::prelude::*;
use vit_adapter::image::{encode_pgm, encode_ppm, parse_pgm, parse_ppm, read_ppm, ImageError};
use vit_adapter::prefetch::Prefetcher;
use vit_adapter::weights::{
    decode, decode_into, encode, encode_store, load_weights, save_weights, Entry, WeightsError,
};
use vit_adapter_core::config::ModelConfig;
use vit_adapter_core::model::{count_parameters, AdapterModel};
use vit_adapter_core::toy::SampleStream;
use vit_adapter_core::Tensor;

fn micro(seed: u64) -> AdapterModel<f32> {
    AdapterModel::new(&ModelConfig::preset("micro").unwrap(), seed).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vadw"), dir.path().join("b.vadw"));
    let src = micro(3);
    save_weights(&src.params, &a).unwrap();
    let mut dst = micro(4);
    load_weights(&mut dst.params, &a).unwrap();
    save_weights(&dst.params, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for ((_, p), (_, q)) in src.params.iter().zip(dst.params.iter()) {
        assert!(p.value.bit_eq(&q.value), "{}", p.name);
    }
}

#[test]
fn entry_count_matches_parameter_tensors() {
    let m = micro(0);
    let entries = decode(&encode_store(&m.params).unwrap()).unwrap();
    assert_eq!(entries.len(), m.params.len());
    let elements: usize = entries
        .iter()
        .map(|e| e.dims.iter().product::<usize>())
        .sum();
    assert_eq!(elements, count_parameters(&m.params).total);
    assert!(entries.windows(2).all(|w| w[0].name < w[1].name));
}

/// Byte offset of the first dim of `name`.
fn first_dim_offset(bytes: &[u8], name: &str) -> usize {
    let mut pos = 12;
    for e in decode(bytes).unwrap() {
        let dims_at = pos + 4 + e.name.len() + 1 + 4;
        if e.name == name {
            return dims_at;
        }
        pos = dims_at + 4 * e.dims.len() + e.payload.len();
    }
    panic!("{name} not found");
}

#[test]
fn corrupted_dim_names_the_entry() {
    let m = micro(0);
    let mut bytes = encode_store(&m.params).unwrap();
    let name = "adapter.spm.proj.1.weight";
    let at = first_dim_offset(&bytes, name);
    // [32, 64, 1, 1] becomes [64, 32, 1, 1]: same payload length, wrong shape.
    let (d0, d1) = (bytes[at], bytes[at + 4]);
    assert_ne!(d0, d1);
    bytes[at] = d1;
    bytes[at + 4] = d0;
    let mut target = micro(1);
    let before: Vec<Vec<f32>> = target
        .params
        .iter()
        .map(|(_, p)| p.value.to_vec())
        .collect();
    match decode_into(&mut target.params, &bytes) {
        Err(WeightsError::ShapeMismatch { name: n, .. }) => assert_eq!(n, name),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    let after: Vec<Vec<f32>> = target
        .params
        .iter()
        .map(|(_, p)| p.value.to_vec())
        .collect();
    assert_eq!(before, after, "a failed load must not modify the model");
}

#[test]
fn distinct_errors_for_magic_version_truncation() {
    let good = encode_store(&micro(0).params).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(WeightsError::BadMagic(_))));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode(&bad), Err(WeightsError::Version(9))));
    for cut in [2, 10, 30, good.len() / 2, good.len() - 1] {
        assert!(
            matches!(decode(&good[..cut]), Err(WeightsError::Truncated(_))),
            "cut at {cut}"
        );
    }
}

#[test]
fn dtype_must_match_the_model() {
    let bytes = encode_store(&micro(0).params).unwrap();
    let mut m64 = AdapterModel::<f64>::new(&ModelConfig::preset("micro").unwrap(), 0).unwrap();
    assert!(matches!(
        decode_into(&mut m64.params, &bytes),
        Err(WeightsError::DTypeMismatch { .. })
    ));
}

#[test]
fn missing_and_unexpected_entries() {
    let m = micro(0);
    let mut entries: Vec<Entry> = vit_adapter::weights::store_entries(&m.params);
    let dropped = entries.pop().unwrap();
    let mut target = micro(0);
    assert!(matches!(
        decode_into(&mut target.params, &encode(&entries).unwrap()),
        Err(WeightsError::Missing(n)) if n == dropped.name
    ));
    entries.push(dropped);
    entries.push(Entry::from_tensor("zzz.extra", &Tensor::<f32>::zeros(&[2])));
    assert!(matches!(
        decode_into(&mut target.params, &encode(&entries).unwrap()),
        Err(WeightsError::Unexpected(_))
    ));
}

#[test]
fn ppm_single_white_pixel() {
    let t = parse_ppm::<f32>(&encode_ppm(1, 1, &[255, 255, 255])).unwrap();
    assert_eq!(t.dims(), [1, 3, 1, 1]);
    assert_eq!(t.to_vec(), vec![1.0; 3]);
}

#[test]
fn ppm_black_then_red() {
    let t = parse_ppm::<f64>(&encode_ppm(2, 1, &[0, 0, 0, 255, 0, 0])).unwrap();
    assert_eq!(t.dims(), [1, 3, 1, 2]);
    assert_eq!(t.to_vec(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn ppm_header_drives_dims() {
    let rgb: Vec<u8> = (0..3 * 5 * 3).map(|i| i as u8).collect();
    let mut bytes = b"P6\n# comment line\n5 3\n255\n".to_vec();
    bytes.extend_from_slice(&rgb);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    std::fs::write(&path, &bytes).unwrap();
    let t = read_ppm::<f32>(&path).unwrap();
    assert_eq!(t.dims(), [1, 3, 3, 5]);
    // green channel of pixel (row 1, col 2)
    assert_eq!(t.at(&[0, 1, 1, 2]), ((3 * (5 + 2) + 1) as f32) / 255.0);
}

#[test]
fn ppm_errors() {
    assert!(matches!(
        parse_ppm::<f32>(b"P5\n1 1\n255\n\0"),
        Err(ImageError::Header(_))
    ));
    assert!(matches!(
        parse_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
        Err(ImageError::Header(_))
    ));
    assert!(matches!(
        parse_ppm::<f32>(b"P6\n2"),
        Err(ImageError::Header(_))
    ));
    assert!(matches!(
        parse_ppm::<f32>(b"P6\n2 2\n255\n\0\0\0"),
        Err(ImageError::Truncated {
            expected: 12,
            found: 3
        })
    ));
}

#[test]
fn prefetcher_matches_the_stream() {
    let direct: Vec<_> = SampleStream {
        seed: 2,
        batch: 3,
        next_index: 0,
    }
    .take(5)
    .collect();
    let fetched: Vec<_> = Prefetcher::spawn(
        SampleStream {
            seed: 2,
            batch: 3,
            next_index: 0,
        },
        2,
    )
    .take(5)
    .collect();
    assert_eq!(direct, fetched);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let px: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        prop_assert_eq!(parse_pgm(&encode_pgm(w, h, &px)).unwrap(), (w, h, px));
    }

    #[test]
    fn weights_round_trip(dims in proptest::collection::vec(1usize..4, 0..4), scale in -1e3f64..1e3) {
        let t = Tensor::<f64>::from_fn(&dims, |i| scale * (i as f64).sin());
        let bytes = encode(&[Entry::from_tensor("t", &t)]).unwrap();
        let back = decode(&bytes).unwrap()[0].to_tensor::<f64>().unwrap();
        prop_assert!(back.bit_eq(&t));
        prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }
}

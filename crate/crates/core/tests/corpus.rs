mod common;

use ccrk::corpus::{
    decode_binary, encode_binary, generate_synthetic, load_corpus, load_tokens, parse_csv,
    parse_jsonl, save_corpus, save_tokens, write_csv, write_jsonl, CorpusFormat, MultilingualCorpus,
    SyntheticConfig,
};
use ccrk::numerics::DenseMatrix;
use proptest::prelude::*;

/// Round every value to the nearest f32 so the binary format can hold it exactly.
fn f32_exact(c: &MultilingualCorpus) -> MultilingualCorpus {
    let q = |m: &DenseMatrix| {
        DenseMatrix::new(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap()
    };
    MultilingualCorpus::new(
        q(c.images()),
        q(c.texts()),
        c.language_codes().to_vec(),
        c.instance_ids().to_vec(),
    )
    .unwrap()
}

fn synthetic(n: usize, k: usize, d: usize, seed: u64) -> MultilingualCorpus {
    generate_synthetic(&SyntheticConfig {
        n_instances: n,
        n_languages: k,
        dim: d,
        latent_dim: d.min(4),
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn max_abs_diff(a: &MultilingualCorpus, b: &MultilingualCorpus) -> f64 {
    a.images()
        .as_slice()
        .iter()
        .chain(a.texts().as_slice())
        .zip(b.images().as_slice().iter().chain(b.texts().as_slice()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn all_formats_agree_through_files() {
    let c = f32_exact(&synthetic(9, 3, 5, 1));
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for (name, format) in [
        ("c.bin", CorpusFormat::Binary),
        ("c.csv", CorpusFormat::Csv),
        ("c.jsonl", CorpusFormat::Jsonl),
    ] {
        let path = dir.path().join(name);
        save_corpus(&c, &path, format).unwrap();
        assert_eq!(CorpusFormat::from_path(&path), format);
        loaded.push(load_corpus(&path, format).unwrap());
    }
    assert_eq!(loaded[0], c);
    assert!(max_abs_diff(&loaded[1], &c) <= 1e-6);
    assert!(max_abs_diff(&loaded[2], &c) <= 1e-6);
    assert_eq!(loaded[1].language_codes(), c.language_codes());
    assert_eq!(loaded[2].instance_ids(), c.instance_ids());
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = encode_binary(&synthetic(3, 2, 4, 2)).unwrap();
    for len in 0..bytes.len() {
        let err = decode_binary(&bytes[..len]).unwrap_err();
        assert!(
            matches!(err, ccrk::Error::Format { .. } | ccrk::Error::UnknownMagic { .. }),
            "{len}: {err:?}"
        );
    }
}

#[test]
fn missing_file_is_io_error() {
    let err = load_corpus(std::path::Path::new("/nonexistent/c.bin"), CorpusFormat::Binary).unwrap_err();
    assert!(matches!(err, ccrk::Error::Io(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tokens_round_trip() {
    let (_, t) = generate_synthetic(&SyntheticConfig {
        n_instances: 10,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    save_tokens(&t, &path).unwrap();
    assert_eq!(load_tokens(&path).unwrap(), t);
}

#[test]
fn generator_is_deterministic() {
    let cfg = SyntheticConfig { n_instances: 20, ..Default::default() };
    let (a, ta) = generate_synthetic(&cfg).unwrap();
    let (b, tb) = generate_synthetic(&cfg).unwrap();
    assert_eq!(encode_binary(&a).unwrap(), encode_binary(&b).unwrap());
    assert_eq!(ta, tb);
    let (c, _) = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn matching_pairs_stand_out_in_high_dimension() {
    let (c, _) = generate_synthetic(&SyntheticConfig {
        n_instances: 128,
        n_languages: 3,
        dim: 64,
        latent_dim: 8,
        noise_sigma: 0.0,
        ..Default::default()
    })
    .unwrap();
    let (n, k) = (c.n_instances(), c.n_languages());
    let mut wins = 0;
    for j in 0..n {
        for l in 0..k {
            let own = common::naive_dot(c.image(j), c.text(j, l));
            let best_other = (0..n)
                .filter(|&m| m != j)
                .map(|m| common::naive_dot(c.image(j), c.text(m, l)))
                .fold(f64::MIN, f64::max);
            wins += usize::from(own > best_other);
        }
    }
    let rate = wins as f64 / (n * k) as f64;
    assert!(rate > 0.95, "{rate}");
}

#[test]
fn token_ranges_are_respected() {
    let (_, t) = generate_synthetic(&SyntheticConfig::default()).unwrap();
    t.validate().unwrap();
    for j in 0..t.n_instances() {
        for l in 0..t.n_languages {
            let r = &t.language_vocab_ranges[l];
            assert!(t.sequence(j, l).iter().all(|tok| r.contains(tok)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binary_is_bit_exact(seed in any::<u64>(), n in 1usize..8, k in 1usize..4, d in 1usize..6) {
        let c = f32_exact(&synthetic(n, k, d, seed));
        let bytes = encode_binary(&c).unwrap();
        let back = decode_binary(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(encode_binary(&back).unwrap(), bytes);
    }

    #[test]
    fn text_formats_within_tolerance(seed in any::<u64>(), n in 1usize..8, k in 1usize..4, d in 1usize..6) {
        let c = synthetic(n, k, d, seed);
        let mut csv = Vec::new();
        write_csv(&c, &mut csv).unwrap();
        prop_assert!(max_abs_diff(&parse_csv(csv.as_slice()).unwrap(), &c) <= 1e-6);
        let mut jsonl = Vec::new();
        write_jsonl(&c, &mut jsonl).unwrap();
        prop_assert!(max_abs_diff(&parse_jsonl(jsonl.as_slice()).unwrap(), &c) <= 1e-6);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_binary(&bytes);
        let mut framed = b"CCRK".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_binary(&framed);
    }
}

mod common;

use ccrk::corpus::{generate_synthetic, SyntheticConfig};
use ccrk::losses::{
    cl_1to1, cl_1to1_batch, cmlm_loss, combined_loss, combined_loss_batch, kcl_i2t, kcl_i2t_batch,
    kcl_t2i, kcl_t2i_batch, mask_tokens, mitm_loss, CmlmHead, CombinedConfig, Heads, LossConfig,
    MitmHead,
};
use ccrk::mining::mine_batch;
use ccrk::numerics::{mat_vec, random_rotation, DenseMatrix, SeededRng};
use common::{from_rows, identical_corpus, naive_dot, random_corpus};
use proptest::prelude::*;

fn naive_lse(v: &[f64]) -> f64 {
    v.iter().map(|x| x.exp()).sum::<f64>().ln()
}

/// Image-to-text loss written straight from the definition.
fn oracle_i2t(images: &DenseMatrix, texts: &DenseMatrix, k: usize, tau: f64) -> f64 {
    let n = images.rows();
    let mut total = 0.0;
    for j in 0..n {
        let logits: Vec<f64> = (0..n * k)
            .map(|t| naive_dot(images.row(j), texts.row(t)) / tau)
            .collect();
        let lse = naive_lse(&logits);
        let mut lj = 0.0;
        for l in 0..k {
            lj -= (logits[j * k + l] - lse) / k as f64;
        }
        total += lj;
    }
    total / n as f64
}

fn oracle_t2i(images: &DenseMatrix, texts: &DenseMatrix, k: usize, tau: f64) -> f64 {
    let n = images.rows();
    let mut total = 0.0;
    for t in 0..n * k {
        let logits: Vec<f64> = (0..n)
            .map(|c| naive_dot(texts.row(t), images.row(c)) / tau)
            .collect();
        total -= logits[t / k] - naive_lse(&logits);
    }
    total / (n * k) as f64
}

#[test]
fn uniform_logits_give_log_pool_size() {
    let cfg = LossConfig::default();
    for (n, k) in [(2, 3), (4, 1), (5, 4)] {
        let c = identical_corpus(n, k, 3);
        let i2t = kcl_i2t(&c, &cfg).unwrap().value;
        let t2i = kcl_t2i(&c, &cfg).unwrap().value;
        assert!((i2t - ((n * k) as f64).ln()).abs() < 1e-9);
        assert!((t2i - (n as f64).ln()).abs() < 1e-9);
    }
    let c = identical_corpus(8, 3, 4);
    let mut rng = SeededRng::new(1);
    let r = cl_1to1(&c, &LossConfig::one_to_one(0.07), &mut rng).unwrap();
    assert!((r.i2t - 8f64.ln()).abs() < 1e-9);
    assert!((r.t2i - 8f64.ln()).abs() < 1e-9);
}

#[test]
fn hand_evaluated_examples() {
    // Orthogonal pairs at τ = 1.
    let c = from_rows(
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        1,
    );
    let v = kcl_i2t(&c, &LossConfig { tau: 1.0, ..Default::default() }).unwrap().value;
    assert!((v - 0.313_261_687_518_222_8).abs() < 1e-12);

    // Matching similarity 0.9, non-matching 0.1 for every text.
    let a = 0.9f64;
    let b = 0.1f64;
    let bb = (1.0 - b * b).sqrt();
    let i0 = vec![1.0, 0.0, 0.0];
    let i1 = vec![b, bb, 0.0];
    // t · i0 = x, t · i1 = b·x + bb·y
    let text_for = |s0: f64, s1: f64| {
        let x = s0;
        let y = (s1 - b * x) / bb;
        vec![x, y, (1.0 - x * x - y * y).sqrt()]
    };
    let texts = vec![text_for(a, b), text_for(a, b), text_for(b, a), text_for(b, a)];
    let c = from_rows(&[i0, i1], &texts, 2);
    let v = kcl_t2i(&c, &LossConfig::default()).unwrap().value;
    let expected = -((a / 0.07).exp() / ((a / 0.07).exp() + (b / 0.07).exp())).ln();
    assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    assert!((v - 1.09e-5).abs() < 1e-7);
}

#[test]
fn matches_direct_evaluation() {
    for seed in 0..10 {
        let c = random_corpus(2 + seed as usize % 5, 1 + seed as usize % 4, 6, seed);
        let k = c.n_languages();
        for tau in [0.07, 0.5, 1.0] {
            let cfg = LossConfig { tau, ..Default::default() };
            let i2t = kcl_i2t(&c, &cfg).unwrap().value;
            let t2i = kcl_t2i(&c, &cfg).unwrap().value;
            assert!((i2t - oracle_i2t(c.images(), c.texts(), k, tau)).abs() < 1e-10);
            assert!((t2i - oracle_t2i(c.images(), c.texts(), k, tau)).abs() < 1e-10);
        }
    }
}

#[test]
fn single_language_reduces_to_infonce() {
    for seed in 0..20 {
        let c = random_corpus(2 + seed as usize % 7, 1, 5, 100 + seed);
        let cfg = LossConfig::default();
        let i2t = kcl_i2t(&c, &cfg).unwrap();
        let t2i = kcl_t2i(&c, &cfg).unwrap();
        let mut rng = SeededRng::new(seed);
        let one = cl_1to1(&c, &LossConfig::one_to_one(cfg.tau), &mut rng).unwrap();
        assert_eq!(one.i2t, i2t.value);
        assert_eq!(one.t2i, t2i.value);
        assert_eq!(one.report.value, 0.5 * (i2t.value + t2i.value));
    }
}

#[test]
fn one_to_one_is_reproducible() {
    let c = random_corpus(6, 3, 4, 9);
    let cfg = LossConfig::one_to_one(0.07);
    let a = cl_1to1(&c, &cfg, &mut SeededRng::new(5)).unwrap();
    let b = cl_1to1(&c, &cfg, &mut SeededRng::new(5)).unwrap();
    assert_eq!(a, b);
    // Texts in unselected languages get no gradient.
    for (j, &lang) in a.selected.iter().enumerate() {
        for l in 0..3 {
            let row = a.report.grad_texts.row(j * 3 + l);
            if l != lang {
                assert!(row.iter().all(|&g| g == 0.0));
            }
        }
    }
}

#[test]
fn losses_reject_unnormalized_input() {
    let images = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let texts = images.clone();
    let c = ccrk::corpus::MultilingualCorpus::new(images, texts, common::codes(1), common::ids(2))
        .unwrap();
    assert!(matches!(
        kcl_i2t(&c, &LossConfig::default()),
        Err(ccrk::Error::NotNormalized { .. })
    ));
}

#[test]
fn degenerate_batches_are_rejected() {
    let c = identical_corpus(1, 1, 2);
    assert!(kcl_i2t(&c, &LossConfig::default()).is_err());
    assert!(kcl_t2i(&c, &LossConfig::default()).is_err());
    // One image with two texts is enough for image-to-text.
    let c = identical_corpus(1, 2, 2);
    assert!(kcl_i2t(&c, &LossConfig::default()).is_ok());
}

fn rotate(m: &DenseMatrix, r: &DenseMatrix) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|x| mat_vec(r, x)).collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

fn permute_instances(m: &DenseMatrix, perm: &[usize], k: usize) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = perm
        .iter()
        .flat_map(|&p| (0..k).map(move |l| p * k + l))
        .map(|r| m.row(r).to_vec())
        .collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

fn shuffled(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.below(i + 1));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), n in 2usize..7, k in 1usize..5, d in 2usize..8, tau in 0.02f64..2.0) {
        let c = random_corpus(n, k, d, seed);
        let cfg = LossConfig { tau, ..Default::default() };
        prop_assert!(kcl_i2t(&c, &cfg).unwrap().value >= 0.0);
        prop_assert!(kcl_t2i(&c, &cfg).unwrap().value >= 0.0);
        let mut rng = SeededRng::new(seed);
        prop_assert!(cl_1to1(&c, &LossConfig::one_to_one(tau), &mut rng).unwrap().report.value >= 0.0);
        let head = MitmHead::with_scale(d, 3, 0.7, &mut rng);
        let v: Vec<Vec<f64>> = (0..4).map(|_| rng.unit_vector(d)).collect();
        prop_assert!(mitm_loss(&head, &v[0], &v[1], &v[2], &v[3]).unwrap().value >= 0.0);
    }

    #[test]
    fn instance_permutation_leaves_losses_unchanged(seed in any::<u64>(), n in 2usize..9, k in 1usize..5) {
        let c = random_corpus(n, k, 5, seed);
        let mut rng = SeededRng::new(seed ^ 0xabc);
        let perm = shuffled(n, &mut rng);
        let images = permute_instances(c.images(), &perm, 1);
        let texts = permute_instances(c.texts(), &perm, k);
        let a = kcl_i2t_batch(c.images(), c.texts(), k, 0.07).unwrap().value;
        let b = kcl_i2t_batch(&images, &texts, k, 0.07).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
        let a = kcl_t2i_batch(c.images(), c.texts(), k, 0.07).unwrap().value;
        let b = kcl_t2i_batch(&images, &texts, k, 0.07).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn common_rotation_leaves_losses_unchanged(seed in any::<u64>(), n in 2usize..7, k in 1usize..4, d in 2usize..9) {
        let c = random_corpus(n, k, d, seed);
        let mut rng = SeededRng::new(seed.wrapping_add(1));
        let r = random_rotation(d, &mut rng).unwrap();
        let images = rotate(c.images(), &r);
        let texts = rotate(c.texts(), &r);
        let selected: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let pairs = [
            (kcl_i2t_batch(c.images(), c.texts(), k, 0.07).unwrap().value,
             kcl_i2t_batch(&images, &texts, k, 0.07).unwrap().value),
            (kcl_t2i_batch(c.images(), c.texts(), k, 0.07).unwrap().value,
             kcl_t2i_batch(&images, &texts, k, 0.07).unwrap().value),
            (cl_1to1_batch(c.images(), c.texts(), k, &selected, 0.07).unwrap().report.value,
             cl_1to1_batch(&images, &texts, k, &selected, 0.07).unwrap().report.value),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn masking_respects_the_rate(seed in any::<u64>(), len in 1usize..60, rate in 0.01f64..0.99) {
        let tokens: Vec<u32> = (1..=len as u32).collect();
        let mut rng = SeededRng::new(seed);
        let (masked, mask) = mask_tokens(&tokens, rate, &mut rng).unwrap();
        let expected = ((rate * len as f64).round() as usize).clamp(1, len);
        prop_assert_eq!(mask.len(), expected);
        prop_assert!(mask.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in masked.iter().enumerate() {
            if mask.contains(&i) {
                prop_assert_eq!(t, ccrk::corpus::MASK_TOKEN);
            } else {
                prop_assert_eq!(t, tokens[i]);
            }
        }
    }
}

#[test]
fn mitm_equal_scores_give_two_ln2() {
    let mut rng = SeededRng::new(3);
    let mut head = MitmHead::new(4, 3, &mut rng);
    let zeros = vec![0.0; head.n_params()];
    head.set_params(&zeros).unwrap();
    let v: Vec<Vec<f64>> = (0..4).map(|_| rng.unit_vector(4)).collect();
    let r = mitm_loss(&head, &v[0], &v[1], &v[2], &v[3]).unwrap();
    assert!((r.value - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cmlm_uniform_output_embeddings() {
    let mut rng = SeededRng::new(4);
    let mut head = CmlmHead::new(9, 3, 5, &mut rng);
    let mut p = head.params();
    let out_start = p.len() - 9 * 3;
    p[out_start..].iter_mut().for_each(|x| *x = 0.0);
    head.set_params(&p).unwrap();
    let image = rng.unit_vector(5);
    let r = cmlm_loss(&head, &[1, 4, 7, 2], &image, &[0, 2]).unwrap();
    assert!((r.value - 9f64.ln()).abs() < 1e-12);
    assert!(cmlm_loss(&head, &[1, 4], &image, &[0, 1]).is_err());
}

fn full_heads(d: usize, vocab: usize, rng: &mut SeededRng) -> Heads {
    Heads {
        mitm: Some(MitmHead::with_scale(d, 4, 0.3, rng)),
        cmlm: Some(CmlmHead::with_scale(vocab, 3, d, 0.3, rng)),
    }
}

#[test]
fn combined_value_is_the_sum_of_its_parts() {
    let (corpus, tokens) = generate_synthetic(&SyntheticConfig {
        n_instances: 12,
        n_languages: 3,
        dim: 8,
        latent_dim: 4,
        n_concepts: 4,
        tokens_per_text: 6,
        vocab_per_language: 10,
        ..Default::default()
    })
    .unwrap();
    let mut rng = SeededRng::new(2);
    let heads = full_heads(8, tokens.vocab_size as usize, &mut rng);
    let cfg = CombinedConfig::default();
    let run = SeededRng::new(77);
    let r = combined_loss(&corpus, Some(&tokens), &heads, &cfg, &mut run.clone()).unwrap();

    // Replay the same draws term by term.
    let (n, k) = (corpus.n_instances(), corpus.n_languages());
    let mut replay = run.clone();
    let mined = mine_batch(corpus.images(), corpus.texts(), k, cfg.mining_weighting, &mut replay).unwrap();
    assert_eq!(r.mined.as_ref(), Some(&mined));
    let mitm = heads.mitm.as_ref().unwrap();
    let cmlm = heads.cmlm.as_ref().unwrap();
    let (mut mi, mut mt, mut cm) = (0.0, 0.0, 0.0);
    for j in 0..n {
        let p = mined.positive_language[j];
        let (nj, nk) = mined.negative_text[j];
        let m = mitm_loss(
            mitm,
            corpus.text(j, p),
            corpus.image(j),
            corpus.text(nj, nk),
            corpus.image(mined.negative_image[j]),
        )
        .unwrap();
        mi += m.i2t;
        mt += m.t2i;
    }
    for j in 0..n {
        let seq = tokens.sequence(j, mined.positive_language[j]);
        let (_, mask) = mask_tokens(seq, cfg.mask_rate, &mut replay).unwrap();
        cm += cmlm_loss(cmlm, seq, corpus.image(j), &mask).unwrap().value;
    }
    let lc = LossConfig { tau: cfg.tau, ..Default::default() };
    let parts = [
        kcl_i2t(&corpus, &lc).unwrap().value,
        kcl_t2i(&corpus, &lc).unwrap().value,
        mi / n as f64,
        mt / n as f64,
        cm / n as f64,
    ];
    assert!((r.report.value - parts.iter().sum::<f64>()).abs() < 1e-12);
    assert!((r.mitm_i2t - parts[2]).abs() < 1e-12);
    assert!((r.cmlm - parts[4]).abs() < 1e-12);

    // Same seed, same value.
    let again = combined_loss(&corpus, Some(&tokens), &heads, &cfg, &mut run.clone()).unwrap();
    assert_eq!(again.report.value, r.report.value);
}

#[test]
fn pure_contrastive_combination_is_the_two_kcl_terms() {
    let c = random_corpus(7, 3, 5, 31);
    let cfg = CombinedConfig::default();
    let r = combined_loss_batch(c.images(), c.texts(), 3, None, &Heads::default(), &cfg, &mut SeededRng::new(0))
        .unwrap();
    let lc = LossConfig::default();
    let i2t = kcl_i2t(&c, &lc).unwrap();
    let t2i = kcl_t2i(&c, &lc).unwrap();
    assert_eq!(r.report.value, i2t.value + t2i.value);
    assert!(r.mined.is_none());
    for (g, (a, b)) in r
        .report
        .grad_images
        .as_slice()
        .iter()
        .zip(i2t.grad_images.as_slice().iter().zip(t2i.grad_images.as_slice()))
    {
        assert!((g - (a + b)).abs() < 1e-15);
    }
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(8);
    let (n, k, d, vocab) = (4, 2, 3, 7);
    let images = common::unit_rows(n, d, &mut rng);
    let texts = common::unit_rows(n * k, d, &mut rng);
    let heads = full_heads(d, vocab, &mut rng);
    let seqs: Vec<Vec<u32>> = (0..n * k)
        .map(|_| (0..5).map(|_| 1 + rng.below(vocab - 1) as u32).collect())
        .collect();
    let seq_refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let cfg = CombinedConfig { tau: 0.5, ..Default::default() };
    let draws = SeededRng::new(3);
    let r = combined_loss_batch(&images, &texts, k, Some(&seq_refs), &heads, &cfg, &mut draws.clone())
        .unwrap();
    // Mining is discrete; a small step keeps the draws fixed.
    let f = |p: &[f64]| {
        let mut h = heads.clone();
        h.set_params(p).unwrap();
        combined_loss_batch(&images, &texts, k, Some(&seq_refs), &h, &cfg, &mut draws.clone())
            .unwrap()
            .report
            .value
    };
    let numeric = ccrk::numerics::finite_diff_grad(f, &heads.params(), 1e-6).unwrap();
    let err = ccrk::numerics::max_relative_error(&r.report.grad_params, &numeric);
    assert!(err < 1e-6, "{err}");
}

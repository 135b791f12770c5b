use femtoformer::model::forward_all_positions;
use femtoformer::ops::{layer_norm, moments, softmax};
use femtoformer::tokenizer::bpe_train;
use femtoformer::{ModelConfig, Parameters, TokenId, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained_vocab() -> Vocabulary {
    let corpus = b"the quick brown fox jumps over the lazy dog; the dog sleeps. \
                   pack my box with five dozen liquor jugs, the box is heavy.";
    bpe_train(corpus, 320).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn byte_strings_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let vocab = trained_vocab();
        let ids = vocab.encode(&bytes);
        prop_assert!(ids.iter().all(|&id| (id as usize) < vocab.len()));
        prop_assert_eq!(vocab.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn utf8_strings_round_trip(s in "\\PC{0,80}") {
        let vocab = trained_vocab();
        prop_assert_eq!(vocab.decode(&vocab.encode(s.as_bytes())).unwrap(), s.as_bytes());
    }

    #[test]
    fn encode_is_deterministic(s in "[a-z ]{0,60}") {
        let vocab = trained_vocab();
        prop_assert_eq!(vocab.encode(s.as_bytes()), vocab.encode(s.as_bytes()));
    }

    #[test]
    fn softmax_is_shift_invariant(
        scores in proptest::collection::vec(-30.0f64..30.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let a = softmax(&scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes(e in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
        let (_, var) = moments(&e);
        prop_assume!(var > 1e-3);
        let d = e.len();
        let out = layer_norm(&e, &vec![1.0; d], &vec![0.0; d], 1e-12);
        let (mean, var) = moments(&out);
        prop_assert!(mean.abs() <= 1e-6);
        prop_assert!((var - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn earlier_positions_ignore_suffix_edits(
        seed in any::<u64>(),
        prefix in proptest::collection::vec(0u32..13, 1..8),
        tail_a in proptest::collection::vec(0u32..13, 0..5),
        tail_b in proptest::collection::vec(0u32..13, 0..5),
    ) {
        let c = ModelConfig::new(8, 16, 2, 2, 13, 16);
        let p = Parameters::random_dense(&c, 0.4, &mut ChaCha8Rng::seed_from_u64(seed));
        let a: Vec<TokenId> = prefix.iter().chain(&tail_a).copied().collect();
        let b: Vec<TokenId> = prefix.iter().chain(&tail_b).copied().collect();
        let pa = forward_all_positions(&a, &p, &c).unwrap();
        let pb = forward_all_positions(&b, &p, &c).unwrap();
        for i in 0..prefix.len() {
            prop_assert_eq!(&pa[i], &pb[i]);
        }
    }
}

#[test]
fn compression_is_monotone_in_vocab_size() {
    let corpus = b"she sells sea shells by the sea shore, and the shells she sells are sea shells for sure. "
        .repeat(4);
    let mut previous = usize::MAX;
    for m in [257, 260, 270, 290, 320, 400] {
        let (vocab, stats) = bpe_train(&corpus, m).unwrap();
        vocab.validate().unwrap();
        let count = vocab.encode(&corpus).len();
        assert_eq!(count, stats.tokens_after, "encode reproduces training segmentation at M={m}");
        assert!(count <= previous, "M={m}: {count} > {previous}");
        previous = count;
    }
}

#[test]
fn larger_vocabularies_extend_smaller_ones() {
    let corpus = b"abracadabra abracadabra cadabra".repeat(3);
    let (small, _) = bpe_train(&corpus, 265).unwrap();
    let (large, _) = bpe_train(&corpus, 280).unwrap();
    assert_eq!(small.merges(), &large.merges()[..small.merges().len()]);
}

#[test]
fn forward_is_deterministic() {
    let c = ModelConfig::new(16, 32, 2, 4, 29, 20);
    let p = Parameters::init(&c, &mut ChaCha8Rng::seed_from_u64(4));
    let toks: Vec<TokenId> = (0..15).map(|i| i * 2 % 29).collect();
    let a = forward_all_positions(&toks, &p, &c).unwrap();
    let b = forward_all_positions(&toks, &p, &c).unwrap();
    assert_eq!(a, b);
}

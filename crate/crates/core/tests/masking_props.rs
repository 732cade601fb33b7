use maskeval_core::masking::{
    build_masked_sequences, gen_mlm_training_example, PairSegmentation, Side, Truncation,
    WindowConfig,
};
use maskeval_core::synthetic::random_pair;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn position(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Checks every sequence of a pair against the contract, using only the
/// pair's subtokens and word boundaries.
fn check_pair(pair: &PairSegmentation, cfg: &WindowConfig) {
    let seqs = build_masked_sequences(pair, cfg).unwrap();
    assert_eq!(seqs.len(), pair.candidate.len() + pair.source.len());

    for (seq, (side, i)) in seqs.iter().zip(pair.steps()) {
        assert_eq!((seq.side, seq.word_index), (side, i));
        assert!(seq.tokens.len() <= cfg.max_sequence_length);
        assert_eq!(
            seq.tokens
                .iter()
                .filter(|t| **t == cfg.mask_sentinel)
                .count(),
            1
        );
        assert_eq!(
            seq.tokens
                .iter()
                .filter(|t| **t == cfg.separator_sentinel)
                .count(),
            1
        );
        assert_eq!(seq.tokens[seq.mask_index], cfg.mask_sentinel);

        let sep = seq
            .tokens
            .iter()
            .position(|t| *t == cfg.separator_sentinel)
            .unwrap();
        let (left, right) = (&seq.tokens[..sep], &seq.tokens[sep + 1..]);
        let (masked_part, other_part, mask_at) = match side {
            Side::Candidate => (left, right, seq.mask_index),
            Side::Source => (right, left, seq.mask_index - sep - 1),
        };
        assert!(mask_at <= cfg.window_radius);
        assert!(masked_part.len() - mask_at - 1 <= cfg.window_radius);

        let text = pair.side(side);
        let word = &text.words()[i];
        assert_eq!(seq.truth, text.word_text(i));

        // Put the word's subtokens back where the mask is.
        let subtokens = text.subtokens();
        let restored: Vec<String> = masked_part[..mask_at]
            .iter()
            .chain(&subtokens[word.subtoken_ids[0]..=*word.subtoken_ids.last().unwrap()])
            .chain(&masked_part[mask_at + 1..])
            .cloned()
            .collect();
        let at = position(subtokens, &restored).expect("masked text window is a contiguous run");
        assert!(at <= word.subtoken_ids[0]);

        let other = match side {
            Side::Candidate => pair.source.subtokens(),
            Side::Source => pair.candidate.subtokens(),
        };
        assert_eq!(
            other_part,
            &other[..other_part.len()],
            "other text keeps its head"
        );

        // Nothing is cut unless the budget or radius demand it.
        if subtokens.len() - word.subtoken_ids.len() < cfg.window_radius
            && subtokens.len() + other.len() < cfg.max_sequence_length
        {
            let mut full = pair.candidate.subtokens().to_vec();
            full.push(cfg.separator_sentinel.clone());
            full.extend_from_slice(pair.source.subtokens());
            let mut reinserted = seq.tokens.clone();
            reinserted.splice(
                seq.mask_index..=seq.mask_index,
                subtokens[word.subtoken_ids[0]..=*word.subtoken_ids.last().unwrap()]
                    .iter()
                    .cloned(),
            );
            assert_eq!(reinserted, full);
        }
    }
}

#[test]
fn two_hundred_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = WindowConfig::default();
    for k in 0..200 {
        let pair = if k % 10 == 0 {
            random_pair(&mut rng, 1..=40, 200..=400, 3)
        } else {
            random_pair(&mut rng, 0..=30, 0..=60, 3)
        };
        if pair.step_count() > 0 {
            check_pair(&pair, &cfg);
        }
    }
}

#[test]
fn long_other_text_is_cut_to_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pair = random_pair(&mut rng, 60..=60, 400..=400, 3);
    let cfg = WindowConfig::default();
    let seqs = build_masked_sequences(&pair, &cfg).unwrap();
    assert!(seqs
        .iter()
        .any(|s| s.tokens.len() == cfg.max_sequence_length));
    check_pair(&pair, &cfg);
}

#[test]
fn tail_truncation_keeps_the_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pair = random_pair(&mut rng, 5..=5, 500..=500, 3);
    let cfg = WindowConfig {
        truncation: Truncation::KeepTail,
        ..WindowConfig::default()
    };
    let seqs = build_masked_sequences(&pair, &cfg).unwrap();
    let src = pair.source.subtokens();
    let first = &seqs[0];
    let sep = first
        .tokens
        .iter()
        .position(|t| *t == cfg.separator_sentinel)
        .unwrap();
    let tail = &first.tokens[sep + 1..];
    assert_eq!(tail, &src[src.len() - tail.len()..]);
}

#[test]
fn mlm_example_is_one_of_the_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = WindowConfig::default();
    for seed in 0..50 {
        let pair = random_pair(&mut rng, 1..=8, 1..=12, 2);
        let all = build_masked_sequences(&pair, &cfg).unwrap();
        let ex = gen_mlm_training_example(&pair, seed, &cfg).unwrap();
        assert!(all.contains(&ex));
        assert_eq!(ex, gen_mlm_training_example(&pair, seed, &cfg).unwrap());
    }
}

proptest! {
    #[test]
    fn contract_holds_for_any_window(
        seed in any::<u64>(),
        radius in 1usize..30,
        extra in 0usize..80,
        n in 0usize..25,
        m in 0usize..50,
    ) {
        prop_assume!(n + m > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_pair(&mut rng, n..=n, m..=m, 3);
        let cfg = WindowConfig {
            window_radius: radius,
            max_sequence_length: 2 * radius + 3 + extra,
            ..WindowConfig::default()
        };
        check_pair(&pair, &cfg);
    }

    #[test]
    fn windowing_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_pair(&mut rng, 1..=20, 1..=40, 3);
        let cfg = WindowConfig::default();
        prop_assert_eq!(build_masked_sequences(&pair, &cfg).unwrap(), build_masked_sequences(&pair, &cfg).unwrap());
    }
}

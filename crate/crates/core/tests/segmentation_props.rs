use std::collections::BTreeSet;

use maskeval_core::segmentation::{boundary_set, reconcile, Segmentation, SegmentedText, Span};
use maskeval_core::synthetic::{random_segmentation_case, SegmentationCase};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn chars(text: &str, s: Span) -> String {
    text.chars().skip(s.start).take(s.len()).collect()
}

fn run(case: &SegmentationCase) -> SegmentedText {
    let ling = Segmentation::new(case.text.as_str(), case.ling.clone()).unwrap();
    let sub = Segmentation::new(case.text.as_str(), case.sub.clone()).unwrap();
    reconcile(&case.text, &ling, &sub).unwrap()
}

fn spans_of(st: &SegmentedText) -> Vec<Span> {
    st.words().iter().map(|w| w.span).collect()
}

fn check(case: &SegmentationCase) {
    let out = run(case);
    let words = out.as_segmentation();
    let ling = Segmentation::new(case.text.as_str(), case.ling.clone()).unwrap();
    let sub = Segmentation::new(case.text.as_str(), case.sub.clone()).unwrap();

    let wb = boundary_set(&words);
    assert!(wb.is_subset(&boundary_set(&ling)), "{case:?}");
    assert!(wb.is_subset(&boundary_set(&sub)), "{case:?}");

    // Tiling, checked character by character.
    let mut owner = vec![None; case.text.chars().count()];
    for (i, s) in words.spans().iter().enumerate() {
        for slot in &mut owner[s.start..s.end] {
            assert!(slot.is_none(), "overlap in {case:?}");
            *slot = Some(i);
        }
    }
    for (ch, o) in case.text.chars().zip(&owner) {
        assert!(o.is_some() || ch.is_whitespace(), "{case:?}");
    }

    // Round trip: gaps plus word texts rebuild the input.
    let mut rebuilt = String::new();
    let mut pos = 0;
    for (i, s) in words.spans().iter().enumerate() {
        let gap = chars(&case.text, Span::new(pos, s.start));
        assert!(gap.chars().all(char::is_whitespace));
        rebuilt.push_str(&gap);
        rebuilt.push_str(out.word_text(i));
        pos = s.end;
    }
    rebuilt.push_str(&chars(
        &case.text,
        Span::new(pos, case.text.chars().count()),
    ));
    assert_eq!(rebuilt, case.text);

    assert!(out.len() <= case.ling.len().min(case.sub.len()));

    // Each word owns a contiguous run of subword and linguistic tokens.
    let sub_ids: Vec<usize> = out
        .words()
        .iter()
        .flat_map(|w| w.subtoken_ids.clone())
        .collect();
    let ling_ids: Vec<usize> = out
        .words()
        .iter()
        .flat_map(|w| w.ling_ids.clone())
        .collect();
    assert_eq!(sub_ids, (0..case.sub.len()).collect::<Vec<_>>());
    assert_eq!(ling_ids, (0..case.ling.len()).collect::<Vec<_>>());

    // Idempotence against either input.
    assert_eq!(
        spans_of(&reconcile(&case.text, &words, &ling).unwrap()),
        words.spans()
    );
    assert_eq!(
        spans_of(&reconcile(&case.text, &ling, &words).unwrap()),
        words.spans()
    );
    assert_eq!(
        spans_of(&reconcile(&case.text, &words, &sub).unwrap()),
        words.spans()
    );
}

#[test]
fn thousand_seeded_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        check(&random_segmentation_case(&mut rng, 12));
    }
}

#[test]
fn boundaries_are_exactly_the_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..300 {
        let case = random_segmentation_case(&mut rng, 8);
        let out = run(&case);
        let ling = Segmentation::new(case.text.as_str(), case.ling.clone()).unwrap();
        let sub = Segmentation::new(case.text.as_str(), case.sub.clone()).unwrap();
        let expected: BTreeSet<usize> = boundary_set(&ling)
            .intersection(&boundary_set(&sub))
            .copied()
            .collect();
        assert_eq!(boundary_set(&out.as_segmentation()), expected);
    }
}

#[test]
fn neverman() {
    let text = "Mr. Neverman's";
    let ling = vec![Span::new(0, 3), Span::new(4, 12), Span::new(12, 14)];
    let sub = vec![
        Span::new(0, 2),
        Span::new(2, 3),
        Span::new(4, 9),
        Span::new(9, 12),
        Span::new(12, 13),
        Span::new(13, 14),
    ];
    let out = maskeval_core::segmentation::reconcile_spans(text, ling, sub).unwrap();
    let words: Vec<&str> = (0..out.len()).map(|i| out.word_text(i)).collect();
    assert_eq!(words, ["Mr.", "Neverman", "'s"]);
    assert_eq!(out.words()[1].subtoken_ids, [2, 3]);
    assert_eq!(out.words()[2].subtoken_ids, [4, 5]);
}

proptest! {
    #[test]
    fn invariants_hold_for_any_seed(seed in any::<u64>(), max_chunks in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&random_segmentation_case(&mut rng, max_chunks));
    }

    #[test]
    fn reconcile_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_segmentation_case(&mut rng, 10);
        prop_assert_eq!(run(&case), run(&case));
    }
}

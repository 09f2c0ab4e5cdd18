use std::collections::HashSet;

use num_bigint::BigUint;
use proptest::prelude::*;

use reliable_eval::domain::{DatasetSpec, Example, Gold, TaskKind};
use reliable_eval::harness::scoring::ExactMatch;
use reliable_eval::perturb::{
    build_space, permutation_for, rank_combination, render_prompt, sample_configs,
    unrank_combination, unrank_permutation, ChoicePermutation, Demonstration, Dimension,
    DimensionInventory, PerturbationConfig, PerturbationSpace, SpaceError,
};

fn mcqa(count: usize, choices: usize) -> DatasetSpec {
    let examples = (0..count)
        .map(|i| {
            let texts = (0..choices)
                .map(|c| format!("choice {c} for item {i}"))
                .collect();
            Example::multiple_choice(
                format!("item-{i}"),
                format!("What is item {i}?"),
                texts,
                (i * 7) % choices,
            )
            .unwrap()
        })
        .collect();
    DatasetSpec::new("mc", TaskKind::MultipleChoice, examples, "exact_match").unwrap()
}

fn open_ended(count: usize) -> DatasetSpec {
    let examples = (0..count)
        .map(|i| {
            Example::open_ended(
                format!("oe-{i}"),
                format!("Name thing {i}."),
                format!("thing {i}"),
            )
            .unwrap()
        })
        .collect();
    DatasetSpec::new("oe", TaskKind::OpenEnded, examples, "exact_match").unwrap()
}

/// A space too large to enumerate: 12 choices, 3-of-8 ordered demonstrations.
fn large_space() -> (DatasetSpec, PerturbationSpace) {
    let dataset = mcqa(6, 12);
    let mut inv = DimensionInventory::with_paraphrases(vec![
        "{question}\n{choices}".into(),
        "Read carefully.\n{question}\nOptions:\n{choices}".into(),
        "Q) {question}\n{choices}".into(),
    ]);
    inv.fewshot_pool = mcqa(8, 5)
        .examples()
        .iter()
        .map(|e| {
            Demonstration::new(
                Example::multiple_choice(
                    format!("demo-{}", e.id()),
                    e.question(),
                    e.choices().unwrap().to_vec(),
                    1,
                )
                .unwrap(),
            )
        })
        .collect();
    inv.fewshot_k = 3;
    let space = build_space(&dataset, &inv).unwrap();
    (dataset, space)
}

fn index_below(space: &PerturbationSpace, raw: u128) -> BigUint {
    BigUint::from(raw) % space.cardinality()
}

#[test]
fn large_space_has_the_closed_form_size() {
    let (_, space) = large_space();
    let expected: u128 = 3 * (1..=12u128).product::<u128>() * 4 * 6 * (8 * 7 * 6) * 2;
    assert_eq!(*space.cardinality(), BigUint::from(expected));
    assert!(matches!(
        space.enumerate(1_000_000),
        Err(SpaceError::EnumerationTooLarge { .. })
    ));
}

#[test]
fn multiple_choice_breakdown_names_each_dimension() {
    let dataset = mcqa(5, 4);
    let mut inv = DimensionInventory::with_paraphrases(vec!["{question}\n{choices}".into(); 3]);
    inv.fewshot_k = 0;
    inv.qa_markers.truncate(1);
    let space = build_space(&dataset, &inv).unwrap();
    let labels: Vec<(&str, u64)> = space
        .breakdown()
        .iter()
        .filter(|(_, r)| *r != BigUint::from(1u32))
        .map(|(d, r)| (d.label(), r.try_into().unwrap()))
        .collect();
    assert_eq!(
        labels,
        vec![
            ("instruction paraphrasing", 3),
            ("answer choice order", 24),
            ("answer choice enumerator", 4),
            ("choice separators", 6),
        ]
    );
    assert_eq!(*space.cardinality(), BigUint::from(3u32 * 24 * 4 * 6));
}

#[test]
fn open_ended_spaces_omit_choice_dimensions() {
    let mut inv = DimensionInventory::with_paraphrases(vec![
        "{question}".into(),
        "Answer: {question}".into(),
    ]);
    inv.fewshot_k = 0;
    inv.example_subset_size = Some(3);
    let space = build_space(&open_ended(7), &inv).unwrap();
    let dims: Vec<Dimension> = space.breakdown().iter().map(|(d, _)| *d).collect();
    assert!(!dims.contains(&Dimension::ChoiceOrder));
    assert!(!dims.contains(&Dimension::Enumerator));
    assert!(!dims.contains(&Dimension::Separator));
    assert_eq!(*space.cardinality(), BigUint::from(2u32 * 2 * 35));

    let mut bad = inv.clone();
    bad.instruction_paraphrases = vec!["{question}\n{choices}".into()];
    assert!(matches!(
        build_space(&open_ended(7), &bad),
        Err(SpaceError::UnexpectedPlaceholder { .. })
    ));
}

#[test]
fn every_permutation_rank_is_distinct() {
    let perms: HashSet<Vec<usize>> = (0..120).map(|r| unrank_permutation(r, 5)).collect();
    assert_eq!(perms.len(), 120);
    assert_eq!(unrank_permutation(0, 5), vec![0, 1, 2, 3, 4]);
}

#[test]
fn sampling_more_than_the_space_is_rejected() {
    let dataset = mcqa(1, 2);
    let mut inv = DimensionInventory::with_paraphrases(vec!["{question}{choices}".into()]);
    inv.fewshot_k = 0;
    let space = build_space(&dataset, &inv).unwrap();
    let all = sample_configs(&space, 96, 0).unwrap();
    assert_eq!(
        all.iter()
            .map(|c| c.config_id())
            .collect::<HashSet<_>>()
            .len(),
        96
    );
    assert!(matches!(
        sample_configs(&space, 97, 0),
        Err(SpaceError::CountExceedsCardinality { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn index_round_trips_in_a_large_space(raw in any::<u128>()) {
        let (_, space) = large_space();
        let index = index_below(&space, raw);
        let config = space.config_at(&index).unwrap();
        prop_assert_eq!(space.index_of(&config).unwrap(), index);
        let json = serde_json::to_string(&config).unwrap();
        let back: PerturbationConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.config_id(), config.config_id());
    }

    #[test]
    fn rendering_preserves_question_choices_and_gold(raw in any::<u128>(), item in 0usize..6) {
        let (dataset, space) = large_space();
        let config = space.config_at(&index_below(&space, raw)).unwrap();
        let example = &dataset.examples()[item];
        let prompt = render_prompt(&config, example, space.inventory()).unwrap();
        let target = prompt.text.rsplit("\n\n").next().unwrap();
        prop_assert!(target.contains(example.question()));
        let choices = example.choices().unwrap();
        for c in choices {
            prop_assert_eq!(target.matches(c.as_str()).count(), 1);
        }
        let map = prompt.gold_map.as_ref().unwrap();
        let mut order = map.order.clone();
        order.sort_unstable();
        prop_assert_eq!(order, (0..choices.len()).collect::<Vec<_>>());
        let Gold::Choice(gold) = *example.gold() else { unreachable!() };
        let label = map.label_for(gold).unwrap();
        let line = format!("{label}. {}", choices[gold]);
        prop_assert!(target.contains(&line), "{:?} missing from {:?}", line, target);
        prop_assert!(ExactMatch::matches(label, example, &prompt));
        let wrong = map.label_for((gold + 1) % choices.len()).unwrap();
        prop_assert!(!ExactMatch::matches(wrong, example, &prompt));
    }

    #[test]
    fn choice_order_depends_only_on_its_coordinate(seed in 0u128..479_001_600, item in 0usize..6) {
        let (dataset, space) = large_space();
        let example = &dataset.examples()[item];
        let a = PerturbationConfig::new(0, 0, 0, ChoicePermutation::Seeded(seed), vec![0, 1, 2], 0, None);
        let b = PerturbationConfig::new(2, 3, 5, ChoicePermutation::Seeded(seed), vec![7, 4, 1], 1, None);
        let order = permutation_for(ChoicePermutation::Seeded(seed), example);
        for config in [a, b] {
            let prompt = render_prompt(&config, example, space.inventory()).unwrap();
            prop_assert_eq!(&prompt.gold_map.unwrap().order, &order);
        }
    }

    #[test]
    fn open_ended_subsets_are_valid_and_rank_exactly(total in 2usize..30, size_seed in any::<usize>(), raw in any::<u128>()) {
        let size = 1 + size_seed % (total - 1);
        let mut inv = DimensionInventory::with_paraphrases(vec!["{question}".into()]);
        inv.fewshot_k = 0;
        inv.example_subset_size = Some(size);
        let space = build_space(&open_ended(total), &inv).unwrap();
        let config = space.config_at(&index_below(&space, raw)).unwrap();
        let chosen = space.selected_examples(&config);
        prop_assert_eq!(chosen.len(), size);
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(chosen.iter().all(|&i| i < total));
        let rank = config.example_subset().unwrap().clone();
        prop_assert_eq!(rank_combination(&chosen, total), rank.clone());
        prop_assert_eq!(unrank_combination(&rank, total, size), chosen);
    }
}

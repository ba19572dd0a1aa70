mod common;

use proptest::prelude::*;
use refgame::agents::{ListenerConfig, ListenerNet};
use refgame::distractors::*;
use refgame::seed;
use refgame::world::{build_dataset, Item, Split, World, WorldConfig};
use refgame::Error;

fn small_world() -> World {
    build_dataset(&WorldConfig {
        n_items: 250,
        d_img: 24,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn index_matches_brute_force_for_every_metric() {
    let w = small_world();
    let items = &w.data.train;
    assert_eq!(items.len(), 200);
    let enc = ListenerNet::new(ListenerConfig { d_w: 8, hidden: 12, joint: 10 }, w.vocab.len(), 24, 5).unwrap();
    for metric in SimilarityMetric::all_variants(0.5) {
        let scorer = Scorer::new(metric, items, items, w.vocab.len(), Some(&enc)).unwrap();
        let k = 15;
        let index = build_index(items, Split::Train, &scorer, k, 1).unwrap();
        let sims = common::brute_force_similarities(metric, items, items, w.vocab.len(), Some(&enc));
        common::check_index(&index, items, &sims, k).unwrap_or_else(|e| panic!("{metric}: {e}"));
    }
}

#[test]
fn save_load_round_trip_and_staleness() {
    let w = small_world();
    let items = &w.data.val;
    let scorer = Scorer::new(SimilarityMetric::CaptionTfidf, items, &w.data.train, w.vocab.len(), None).unwrap();
    let index = build_index(items, Split::Val, &scorer, 6, 0xfeed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.rgix");
    index.save(&path).unwrap();
    assert_eq!(SimilarityIndex::load(&path, 0xfeed).unwrap(), index);
    assert!(matches!(SimilarityIndex::load(&path, 0xbeef), Err(Error::Stale(_))));
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(SimilarityIndex::load(&path, 0xfeed), Err(Error::Format(_)) | Err(Error::Io(_))));
}

#[test]
fn dense_metric_ranks_duplicate_caption_first() {
    let w = small_world();
    let mut items: Vec<Item> = w.data.train[..30].to_vec();
    let mut dup = items[4].clone();
    dup.id = items.last().unwrap().id + 1;
    dup.image = items[9].image.clone();
    items.push(dup.clone());
    let enc = ListenerNet::new(ListenerConfig { d_w: 8, hidden: 12, joint: 10 }, w.vocab.len(), 24, 5).unwrap();
    let v = refgame::distractors::caption_dense_vector(Some(&enc), &items[4].caption.tokens).unwrap();
    assert_eq!(v.len(), 10);
    let scorer = Scorer::new(SimilarityMetric::CaptionDense, &items, &items, w.vocab.len(), Some(&enc)).unwrap();
    let index = build_index(&items, Split::Train, &scorer, 3, 0).unwrap();
    assert_eq!(index.neighbors(items[4].id).unwrap()[0].0 as usize, dup.id);
}

#[test]
fn identical_items_score_one() {
    let w = small_world();
    let proto = w.data.train[0].clone();
    let items: Vec<Item> = (0..8)
        .map(|i| Item {
            id: i,
            ..proto.clone()
        })
        .collect();
    for metric in [SimilarityMetric::Visual, SimilarityMetric::CaptionOnehot, SimilarityMetric::CaptionTfidf] {
        let scorer = Scorer::new(metric, &items, &w.data.train, w.vocab.len(), None).unwrap();
        let index = build_index(&items, Split::Train, &scorer, 4, 0).unwrap();
        for (_, list) in &index.lists {
            assert!(list.iter().all(|&(_, s)| (s - 1.0).abs() < 1e-6), "{metric}");
        }
    }
}

#[test]
fn hard_with_k_equal_to_distractors_uses_the_whole_list() {
    let w = small_world();
    let items = &w.data.train;
    let scorer = Scorer::new(SimilarityMetric::Visual, items, items, w.vocab.len(), None).unwrap();
    let index = build_index(items, Split::Train, &scorer, 4, 0).unwrap();
    let mut rng = seed::rng(2, &[]);
    for _ in 0..200 {
        let g = sample_game(items, Some(&index), 4, Difficulty::Hard, false, &mut rng).unwrap();
        let mut got: Vec<usize> = g
            .candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != g.target_index)
            .map(|(_, &c)| items[c].id)
            .collect();
        let mut want: Vec<usize> = index.neighbors(items[g.target].id).unwrap().iter().map(|&(id, _)| id as usize).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
}

#[test]
fn easy_needs_no_index_and_hard_does() {
    let w = small_world();
    let mut rng = seed::rng(1, &[]);
    assert!(sample_game(&w.data.train, None, 4, Difficulty::Easy, false, &mut rng).is_ok());
    assert!(matches!(
        sample_game(&w.data.train, None, 4, Difficulty::Hard, false, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn ten_thousand_hard_games_stay_inside_top_k() {
    let w = small_world();
    let items = &w.data.train;
    let scorer = Scorer::new(SimilarityMetric::Hybrid { w_c: 0.5, caption: CaptionMetric::Tfidf }, items, items, w.vocab.len(), None).unwrap();
    let index = build_index(items, Split::Train, &scorer, 20, 0).unwrap();
    let mut rng = seed::rng(8, &[]);
    for n in 0..10_000 {
        let g = sample_game(items, Some(&index), 4, Difficulty::Hard, n % 2 == 0, &mut rng).unwrap();
        assert_eq!(g.candidates[g.target_index], g.target);
        let list = index.neighbors(items[g.target].id).unwrap();
        for (i, &c) in g.candidates.iter().enumerate() {
            if i != g.target_index {
                assert!(list.iter().any(|&(id, _)| id as usize == items[c].id));
            }
        }
    }
}

fn scene_world() -> Vec<Item> {
    // several items share a scene so the same-scene exclusion matters
    let w = small_world();
    let mut items = w.data.train[..40].to_vec();
    for i in 0..10 {
        let mut copy = items[i].clone();
        copy.id = 1000 + i;
        items.push(copy);
    }
    items
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn easy_games_are_well_formed(seed_value in any::<u64>(), n in 1usize..8) {
        let items = scene_world();
        let mut rng = seed::rng(seed_value, &[]);
        let g = sample_game(&items, None, n, Difficulty::Easy, false, &mut rng).unwrap();
        prop_assert_eq!(g.candidates.len(), n + 1);
        prop_assert_eq!(g.candidates[g.target_index], g.target);
        let mut uniq = g.candidates.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n + 1);
        for (i, &c) in g.candidates.iter().enumerate() {
            if i != g.target_index {
                prop_assert!(items[c].scene != items[g.target].scene);
            }
        }
    }
}

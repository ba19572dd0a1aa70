use proptest::prelude::*;
use rand::seq::SliceRandom;
use refgame::agents::{to_f64, ListenerConfig, ListenerNet};
use refgame::distractors::{sample_game, Difficulty};
use refgame::evalkit::*;
use refgame::seed;
use refgame::world::{build_dataset, Caption, PosTag, World, WorldConfig};

fn world() -> World {
    build_dataset(&WorldConfig {
        n_items: 1000,
        d_img: 16,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn lm_distributions_are_normalized() {
    let w = world();
    let corpus = || w.data.train.iter().map(|i| i.caption.tokens.as_slice());
    for (order, alpha) in [(1, 0.0), (1, 0.1), (2, 0.01), (3, 0.01), (3, 1.0)] {
        let lm = NgramLM::train(corpus(), w.vocab.len(), order, alpha).unwrap();
        // a seen and an unseen context
        let seen = vec![refgame::world::BOS; order - 1];
        let unseen = vec![refgame::world::EOS; order - 1];
        for ctx in [seen, unseen] {
            let total: f64 = lm.support().iter().map(|&t| lm.prob(&ctx, t)).sum();
            assert!((total - 1.0).abs() < 1e-9, "order {order} alpha {alpha}: {total}");
        }
    }
}

#[test]
fn unigram_count_ratio() {
    // "a a b" with a=3, b=4; the end-of-utterance event is counted too
    let lm = NgramLM::train([&[3usize, 3, 4][..]], 5, 1, 0.0).unwrap();
    let eos = refgame::world::EOS;
    assert!((lm.prob(&[], 3) - 0.5).abs() < 1e-15);
    // over words alone the ratio is 2/3
    let words = lm.prob(&[], 3) / (1.0 - lm.prob(&[], eos));
    assert!((words - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn trigram_perplexity_beats_unigram_and_shuffles_lose_fluency() {
    let w = world();
    let corpus = || w.data.train.iter().map(|i| i.caption.tokens.as_slice());
    let lms = FluencyModels::train(&w.data.train, w.vocab.len(), FluencyConfig::default()).unwrap();
    let (pu, pm) = (lms.p_u.perplexity(corpus()), lms.p_m.perplexity(corpus()));
    assert!(pm <= pu, "trigram {pm} vs unigram {pu}");

    let mut rng = seed::rng(3, &[]);
    let (mut gold, mut shuffled) = (0.0, 0.0);
    for item in &w.data.val {
        let mut s = item.caption.tokens.clone();
        s.shuffle(&mut rng);
        gold += lms.fluency(&item.caption.tokens);
        shuffled += lms.fluency(&s);
    }
    assert!(gold > shuffled, "{gold} vs {shuffled}");
    assert_eq!(fluency(&w.data.val[0].caption.tokens, &lms.p_u, &lms.p_u), 0.0);
}

#[test]
fn gold_eval_upper_bounds() {
    let w = world();
    let lms = FluencyModels::train(&w.data.train, w.vocab.len(), FluencyConfig::default()).unwrap();
    let l = ListenerNet::new(ListenerConfig { d_w: 8, hidden: 16, joint: 16 }, w.vocab.len(), 16, 1).unwrap();
    let cfg = GoldConfig {
        n_candidates: 5,
        episodes: 200,
        difficulty: Difficulty::Easy,
        thresholds: Default::default(),
        reward: Default::default(),
        seed: 4,
    };
    let (r, eps) = gold_standard_eval(&l, &w.data.val, None, &cfg, &lms, &w.tag_table()).unwrap();
    assert_eq!(r.bleu, 1.0);
    assert!(r.pos_f1.values().all(|&f| f == 1.0));
    assert_eq!(r.n_episodes, 200);
    let wrong = eps.iter().filter(|e| e.choice.is_some_and(|c| c != e.target_index)).count() as f64 / 200.0;
    assert!((r.acc + wrong + r.noop_rate - 1.0).abs() < 1e-12);
    let again = gold_standard_eval(&l, &w.data.val, None, &cfg, &lms, &w.tag_table()).unwrap().0;
    assert_eq!(again, r);
}

#[test]
fn uniform_tom_agrees_at_chance() {
    // a uniform internal listener breaks ties to index 0, the listener's
    // choice is spread over the candidates
    let w = world();
    let l = ListenerNet::new(ListenerConfig { d_w: 8, hidden: 16, joint: 16 }, w.vocab.len(), 16, 7).unwrap();
    let mut rng = seed::rng(11, &[]);
    let mut eps = Vec::new();
    for _ in 0..2000 {
        let g = sample_game(&w.data.val, None, 4, Difficulty::Easy, false, &mut rng).unwrap();
        let cands: Vec<Vec<f64>> = g.candidates.iter().map(|&c| to_f64(&w.data.val[c].image.features)).collect();
        let caption = &w.data.val[g.target].caption;
        let probs = l.probs(&caption.tokens, &cands).unwrap();
        let uniform = vec![0.2; 5];
        eps.push(EpisodeSummary {
            target_index: g.target_index,
            choice: nnkit::argmax(&probs),
            tom_choice: nnkit::argmax(&uniform),
            utterance: caption.tokens.clone(),
            reference: caption.clone(),
            reward: 0.0,
        });
    }
    let acc = tom_accuracy(&eps).unwrap();
    assert!((acc - 0.2).abs() < 0.04, "{acc}");
    // identical internal listener agrees always
    for e in &mut eps {
        e.tom_choice = e.choice;
    }
    assert_eq!(tom_accuracy(&eps), Some(1.0));
}

#[test]
fn bleu_reference_example() {
    // a red circle / a small red circle
    let (a, small, red, circle) = (3usize, 4, 5, 6);
    let got = bleu(&[&[a, red, circle]], &[&[a, small, red, circle]]).unwrap();
    // p1 = 1, p2 = 1/2, p3 = 1/2 (smoothed), p4 = 1 (smoothed), BP = exp(-1/3)
    let want = (-1.0f64 / 3.0).exp() * 0.25f64.powf(0.25);
    assert!((got - want).abs() < 1e-12);
}

fn sentences() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(3usize..12, 1..10), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bleu_is_order_invariant_and_one_on_identity(c in sentences(), r in sentences(), rot in 0usize..8) {
        let n = c.len().min(r.len());
        let c: Vec<&[usize]> = c[..n].iter().map(|s| s.as_slice()).collect();
        let r: Vec<&[usize]> = r[..n].iter().map(|s| s.as_slice()).collect();
        let b = bleu(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(rot % n);
        r2.rotate_left(rot % n);
        prop_assert_eq!(bleu(&c2, &r2).unwrap(), b);
        prop_assert_eq!(bleu(&r, &r).unwrap(), 1.0);
    }

    #[test]
    fn pos_f1_is_bounded_and_one_on_identity(u in sentences(), tags in prop::collection::vec(0usize..4, 12)) {
        let table: Vec<Option<PosTag>> = (0..12).map(|t| if t < 3 { None } else { Some(PosTag::ALL[tags[t] % PosTag::ALL.len()]) }).collect();
        let refs: Vec<Caption> = u.iter().map(|s| Caption {
            tokens: s.clone(),
            pos_tags: s.iter().map(|&t| table[t].unwrap()).collect(),
        }).collect();
        let rr: Vec<&Caption> = refs.iter().collect();
        let us: Vec<&[usize]> = u.iter().map(|s| s.as_slice()).collect();
        let rev: Vec<Vec<usize>> = u.iter().map(|s| s.iter().rev().skip(1).copied().collect()).collect();
        let rv: Vec<&[usize]> = rev.iter().map(|s| s.as_slice()).collect();
        for tag in PosTag::ALL {
            prop_assert_eq!(pos_f1(&us, &rr, &table, tag).unwrap(), 1.0);
            let f = pos_f1(&rv, &rr, &table, tag).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}

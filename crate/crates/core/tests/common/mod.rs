//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use refgame::agents::ListenerNet;
use refgame::distractors::{CaptionMetric, SimilarityIndex, SimilarityMetric};
use refgame::world::Item;

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu.sqrt() * nv.sqrt())
    }
}

fn caption_vectors(kind: CaptionMetric, items: &[Item], corpus: &[Item], vocab: usize, enc: Option<&ListenerNet>) -> Vec<Vec<f64>> {
    match kind {
        CaptionMetric::Onehot => items
            .iter()
            .map(|i| {
                let mut v = vec![0.0; vocab];
                for &t in &i.caption.tokens {
                    v[t] = 1.0;
                }
                v
            })
            .collect(),
        CaptionMetric::Tfidf => {
            let n = corpus.len() as f64;
            let df: Vec<f64> = (0..vocab)
                .map(|t| corpus.iter().filter(|c| c.caption.tokens.contains(&t)).count().max(1) as f64)
                .collect();
            items
                .iter()
                .map(|i| {
                    let mut v = vec![0.0; vocab];
                    for &t in &i.caption.tokens {
                        v[t] += 1.0;
                    }
                    (0..vocab).map(|t| v[t] * (n / df[t]).ln()).collect()
                })
                .collect()
        }
        CaptionMetric::Dense => items
            .iter()
            .map(|i| enc.expect("encoder").text_vector(&i.caption.tokens).unwrap())
            .collect(),
    }
}

/// All-pairs similarity matrix computed from scratch.
pub fn brute_force_similarities(
    metric: SimilarityMetric,
    items: &[Item],
    corpus: &[Item],
    vocab: usize,
    enc: Option<&ListenerNet>,
) -> Vec<Vec<f64>> {
    let visual: Vec<Vec<f64>> = items
        .iter()
        .map(|i| i.image.features.iter().map(|&x| x as f64).collect())
        .collect();
    let (kind, w_c) = match metric {
        SimilarityMetric::Visual => (None, 0.0),
        SimilarityMetric::CaptionOnehot => (Some(CaptionMetric::Onehot), 1.0),
        SimilarityMetric::CaptionTfidf => (Some(CaptionMetric::Tfidf), 1.0),
        SimilarityMetric::CaptionDense => (Some(CaptionMetric::Dense), 1.0),
        SimilarityMetric::Hybrid { w_c, caption } => (Some(caption), w_c),
    };
    let caption = kind.map(|k| caption_vectors(k, items, corpus, vocab, enc));
    let n = items.len();
    let mut sims = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let vis = if w_c < 1.0 { cos(&visual[a], &visual[b]) } else { 0.0 };
            let cap = caption.as_ref().map_or(0.0, |c| cos(&c[a], &c[b]));
            sims[a][b] = w_c * cap + (1.0 - w_c) * vis;
        }
    }
    sims
}

/// Checks that every list is a correct top-K of the brute-force ranking:
/// self excluded, scores agree, and the chosen neighbors' scores equal the
/// K best scores (ties may be permuted only within 1e-9).
pub fn check_index(index: &SimilarityIndex, items: &[Item], sims: &[Vec<f64>], k: usize) -> Result<(), String> {
    let base = items[0].id;
    for (a, item) in items.iter().enumerate() {
        let list = index.neighbors(item.id).ok_or(format!("item {} missing", item.id))?;
        if list.len() != k {
            return Err(format!("item {}: list has {} entries", item.id, list.len()));
        }
        let mut ours: Vec<f64> = Vec::with_capacity(k);
        let mut seen = std::collections::HashSet::new();
        for &(id, s) in list {
            let b = id as usize - base;
            if b == a || !seen.insert(b) {
                return Err(format!("item {}: self or duplicate neighbor {id}", item.id));
            }
            if (sims[a][b] - s as f64).abs() > 1e-5 {
                return Err(format!("item {}: neighbor {id} stored {s}, oracle {}", item.id, sims[a][b]));
            }
            ours.push(sims[a][b]);
        }
        if ours.windows(2).any(|w| w[1] > w[0] + 1e-9) {
            return Err(format!("item {}: list not sorted", item.id));
        }
        let mut all: Vec<f64> = (0..items.len()).filter(|&b| b != a).map(|b| sims[a][b]).collect();
        all.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ours.iter().zip(&all[..k]) {
            if (x - y).abs() > 1e-9 {
                return Err(format!("item {}: top-K scores differ ({x} vs {y})", item.id));
            }
        }
    }
    Ok(())
}

/// A small world with a briefly pretrained listener and everything a
/// trainer borrows.
pub struct Fixture {
    pub world: refgame::world::World,
    pub listener: ListenerNet,
    pub lms: refgame::evalkit::FluencyModels,
    pub tags: Vec<Option<refgame::world::PosTag>>,
}

impl Fixture {
    pub fn new(pretrain_steps: usize) -> Self {
        use refgame::agents::{pretrain_listener, ListenerConfig, PretrainConfig};
        use refgame::evalkit::{FluencyConfig, FluencyModels};
        let world = refgame::world::build_dataset(&refgame::world::WorldConfig {
            n_items: 500,
            d_img: 16,
            ..Default::default()
        })
        .unwrap();
        let v = world.vocab.len();
        let mut listener = ListenerNet::new(ListenerConfig { d_w: 8, hidden: 16, joint: 16 }, v, 16, 3).unwrap();
        let pc = PretrainConfig {
            steps: pretrain_steps,
            eval_interval: pretrain_steps.max(1),
            eval_trials: 50,
            ..Default::default()
        };
        if pretrain_steps > 0 {
            pretrain_listener(&mut listener, &world.data.train, &world.data.val, &pc).unwrap();
        }
        let lms = FluencyModels::train(&world.data.train, v, FluencyConfig::default()).unwrap();
        let tags = world.tag_table();
        Self { world, listener, lms, tags }
    }

    pub fn ctx(&self) -> refgame::trainer::TrainContext<'_> {
        refgame::trainer::TrainContext {
            train: &self.world.data.train,
            val: &self.world.data.val,
            train_index: None,
            val_index: None,
            listener: &self.listener,
            lms: &self.lms,
            tag_table: &self.tags,
        }
    }
}

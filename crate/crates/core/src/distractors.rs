//! Similarity-based distractor mining: visual, caption and hybrid metrics,
//! exact top-K neighbor indices persisted to disk, and game sampling with
//! easy (uniform) or hard (top-K) distractors.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nnkit::Graph;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agents::{strip_eos, to_f64, ListenerNet};
use crate::seed::Rng;
use crate::world::{Item, Split};
use crate::{Error, Result};

/// Cosine similarity; a zero vector has similarity 0 with everything.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// `w_c * caption_sim + (1 - w_c) * visual_sim`.
pub fn hybrid_score(visual_sim: f64, caption_sim: f64, w_c: f64) -> f64 {
    w_c * caption_sim + (1.0 - w_c) * visual_sim
}

/// Document frequencies over a caption corpus of token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    pub df: Vec<usize>,
    pub n_docs: usize,
}

impl TfidfModel {
    pub fn fit<'a>(captions: impl IntoIterator<Item = &'a [usize]>, vocab_size: usize) -> Result<Self> {
        let mut df = vec![0usize; vocab_size];
        let mut n_docs = 0;
        let mut seen = vec![usize::MAX; vocab_size];
        for (d, cap) in captions.into_iter().enumerate() {
            n_docs += 1;
            for &t in cap {
                let slot = seen
                    .get_mut(t)
                    .ok_or_else(|| Error::Argument(format!("token {t} outside vocabulary")))?;
                if *slot != d {
                    *slot = d;
                    df[t] += 1;
                }
            }
        }
        if n_docs == 0 {
            return Err(Error::Argument("tf-idf needs a non-empty corpus".into()));
        }
        Ok(Self { df, n_docs })
    }

    /// `ln(N / df)`; tokens never seen are treated as `df = 1`.
    pub fn idf(&self, token: usize) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }

    /// Dense tf-idf vector over the vocabulary with raw counts as tf.
    pub fn vector(&self, caption: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.df.len()];
        for &t in caption {
            if t < v.len() {
                v[t] += 1.0;
            }
        }
        v.iter_mut().enumerate().for_each(|(t, x)| *x *= self.idf(t));
        v
    }
}

pub fn onehot_vector(caption: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab_size];
    caption.iter().filter(|&&t| t < vocab_size).for_each(|&t| v[t] = 1.0);
    v
}

/// The pretrained listener's caption embedding `L(u)`.
pub fn caption_dense_vector(encoder: Option<&ListenerNet>, caption: &[usize]) -> Result<Vec<f64>> {
    let enc = encoder.ok_or_else(|| Error::Config("dense caption similarity needs a listener checkpoint".into()))?;
    let mut g = Graph::new(&enc.store);
    let node = enc.encode_text(&mut g, caption)?;
    Ok(g.value(node).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMetric {
    Onehot,
    Tfidf,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SimilarityMetric {
    Visual,
    CaptionOnehot,
    CaptionTfidf,
    CaptionDense,
    /// Weighted mix of visual and caption similarity.
    Hybrid { w_c: f64, caption: CaptionMetric },
}

impl SimilarityMetric {
    pub fn validate(&self) -> Result<()> {
        if let SimilarityMetric::Hybrid { w_c, .. } = self {
            if !(0.0..=1.0).contains(w_c) {
                return Err(Error::Config(format!("w_c must be in [0, 1], got {w_c}")));
            }
        }
        Ok(())
    }

    pub fn needs_encoder(&self) -> bool {
        matches!(
            self,
            SimilarityMetric::CaptionDense
                | SimilarityMetric::Hybrid {
                    caption: CaptionMetric::Dense,
                    ..
                }
        )
    }

    pub fn all_variants(w_c: f64) -> [SimilarityMetric; 5] {
        [
            SimilarityMetric::Visual,
            SimilarityMetric::CaptionOnehot,
            SimilarityMetric::CaptionTfidf,
            SimilarityMetric::CaptionDense,
            SimilarityMetric::Hybrid {
                w_c,
                caption: CaptionMetric::Tfidf,
            },
        ]
    }
}

impl TryFrom<String> for SimilarityMetric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SimilarityMetric> for String {
    fn from(m: SimilarityMetric) -> String {
        m.to_string()
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    /// `visual`, `caption_onehot`, `caption_tfidf`, `caption_dense`, or
    /// `hybrid[:w_c[:onehot|tfidf|dense]]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or_default();
        let m = match head {
            "visual" => SimilarityMetric::Visual,
            "caption_onehot" => SimilarityMetric::CaptionOnehot,
            "caption_tfidf" => SimilarityMetric::CaptionTfidf,
            "caption_dense" => SimilarityMetric::CaptionDense,
            "hybrid" => {
                let w_c = match parts.next() {
                    Some(w) => w.parse().map_err(|_| Error::Config(format!("bad w_c `{w}`")))?,
                    None => 0.5,
                };
                let caption = match parts.next() {
                    None | Some("tfidf") => CaptionMetric::Tfidf,
                    Some("onehot") => CaptionMetric::Onehot,
                    Some("dense") => CaptionMetric::Dense,
                    Some(o) => return Err(Error::Config(format!("unknown caption metric `{o}`"))),
                };
                SimilarityMetric::Hybrid { w_c, caption }
            }
            _ => return Err(Error::Config(format!("unknown similarity metric `{s}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("malformed similarity metric `{s}`")));
        }
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityMetric::Visual => f.write_str("visual"),
            SimilarityMetric::CaptionOnehot => f.write_str("caption_onehot"),
            SimilarityMetric::CaptionTfidf => f.write_str("caption_tfidf"),
            SimilarityMetric::CaptionDense => f.write_str("caption_dense"),
            SimilarityMetric::Hybrid { w_c, caption } => {
                let c = match caption {
                    CaptionMetric::Onehot => "onehot",
                    CaptionMetric::Tfidf => "tfidf",
                    CaptionMetric::Dense => "dense",
                };
                write!(f, "hybrid:{w_c}:{c}")
            }
        }
    }
}

/// Per-item vectors whose pairwise cosines give the metric.
pub struct Scorer {
    metric: SimilarityMetric,
    visual: Vec<Vec<f64>>,
    caption: Vec<Vec<f64>>,
}

impl Scorer {
    /// `corpus` fits the tf-idf statistics; `items` are the items scored.
    pub fn new(
        metric: SimilarityMetric,
        items: &[Item],
        corpus: &[Item],
        vocab_size: usize,
        encoder: Option<&ListenerNet>,
    ) -> Result<Self> {
        metric.validate()?;
        let caption_kind = match metric {
            SimilarityMetric::Visual => None,
            SimilarityMetric::CaptionOnehot => Some(CaptionMetric::Onehot),
            SimilarityMetric::CaptionTfidf => Some(CaptionMetric::Tfidf),
            SimilarityMetric::CaptionDense => Some(CaptionMetric::Dense),
            SimilarityMetric::Hybrid { caption, .. } => Some(caption),
        };
        let visual = if matches!(metric, SimilarityMetric::Visual | SimilarityMetric::Hybrid { .. }) {
            items.iter().map(|i| to_f64(&i.image.features)).collect()
        } else {
            Vec::new()
        };
        let caption = match caption_kind {
            None => Vec::new(),
            Some(CaptionMetric::Onehot) => items
                .iter()
                .map(|i| onehot_vector(&i.caption.tokens, vocab_size))
                .collect(),
            Some(CaptionMetric::Tfidf) => {
                let model = TfidfModel::fit(corpus.iter().map(|i| i.caption.tokens.as_slice()), vocab_size)?;
                items.iter().map(|i| model.vector(&i.caption.tokens)).collect()
            }
            Some(CaptionMetric::Dense) => items
                .iter()
                .map(|i| caption_dense_vector(encoder, strip_eos(&i.caption.tokens)))
                .collect::<Result<_>>()?,
        };
        Ok(Self { metric, visual, caption })
    }

    pub fn score(&self, a: usize, b: usize) -> f64 {
        match self.metric {
            SimilarityMetric::Visual => cosine(&self.visual[a], &self.visual[b]),
            SimilarityMetric::Hybrid { w_c, .. } => hybrid_score(
                cosine(&self.visual[a], &self.visual[b]),
                cosine(&self.caption[a], &self.caption[b]),
                w_c,
            ),
            _ => cosine(&self.caption[a], &self.caption[b]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexDescriptor {
    pub metric: SimilarityMetric,
    pub split: Split,
}

/// Ranked neighbor lists for every item of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    pub descriptor: IndexDescriptor,
    pub k: usize,
    pub fingerprint: u64,
    /// Item id and its `(neighbor id, score)` list, best first.
    pub lists: Vec<(u32, Vec<(u32, f32)>)>,
    by_id: HashMap<u32, usize>,
}

pub const INDEX_MAGIC: &[u8; 4] = b"RGIX";
pub const INDEX_VERSION: u32 = 1;

/// Exact top-K within `items`, self excluded, ties broken by lower id.
pub fn build_index(
    items: &[Item],
    split: Split,
    scorer: &Scorer,
    k: usize,
    fingerprint: u64,
) -> Result<SimilarityIndex> {
    if k == 0 || k >= items.len() {
        return Err(Error::Config(format!("K must be in 1..{}, got {k}", items.len())));
    }
    let mut lists = Vec::with_capacity(items.len());
    let mut row: Vec<(f64, u32)> = Vec::with_capacity(items.len());
    let order = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    for (a, item) in items.iter().enumerate() {
        row.clear();
        row.extend(
            items
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(b, other)| (scorer.score(a, b), other.id as u32)),
        );
        row.select_nth_unstable_by(k - 1, order);
        row.truncate(k);
        row.sort_unstable_by(order);
        lists.push((item.id as u32, row.iter().map(|&(s, id)| (id, s as f32)).collect()));
    }
    Ok(SimilarityIndex::from_lists(
        IndexDescriptor {
            metric: scorer.metric,
            split,
        },
        k,
        fingerprint,
        lists,
    ))
}

impl SimilarityIndex {
    fn from_lists(descriptor: IndexDescriptor, k: usize, fingerprint: u64, lists: Vec<(u32, Vec<(u32, f32)>)>) -> Self {
        let by_id = lists.iter().enumerate().map(|(p, (id, _))| (*id, p)).collect();
        Self {
            descriptor,
            k,
            fingerprint,
            lists,
            by_id,
        }
    }

    pub fn neighbors(&self, item_id: usize) -> Option<&[(u32, f32)]> {
        self.by_id.get(&(item_id as u32)).map(|&p| self.lists[p].1.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let desc = serde_json::to_vec(&self.descriptor)?;
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(&desc)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.lists.len() as u32).to_le_bytes())?;
        for (id, list) in &self.lists {
            w.write_all(&id.to_le_bytes())?;
            for (n, s) in list {
                w.write_all(&n.to_le_bytes())?;
                w.write_all(&s.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads an index, failing with a stale-artifact error when it was built
    /// from a different corpus.
    pub fn load(path: &Path, expected_fingerprint: u64) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not a similarity index".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mut desc = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut desc)?;
        let descriptor: IndexDescriptor = serde_json::from_slice(&desc)?;
        let k = read_u32(&mut r)? as usize;
        let mut fp = [0u8; 8];
        r.read_exact(&mut fp)?;
        let fingerprint = u64::from_le_bytes(fp);
        if fingerprint != expected_fingerprint {
            return Err(Error::Stale(format!(
                "index fingerprint {fingerprint:016x} does not match corpus {expected_fingerprint:016x}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        let mut lists = Vec::with_capacity(n);
        for _ in 0..n {
            let id = read_u32(&mut r)?;
            let list = (0..k)
                .map(|_| Ok((read_u32(&mut r)?, f32::from_bits(read_u32(&mut r)?))))
                .collect::<Result<Vec<_>>>()?;
            lists.push((id, list));
        }
        Ok(Self::from_lists(descriptor, k, fingerprint, lists))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Config(format!("unknown distractor mode `{s}`"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

/// One game over positions into a split's item list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Game {
    pub target: usize,
    pub candidates: Vec<usize>,
    pub target_index: usize,
}

/// Draws a target uniformly, then `n_distractors` distractors: uniformly
/// from the other items showing a different scene (easy) or uniformly from
/// the target's top-K list (hard), optionally weighted by `1 / rank`. The
/// target is inserted at a uniform position.
pub fn sample_game(
    items: &[Item],
    index: Option<&SimilarityIndex>,
    n_distractors: usize,
    mode: Difficulty,
    rank_weighted: bool,
    rng: &mut Rng,
) -> Result<Game> {
    if items.len() <= n_distractors {
        return Err(Error::Sampling("split smaller than a game".into()));
    }
    let target = rng.random_range(0..items.len());
    let mut distractors = match mode {
        Difficulty::Easy => easy_distractors(items, target, n_distractors, rng)?,
        Difficulty::Hard => {
            let index = index.ok_or_else(|| Error::Config("hard distractors need a similarity index".into()))?;
            let list = index
                .neighbors(items[target].id)
                .ok_or_else(|| Error::Sampling(format!("item {} missing from index", items[target].id)))?;
            if list.len() < n_distractors {
                return Err(Error::Sampling(format!(
                    "top-K list has {} entries, need {n_distractors}",
                    list.len()
                )));
            }
            let picks = if rank_weighted {
                rank_weighted_picks(list.len(), n_distractors, rng)
            } else {
                sample_indices(rng, list.len(), n_distractors).into_vec()
            };
            let base = items[0].id;
            picks
                .into_iter()
                .map(|p| {
                    let id = list[p].0 as usize;
                    id.checked_sub(base)
                        .filter(|&pos| pos < items.len() && items[pos].id == id)
                        .ok_or_else(|| Error::Sampling(format!("neighbor {id} not in this split")))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let target_index = rng.random_range(0..=distractors.len());
    distractors.insert(target_index, target);
    Ok(Game {
        target,
        candidates: distractors,
        target_index,
    })
}

fn easy_distractors(items: &[Item], target: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * (n + 1) {
            return Err(Error::Sampling("could not find enough distinct distractors".into()));
        }
        let c = rng.random_range(0..items.len());
        if c == target || out.contains(&c) || items[c].scene == items[target].scene {
            continue;
        }
        out.push(c);
    }
    Ok(out)
}

fn rank_weighted_picks(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut weights: Vec<f64> = (0..len).map(|r| 1.0 / (r + 1) as f64).collect();
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        weights[pick] = 0.0;
        picks.push(pick);
    }
    picks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn hybrid_endpoints() {
        assert_eq!(hybrid_score(0.2, 0.8, 0.0), 0.2);
        assert_eq!(hybrid_score(0.2, 0.8, 1.0), 0.8);
        assert!((hybrid_score(0.2, 0.8, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tfidf_hand_values() {
        // red=0 circle=1 blue=2 square=3
        let corpus: [&[usize]; 3] = [&[0, 1], &[2, 1], &[0, 3]];
        let m = TfidfModel::fit(corpus, 4).unwrap();
        assert!((m.idf(0) - 1.5f64.ln()).abs() < 1e-15);
        assert!((m.idf(1) - 1.5f64.ln()).abs() < 1e-15);
        assert!((m.idf(2) - 3f64.ln()).abs() < 1e-15);
        let a = m.vector(&[0, 1]);
        let b = m.vector(&[0, 3]);
        let (l, s) = (1.5f64.ln(), 3f64.ln());
        // shared "red" only: l^2 / (sqrt(2) l * sqrt(l^2 + s^2))
        let want = l * l / ((2.0 * l * l).sqrt() * (l * l + s * s).sqrt());
        assert!((cosine(&a, &b) - want).abs() < 1e-12);
        let everywhere = TfidfModel::fit([&[5usize][..], &[5], &[5, 1]], 6).unwrap();
        assert_eq!(everywhere.idf(5), 0.0);
        assert!((everywhere.idf(4) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn metric_parse_round_trip() {
        for m in SimilarityMetric::all_variants(0.25) {
            assert_eq!(m.to_string().parse::<SimilarityMetric>().unwrap(), m);
        }
        assert!("hybrid:1.5".parse::<SimilarityMetric>().is_err());
        assert!("pixels".parse::<SimilarityMetric>().is_err());
    }

    #[test]
    fn rank_weighted_prefers_top() {
        let mut rng = crate::seed::rng(3, &[]);
        let mut first = 0;
        for _ in 0..2000 {
            let p = rank_weighted_picks(10, 2, &mut rng);
            assert_ne!(p[0], p[1]);
            if p.contains(&0) {
                first += 1;
            }
        }
        assert!(first > 1000);
    }
}

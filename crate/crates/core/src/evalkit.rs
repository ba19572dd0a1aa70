//! Game and language metrics: accuracy, internal-listener accuracy, BLEU-4,
//! n-gram reference models and fluency, per-tag POS F1, and the
//! gold-standard baseline that plays with ground-truth captions.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::agents::{reward, to_f64, FeedbackThresholds, ListenerNet, RewardConfig};
use crate::distractors::{sample_game, Difficulty, SimilarityIndex};
use crate::seed::{self, tag};
use crate::world::{bytes_fingerprint, Caption, Item, PosTag, BOS, EOS, PAD};
use crate::{Error, Result};

/// What the metrics need from one played game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub target_index: usize,
    pub choice: Option<usize>,
    /// Argmax of the internal listener over the candidates, when one exists.
    pub tom_choice: Option<usize>,
    /// Emitted words, EOS removed.
    pub utterance: Vec<usize>,
    pub reference: Caption,
    pub reward: f64,
}

/// Fraction of games won. NOOP counts as a loss unless `exclude_noop`, in
/// which case NOOP games leave the denominator (`None` if nothing remains).
pub fn accuracy(episodes: &[EpisodeSummary], exclude_noop: bool) -> Option<f64> {
    let pool: Vec<_> = episodes
        .iter()
        .filter(|e| !exclude_noop || e.choice.is_some())
        .collect();
    if pool.is_empty() {
        return None;
    }
    let hits = pool.iter().filter(|e| e.choice == Some(e.target_index)).count();
    Some(hits as f64 / pool.len() as f64)
}

pub fn noop_rate(episodes: &[EpisodeSummary]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().filter(|e| e.choice.is_none()).count() as f64 / episodes.len() as f64
}

/// Among games where the listener acted, how often the internal listener's
/// argmax equals the listener's choice. `None` when no game qualifies.
pub fn tom_accuracy(episodes: &[EpisodeSummary]) -> Option<f64> {
    let acted: Vec<_> = episodes
        .iter()
        .filter_map(|e| Some((e.choice?, e.tom_choice?)))
        .collect();
    if acted.is_empty() {
        return None;
    }
    Some(acted.iter().filter(|(c, t)| c == t).count() as f64 / acted.len() as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with uniform weights and the standard brevity penalty.
/// A zero modified precision for n >= 2 is replaced by `(0 + 1) / (total + 1)`;
/// a zero unigram precision makes the score 0.
pub fn bleu(candidates: &[&[usize]], references: &[&[usize]]) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Argument("BLEU needs aligned, non-empty corpora".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, cnt) in ngram_counts(c, n) {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    if c_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matched[n] == 0 {
            1.0 / (total[n] + 1) as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Additively smoothed n-gram model over the non-reserved tokens plus EOS,
/// with contexts left-padded by BOS.
#[derive(Debug, Clone)]
pub struct NgramLM {
    pub order: usize,
    pub alpha: f64,
    pub fingerprint: u64,
    support: Vec<usize>,
    counts: HashMap<Vec<usize>, (usize, HashMap<usize, usize>)>,
}

impl NgramLM {
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a [usize]>, vocab_size: usize, order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be >= 1".into()));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config("smoothing constant must be >= 0".into()));
        }
        let mut counts: HashMap<Vec<usize>, (usize, HashMap<usize, usize>)> = HashMap::new();
        let mut hash_bytes = Vec::new();
        let mut n_sent = 0;
        for sent in corpus {
            n_sent += 1;
            let words = crate::agents::strip_eos(sent);
            for &t in words {
                hash_bytes.extend((t as u32).to_le_bytes());
            }
            hash_bytes.extend(u32::MAX.to_le_bytes());
            let padded: Vec<usize> = std::iter::repeat_n(BOS, order - 1)
                .chain(words.iter().copied())
                .chain(std::iter::once(EOS))
                .collect();
            for w in padded.windows(order) {
                let e = counts.entry(w[..order - 1].to_vec()).or_default();
                e.0 += 1;
                *e.1.entry(w[order - 1]).or_insert(0) += 1;
            }
        }
        if n_sent == 0 {
            return Err(Error::Argument("language model needs a non-empty corpus".into()));
        }
        let support = (0..vocab_size).filter(|&t| t != PAD && t != BOS).collect();
        Ok(Self {
            order,
            alpha,
            fingerprint: bytes_fingerprint(&hash_bytes),
            support,
            counts,
        })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// `(c(ctx, w) + alpha) / (c(ctx) + alpha |V|)`; an unseen context with
    /// no smoothing falls back to uniform.
    pub fn prob(&self, context: &[usize], token: usize) -> f64 {
        let v = self.support.len() as f64;
        let ctx = &context[context.len() + 1 - self.order..];
        match self.counts.get(ctx) {
            Some((total, next)) => {
                let c = next.get(&token).copied().unwrap_or(0) as f64;
                let denom = *total as f64 + self.alpha * v;
                (c + self.alpha) / denom
            }
            None => 1.0 / v,
        }
    }

    /// Natural-log probability of `words` followed by EOS.
    pub fn logprob(&self, words: &[usize]) -> f64 {
        let padded: Vec<usize> = std::iter::repeat_n(BOS, self.order - 1)
            .chain(words.iter().copied())
            .chain(std::iter::once(EOS))
            .collect();
        padded
            .windows(self.order)
            .map(|w| self.prob(&w[..self.order - 1], w[self.order - 1]).max(nnkit::PROB_FLOOR).ln())
            .sum()
    }

    /// Per-token perplexity over a corpus, EOS included.
    pub fn perplexity<'a>(&self, corpus: impl IntoIterator<Item = &'a [usize]>) -> f64 {
        let (mut lp, mut n) = (0.0, 0usize);
        for s in corpus {
            let w = crate::agents::strip_eos(s);
            lp += self.logprob(w);
            n += w.len() + 1;
        }
        (-lp / n.max(1) as f64).exp()
    }
}

/// `(ln p_M(u) - ln p_U(u)) / |u|` where `|u|` counts the words plus EOS.
pub fn fluency(words: &[usize], p_u: &NgramLM, p_m: &NgramLM) -> f64 {
    (p_m.logprob(words) - p_u.logprob(words)) / (words.len() + 1) as f64
}

/// Reference models for fluency: a unigram `p_U` and an order-`order` `p_M`.
#[derive(Debug, Clone)]
pub struct FluencyModels {
    pub p_u: NgramLM,
    pub p_m: NgramLM,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyConfig {
    pub order: usize,
    pub alpha_u: f64,
    pub alpha_m: f64,
}

impl Default for FluencyConfig {
    fn default() -> Self {
        Self {
            order: 3,
            alpha_u: 0.1,
            alpha_m: 0.01,
        }
    }
}

impl FluencyModels {
    pub fn train(items: &[Item], vocab_size: usize, cfg: FluencyConfig) -> Result<Self> {
        let corpus = || items.iter().map(|i| i.caption.tokens.as_slice());
        Ok(Self {
            p_u: NgramLM::train(corpus(), vocab_size, 1, cfg.alpha_u)?,
            p_m: NgramLM::train(corpus(), vocab_size, cfg.order, cfg.alpha_m)?,
        })
    }

    pub fn fluency(&self, words: &[usize]) -> f64 {
        fluency(words, &self.p_u, &self.p_m)
    }
}

/// Mean over pairs of the multiset F1 between the utterance tokens tagged
/// `tag` (via `tag_table`) and the reference tokens carrying gold tag `tag`.
/// A pair with no such tokens on either side scores 1; on one side only, 0.
pub fn pos_f1(utterances: &[&[usize]], references: &[&Caption], tag_table: &[Option<PosTag>], tag: PosTag) -> Result<f64> {
    if utterances.len() != references.len() || utterances.is_empty() {
        return Err(Error::Argument("POS F1 needs aligned, non-empty lists".into()));
    }
    let mut sum = 0.0;
    for (u, r) in utterances.iter().zip(references) {
        let mut hyp: HashMap<usize, usize> = HashMap::new();
        for &t in u.iter() {
            if tag_table.get(t).copied().flatten() == Some(tag) {
                *hyp.entry(t).or_insert(0) += 1;
            }
        }
        let mut gold: HashMap<usize, usize> = HashMap::new();
        for (&t, &p) in r.tokens.iter().zip(&r.pos_tags) {
            if p == tag {
                *gold.entry(t).or_insert(0) += 1;
            }
        }
        let (nh, ng) = (hyp.values().sum::<usize>(), gold.values().sum::<usize>());
        sum += match (nh, ng) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ => {
                let overlap: usize = hyp.iter().map(|(t, c)| (*c).min(gold.get(t).copied().unwrap_or(0))).sum();
                if overlap == 0 {
                    0.0
                } else {
                    let p = overlap as f64 / nh as f64;
                    let r = overlap as f64 / ng as f64;
                    2.0 * p * r / (p + r)
                }
            }
        };
    }
    Ok(sum / utterances.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub tom_acc: Option<f64>,
    pub bleu: f64,
    pub fluency: f64,
    pub pos_f1: BTreeMap<PosTag, f64>,
    pub avg_len: f64,
    pub noop_rate: f64,
    pub reward_mean: f64,
    pub n_episodes: usize,
}

pub fn report(
    episodes: &[EpisodeSummary],
    lms: &FluencyModels,
    tag_table: &[Option<PosTag>],
    exclude_noop: bool,
) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::Argument("no episodes to report".into()));
    }
    let n = episodes.len() as f64;
    let utts: Vec<&[usize]> = episodes.iter().map(|e| e.utterance.as_slice()).collect();
    let refs: Vec<&Caption> = episodes.iter().map(|e| &e.reference).collect();
    let ref_tokens: Vec<&[usize]> = refs.iter().map(|c| c.tokens.as_slice()).collect();
    let mut pos = BTreeMap::new();
    for t in PosTag::ALL {
        pos.insert(t, pos_f1(&utts, &refs, tag_table, t)?);
    }
    Ok(MetricsReport {
        acc: accuracy(episodes, exclude_noop).unwrap_or(0.0),
        tom_acc: tom_accuracy(episodes),
        bleu: bleu(&utts, &ref_tokens)?,
        fluency: utts.iter().map(|u| lms.fluency(u)).sum::<f64>() / n,
        pos_f1: pos,
        avg_len: utts.iter().map(|u| u.len()).sum::<usize>() as f64 / n,
        noop_rate: noop_rate(episodes),
        reward_mean: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
        n_episodes: episodes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldConfig {
    pub n_candidates: usize,
    pub episodes: usize,
    pub difficulty: Difficulty,
    pub thresholds: FeedbackThresholds,
    pub reward: RewardConfig,
    pub seed: u64,
}

/// Plays games where the utterance is the target's ground-truth caption.
pub fn gold_standard_eval(
    listener: &ListenerNet,
    items: &[Item],
    index: Option<&SimilarityIndex>,
    cfg: &GoldConfig,
    lms: &FluencyModels,
    tag_table: &[Option<PosTag>],
) -> Result<(MetricsReport, Vec<EpisodeSummary>)> {
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut rng = seed::rng(cfg.seed, &[tag::EVAL, e as u64]);
        let game = sample_game(items, index, cfg.n_candidates - 1, cfg.difficulty, false, &mut rng)?;
        let cands: Vec<Vec<f64>> = game.candidates.iter().map(|&c| to_f64(&items[c].image.features)).collect();
        let caption = &items[game.target].caption;
        let resp = crate::agents::listener_respond(listener, &caption.tokens, &cands, caption, cfg.thresholds)?;
        episodes.push(EpisodeSummary {
            target_index: game.target_index,
            choice: resp.choice,
            tom_choice: None,
            utterance: caption.tokens.clone(),
            reference: caption.clone(),
            reward: reward(&resp, game.target_index, cfg.reward),
        });
    }
    Ok((report(&episodes, lms, tag_table, false)?, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(target: usize, choice: Option<usize>, tom: Option<usize>) -> EpisodeSummary {
        EpisodeSummary {
            target_index: target,
            choice,
            tom_choice: tom,
            utterance: vec![],
            reference: Caption {
                tokens: vec![],
                pos_tags: vec![],
            },
            reward: 0.0,
        }
    }

    #[test]
    fn accuracy_counting() {
        let all = vec![ep(0, Some(0), None); 4];
        assert_eq!(accuracy(&all, false), Some(1.0));
        let noop = vec![ep(0, None, None); 3];
        assert_eq!(accuracy(&noop, false), Some(0.0));
        assert_eq!(accuracy(&noop, true), None);
        let mixed = vec![
            ep(0, Some(0), None),
            ep(1, Some(1), None),
            ep(2, Some(2), None),
            ep(0, Some(1), None),
            ep(0, None, None),
        ];
        assert!((accuracy(&mixed, false).unwrap() - 0.6).abs() < 1e-15);
        assert!((accuracy(&mixed, true).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn tom_accuracy_masks_noop() {
        assert_eq!(tom_accuracy(&[ep(0, None, Some(0))]), None);
        let eps = [ep(0, Some(1), Some(1)), ep(0, Some(0), Some(1)), ep(0, None, Some(3))];
        assert_eq!(tom_accuracy(&eps), Some(0.5));
    }

    #[test]
    fn bleu_hand_example() {
        // a=1 small=2 red=3 circle=4
        let c: &[usize] = &[1, 3, 4];
        let r: &[usize] = &[1, 2, 3, 4];
        // p1 = 3/3, p2 = 1/2, p3 = (0+1)/(1+1), p4 = (0+1)/(0+1); BP = exp(1 - 4/3)
        let want = (1.0f64 - 4.0 / 3.0).exp() * (1.0f64 * 0.5 * 0.5 * 1.0).powf(0.25);
        assert!((bleu(&[c], &[r]).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.5067).abs() < 1e-4);
        assert_eq!(bleu(&[r], &[r]).unwrap(), 1.0);
        assert_eq!(bleu(&[&[7, 8]], &[r]).unwrap(), 0.0);
        assert_eq!(bleu(&[&[]], &[r]).unwrap(), 0.0);
    }

    #[test]
    fn unigram_counts() {
        // "a a b" with a=3, b=4; vocab {pad,bos,eos,a,b}
        let lm = NgramLM::train([&[3usize, 3, 4][..]], 5, 1, 0.0).unwrap();
        // EOS is an event too: a appears 2 of 4 times
        assert!((lm.prob(&[], 3) - 0.5).abs() < 1e-15);
        let total: f64 = lm.support().iter().map(|&t| lm.prob(&[], t)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fluency_hand_case() {
        // two-word utterance [3, 4] under hand tables
        let p_u = NgramLM::train([&[3usize][..], &[4]], 5, 1, 0.0).unwrap();
        let p_m = NgramLM::train([&[3usize, 4][..]], 5, 2, 0.0).unwrap();
        // p_U: a, b, eos each ... counts a=1 b=1 eos=2 of 4
        let lu = (0.25f64).ln() + (0.25f64).ln() + (0.5f64).ln();
        // p_M: bos->3 = 1, 3->4 = 1, 4->eos = 1
        let lm = 0.0;
        assert!((fluency(&[3, 4], &p_u, &p_m) - (lm - lu) / 3.0).abs() < 1e-12);
        assert_eq!(fluency(&[3, 4], &p_u, &p_u), 0.0);
    }

    #[test]
    fn pos_f1_hand_case() {
        // circle=5 square=6
        let table = vec![None, None, None, None, None, Some(PosTag::Noun), Some(PosTag::Noun)];
        let reference = Caption {
            tokens: vec![5, 6],
            pos_tags: vec![PosTag::Noun, PosTag::Noun],
        };
        let f = pos_f1(&[&[5]], &[&reference], &table, PosTag::Noun).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pos_f1(&[&[5]], &[&reference], &table, PosTag::Verb).unwrap(), 1.0);
        assert_eq!(pos_f1(&[&[5, 6]], &[&reference], &table, PosTag::Noun).unwrap(), 1.0);
        assert_eq!(pos_f1(&[&[]], &[&reference], &table, PosTag::Noun).unwrap(), 0.0);
    }
}

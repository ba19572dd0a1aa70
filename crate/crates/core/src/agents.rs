//! The speaker (image-conditioned recurrent decoder with a value head), the
//! external listener (dual encoder scored by dot product), the listener's
//! thresholded feedback controller, rewards and listener pretraining.

use std::path::Path;
use std::rc::Rc;

use nnkit::{
    argmax, optimizer_step, Checkpoint, Dense, Embedding, Graph, GruCell, NodeId, OptimConfig, OptimState,
    ParamStore,
};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{self, tag, Rng};
use crate::world::{Caption, Item, BOS, EOS, MAX_UTTERANCE_LEN, PAD};
use crate::{Error, Result};

/// Speaker output: token ids without BOS; a trailing EOS is kept when the
/// speaker chose to stop before the length limit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    /// Tokens before the first EOS.
    pub fn words(&self) -> &[usize] {
        strip_eos(&self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(p) => &tokens[..p],
        None => tokens,
    }
}

pub fn to_f64(features: &[f32]) -> Vec<f64> {
    features.iter().map(|&v| v as f64).collect()
}

/// Draws an index from a probability vector by inverting the cumulative sum.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the tail uncovered: take the last index with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub d_w: usize,
    pub hidden: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self { d_w: 32, hidden: 64 }
    }
}

/// Nodes produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    /// Masked log-distribution over the vocabulary.
    pub logp: NodeId,
    /// Scalar value estimate of the state the token is emitted from.
    pub value: NodeId,
}

/// Sampled utterance plus the sampling-time log-probabilities and values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSample {
    pub utterance: Utterance,
    pub logps: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpeakerSample {
    pub fn logprob(&self) -> f64 {
        self.logps.iter().sum()
    }
}

/// `h_0 = tanh(W_img x + b)`, `h_t = GRU(h_{t-1}, emb(u_{t-1}))` with `u_0 = <bos>`,
/// `P(u_t | u_<t, x) = softmax(W_out h_t + b)` restricted to non-reserved
/// tokens plus EOS, and `V_t = w_v . h_t + b_v`.
#[derive(Debug, Clone)]
pub struct SpeakerNet {
    pub store: ParamStore,
    pub config: SpeakerConfig,
    pub vocab_size: usize,
    pub d_img: usize,
    img: Dense,
    emb: Embedding,
    cell: GruCell,
    out: Dense,
    value: Dense,
    mask: Rc<Vec<bool>>,
}

impl SpeakerNet {
    pub fn new(config: SpeakerConfig, vocab_size: usize, d_img: usize, init_seed: u64) -> Result<Self> {
        if vocab_size <= EOS || config.d_w == 0 || config.hidden == 0 || d_img == 0 {
            return Err(Error::Config("speaker dimensions must be positive".into()));
        }
        let mut store = ParamStore::new(init_seed);
        let img = Dense::new(&mut store, "img", d_img, config.hidden)?;
        let emb = Embedding::new(&mut store, "emb", vocab_size, config.d_w)?;
        let cell = GruCell::new(&mut store, "dec", config.d_w, config.hidden)?;
        let out = Dense::new(&mut store, "out", config.hidden, vocab_size)?;
        let value = Dense::new(&mut store, "value", config.hidden, 1)?;
        let mask = Rc::new((0..vocab_size).map(|t| t != PAD && t != BOS).collect());
        Ok(Self {
            store,
            config,
            vocab_size,
            d_img,
            img,
            emb,
            cell,
            out,
            value,
            mask,
        })
    }

    fn check_image(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.d_img {
            return Err(Error::Argument(format!(
                "image has {} features, speaker expects {}",
                image.len(),
                self.d_img
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > MAX_UTTERANCE_LEN {
            return Err(Error::Argument(format!("utterance longer than {MAX_UTTERANCE_LEN}")));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.vocab_size || !self.mask[t]) {
            return Err(Error::Argument(format!("invalid speaker token {t}")));
        }
        if tokens.iter().position(|&t| t == EOS).is_some_and(|p| p + 1 != tokens.len()) {
            return Err(Error::Argument("token after EOS".into()));
        }
        Ok(())
    }

    pub fn init_state(&self, g: &mut Graph, image: &[f64]) -> Result<NodeId> {
        self.check_image(image)?;
        let x = g.input(image.to_vec());
        let pre = self.img.forward(g, x)?;
        Ok(g.tanh(pre))
    }

    /// One decoder step from `state` after consuming `prev`.
    pub fn step(&self, g: &mut Graph, state: NodeId, prev: usize) -> Result<(NodeId, StepNodes)> {
        let e = self.emb.lookup(g, prev)?;
        let h = self.cell.step(g, state, e)?;
        let logits = self.out.forward(g, h)?;
        let logp = g.log_softmax_masked(logits, Some(self.mask.clone()))?;
        let value = self.value.forward(g, h)?;
        Ok((h, StepNodes { logp, value }))
    }

    /// Teacher-forced pass; one [`StepNodes`] per token of `tokens`.
    pub fn unroll(&self, g: &mut Graph, image: &[f64], tokens: &[usize]) -> Result<Vec<StepNodes>> {
        self.check_tokens(tokens)?;
        let mut h = self.init_state(g, image)?;
        let mut prev = BOS;
        let mut steps = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let (nh, s) = self.step(g, h, prev)?;
            steps.push(s);
            h = nh;
            prev = t;
        }
        Ok(steps)
    }

    /// `log P(u_t | u_<t, x)` for each token.
    pub fn logprob(&self, image: &[f64], tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let steps = self.unroll(&mut g, image, tokens)?;
        Ok(steps
            .iter()
            .zip(tokens)
            .map(|(s, &t)| g.value(s.logp)[t])
            .collect())
    }

    /// Ancestral sampling at `temperature`; recorded log-probabilities are
    /// those of the untempered policy.
    pub fn sample(&self, image: &[f64], max_len: usize, temperature: f64, rng: &mut Rng) -> Result<SpeakerSample> {
        self.decode(image, max_len, Some((temperature, rng)))
    }

    pub fn greedy(&self, image: &[f64], max_len: usize) -> Result<SpeakerSample> {
        self.decode(image, max_len, None)
    }

    fn decode(&self, image: &[f64], max_len: usize, sampling: Option<(f64, &mut Rng)>) -> Result<SpeakerSample> {
        if max_len == 0 || max_len > MAX_UTTERANCE_LEN {
            return Err(Error::Argument(format!("max_len must be in 1..={MAX_UTTERANCE_LEN}")));
        }
        let mut sampling = sampling;
        if let Some((t, _)) = &sampling {
            if !(*t > 0.0) || !t.is_finite() {
                return Err(Error::Argument(format!("temperature must be positive, got {t}")));
            }
        }
        self.check_image(image)?;
        let st = &self.store;
        let mut h: Vec<f64> = self.img.apply(st, image)?.into_iter().map(f64::tanh).collect();
        let mut prev = BOS;
        let mut out = SpeakerSample {
            utterance: Utterance::default(),
            logps: Vec::new(),
            values: Vec::new(),
        };
        for _ in 0..max_len {
            h = self.cell.apply(st, &h, &self.emb.row(st, prev)?)?;
            let logp = nnkit::masked_log_softmax(&self.out.apply(st, &h)?, Some(&self.mask));
            let value = self.value.apply(st, &h)?[0];
            let logp = logp.as_slice();
            let token = match sampling.as_mut() {
                None => argmax(logp).expect("non-empty vocabulary"),
                Some((temp, rng)) => {
                    let scaled: Vec<f64> = logp.iter().map(|&l| l / *temp).collect();
                    let probs = nnkit::softmax(&scaled)?;
                    sample_index(&probs, rng)
                }
            };
            out.logps.push(logp[token]);
            out.values.push(value);
            out.utterance.tokens.push(token);
            if token == EOS {
                break;
            }
            prev = token;
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store("speaker", &self.store)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        expect_role(ck, "speaker")?;
        ck.load_into(&mut self.store)?;
        Ok(())
    }
}

fn expect_role(ck: &Checkpoint, role: &str) -> Result<()> {
    if ck.role != role {
        return Err(Error::Config(format!("checkpoint role `{}`, expected `{role}`", ck.role)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ListenerConfig {
    pub d_w: usize,
    pub hidden: usize,
    pub joint: usize,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self {
            d_w: 32,
            hidden: 64,
            joint: 64,
        }
    }
}

/// Dual encoder. `L(u)`: GRU over `<bos> u` from a zero state, then a dense
/// map to the joint space. `L(I)`: dense map of the image features.
/// `P(I_j | u) = softmax_j(L(I_j) . L(u))`.
#[derive(Debug, Clone)]
pub struct ListenerNet {
    pub store: ParamStore,
    pub config: ListenerConfig,
    pub vocab_size: usize,
    pub d_img: usize,
    emb: Embedding,
    cell: GruCell,
    text_out: Dense,
    img: Dense,
}

impl ListenerNet {
    pub fn new(config: ListenerConfig, vocab_size: usize, d_img: usize, init_seed: u64) -> Result<Self> {
        if vocab_size <= EOS || config.d_w == 0 || config.hidden == 0 || config.joint == 0 || d_img == 0 {
            return Err(Error::Config("listener dimensions must be positive".into()));
        }
        let mut store = ParamStore::new(init_seed);
        let emb = Embedding::new(&mut store, "emb", vocab_size, config.d_w)?;
        let cell = GruCell::new(&mut store, "enc", config.d_w, config.hidden)?;
        let text_out = Dense::new(&mut store, "text", config.hidden, config.joint)?;
        let img = Dense::new(&mut store, "img", d_img, config.joint)?;
        Ok(Self {
            store,
            config,
            vocab_size,
            d_img,
            emb,
            cell,
            text_out,
            img,
        })
    }

    /// Caption embedding `L(u)`; anything from the first EOS on is ignored
    /// and an empty utterance encodes as `<bos>` alone.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        let words = strip_eos(tokens);
        if let Some(t) = words.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Argument(format!("invalid token {t}")));
        }
        let mut h = g.input(vec![0.0; self.config.hidden]);
        for &t in std::iter::once(&BOS).chain(words) {
            let e = self.emb.lookup(g, t)?;
            h = self.cell.step(g, h, e)?;
        }
        Ok(self.text_out.forward(g, h)?)
    }

    pub fn encode_image(&self, g: &mut Graph, image: &[f64]) -> Result<NodeId> {
        if image.len() != self.d_img {
            return Err(Error::Argument(format!(
                "image has {} features, listener expects {}",
                image.len(),
                self.d_img
            )));
        }
        let x = g.input(image.to_vec());
        Ok(self.img.forward(g, x)?)
    }

    /// Log-distribution node over candidates given an encoded utterance.
    pub fn score(&self, g: &mut Graph, text: NodeId, images: &[NodeId]) -> Result<NodeId> {
        if images.len() < 2 {
            return Err(Error::Argument(format!("need at least 2 candidates, got {}", images.len())));
        }
        let dots = images
            .iter()
            .map(|&i| g.dot(i, text))
            .collect::<nnkit::Result<Vec<_>>>()?;
        let logits = g.concat(&dots);
        Ok(g.log_softmax(logits)?)
    }

    pub fn log_probs(&self, tokens: &[usize], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.log_probs_many(&[tokens], candidates)?.remove(0))
    }

    /// Log-distributions for several utterances over one candidate set.
    /// Tape-free; bitwise equal to [`ListenerNet::score`] on the same inputs.
    pub fn log_probs_many(&self, utterances: &[&[usize]], candidates: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if candidates.len() < 2 {
            return Err(Error::Argument(format!("need at least 2 candidates, got {}", candidates.len())));
        }
        let st = &self.store;
        let images = candidates
            .iter()
            .map(|c| {
                if c.len() != self.d_img {
                    return Err(Error::Argument(format!(
                        "image has {} features, listener expects {}",
                        c.len(),
                        self.d_img
                    )));
                }
                Ok(self.img.apply(st, c)?)
            })
            .collect::<Result<Vec<_>>>()?;
        utterances
            .iter()
            .map(|u| {
                let text = self.text_vector(u)?;
                let dots: Vec<f64> = images
                    .iter()
                    .map(|i| nnkit::dot(i, &text))
                    .collect();
                Ok(nnkit::masked_log_softmax(&dots, None))
            })
            .collect()
    }

    /// Tape-free `L(u)`.
    pub fn text_vector(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let words = strip_eos(tokens);
        if let Some(t) = words.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Argument(format!("invalid token {t}")));
        }
        let st = &self.store;
        let mut h = vec![0.0; self.config.hidden];
        for &t in std::iter::once(&BOS).chain(words) {
            h = self.cell.apply(st, &h, &self.emb.row(st, t)?)?;
        }
        Ok(self.text_out.apply(st, &h)?)
    }

    pub fn probs(&self, tokens: &[usize], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.log_probs(tokens, candidates)?.into_iter().map(f64::exp).collect())
    }

    pub fn checkpoint(&self, role: &str) -> Checkpoint {
        Checkpoint::from_store(role, &self.store)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint, role: &str) -> Result<()> {
        expect_role(ck, role)?;
        ck.load_into(&mut self.store)?;
        Ok(())
    }

    pub fn load(path: &Path, role: &str, config: ListenerConfig, vocab_size: usize, d_img: usize) -> Result<Self> {
        let mut net = Self::new(config, vocab_size, d_img, 0)?;
        net.load_checkpoint(&Checkpoint::load(path)?, role)?;
        Ok(net)
    }
}

/// `0 < θ1 < θ2 < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackThresholds {
    pub theta1: f64,
    pub theta2: f64,
}

impl FeedbackThresholds {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        if !(0.0 < theta1 && theta1 < theta2 && theta2 < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < theta1 < theta2 < 1, got {theta1}, {theta2}"
            )));
        }
        Ok(Self { theta1, theta2 })
    }
}

impl Default for FeedbackThresholds {
    fn default() -> Self {
        Self {
            theta1: 0.4,
            theta2: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerResponse {
    /// `None` is NOOP.
    pub choice: Option<usize>,
    pub linguistic_input: Option<Caption>,
    pub p_max: f64,
    pub probs: Vec<f64>,
}

impl ListenerResponse {
    pub fn acted(&self) -> bool {
        self.choice.is_some()
    }
}

/// Caregiver controller over a candidate distribution:
///
/// | `p_max`          | choice | linguistic input |
/// |------------------|--------|------------------|
/// | `< θ1`           | NOOP   | none             |
/// | `[θ1, θ2)`       | argmax | target caption   |
/// | `>= θ2`          | argmax | none             |
pub fn respond(probs: Vec<f64>, target_caption: &Caption, thresholds: FeedbackThresholds) -> ListenerResponse {
    let best = argmax(&probs).unwrap_or(0);
    let p_max = probs.get(best).copied().unwrap_or(0.0);
    let (choice, linguistic_input) = if p_max < thresholds.theta1 {
        (None, None)
    } else if p_max < thresholds.theta2 {
        (Some(best), Some(target_caption.clone()))
    } else {
        (Some(best), None)
    };
    ListenerResponse {
        choice,
        linguistic_input,
        p_max,
        probs,
    }
}

pub fn listener_respond(
    listener: &ListenerNet,
    tokens: &[usize],
    candidates: &[Vec<f64>],
    target_caption: &Caption,
    thresholds: FeedbackThresholds,
) -> Result<ListenerResponse> {
    Ok(respond(listener.probs(tokens, candidates)?, target_caption, thresholds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_noop: f64,
}

impl RewardConfig {
    pub fn new(w_noop: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&w_noop) {
            return Err(Error::Config(format!("w_noop must be in [0, 1), got {w_noop}")));
        }
        Ok(Self { w_noop })
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_noop: 0.1 }
    }
}

pub fn reward(response: &ListenerResponse, target_index: usize, cfg: RewardConfig) -> f64 {
    match response.choice {
        Some(c) if c == target_index => 1.0,
        Some(_) => -1.0,
        None => -cfg.w_noop,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_candidates: usize,
    pub steps: usize,
    /// Candidate sets per optimizer step.
    pub sets_per_step: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub eval_trials: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_candidates: 5,
            steps: 1500,
            sets_per_step: 4,
            lr: 2e-3,
            eval_interval: 250,
            eval_trials: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPoint {
    pub step: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub curve: Vec<PretrainPoint>,
    pub losses: Vec<f64>,
    pub final_val_acc: f64,
}

/// Mean over `i` in the set of `-log P(i | caption_i, set)`, accumulated
/// into the listener's gradient buffers with weight `scale`.
fn set_loss(listener: &mut ListenerNet, set: &[&Item], scale: f64) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new(&listener.store);
        let images = set
            .iter()
            .map(|it| listener.encode_image(&mut g, &to_f64(&it.image.features)))
            .collect::<Result<Vec<_>>>()?;
        let mut terms = Vec::with_capacity(set.len());
        for (i, it) in set.iter().enumerate() {
            let text = listener.encode_text(&mut g, &it.caption.tokens)?;
            let lp = listener.score(&mut g, text, &images)?;
            terms.push(g.nll(lp, i)?);
        }
        let total = g.sum_nodes(&terms)?;
        let loss = g.scale(total, 1.0 / set.len() as f64);
        (g.scalar(loss), g.backward(loss)?)
    };
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Training(format!("listener loss diverged ({loss})")));
    }
    listener.store.accumulate(&grads, scale)?;
    Ok(loss)
}

/// Accuracy of `listener` given ground-truth captions on `trials` games of
/// `n_candidates` distinct items drawn from `items`.
pub fn caption_accuracy(listener: &ListenerNet, items: &[Item], n_candidates: usize, trials: usize, rng_seed: u64) -> Result<f64> {
    if items.len() < n_candidates || n_candidates < 2 || trials == 0 {
        return Err(Error::Argument("not enough items for evaluation games".into()));
    }
    let mut rng = seed::rng(rng_seed, &[tag::PRETRAIN_EVAL]);
    let mut correct = 0usize;
    for _ in 0..trials {
        let idx = sample_indices(&mut rng, items.len(), n_candidates).into_vec();
        let target = rng.random_range(0..n_candidates);
        let cands: Vec<Vec<f64>> = idx.iter().map(|&i| to_f64(&items[i].image.features)).collect();
        let probs = listener.log_probs(&items[idx[target]].caption.tokens, &cands)?;
        if argmax(&probs) == Some(target) {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials as f64)
}

/// Contrastive pretraining on uniformly drawn candidate sets. On divergence
/// the listener is restored to its last good parameters and a training
/// error is returned.
pub fn pretrain_listener(listener: &mut ListenerNet, train: &[Item], val: &[Item], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if train.len() < cfg.n_candidates || val.len() < cfg.n_candidates {
        return Err(Error::Argument("dataset smaller than a candidate set".into()));
    }
    if cfg.n_candidates < 2 || cfg.sets_per_step == 0 || cfg.eval_interval == 0 {
        return Err(Error::Config("invalid pretraining configuration".into()));
    }
    let mut opt = OptimState::new(&listener.store, OptimConfig::adam(cfg.lr))?;
    let mut last_good = listener.store.clone();
    let mut report = PretrainReport {
        curve: Vec::new(),
        losses: Vec::with_capacity(cfg.steps),
        final_val_acc: 0.0,
    };
    let eval = |l: &ListenerNet| caption_accuracy(l, val, cfg.n_candidates, cfg.eval_trials, cfg.seed);
    report.curve.push(PretrainPoint {
        step: 0,
        loss: f64::NAN,
        val_acc: eval(listener)?,
    });
    for step in 1..=cfg.steps {
        let mut rng = seed::rng(cfg.seed, &[tag::PRETRAIN, step as u64]);
        let mut loss = 0.0;
        listener.store.zero_grad();
        for _ in 0..cfg.sets_per_step {
            let set: Vec<&Item> = sample_indices(&mut rng, train.len(), cfg.n_candidates)
                .into_iter()
                .map(|i| &train[i])
                .collect();
            match set_loss(listener, &set, 1.0 / cfg.sets_per_step as f64) {
                Ok(l) => loss += l / cfg.sets_per_step as f64,
                Err(e) => {
                    listener.store.copy_values_from(&last_good)?;
                    listener.store.zero_grad();
                    return Err(e);
                }
            }
        }
        optimizer_step(&mut listener.store, &mut opt)?;
        if !listener.store.all_finite() {
            listener.store.copy_values_from(&last_good)?;
            return Err(Error::Training(format!("listener parameters diverged at step {step}")));
        }
        report.losses.push(loss);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            last_good.copy_values_from(&listener.store)?;
            report.curve.push(PretrainPoint {
                step,
                loss,
                val_acc: eval(listener)?,
            });
        }
    }
    report.final_val_acc = report.curve.last().map_or(0.0, |p| p.val_acc);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::PosTag;
    use nnkit::Tensor;

    fn caption() -> Caption {
        Caption {
            tokens: vec![3, 4],
            pos_tags: vec![PosTag::Adj, PosTag::Noun],
        }
    }

    #[test]
    fn controller_cases() {
        let th = FeedbackThresholds::default();
        let r = respond(vec![0.745, 0.166, 0.089], &caption(), th);
        assert_eq!(r.choice, Some(0));
        assert_eq!(r.linguistic_input, Some(caption()));
        let r = respond(vec![0.2; 5], &caption(), th);
        assert_eq!((r.choice, r.linguistic_input), (None, None));
        let r = respond(vec![0.95, 0.05], &caption(), th);
        assert_eq!((r.choice, r.linguistic_input), (Some(0), None));
        // boundaries: theta1 acts, theta2 withholds input
        assert!(respond(vec![0.4, 0.3, 0.3], &caption(), th).linguistic_input.is_some());
        let r = respond(vec![0.8, 0.2], &caption(), th);
        assert_eq!((r.choice, r.linguistic_input), (Some(0), None));
    }

    #[test]
    fn fast_paths_match_tape() {
        let speaker = SpeakerNet::new(SpeakerConfig { d_w: 4, hidden: 6 }, 9, 5, 3).unwrap();
        let image = [0.3, -0.2, 0.9, 0.0, 0.5];
        let mut rng = seed::rng(4, &[]);
        for _ in 0..10 {
            let s = speaker.sample(&image, 6, 1.0, &mut rng).unwrap();
            let lp = speaker.logprob(&image, &s.utterance.tokens).unwrap();
            assert_eq!(s.logps, lp);
            let mut g = Graph::new(&speaker.store);
            let steps = speaker.unroll(&mut g, &image, &s.utterance.tokens).unwrap();
            let values: Vec<f64> = steps.iter().map(|st| g.scalar(st.value)).collect();
            assert_eq!(s.values, values);
        }
        let listener = ListenerNet::new(ListenerConfig { d_w: 4, hidden: 6, joint: 3 }, 9, 5, 8).unwrap();
        let cands = vec![image.to_vec(), vec![0.1, 0.2, -0.4, 0.7, 0.0], vec![0.0; 5]];
        let utt = [3usize, 5, 7, EOS];
        let fast = listener.log_probs(&utt, &cands).unwrap();
        let mut g = Graph::new(&listener.store);
        let text = listener.encode_text(&mut g, &utt).unwrap();
        let imgs: Vec<NodeId> = cands.iter().map(|c| listener.encode_image(&mut g, c).unwrap()).collect();
        let lp = listener.score(&mut g, text, &imgs).unwrap();
        assert_eq!(fast, g.value(lp).to_vec());
    }

    #[test]
    fn thresholds_validated() {
        assert!(FeedbackThresholds::new(0.5, 0.4).is_err());
        assert!(FeedbackThresholds::new(0.0, 0.4).is_err());
        assert!(FeedbackThresholds::new(0.4, 1.0).is_err());
        assert!(FeedbackThresholds::new(0.3, 0.6).is_ok());
        assert!(RewardConfig::new(1.0).is_err());
    }

    #[test]
    fn reward_values() {
        let cfg = RewardConfig::default();
        let r = respond(vec![0.9, 0.1], &caption(), FeedbackThresholds::default());
        assert_eq!(reward(&r, 0, cfg), 1.0);
        assert_eq!(reward(&r, 1, cfg), -1.0);
        let r = respond(vec![0.5, 0.5], &caption(), FeedbackThresholds::new(0.6, 0.9).unwrap());
        assert_eq!(reward(&r, 0, cfg), -0.1);
    }

    #[test]
    fn sample_index_follows_cumulative_mass() {
        let mut rng = seed::rng(1, &[]);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[sample_index(&[0.5, 0.0, 0.5], &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn listener_hand_dot_products() {
        // joint dim 1: text encoding 1, image encodings [2.0, 0.5, 0.0]
        let mut l = ListenerNet::new(
            ListenerConfig {
                d_w: 1,
                hidden: 1,
                joint: 1,
            },
            4,
            3,
            0,
        )
        .unwrap();
        for (name, t) in [
            ("text.w", Tensor::from_vec(&[1, 1], vec![0.0]).unwrap()),
            ("text.b", Tensor::from_vec(&[1], vec![1.0]).unwrap()),
            ("img.w", Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap()),
            ("img.b", Tensor::from_vec(&[1], vec![0.0]).unwrap()),
        ] {
            let id = l.store.id(name).unwrap();
            *l.store.get_mut(id) = t;
        }
        let cands = vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 0.0]];
        let p = l.probs(&[3], &cands).unwrap();
        let z = 2f64.exp() + 0.5f64.exp() + 1.0;
        let want = [2f64.exp() / z, 0.5f64.exp() / z, 1.0 / z];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.7361).abs() < 1e-4);
    }
}

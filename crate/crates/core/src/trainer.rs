//! Rollouts, PPO for the communicative objective, caption likelihood for the
//! listener's linguistic input, internal-listener updates, periodic
//! evaluation, metrics logging and resumable checkpoints.
//!
//! One training step collects a batch of games and applies
//!
//! ```text
//! speaker:  λ · (-surrogate + c_v · value_loss - c_e · entropy) + (1 - λ) · li_loss
//! tom:      mean masked cross-entropy against the listener's choices
//! ```
//!
//! Every random draw is derived from `(seed, purpose, step, episode)`, so a
//! run resumed from a checkpoint replays the uninterrupted run exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nnkit::{argmax, optimizer_step, Checkpoint, Graph, NodeId, OptimConfig, OptimState, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agents::{
    listener_respond, reward, to_f64, FeedbackThresholds, ListenerNet, ListenerResponse, RewardConfig,
    SpeakerConfig, SpeakerNet, Utterance,
};
use crate::distractors::{sample_game, Difficulty, Game, SimilarityIndex};
use crate::evalkit::{report, EpisodeSummary, FluencyModels, MetricsReport};
use crate::seed::{self, tag};
use crate::tom::{anneal_wl, select_utterance, sigma_at, RerankConfig, RerankMode, RerankTrace, TOM_ROLE};
use crate::world::{Caption, Item, PosTag, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    /// Episodes per minibatch.
    pub minibatch: usize,
    pub gamma: f64,
    pub lambda_gae: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Episodes per training step.
    pub batch_size: usize,
    /// Treat the whole utterance as a single action instead of one action per token.
    pub bandit: bool,
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 64,
            gamma: 0.99,
            lambda_gae: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            batch_size: 128,
            bandit: false,
            max_grad_norm: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip epsilon must be in (0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda_gae > 0.0 && self.lambda_gae <= 1.0) {
            return Err(Error::Config("gamma and lambda_gae must be in (0, 1]".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, minibatch and batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return Err(Error::Config("learning rate must be positive, coefficients non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    /// Weight of the communicative objective against caption likelihood.
    pub lambda: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub n_candidates: usize,
    pub difficulty: Difficulty,
    pub rank_weighted: bool,
    pub thresholds: FeedbackThresholds,
    pub reward: RewardConfig,
    /// Drop NOOP games from the accuracy denominator.
    pub exclude_noop: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            n_candidates: 5,
            difficulty: Difficulty::Easy,
            rank_weighted: false,
            thresholds: FeedbackThresholds::default(),
            reward: RewardConfig::default(),
            exclude_noop: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_split: EvalSplit,
    pub checkpoint_interval: u64,
    pub speaker: SpeakerConfig,
    pub tom_lr: f64,
    /// Start the internal listener as a copy of the external one.
    pub tom_init_from_listener: bool,
    pub ppo: PpoConfig,
    pub joint: JointConfig,
    pub rerank: RerankConfig,
    pub game: GameConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            total_steps: 1000,
            eval_interval: 50,
            eval_episodes: 500,
            eval_split: EvalSplit::Val,
            checkpoint_interval: 100,
            speaker: SpeakerConfig::default(),
            tom_lr: 1e-3,
            tom_init_from_listener: false,
            ppo: PpoConfig::default(),
            joint: JointConfig::default(),
            rerank: RerankConfig::default(),
            game: GameConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.rerank.validate()?;
        if !(0.0..=1.0).contains(&self.joint.lambda) {
            return Err(Error::Config("lambda must be in [0, 1]".into()));
        }
        if self.game.n_candidates < 2 {
            return Err(Error::Config("games need at least 2 candidates".into()));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("eval interval and episodes must be >= 1".into()));
        }
        if !(self.tom_lr > 0.0) {
            return Err(Error::Config("tom learning rate must be positive".into()));
        }
        FeedbackThresholds::new(self.game.thresholds.theta1, self.game.thresholds.theta2)?;
        RewardConfig::new(self.game.reward.w_noop)?;
        Ok(())
    }

    /// Whether the internal listener is trained and consulted.
    pub fn uses_tom(&self) -> bool {
        self.rerank.mode != RerankMode::Off
    }
}

/// One played game, self-contained for replay and updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub game: Game,
    pub utterance: Utterance,
    /// Sampling-time `log π(u_t | u_<t, x)`, one per utterance token.
    pub logps: Vec<f64>,
    pub values: Vec<f64>,
    pub response: ListenerResponse,
    pub reward: f64,
    pub linguistic_input: Option<Caption>,
    pub trace: RerankTrace,
}

/// Terminal-reward GAE: returns `(advantages, returns)` with
/// `δ_t = r_t + γ V_{t+1} - V_t`, `A_t = δ_t + γ λ A_{t+1}`, `V_T = 0`.
pub fn compute_advantages(reward: f64, values: &[f64], gamma: f64, lambda_gae: f64) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (r, next_v) = if t + 1 == n { (reward, 0.0) } else { (0.0, values[t + 1]) };
        let delta = r + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda_gae * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Caption tokens as a speaker target: the words followed by EOS.
pub fn caption_target(caption: &Caption) -> Vec<usize> {
    let mut t = caption.tokens.clone();
    t.push(EOS);
    t
}

/// `-log π(U* | x)` summed over tokens, as a graph node.
fn caption_nll(g: &mut Graph, speaker: &SpeakerNet, image: &[f64], caption: &Caption) -> Result<NodeId> {
    let target = caption_target(caption);
    let steps = speaker.unroll(g, image, &target)?;
    let terms = steps
        .iter()
        .zip(&target)
        .map(|(s, &t)| g.nll(s.logp, t))
        .collect::<nnkit::Result<Vec<_>>>()?;
    Ok(g.sum_nodes(&terms)?)
}

/// Mean over records carrying linguistic input of `-log π(U* | x)`; 0 if none do.
pub fn li_loss(speaker: &SpeakerNet, items: &[Item], records: &[EpisodeRecord]) -> Result<f64> {
    let mut g = Graph::new(&speaker.store);
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        if let Some(c) = &r.linguistic_input {
            let img = to_f64(&items[r.game.target].image.features);
            let node = caption_nll(&mut g, speaker, &img, c)?;
            total += g.scalar(node);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub li_loss: f64,
    pub tom_loss: f64,
    pub clip_fraction: f64,
}

/// The logged objective and its weighted parts; the parts sum to `joint`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointBreakdown {
    /// `λ · mean reward`.
    pub communicative: f64,
    /// `(1 - λ) · (-li_loss)`.
    pub linguistic: f64,
    /// `-tom_loss`.
    pub tom: f64,
    pub joint: f64,
}

impl JointBreakdown {
    pub fn new(lambda: f64, mean_reward: f64, li_loss: f64, tom_loss: f64) -> Self {
        let communicative = lambda * mean_reward;
        let linguistic = (1.0 - lambda) * -li_loss;
        let tom = -tom_loss;
        Self {
            communicative,
            linguistic,
            tom,
            joint: communicative + linguistic + tom,
        }
    }
}

/// Per-record advantage targets prepared before the PPO epochs.
struct Targets {
    adv: Vec<f64>,
    ret: Vec<f64>,
}

fn prepare_targets(records: &[EpisodeRecord], cfg: &PpoConfig) -> Vec<Targets> {
    let mut targets: Vec<Targets> = records
        .iter()
        .map(|r| {
            if cfg.bandit {
                let v0 = r.values.first().copied().unwrap_or(0.0);
                Targets {
                    adv: vec![r.reward - v0],
                    ret: vec![r.reward],
                }
            } else {
                let (adv, ret) = compute_advantages(r.reward, &r.values, cfg.gamma, cfg.lambda_gae);
                Targets { adv, ret }
            }
        })
        .collect();
    let all: Vec<f64> = targets.iter().flat_map(|t| t.adv.iter().copied()).collect();
    if all.len() > 1 {
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let sd = var.sqrt();
        for t in &mut targets {
            for a in &mut t.adv {
                *a = if sd > 1e-8 { (*a - mean) / sd } else { *a - mean };
            }
        }
    }
    targets
}

/// Builds the speaker loss of one minibatch; returns the loss node and the
/// (policy, value, entropy, li, clipped-token) statistics.
#[allow(clippy::too_many_arguments)]
fn minibatch_loss(
    g: &mut Graph,
    speaker: &SpeakerNet,
    items: &[Item],
    records: &[&EpisodeRecord],
    targets: &[&Targets],
    cfg: &PpoConfig,
    lambda: f64,
) -> Result<(Option<NodeId>, [f64; 5])> {
    let mut surr = Vec::new();
    let mut vals = Vec::new();
    let mut ents = Vec::new();
    let mut lis = Vec::new();
    let mut clipped = 0usize;
    for (r, t) in records.iter().zip(targets) {
        let img = to_f64(&items[r.game.target].image.features);
        if lambda > 0.0 {
            let steps = speaker.unroll(g, &img, &r.utterance.tokens)?;
            let picked = steps
                .iter()
                .zip(&r.utterance.tokens)
                .map(|(s, &tok)| g.pick(s.logp, tok))
                .collect::<nnkit::Result<Vec<_>>>()?;
            for s in &steps {
                ents.push(g.entropy(s.logp));
            }
            if cfg.bandit {
                let total = g.sum_nodes(&picked)?;
                let old: f64 = r.logps.iter().sum();
                let ratio = (g.scalar(total) - old).exp();
                clipped += usize::from((ratio - 1.0).abs() > cfg.clip_eps);
                surr.push(g.clipped_surrogate(total, old, t.adv[0], cfg.clip_eps));
                let v0 = g.pick(steps[0].value, 0)?;
                let target = g.input(vec![t.ret[0]]);
                let d = g.sub(v0, target)?;
                vals.push(g.square(d));
            } else {
                for (k, (&lp, s)) in picked.iter().zip(&steps).enumerate() {
                    let ratio = (g.scalar(lp) - r.logps[k]).exp();
                    clipped += usize::from((ratio - 1.0).abs() > cfg.clip_eps);
                    surr.push(g.clipped_surrogate(lp, r.logps[k], t.adv[k], cfg.clip_eps));
                    let target = g.input(vec![t.ret[k]]);
                    let d = g.sub(s.value, target)?;
                    vals.push(g.square(d));
                }
            }
        }
        if lambda < 1.0 {
            if let Some(c) = &r.linguistic_input {
                lis.push(caption_nll(g, speaker, &img, c)?);
            }
        }
    }
    let mean = |g: &mut Graph, xs: &[NodeId]| -> Result<Option<NodeId>> {
        if xs.is_empty() {
            return Ok(None);
        }
        let s = g.sum_nodes(xs)?;
        Ok(Some(g.scale(s, 1.0 / xs.len() as f64)))
    };
    let mut parts = Vec::new();
    let mut stats = [0.0; 5];
    if let Some(s) = mean(g, &surr)? {
        stats[0] = -g.scalar(s);
        parts.push(g.scale(s, -lambda));
    }
    if let Some(v) = mean(g, &vals)? {
        stats[1] = g.scalar(v);
        parts.push(g.scale(v, lambda * cfg.value_coef));
    }
    if let Some(e) = mean(g, &ents)? {
        stats[2] = g.scalar(e);
        parts.push(g.scale(e, -lambda * cfg.entropy_coef));
    }
    if let Some(l) = mean(g, &lis)? {
        stats[3] = g.scalar(l);
        parts.push(g.scale(l, 1.0 - lambda));
    }
    stats[4] = clipped as f64;
    let loss = if parts.is_empty() { None } else { Some(g.sum_nodes(&parts)?) };
    Ok((loss, stats))
}

/// The full speaker loss over `records` as one graph node (`None` when no
/// term applies), with old log-probs and advantages taken from the records.
pub fn speaker_loss(
    g: &mut Graph,
    speaker: &SpeakerNet,
    items: &[Item],
    records: &[EpisodeRecord],
    cfg: &PpoConfig,
    lambda: f64,
) -> Result<Option<NodeId>> {
    let targets = prepare_targets(records, cfg);
    let recs: Vec<&EpisodeRecord> = records.iter().collect();
    let tg: Vec<&Targets> = targets.iter().collect();
    Ok(minibatch_loss(g, speaker, items, &recs, &tg, cfg, lambda)?.0)
}

/// Mean clipped surrogate of the current speaker on `records`, with the
/// same per-batch advantage normalization the update uses.
pub fn surrogate_objective(speaker: &SpeakerNet, items: &[Item], records: &[EpisodeRecord], cfg: &PpoConfig) -> Result<f64> {
    let targets = prepare_targets(records, cfg);
    let mut g = Graph::new(&speaker.store);
    let recs: Vec<&EpisodeRecord> = records.iter().collect();
    let tg: Vec<&Targets> = targets.iter().collect();
    let (_, stats) = minibatch_loss(&mut g, speaker, items, &recs, &tg, cfg, 1.0)?;
    Ok(-stats[0])
}

/// PPO epochs over `records` with the caption-likelihood term mixed in by
/// `lambda`. On a non-finite loss or gradient the speaker is restored to
/// its pre-update parameters and a training error is returned.
pub fn ppo_update(
    speaker: &mut SpeakerNet,
    opt: &mut OptimState,
    items: &[Item],
    records: &[EpisodeRecord],
    cfg: &PpoConfig,
    lambda: f64,
    shuffle_seed: u64,
) -> Result<UpdateStats> {
    if records.is_empty() {
        return Err(Error::Argument("PPO update needs at least one record".into()));
    }
    let backup = (speaker.store.clone(), opt.clone());
    let targets = prepare_targets(records, cfg);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut stats = UpdateStats::default();
    let mut n_mb = 0usize;
    let mut clipped = 0.0;
    let n_actions: usize = if cfg.bandit {
        records.len()
    } else {
        records.iter().map(|r| r.utterance.len()).sum()
    };
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(shuffle_seed, &[tag::PPO_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.minibatch) {
            let recs: Vec<&EpisodeRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let tg: Vec<&Targets> = chunk.iter().map(|&i| &targets[i]).collect();
            let outcome = {
                let mut g = Graph::new(&speaker.store);
                let (loss, s) = minibatch_loss(&mut g, speaker, items, &recs, &tg, cfg, lambda)?;
                match loss {
                    // nothing to learn from in this minibatch
                    None => None,
                    Some(loss) => {
                        let value = g.scalar(loss);
                        let grads = if value.is_finite() { Some(g.backward(loss)?) } else { None };
                        Some((value, s, grads))
                    }
                }
            };
            let Some((value, s, grads)) = outcome else { continue };
            let grads = match grads {
                Some(gr) if gr.is_finite() => gr,
                _ => {
                    speaker.store = backup.0;
                    *opt = backup.1;
                    return Err(Error::Training(format!("non-finite speaker loss ({value}); update aborted")));
                }
            };
            speaker.store.zero_grad();
            speaker.store.accumulate(&grads, 1.0)?;
            optimizer_step(&mut speaker.store, opt)?;
            if !speaker.store.all_finite() {
                speaker.store = backup.0;
                *opt = backup.1;
                return Err(Error::Training("speaker parameters became non-finite; update aborted".into()));
            }
            stats.policy_loss += s[0];
            stats.value_loss += s[1];
            stats.entropy += s[2];
            stats.li_loss += s[3];
            if epoch + 1 == cfg.epochs {
                clipped += s[4];
            }
            n_mb += 1;
        }
    }
    let n = n_mb as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.li_loss = li_loss(speaker, items, records)?;
    stats.clip_fraction = clipped / n_actions.max(1) as f64;
    Ok(stats)
}

/// Log-distribution of `net` over the episode's candidates for its utterance.
fn candidate_images(items: &[Item], game: &Game) -> Vec<Vec<f64>> {
    game.candidates.iter().map(|&c| to_f64(&items[c].image.features)).collect()
}

/// Mean masked ToM loss over `records` as a graph node; NOOP games add
/// nothing to the sum but still count in the mean. `None` when every game
/// was a NOOP.
pub fn tom_batch_loss(g: &mut Graph, tom: &ListenerNet, items: &[Item], records: &[EpisodeRecord]) -> Result<Option<NodeId>> {
    let mut terms = Vec::new();
    for r in records {
        let Some(choice) = r.response.choice else { continue };
        let cands = candidate_images(items, &r.game);
        let images = cands
            .iter()
            .map(|c| tom.encode_image(g, c))
            .collect::<Result<Vec<_>>>()?;
        let text = tom.encode_text(g, &r.utterance.tokens)?;
        let lp = tom.score(g, text, &images)?;
        terms.push(g.nll(lp, choice)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let s = g.sum_nodes(&terms)?;
    Ok(Some(g.scale(s, 1.0 / records.len() as f64)))
}

/// One optimizer step on the mean masked ToM loss; NOOP games contribute 0.
/// Returns the mean loss before the step. All-NOOP batches leave the
/// parameters untouched.
pub fn tom_update(tom: &mut ListenerNet, opt: &mut OptimState, items: &[Item], records: &[EpisodeRecord]) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new(&tom.store);
        let Some(loss) = tom_batch_loss(&mut g, tom, items, records)? else {
            return Ok(0.0);
        };
        (g.scalar(loss), g.backward(loss)?)
    };
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Training(format!("non-finite internal-listener loss ({loss})")));
    }
    tom.store.zero_grad();
    tom.store.accumulate(&grads, 1.0)?;
    optimizer_step(&mut tom.store, opt)?;
    Ok(loss)
}

/// Mutable training state: networks, optimizers and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub speaker: SpeakerNet,
    pub tom: ListenerNet,
    pub speaker_opt: OptimState,
    pub tom_opt: OptimState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mean_reward: f64,
    pub train_acc: f64,
    pub noop_rate: f64,
    pub stats: UpdateStats,
    pub breakdown: JointBreakdown,
}

/// One evaluation row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub report: MetricsReport,
    pub sigma: f64,
    pub w_l_effective: f64,
}

pub const CSV_HEADER: &str =
    "step,acc,reward_mean,noop_rate,bleu,fluency,tom_acc,adj_f1,adp_f1,noun_f1,verb_f1,avg_len,sigma,w_l_effective";

impl EvalRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let f = |t: PosTag| format!("{:.6}", r.pos_f1.get(&t).copied().unwrap_or(0.0));
        let tom = r.tom_acc.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.step,
            r.acc,
            r.reward_mean,
            r.noop_rate,
            r.bleu,
            r.fluency,
            tom,
            f(PosTag::Adj),
            f(PosTag::Adp),
            f(PosTag::Noun),
            f(PosTag::Verb),
            r.avg_len,
            self.sigma,
            self.w_l_effective
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_step: u64,
    pub eval_rows: Vec<EvalRow>,
    pub steps: Vec<StepLog>,
}

/// Frozen inputs to training.
pub struct TrainContext<'a> {
    pub train: &'a [Item],
    pub val: &'a [Item],
    pub train_index: Option<&'a SimilarityIndex>,
    pub val_index: Option<&'a SimilarityIndex>,
    pub listener: &'a ListenerNet,
    pub lms: &'a FluencyModels,
    pub tag_table: &'a [Option<PosTag>],
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub ctx: TrainContext<'a>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ctx: TrainContext<'a>) -> Result<Self> {
        cfg.validate()?;
        if cfg.game.difficulty == Difficulty::Hard && (ctx.train_index.is_none() || ctx.val_index.is_none()) {
            return Err(Error::Config("hard distractors need similarity indices".into()));
        }
        let l = ctx.listener;
        let speaker = SpeakerNet::new(cfg.speaker, l.vocab_size, l.d_img, seed::derive(cfg.seed, &[tag::INIT_SPEAKER]))?;
        let mut tom = ListenerNet::new(l.config, l.vocab_size, l.d_img, seed::derive(cfg.seed, &[tag::INIT_TOM]))?;
        if cfg.tom_init_from_listener {
            tom.store.copy_values_from(&l.store)?;
        }
        let speaker_opt = OptimState::new(
            &speaker.store,
            OptimConfig {
                max_grad_norm: cfg.ppo.max_grad_norm,
                ..OptimConfig::adam(cfg.ppo.lr)
            },
        )?;
        let tom_opt = OptimState::new(&tom.store, OptimConfig::adam(cfg.tom_lr))?;
        Ok(Self {
            state: TrainState {
                step: 0,
                speaker,
                tom,
                speaker_opt,
                tom_opt,
            },
            cfg,
            ctx,
        })
    }

    fn scorer(&self) -> &ListenerNet {
        match self.cfg.rerank.mode {
            RerankMode::Rsa => self.ctx.listener,
            _ => &self.state.tom,
        }
    }

    /// Plays one game with the current networks.
    fn play(
        &self,
        items: &[Item],
        index: Option<&SimilarityIndex>,
        rerank: &RerankConfig,
        step: u64,
        rng: &mut seed::Rng,
    ) -> Result<EpisodeRecord> {
        let g = &self.cfg.game;
        let game = sample_game(items, index, g.n_candidates - 1, g.difficulty, g.rank_weighted, rng)?;
        let cands = candidate_images(items, &game);
        let target = &items[game.target];
        let image = to_f64(&target.image.features);
        let (sample, trace) = select_utterance(
            &self.state.speaker,
            self.scorer(),
            &image,
            &cands,
            game.target_index,
            rerank,
            step,
            rng,
        )?;
        let response = listener_respond(self.ctx.listener, &sample.utterance.tokens, &cands, &target.caption, g.thresholds)?;
        let r = reward(&response, game.target_index, g.reward);
        Ok(EpisodeRecord {
            linguistic_input: response.linguistic_input.clone(),
            game,
            utterance: sample.utterance,
            logps: sample.logps,
            values: sample.values,
            response,
            reward: r,
            trace,
        })
    }

    /// Games for the current step, each from its own derived stream.
    pub fn collect_rollout(&self) -> Result<Vec<EpisodeRecord>> {
        let step = self.state.step;
        (0..self.cfg.ppo.batch_size)
            .map(|e| {
                let mut rng = seed::rng(self.cfg.seed, &[tag::ROLLOUT, step, e as u64]);
                self.play(self.ctx.train, self.ctx.train_index, &self.cfg.rerank, step, &mut rng)
            })
            .collect()
    }

    /// Speaker update on the joint objective plus one internal-listener step.
    pub fn joint_step(&mut self, records: &[EpisodeRecord]) -> Result<(UpdateStats, JointBreakdown)> {
        let shuffle_seed = seed::derive(self.cfg.seed, &[tag::PPO_SHUFFLE, self.state.step]);
        let mut stats = ppo_update(
            &mut self.state.speaker,
            &mut self.state.speaker_opt,
            self.ctx.train,
            records,
            &self.cfg.ppo,
            self.cfg.joint.lambda,
            shuffle_seed,
        )?;
        if self.cfg.uses_tom() {
            stats.tom_loss = tom_update(&mut self.state.tom, &mut self.state.tom_opt, self.ctx.train, records)?;
        }
        let mean_reward = records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64;
        Ok((stats, JointBreakdown::new(self.cfg.joint.lambda, mean_reward, stats.li_loss, stats.tom_loss)))
    }

    /// Collect, update, advance the step counter.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let records = self.collect_rollout()?;
        let (stats, breakdown) = self.joint_step(&records)?;
        self.state.step += 1;
        let n = records.len() as f64;
        Ok(StepLog {
            step: self.state.step,
            mean_reward: records.iter().map(|r| r.reward).sum::<f64>() / n,
            train_acc: records
                .iter()
                .filter(|r| r.response.choice == Some(r.game.target_index))
                .count() as f64
                / n,
            noop_rate: records.iter().filter(|r| r.response.choice.is_none()).count() as f64 / n,
            stats,
            breakdown,
        })
    }

    /// Evaluation games on the configured split without exploration.
    pub fn evaluate(&self) -> Result<(EvalRow, Vec<EpisodeRecord>)> {
        let (items, index) = match self.cfg.eval_split {
            EvalSplit::Train => (self.ctx.train, self.ctx.train_index),
            EvalSplit::Val => (self.ctx.val, self.ctx.val_index),
        };
        let step = self.state.step;
        let rerank = RerankConfig {
            sigma0: 0.0,
            ..self.cfg.rerank
        };
        let mut records = Vec::with_capacity(self.cfg.eval_episodes);
        let mut summaries = Vec::with_capacity(self.cfg.eval_episodes);
        for e in 0..self.cfg.eval_episodes {
            let mut rng = seed::rng(self.cfg.seed, &[tag::EVAL, e as u64]);
            let rec = self.play(items, index, &rerank, step, &mut rng)?;
            let tom_choice = if self.cfg.uses_tom() {
                let cands = candidate_images(items, &rec.game);
                argmax(&self.state.tom.log_probs(&rec.utterance.tokens, &cands)?)
            } else {
                None
            };
            summaries.push(EpisodeSummary {
                target_index: rec.game.target_index,
                choice: rec.response.choice,
                tom_choice,
                utterance: rec.utterance.words().to_vec(),
                reference: items[rec.game.target].caption.clone(),
                reward: rec.reward,
            });
            records.push(rec);
        }
        let report = report(&summaries, self.ctx.lms, self.ctx.tag_table, self.cfg.game.exclude_noop)?;
        Ok((
            EvalRow {
                step,
                report,
                sigma: sigma_at(step, &self.cfg.rerank),
                w_l_effective: anneal_wl(step, &self.cfg.rerank),
            },
            records,
        ))
    }

    /// Runs to `total_steps`, writing `metrics.csv` and checkpoints under
    /// `run_dir` when given. Resumes from `run_dir/checkpoint` if present.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<TrainSummary> {
        self.run_observed(run_dir, &mut |_| {})
    }

    /// [`Trainer::run`], calling `on_eval` after each evaluation row.
    pub fn run_observed(&mut self, run_dir: Option<&Path>, on_eval: &mut dyn FnMut(&EvalRow)) -> Result<TrainSummary> {
        let mut csv = None;
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir)?;
            let ck = dir.join(CHECKPOINT_DIR);
            if ck.join(STATE_FILE).exists() {
                self.load_checkpoint(&ck)?;
            }
            let path = dir.join(METRICS_FILE);
            truncate_csv(&path, self.state.step)?;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if f.metadata()?.len() == 0 {
                writeln!(f, "{CSV_HEADER}")?;
            }
            csv = Some(f);
        }
        let mut summary = TrainSummary {
            final_step: self.state.step,
            eval_rows: Vec::new(),
            steps: Vec::new(),
        };
        while self.state.step < self.cfg.total_steps {
            let log = self.train_step()?;
            summary.steps.push(log);
            let step = self.state.step;
            if step % self.cfg.eval_interval == 0 {
                let (row, _) = self.evaluate()?;
                if let Some(f) = csv.as_mut() {
                    writeln!(f, "{}", row.csv())?;
                    f.flush()?;
                }
                on_eval(&row);
                summary.eval_rows.push(row);
            }
            if let Some(dir) = run_dir {
                if self.cfg.checkpoint_interval > 0 && step % self.cfg.checkpoint_interval == 0
                    || step == self.cfg.total_steps
                {
                    self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
                }
            }
        }
        summary.final_step = self.state.step;
        Ok(summary)
    }

    /// Writes networks, optimizer moments and the step counter; files are
    /// staged then renamed, with the state file renamed last.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = &self.state;
        let files: [(&str, Checkpoint); 4] = [
            (SPEAKER_FILE, s.speaker.checkpoint()),
            (TOM_FILE, s.tom.checkpoint(TOM_ROLE)),
            (SPEAKER_OPT_FILE, optim_checkpoint(&s.speaker.store, &s.speaker_opt)),
            (TOM_OPT_FILE, optim_checkpoint(&s.tom.store, &s.tom_opt)),
        ];
        let mut staged = Vec::new();
        for (name, ck) in files {
            let tmp = dir.join(format!("{name}.tmp"));
            ck.save(&tmp)?;
            staged.push((tmp, dir.join(name)));
        }
        let meta = CheckpointMeta {
            step: s.step,
            speaker_opt_step: s.speaker_opt.step,
            tom_opt_step: s.tom_opt.step,
        };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&meta)?)?;
        staged.push((tmp, dir.join(STATE_FILE)));
        for (from, to) in staged {
            fs::rename(from, to)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(STATE_FILE))?)?;
        let s = &mut self.state;
        s.speaker.load_checkpoint(&Checkpoint::load(&dir.join(SPEAKER_FILE))?)?;
        s.tom.load_checkpoint(&Checkpoint::load(&dir.join(TOM_FILE))?, TOM_ROLE)?;
        load_optim(&Checkpoint::load(&dir.join(SPEAKER_OPT_FILE))?, &s.speaker.store, &mut s.speaker_opt)?;
        load_optim(&Checkpoint::load(&dir.join(TOM_OPT_FILE))?, &s.tom.store, &mut s.tom_opt)?;
        s.speaker_opt.step = meta.speaker_opt_step;
        s.tom_opt.step = meta.tom_opt_step;
        s.step = meta.step;
        Ok(())
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.json";
pub const SPEAKER_FILE: &str = "speaker.rgtm";
pub const TOM_FILE: &str = "tom.rgtm";
pub const SPEAKER_OPT_FILE: &str = "speaker_opt.rgtm";
pub const TOM_OPT_FILE: &str = "tom_opt.rgtm";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    speaker_opt_step: u64,
    tom_opt_step: u64,
}

fn optim_checkpoint(store: &ParamStore, opt: &OptimState) -> Checkpoint {
    let mut params = Vec::with_capacity(2 * store.len());
    for (i, (name, _)) in store.named().enumerate() {
        params.push((format!("m.{name}"), opt.m[i].clone()));
        params.push((format!("v.{name}"), opt.v[i].clone()));
    }
    Checkpoint {
        role: "adam".into(),
        params,
    }
}

fn load_optim(ck: &Checkpoint, store: &ParamStore, opt: &mut OptimState) -> Result<()> {
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    let find = |key: String, shape: &[usize]| -> Result<Tensor> {
        ck.params
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.clone())
            .filter(|t| t.shape() == shape)
            .ok_or_else(|| Error::Format(format!("optimizer checkpoint lacks `{key}`")))
    };
    for (name, t) in store.named() {
        m.push(find(format!("m.{name}"), t.shape())?);
        v.push(find(format!("v.{name}"), t.shape())?);
    }
    opt.m = m;
    opt.v = v;
    Ok(())
}

/// Drops rows logged after `step`, so a resumed run appends cleanly.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push(line);
        }
    }
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

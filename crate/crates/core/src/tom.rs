//! Internal listener model and sample-and-rerank utterance selection.
//!
//! The speaker draws a pool of utterances, scores each by its own
//! log-probability and by the internal listener's log-probability of the
//! target, and emits `argmax_j (w_l * log P_tom(x | u_j) + log P_speaker(u_j))`.
//! With probability `sigma(step)` a uniformly random pool member is emitted
//! instead.

use std::fmt;
use std::str::FromStr;

use nnkit::{argmax, PROB_FLOOR};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agents::{ListenerNet, ListenerResponse, SpeakerNet, SpeakerSample, Utterance};
use crate::seed::Rng;
use crate::{Error, Result};

/// Same architecture as the external listener, with its own parameters.
pub type ToMListenerNet = ListenerNet;

pub const TOM_ROLE: &str = "tom";
pub const LISTENER_ROLE: &str = "listener";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    /// Rerank with the learned internal listener.
    Tom,
    /// Rerank with the external listener itself.
    Rsa,
    /// Emit a single plain sample.
    Off,
}

impl fmt::Display for RerankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RerankMode::Tom => "tom",
            RerankMode::Rsa => "rsa",
            RerankMode::Off => "off",
        })
    }
}

impl FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tom" => Ok(RerankMode::Tom),
            "rsa" => Ok(RerankMode::Rsa),
            "off" => Ok(RerankMode::Off),
            _ => Err(Error::Config(format!("unknown rerank mode `{s}`"))),
        }
    }
}

/// Named `w_l` settings.
pub fn wl_preset(name: &str) -> Result<f64> {
    match name.to_ascii_lowercase().as_str() {
        "zero" => Ok(0.0),
        "normal" => Ok(1.0),
        "high" => Ok(1000.0),
        _ => Err(Error::Config(format!("unknown listener-weight preset `{name}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub n_candidates: usize,
    pub w_l_final: f64,
    pub anneal_steps: u64,
    pub sigma0: f64,
    pub sigma_decay_steps: u64,
    pub mode: RerankMode,
    /// Divide the speaker score by the utterance length.
    pub length_normalize: bool,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            n_candidates: 16,
            w_l_final: 1.0,
            anneal_steps: 200,
            sigma0: 0.5,
            sigma_decay_steps: 500,
            mode: RerankMode::Tom,
            length_normalize: false,
            max_len: crate::world::MAX_UTTERANCE_LEN,
            temperature: 1.0,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("rerank pool size must be >= 1".into()));
        }
        if !(self.w_l_final >= 0.0) || !self.w_l_final.is_finite() {
            return Err(Error::Config("w_l must be a non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma0) {
            return Err(Error::Config("sigma0 must be in [0, 1]".into()));
        }
        if self.sigma_decay_steps == 0 {
            return Err(Error::Config("sigma decay steps must be >= 1".into()));
        }
        if self.max_len == 0 || self.max_len > crate::world::MAX_UTTERANCE_LEN {
            return Err(Error::Config("max_len out of range".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp from 0 at step 0 to `w_l_final` at `anneal_steps`.
pub fn anneal_wl(step: u64, cfg: &RerankConfig) -> f64 {
    if cfg.anneal_steps == 0 || step >= cfg.anneal_steps {
        cfg.w_l_final
    } else {
        cfg.w_l_final * step as f64 / cfg.anneal_steps as f64
    }
}

/// `sigma0 * max(0, 1 - step / sigma_decay_steps)`.
pub fn sigma_at(step: u64, cfg: &RerankConfig) -> f64 {
    cfg.sigma0 * (1.0 - step as f64 / cfg.sigma_decay_steps as f64).max(0.0)
}

/// `argmax_j (w_l * tom_scores[j] + speaker_scores[j])`, ties to the lowest index.
pub fn rerank(speaker_scores: &[f64], tom_scores: &[f64], w_l: f64) -> Result<usize> {
    if speaker_scores.is_empty() {
        return Err(Error::Argument("rerank needs at least one candidate".into()));
    }
    if speaker_scores.len() != tom_scores.len() {
        return Err(Error::Argument("score lists differ in length".into()));
    }
    if !(w_l >= 0.0) {
        return Err(Error::Argument(format!("w_l must be >= 0, got {w_l}")));
    }
    let combined = combine(speaker_scores, tom_scores, w_l);
    Ok(argmax(&combined).expect("non-empty"))
}

fn combine(speaker_scores: &[f64], tom_scores: &[f64], w_l: f64) -> Vec<f64> {
    speaker_scores
        .iter()
        .zip(tom_scores)
        .map(|(s, t)| if w_l == 0.0 { *s } else { w_l * t + s })
        .collect()
}

/// The target's probability under `tom` and the full distribution over `candidates`.
pub fn tom_prob(tom: &ToMListenerNet, tokens: &[usize], candidates: &[Vec<f64>], target: usize) -> Result<(f64, Vec<f64>)> {
    let probs = tom.probs(tokens, candidates)?;
    let p = *probs
        .get(target)
        .ok_or_else(|| Error::Argument(format!("target {target} out of range")))?;
    Ok((p, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrace {
    pub candidates: Vec<Utterance>,
    pub speaker_scores: Vec<f64>,
    /// `log P(target | u)` under the reranking listener; empty in mode OFF.
    pub listener_scores: Vec<f64>,
    pub combined: Vec<f64>,
    pub chosen: usize,
    pub randomized: bool,
    pub w_l: f64,
    pub sigma: f64,
}

/// Samples the pool, scores it and picks the utterance to emit.
///
/// Random draws happen in a fixed order: the pool samples, then one uniform
/// for the exploration coin, then (only when it fires) the random index.
/// Scores are computed even when exploration fires.
#[allow(clippy::too_many_arguments)]
pub fn select_utterance(
    speaker: &SpeakerNet,
    scorer: &ListenerNet,
    image: &[f64],
    candidates: &[Vec<f64>],
    target: usize,
    cfg: &RerankConfig,
    global_step: u64,
    rng: &mut Rng,
) -> Result<(SpeakerSample, RerankTrace)> {
    if cfg.mode == RerankMode::Off {
        let s = speaker.sample(image, cfg.max_len, cfg.temperature, rng)?;
        let score = s.logprob();
        let trace = RerankTrace {
            candidates: vec![s.utterance.clone()],
            speaker_scores: vec![score],
            listener_scores: Vec::new(),
            combined: vec![score],
            chosen: 0,
            randomized: false,
            w_l: 0.0,
            sigma: 0.0,
        };
        return Ok((s, trace));
    }
    if target >= candidates.len() {
        return Err(Error::Argument(format!("target {target} out of range")));
    }
    let pool = (0..cfg.n_candidates)
        .map(|_| speaker.sample(image, cfg.max_len, cfg.temperature, rng))
        .collect::<Result<Vec<_>>>()?;
    let speaker_scores: Vec<f64> = pool
        .iter()
        .map(|s| {
            let lp = s.logprob();
            if cfg.length_normalize {
                lp / s.logps.len().max(1) as f64
            } else {
                lp
            }
        })
        .collect();
    let utterances: Vec<&[usize]> = pool.iter().map(|s| s.utterance.tokens.as_slice()).collect();
    let listener_scores: Vec<f64> = scorer
        .log_probs_many(&utterances, candidates)?
        .into_iter()
        .map(|lp| lp[target].max(PROB_FLOOR.ln()))
        .collect();
    let w_l = anneal_wl(global_step, cfg);
    let sigma = sigma_at(global_step, cfg);
    let combined = combine(&speaker_scores, &listener_scores, w_l);
    let best = argmax(&combined).expect("non-empty pool");
    let coin: f64 = rng.random();
    let randomized = coin < sigma;
    let chosen = if randomized {
        rng.random_range(0..pool.len())
    } else {
        best
    };
    let sample = pool[chosen].clone();
    let trace = RerankTrace {
        candidates: pool.into_iter().map(|s| s.utterance).collect(),
        speaker_scores,
        listener_scores,
        combined,
        chosen,
        randomized,
        w_l,
        sigma,
    };
    Ok((sample, trace))
}

/// `-ln P_tom(choice | u)` when the listener acted, 0 on NOOP.
pub fn tom_loss(tom_probs: &[f64], response: &ListenerResponse) -> f64 {
    match response.choice {
        Some(c) => -tom_probs.get(c).copied().unwrap_or(0.0).max(PROB_FLOOR).ln(),
        None => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerank_hand_cases() {
        let sp = [0.6f64.ln(), 0.4f64.ln()];
        let tom = [0.2f64.ln(), 0.9f64.ln()];
        assert_eq!(rerank(&sp, &tom, 0.0).unwrap(), 0);
        // products 0.12 vs 0.36
        assert_eq!(rerank(&sp, &tom, 1.0).unwrap(), 1);
        assert_eq!(rerank(&sp, &tom, 1000.0).unwrap(), 1);
        assert_eq!(rerank(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), 0);
        assert!(matches!(rerank(&[], &[], 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn high_weight_follows_tom_scores() {
        let sp = [-1.0, -9.0, -3.0];
        let tom = [-2.0, -0.5, -0.6];
        assert_eq!(rerank(&sp, &tom, 1000.0).unwrap(), 1);
    }

    #[test]
    fn anneal_and_sigma_schedules() {
        let cfg = RerankConfig {
            w_l_final: 4.0,
            anneal_steps: 100,
            sigma0: 0.5,
            sigma_decay_steps: 10,
            ..RerankConfig::default()
        };
        assert_eq!(anneal_wl(0, &cfg), 0.0);
        assert_eq!(anneal_wl(50, &cfg), 2.0);
        assert_eq!(anneal_wl(500, &cfg), 4.0);
        assert_eq!(sigma_at(0, &cfg), 0.5);
        assert!((sigma_at(5, &cfg) - 0.25).abs() < 1e-15);
        assert_eq!(sigma_at(10, &cfg), 0.0);
        assert_eq!(sigma_at(11, &cfg), 0.0);
    }

    #[test]
    fn presets_and_modes_parse() {
        assert_eq!(wl_preset("High").unwrap(), 1000.0);
        assert_eq!(wl_preset("zero").unwrap(), 0.0);
        assert!(wl_preset("huge").is_err());
        assert_eq!("RSA".parse::<RerankMode>().unwrap(), RerankMode::Rsa);
    }

    #[test]
    fn tom_loss_cases() {
        let acted = ListenerResponse {
            choice: Some(1),
            linguistic_input: None,
            p_max: 0.9,
            probs: vec![0.1, 0.9],
        };
        let noop = ListenerResponse {
            choice: None,
            ..acted.clone()
        };
        assert_eq!(tom_loss(&[0.3, 0.7], &noop), 0.0);
        assert_eq!(tom_loss(&[0.0, 1.0], &acted), 0.0);
        assert!((tom_loss(&[0.2; 5], &acted) - 5f64.ln()).abs() < 1e-12);
    }
}

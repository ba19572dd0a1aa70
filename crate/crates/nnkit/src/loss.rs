//! Plain (tape-free) probability helpers shared by agents and metrics.

use crate::{NnError, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(NnError::Argument("softmax of empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(NnError::Argument("log_softmax of empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// Log-softmax over the entries where `mask` is true; the rest receive
/// [`MASKED_LOGP`](crate::graph::MASKED_LOGP). The mask must allow at least one entry.
pub fn masked_log_softmax(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + x.iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .map(|(_, v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    x.iter()
        .enumerate()
        .map(|(i, v)| if allowed(i) { v - lse } else { crate::graph::MASKED_LOGP })
        .collect()
}

/// `-ln max(probs[target], PROB_FLOOR)`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs.get(target).ok_or_else(|| {
        NnError::Argument(format!("target {target} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_values() {
        // exp(2), exp(0.5), exp(0) normalised
        let e = [2f64.exp(), 0.5f64.exp(), 1.0];
        let z: f64 = e.iter().sum();
        let p = softmax(&[2.0, 0.5, 0.0]).unwrap();
        for (a, b) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.736).abs() < 1e-3);
        assert!((p[1] - 0.164).abs() < 1e-3);
        assert!((p[2] - 0.100).abs() < 1e-3);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(NnError::Argument(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[0.745, 0.166, 0.089], 1).unwrap() - 1.796).abs() < 1e-3);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(matches!(cross_entropy(&[1.0], 3), Err(NnError::Argument(_))));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}

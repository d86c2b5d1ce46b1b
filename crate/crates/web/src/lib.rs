//! Browser demo bindings. Every export takes plain values and returns a JSON
//! string so the page needs no generated glue beyond `wasm-bindgen`.

use glrg_core::metrics::{bleu4, gt_weights, meteor_lite, rouge_l, IdfTable, MetricKind, CIDER_SIGMA};
use glrg_core::model::SsSchedule;
use glrg_core::text::tokenize;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Scores `candidate` against newline-separated `references` and gives every
/// reference its leave-one-out weight under `metric` (`B4`, `M`, `R` or `C`).
/// CIDEr document frequencies treat each reference line as a document.
#[wasm_bindgen]
pub fn score_captions(candidate: &str, references: &str, metric: &str) -> Result<String, JsError> {
    let kind: MetricKind = metric.parse().map_err(|e| JsError::new(&format!("{e}")))?;
    let refs: Vec<Vec<String>> = references
        .lines()
        .map(tokenize)
        .filter(|r| !r.is_empty())
        .collect();
    if refs.is_empty() {
        return Err(JsError::new("enter at least one reference"));
    }
    let cand = tokenize(candidate);
    let idf = IdfTable::build(refs.iter().map(std::slice::from_ref));
    let weights = gt_weights(&refs, kind, Some(&idf)).map_err(|e| JsError::new(&e.to_string()))?;
    let cider = glrg_core::metrics::cider(&cand, &refs, &idf, CIDER_SIGMA);
    Ok(json!({
        "bleu4": bleu4(&cand, &refs),
        "meteor": meteor_lite(&cand, &refs),
        "rouge_l": rouge_l(&cand, &refs, 1.2),
        "cider": cider,
        "weights": weights,
        "references": refs.iter().map(|r| r.join(" ")).collect::<Vec<_>>(),
    })
    .to_string())
}

/// Scheduled-sampling ground-truth probability for epochs `0..epochs`.
#[wasm_bindgen]
pub fn schedule_curve(p0: f64, peak_epoch: usize, p_end: f64, end_epoch: usize, epochs: usize) -> Result<String, JsError> {
    if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p_end) || end_epoch < peak_epoch {
        return Err(JsError::new("need probabilities in [0, 1] and end epoch >= peak epoch"));
    }
    let s = SsSchedule {
        p0,
        peak_epoch,
        p_end,
        end_epoch,
    };
    let curve: Vec<f64> = (0..epochs).map(|e| s.probability(e)).collect();
    Ok(serde_json::to_string(&curve).expect("finite floats"))
}

/// Exact moments of the score-function gradient `(r - b) d log p / d theta`
/// for a softmax policy over words with fixed rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditMoments {
    pub mean: Vec<f64>,
    pub variance: f64,
}

pub fn bandit_moments(logits: &[f64], rewards: &[f64], baseline: f64) -> BanditMoments {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let p: Vec<f64> = exp.iter().map(|e| e / z).collect();
    let n = p.len();
    let mut mean = vec![0.0; n];
    let mut second = 0.0;
    for i in 0..n {
        let a = rewards[i] - baseline;
        let mut sq = 0.0;
        for k in 0..n {
            let g = a * (f64::from(u8::from(i == k)) - p[k]);
            mean[k] += p[i] * g;
            sq += g * g;
        }
        second += p[i] * sq;
    }
    let variance = second - mean.iter().map(|m| m * m).sum::<f64>();
    BanditMoments { mean, variance }
}

/// Gradient mean and variance trace without a baseline, with the expected
/// reward as baseline, and with a constant baseline `b`.
#[wasm_bindgen]
pub fn baseline_variance(logits: &str, rewards: &str, b: f64) -> Result<String, JsError> {
    let parse = |s: &str| -> Result<Vec<f64>, JsError> {
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| JsError::new(&format!("{t:?}: {e}"))))
            .collect()
    };
    let (logits, rewards) = (parse(logits)?, parse(rewards)?);
    if logits.is_empty() || logits.len() != rewards.len() {
        return Err(JsError::new("logits and rewards need the same, non-zero length"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let expected: f64 = logits.iter().zip(&rewards).map(|(l, r)| (l - max).exp() / z * r).sum();
    let row = |name: &str, baseline: f64| {
        let m = bandit_moments(&logits, &rewards, baseline);
        json!({"name": name, "baseline": baseline, "mean": m.mean, "variance": m.variance})
    };
    Ok(json!([row("none", 0.0), row("expected reward", expected), row("constant", b)]).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_leaves_mean_unchanged() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let rewards = [0.9, 0.1, 0.5, 0.7];
        let none = bandit_moments(&logits, &rewards, 0.0);
        for b in [0.25, 0.5, 3.0] {
            let m = bandit_moments(&logits, &rewards, b);
            for (x, y) in m.mean.iter().zip(&none.mean) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_reward_baseline_reduces_variance() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let rewards = [0.9, 0.8, 0.95, 0.85];
        let p: Vec<f64> = {
            let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
            logits.iter().map(|l| l.exp() / z).collect()
        };
        let er: f64 = p.iter().zip(&rewards).map(|(p, r)| p * r).sum();
        assert!(bandit_moments(&logits, &rewards, er).variance < bandit_moments(&logits, &rewards, 0.0).variance);
    }

    #[test]
    fn constant_reward_has_zero_gradient() {
        let m = bandit_moments(&[1.0, 2.0, 3.0], &[0.4, 0.4, 0.4], 0.0);
        assert!(m.mean.iter().all(|x| x.abs() < 1e-12));
        assert!(bandit_moments(&[1.0, 2.0, 3.0], &[0.4, 0.4, 0.4], 0.4).variance.abs() < 1e-12);
    }
}

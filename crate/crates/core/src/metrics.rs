//! Per-step validation loss and precision with and without the conditional
//! mask, plus executable checks of the two dominance results:
//!
//! * masked loss never exceeds unmasked loss when the gold token is unmasked,
//!   strictly smaller once any probability mass is masked out;
//! * masked precision is never below unmasked precision.
//!
//! Masked quantities are taken on the renormalized distribution
//! `ŷ_i / Σ_{j∈V1} ŷ_j`. The literal restricted sum `Σ_{i∈V1} -y_i log ŷ_i`
//! is available as [`loss_masked_literal`]; with one-hot labels it always
//! equals the unmasked loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{apply_mask, argmax, DecodeTrace, MaskVector};

/// Masked-out mass above which the loss reduction must be strict.
pub const STRICT_MASS_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("gold token has zero probability")]
    ZeroProbabilityGold,
    #[error("gold token {0} is masked")]
    GoldMasked(usize),
    #[error("gold index {gold} outside a vocabulary of {len}")]
    GoldOutOfRange { gold: usize, len: usize },
    #[error("distribution has {dist} entries but the mask has {mask}")]
    MaskLength { dist: usize, mask: usize },
    #[error("trace has {trace} steps but gold has {gold} tokens")]
    LengthMismatch { trace: usize, gold: usize },
}

/// One prediction step: model distribution, gold label, mask, choice.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub dist: Vec<f64>,
    pub gold: usize,
    pub mask: MaskVector,
    pub chosen: usize,
}

impl StepRecord {
    /// A record whose chosen index is the masked argmax.
    pub fn new(dist: Vec<f64>, gold: usize, mask: MaskVector) -> Self {
        let chosen = apply_mask(&dist, &mask)
            .ok()
            .and_then(|m| argmax(&m.probs))
            .unwrap_or(0);
        StepRecord {
            dist,
            gold,
            mask,
            chosen,
        }
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.gold >= self.dist.len() {
            return Err(MetricError::GoldOutOfRange {
                gold: self.gold,
                len: self.dist.len(),
            });
        }
        if self.mask.len() != self.dist.len() {
            return Err(MetricError::MaskLength {
                dist: self.dist.len(),
                mask: self.mask.len(),
            });
        }
        Ok(())
    }

    /// Sum over the unmasked entries, or over all entries with `None`.
    /// Both walk the vector in the same order so a full mask reproduces the
    /// total bit for bit, and a subset never sums higher.
    fn mass(&self, mask: Option<&MaskVector>) -> f64 {
        let mut total = 0.0;
        for (i, &p) in self.dist.iter().enumerate() {
            if mask.is_none_or(|m| m.is_allowed(i)) {
                total += p;
            }
        }
        total
    }
}

/// `-log ŷ_gold` on the distribution normalized by its own total.
pub fn loss_unmasked(rec: &StepRecord) -> Result<f64, MetricError> {
    rec.check()?;
    let p = rec.dist[rec.gold];
    if p <= 0.0 {
        return Err(MetricError::ZeroProbabilityGold);
    }
    Ok(-(p / rec.mass(None)).ln())
}

/// `-log(ŷ_gold / Σ_{j∈V1} ŷ_j)`.
pub fn loss_masked(rec: &StepRecord) -> Result<f64, MetricError> {
    rec.check()?;
    if !rec.mask.is_allowed(rec.gold) {
        return Err(MetricError::GoldMasked(rec.gold));
    }
    let p = rec.dist[rec.gold];
    if p <= 0.0 {
        return Err(MetricError::ZeroProbabilityGold);
    }
    Ok(-(p / rec.mass(Some(&rec.mask))).ln())
}

/// `Σ_{i∈V1} -y_i log ŷ_i` with one-hot `y`, without renormalizing.
pub fn loss_masked_literal(rec: &StepRecord) -> Result<f64, MetricError> {
    if !rec.mask.is_allowed(rec.gold) {
        return Err(MetricError::GoldMasked(rec.gold));
    }
    loss_unmasked(rec)
}

/// 1 when the argmax equals the gold index. The masked variant takes the
/// argmax of the renormalized masked distribution.
pub fn precision_indicator(rec: &StepRecord, masked: bool) -> Result<u8, MetricError> {
    rec.check()?;
    let top = if masked {
        if !rec.mask.is_allowed(rec.gold) {
            return Err(MetricError::GoldMasked(rec.gold));
        }
        let m = apply_mask(&rec.dist, &rec.mask).map_err(|_| MetricError::GoldMasked(rec.gold))?;
        argmax(&m.probs)
    } else {
        argmax(&rec.dist)
    };
    Ok(u8::from(top == Some(rec.gold)))
}

// ---------------------------------------------------------------------------
// Theorem checks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCounterexample {
    pub dist: Vec<f64>,
    pub gold: usize,
    pub mask: Vec<bool>,
    pub loss_masked: f64,
    pub loss_unmasked: f64,
    pub masked_out_mass: f64,
    /// `true` when the failure is a missing strict decrease.
    pub strictness: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub trials: usize,
    pub vocab_size: usize,
    /// Trials whose masked-out mass exceeded the strictness threshold.
    pub strict_trials: usize,
    /// Trials with a full mask, where both losses must coincide.
    pub equal_trials: usize,
    pub violations: Vec<LossCounterexample>,
}

impl LossReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random `(distribution, mask, gold ∈ V1)` trials checking that masking
/// never raises the loss and strictly lowers it once mass is removed.
pub fn theorem_loss_check(trials: usize, vocab_size: usize, seed: u64) -> LossReport {
    theorem_loss_check_with(trials, vocab_size, seed, loss_masked)
}

/// [`theorem_loss_check`] with a substitute masked-loss function.
pub fn theorem_loss_check_with<F>(
    trials: usize,
    vocab_size: usize,
    seed: u64,
    masked_loss: F,
) -> LossReport
where
    F: Fn(&StepRecord) -> Result<f64, MetricError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LossReport {
        trials,
        vocab_size,
        strict_trials: 0,
        equal_trials: 0,
        violations: Vec::new(),
    };
    for _ in 0..trials {
        let dist = random_distribution(&mut rng, vocab_size);
        let gold = rng.gen_range(0..vocab_size);
        // keep probability per token; 1.0 in some trials gives a full mask
        let keep: f64 = match rng.gen_range(0..8) {
            0 => 1.0,
            1 => 0.95,
            _ => rng.gen(),
        };
        let mask = MaskVector::from_bools(
            (0..vocab_size)
                .map(|i| i == gold || rng.gen_bool(keep))
                .collect(),
        );
        let removed: f64 = mask.masked().map(|i| dist[i]).sum();
        let full = mask.cardinality() == vocab_size;
        let rec = StepRecord::new(dist, gold, mask);
        let (Ok(lm), Ok(lu)) = (masked_loss(&rec), loss_unmasked(&rec)) else {
            continue;
        };
        let strict = removed > STRICT_MASS_THRESHOLD;
        report.strict_trials += usize::from(strict);
        report.equal_trials += usize::from(full);
        let bad_order = lm > lu;
        let bad_strict = strict && lm >= lu;
        let bad_equal = full && lm != lu;
        if bad_order || bad_strict || bad_equal {
            report.violations.push(LossCounterexample {
                gold,
                mask: rec.mask.as_bools().to_vec(),
                loss_masked: lm,
                loss_unmasked: lu,
                masked_out_mass: removed,
                strictness: !bad_order && !bad_equal,
                dist: rec.dist,
            });
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCounterexample {
    pub dist: Vec<f64>,
    pub gold: usize,
    pub mask: Vec<bool>,
    pub masked: u8,
    pub unmasked: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub vocab_size: usize,
    pub distributions: usize,
    /// (distribution, gold, mask) combinations evaluated.
    pub checks: usize,
    /// Combinations where masking turned a miss into a hit.
    pub improvements: usize,
    pub violations: Vec<PrecisionCounterexample>,
}

impl PrecisionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustive precision check: every gold index and every mask containing
/// it, over `distributions` grid distributions of size `vocab_size`.
pub fn theorem_precision_check(vocab_size: usize, distributions: usize, seed: u64) -> PrecisionReport {
    assert!(
        (1..=16).contains(&vocab_size),
        "exhaustive mask enumeration needs a small vocabulary"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PrecisionReport {
        vocab_size,
        distributions,
        checks: 0,
        improvements: 0,
        violations: Vec::new(),
    };
    for d in 0..distributions {
        let dist = grid_distribution(&mut rng, vocab_size, d);
        for gold in 0..vocab_size {
            let unmasked_rec = StepRecord::new(dist.clone(), gold, MaskVector::full(vocab_size));
            let unmasked = precision_indicator(&unmasked_rec, false).expect("valid record");
            for bits in 0u32..(1 << vocab_size) {
                if bits & (1 << gold) == 0 {
                    continue;
                }
                let mask = MaskVector::from_bools((0..vocab_size).map(|i| bits & (1 << i) != 0).collect());
                let rec = StepRecord {
                    dist: dist.clone(),
                    gold,
                    mask,
                    chosen: 0,
                };
                let masked = precision_indicator(&rec, true).expect("gold is unmasked");
                report.checks += 1;
                report.improvements += usize::from(masked > unmasked);
                if masked < unmasked {
                    report.violations.push(PrecisionCounterexample {
                        dist: dist.clone(),
                        gold,
                        mask: rec.mask.as_bools().to_vec(),
                        masked,
                        unmasked,
                    });
                }
            }
        }
    }
    report
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let weights: Vec<f64> = match rng.gen_range(0..4) {
        // flat-ish
        0 => (0..n).map(|_| rng.gen::<f64>()).collect(),
        // peaked: softmax of scaled noise
        1 => {
            let scale = rng.gen_range(1.0..30.0);
            (0..n).map(|_| (scale * rng.gen::<f64>()).exp()).collect()
        }
        // one dominant token, tiny tail
        2 => {
            let top = rng.gen_range(0..n);
            let tail = 10f64.powf(-rng.gen_range(3.0..14.0));
            (0..n)
                .map(|i| if i == top { 1.0 } else { tail * rng.gen::<f64>() })
                .collect()
        }
        _ => (0..n).map(|_| rng.gen::<f64>().powi(4)).collect(),
    };
    normalize(weights)
}

/// Distributions with deliberate ties and zeros for the first half of the
/// grid, continuous random ones after.
fn grid_distribution(rng: &mut ChaCha8Rng, n: usize, index: usize) -> Vec<f64> {
    if index % 2 == 0 {
        loop {
            let w: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0u8..4))).collect();
            if w.iter().any(|&x| x > 0.0) {
                return normalize(w);
            }
        }
    }
    normalize((0..n).map(|_| rng.gen::<f64>()).collect())
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

// ---------------------------------------------------------------------------
// Sequences

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub steps: usize,
    /// Steps where both losses are defined (gold unmasked, positive mass).
    pub scored_steps: usize,
    pub gold_masked_steps: usize,
    pub mean_masked_loss: f64,
    pub mean_unmasked_loss: f64,
    /// Masked precision per step; 0 where the gold token was masked.
    pub precision: Vec<u8>,
    pub exact_match: bool,
}

/// Aggregates per-step metrics of a trace against position-aligned gold
/// tokens. Unmasked traces are scored with a full mask.
pub fn sequence_report(trace: &DecodeTrace, gold: &[u32]) -> Result<SequenceReport, MetricError> {
    if trace.is_empty() || trace.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            trace: trace.len(),
            gold: gold.len(),
        });
    }
    let mut masked_sum = 0.0;
    let mut unmasked_sum = 0.0;
    let mut scored = 0;
    let mut gold_masked = 0;
    let mut precision = Vec::with_capacity(gold.len());
    for (step, &g) in trace.steps.iter().zip(gold) {
        let mask = step
            .mask
            .clone()
            .unwrap_or_else(|| MaskVector::full(step.dist.len()));
        let rec = StepRecord {
            dist: step.dist.clone(),
            gold: g as usize,
            mask,
            chosen: step.chosen as usize,
        };
        match precision_indicator(&rec, true) {
            Ok(p) => precision.push(p),
            Err(MetricError::GoldMasked(_)) => {
                gold_masked += 1;
                precision.push(0);
                continue;
            }
            Err(e) => return Err(e),
        }
        if let (Ok(m), Ok(u)) = (loss_masked(&rec), loss_unmasked(&rec)) {
            masked_sum += m;
            unmasked_sum += u;
            scored += 1;
        }
    }
    let mean = |s: f64| if scored == 0 { 0.0 } else { s / scored as f64 };
    Ok(SequenceReport {
        steps: gold.len(),
        scored_steps: scored,
        gold_masked_steps: gold_masked,
        mean_masked_loss: mean(masked_sum),
        mean_unmasked_loss: mean(unmasked_sum),
        exact_match: precision.iter().all(|&p| p == 1),
        precision,
    })
}

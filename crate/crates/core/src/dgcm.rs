//! Dual-granularity classification: a coarse head over polarity groups, a
//! fine head over the negative emotions that only trains on negative
//! samples, the progressive loss weight, and coarse-to-fine prediction.

use crate::config::LabelsSection;
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

pub const NEGATIVE: &str = "negative";

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSpace {
    full: Vec<String>,
    coarse: Vec<String>,
    fine: Vec<String>,
    full_to_coarse: Vec<usize>,
    full_to_fine: Vec<Option<usize>>,
    fine_to_full: Vec<usize>,
    /// The single full label of every coarse class other than negative.
    coarse_to_full: Vec<Option<usize>>,
    negative: Option<usize>,
}

fn find(names: &[String], name: &str) -> Option<usize> {
    names.iter().position(|n| n == name)
}

impl LabelSpace {
    /// Coarse classes are ordered `negative` first, then by first
    /// appearance in `coarse_map`.
    pub fn from_config(labels: &LabelsSection) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(msg));
        let full = labels.full.clone();
        if full.is_empty() {
            return bad("labels.full is empty".into());
        }
        for (i, name) in full.iter().enumerate() {
            if find(&full[..i], name).is_some() {
                return bad(format!("labels.full lists `{name}` twice"));
            }
        }
        if labels.coarse_map.len() != full.len() {
            return bad(format!(
                "labels.coarse_map has {} entries for {} full labels",
                labels.coarse_map.len(),
                full.len()
            ));
        }
        let mut coarse: Vec<String> = Vec::new();
        if labels.coarse_map.iter().any(|c| c == NEGATIVE) {
            coarse.push(NEGATIVE.to_string());
        }
        for c in &labels.coarse_map {
            if find(&coarse, c).is_none() {
                coarse.push(c.clone());
            }
        }
        let full_to_coarse: Vec<usize> = labels.coarse_map.iter().map(|c| find(&coarse, c).unwrap()).collect();
        let negative = find(&coarse, NEGATIVE);

        let fine = labels.fine.clone();
        let mut fine_to_full = Vec::with_capacity(fine.len());
        let mut full_to_fine = vec![None; full.len()];
        for (fi, name) in fine.iter().enumerate() {
            let Some(f) = find(&full, name) else {
                return bad(format!("fine label `{name}` is not in labels.full"));
            };
            if full_to_fine[f].is_some() {
                return bad(format!("labels.fine lists `{name}` twice"));
            }
            if Some(full_to_coarse[f]) != negative {
                return bad(format!("fine label `{name}` does not map to `{NEGATIVE}`"));
            }
            full_to_fine[f] = Some(fi);
            fine_to_full.push(f);
        }
        for (f, name) in full.iter().enumerate() {
            if Some(full_to_coarse[f]) == negative && full_to_fine[f].is_none() {
                return bad(format!("`{name}` maps to `{NEGATIVE}` but is missing from labels.fine"));
            }
        }

        let mut coarse_to_full = vec![None; coarse.len()];
        for (ci, name) in coarse.iter().enumerate() {
            if Some(ci) == negative {
                continue;
            }
            let members: Vec<usize> = (0..full.len()).filter(|&f| full_to_coarse[f] == ci).collect();
            if members.len() != 1 {
                return bad(format!(
                    "coarse class `{name}` groups {} full labels; only `{NEGATIVE}` may group several",
                    members.len()
                ));
            }
            coarse_to_full[ci] = Some(members[0]);
        }
        Ok(LabelSpace {
            full,
            coarse,
            fine,
            full_to_coarse,
            full_to_fine,
            fine_to_full,
            coarse_to_full,
            negative,
        })
    }

    pub fn full(&self) -> &[String] {
        &self.full
    }

    pub fn coarse(&self) -> &[String] {
        &self.coarse
    }

    pub fn fine(&self) -> &[String] {
        &self.fine
    }

    pub fn negative(&self) -> Option<usize> {
        self.negative
    }

    pub fn full_index(&self, name: &str) -> Result<usize> {
        find(&self.full, name)
            .ok_or_else(|| Error::InvalidArgument(format!("label `{name}` is not in the label space")))
    }

    fn check(&self, full: usize) -> Result<()> {
        if full >= self.full.len() {
            return Err(Error::InvalidArgument(format!(
                "label index {full} outside a space of {} labels",
                self.full.len()
            )));
        }
        Ok(())
    }

    pub fn coarse_of(&self, full: usize) -> Result<usize> {
        self.check(full)?;
        Ok(self.full_to_coarse[full])
    }

    /// Fine index of a negative label, `None` otherwise.
    pub fn fine_of(&self, full: usize) -> Result<Option<usize>> {
        self.check(full)?;
        Ok(self.full_to_fine[full])
    }

    pub fn full_of_fine(&self, fine: usize) -> usize {
        self.fine_to_full[fine]
    }

    pub fn is_negative(&self, full: usize) -> Result<bool> {
        Ok(self.fine_of(full)?.is_some())
    }
}

/// Weight of the fine loss at an integer epoch.
pub fn alpha(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::InvalidArgument("total_epochs must be positive".into()));
    }
    Ok((0.5 + 2.0 * epoch as f64 / total_epochs as f64).min(2.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

/// `0.5 * (coarse + alpha * fine)`, with the fine term absent for
/// non-negative samples.
pub fn combine(coarse: f64, fine: Option<f64>, alpha: f64) -> LossBreakdown {
    let fine = fine.unwrap_or(0.0);
    LossBreakdown {
        coarse,
        fine,
        total: 0.5 * (coarse + alpha * fine),
    }
}

/// Cross-entropy of one logit row via max-shifted log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Loss of a single sample.
pub fn dgcm_loss(
    coarse_logits: &[f64],
    fine_logits: &[f64],
    y_full: usize,
    space: &LabelSpace,
    epoch: usize,
    total_epochs: usize,
) -> Result<LossBreakdown> {
    let lc = cross_entropy(coarse_logits, space.coarse_of(y_full)?);
    let lf = space.fine_of(y_full)?.map(|f| cross_entropy(fine_logits, f));
    Ok(combine(lc, lf, alpha(epoch, total_epochs)?))
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub coarse: Var,
    /// Absent when the batch holds no negative sample.
    pub fine: Option<Var>,
}

/// Batch loss: the coarse term is a mean over the batch; the fine term is
/// a mean over negative samples (or over the whole batch when
/// `fine_mean_over_negatives` is off). Non-negative rows carry zero weight,
/// so they send exactly zero gradient into the fine head.
pub fn dgcm_batch_loss<T: Element>(
    g: &mut Graph<T>,
    coarse_logits: Var,
    fine_logits: Var,
    labels: &[usize],
    space: &LabelSpace,
    alpha: f64,
    fine_mean_over_negatives: bool,
) -> Result<BatchLoss> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let coarse_targets = labels.iter().map(|&y| space.coarse_of(y)).collect::<Result<Vec<_>>>()?;
    let coarse = g.cross_entropy(coarse_logits, coarse_targets, vec![1.0 / n as f64; n])?;
    let fine_idx = labels.iter().map(|&y| space.fine_of(y)).collect::<Result<Vec<_>>>()?;
    let negatives = fine_idx.iter().filter(|f| f.is_some()).count();
    let fine = if negatives == 0 {
        None
    } else {
        let denom = if fine_mean_over_negatives { negatives } else { n } as f64;
        let targets = fine_idx.iter().map(|f| f.unwrap_or(0)).collect();
        let weights = fine_idx
            .iter()
            .map(|f| if f.is_some() { 1.0 / denom } else { 0.0 })
            .collect();
        Some(g.cross_entropy(fine_logits, targets, weights)?)
    };
    let inner = match fine {
        Some(f) => {
            let weighted = g.scale(f, alpha)?;
            g.add(coarse, weighted)?
        }
        None => coarse,
    };
    let total = g.scale(inner, 0.5)?;
    Ok(BatchLoss { total, coarse, fine })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Full-label prediction: coarse argmax, refined by the fine head only when
/// the coarse class is negative.
pub fn dgcm_predict(coarse_logits: &[f64], fine_logits: &[f64], space: &LabelSpace) -> usize {
    let c = argmax(coarse_logits);
    match space.coarse_to_full[c] {
        Some(full) => full,
        None => space.fine_to_full[argmax(fine_logits)],
    }
}

pub fn single_head_predict(logits: &[f64]) -> usize {
    argmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dfme() -> LabelSpace {
        LabelSpace::from_config(&LabelsSection::dfme()).unwrap()
    }

    #[test]
    fn dfme_space_layout() {
        let s = dfme();
        assert_eq!(s.coarse(), ["negative", "contempt", "positive", "surprise"]);
        assert_eq!(s.fine(), ["anger", "disgust", "fear", "sadness"]);
        let happiness = s.full_index("happiness").unwrap();
        assert_eq!(s.coarse_of(happiness).unwrap(), 2);
        assert_eq!(s.fine_of(happiness).unwrap(), None);
        assert_eq!(s.fine_of(s.full_index("fear").unwrap()).unwrap(), Some(2));
        assert!(s.coarse_of(7).is_err());
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        let mut labels = LabelsSection::dfme();
        labels.coarse_map[1] = "positive".into(); // contempt and happiness share a class
        assert!(LabelSpace::from_config(&labels).is_err());

        let mut labels = LabelsSection::dfme();
        labels.fine.pop(); // sadness maps to negative but has no fine slot
        assert!(LabelSpace::from_config(&labels).is_err());

        let mut labels = LabelsSection::dfme();
        labels.fine[0] = "happiness".into();
        assert!(LabelSpace::from_config(&labels).is_err());
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha(0, 100).unwrap(), 0.5);
        assert_eq!(alpha(75, 100).unwrap(), 2.0);
        assert_eq!(alpha(100, 100).unwrap(), 2.0);
        assert_eq!(alpha(25, 100).unwrap(), 1.0);
        assert!(alpha(0, 0).is_err());
    }

    #[test]
    fn loss_arithmetic() {
        assert_eq!(combine(1.0, Some(2.0), 0.5).total, 1.0);
        assert_eq!(combine(1.3, None, 1.7).total, 0.65);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in 1..8 {
            assert!((cross_entropy(&vec![0.3; k], 0) - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_rules() {
        let s = dfme();
        let surprise = s.full_index("surprise").unwrap();
        let fear = s.full_index("fear").unwrap();
        assert_eq!(dgcm_predict(&[0., 0., 0., 5.], &[0., 0., 9., 0.], &s), surprise);
        assert_eq!(dgcm_predict(&[5., 0., 0., 0.], &[0., 0., 9., 0.], &s), fear);
        assert_eq!(single_head_predict(&[1.0; 7]), 0);
        assert_eq!(single_head_predict(&[0., 0., 1., 0.]), 2);
    }
}

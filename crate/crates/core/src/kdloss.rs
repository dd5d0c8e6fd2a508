//! Training objectives: word-level distillation against truncated teacher
//! distributions, label-smoothed cross entropy, and weighted combinations.
//!
//! All losses are means over unmasked target positions and are recorded on a
//! [`Graph`], so gradients flow back into the student logits.

use crate::error::{invalid, KdError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Top-K slice of a teacher's next-token distribution at one position.
///
/// `logprobs` are the teacher's full-softmax log-probabilities (not
/// renormalized), ordered by descending probability.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedDistribution<L = f64> {
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<L>,
}

impl<L: Scalar> TruncatedDistribution<L> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> TruncatedDistribution<T> {
        TruncatedDistribution {
            token_ids: self.token_ids.clone(),
            logprobs: self.logprobs.iter().map(|&v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    /// Renormalized support probabilities after dividing log-probabilities by
    /// `temperature`.
    pub fn renormalized(&self, temperature: f64) -> Vec<f64> {
        let scaled: Vec<f64> = self.logprobs.iter().map(|&v| v.to_f64_lossy() / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
        scaled.iter().map(|v| (v - max).exp() / z).collect()
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.token_ids.is_empty() || self.token_ids.len() != self.logprobs.len() {
            return invalid("truncated distribution needs K >= 1 aligned ids and log-probabilities");
        }
        for &id in &self.token_ids {
            if id as usize >= vocab {
                return Err(KdError::InvalidToken { id, vocab });
            }
        }
        Ok(())
    }
}

/// Keeps the `k` most probable ids of `full_probs` (all of them if `k >= V`).
/// Ties go to the lower id.
pub fn truncate_topk<S: Scalar>(full_probs: &[S], k: usize) -> Result<TruncatedDistribution<S>> {
    if k < 1 {
        return invalid("K must be at least 1");
    }
    let total: f64 = full_probs.iter().map(|p| p.to_f64_lossy()).sum();
    if full_probs.is_empty() || (total - 1.0).abs() > 1e-6 {
        return invalid(format!("probabilities must sum to 1, got {total}"));
    }
    let mut order: Vec<usize> = (0..full_probs.len()).collect();
    order.sort_by(|&a, &b| {
        full_probs[b]
            .partial_cmp(&full_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let floor = S::min_positive_value().ln();
    Ok(TruncatedDistribution {
        token_ids: order.iter().map(|&i| i as u32).collect(),
        logprobs: order.iter().map(|&i| full_probs[i].ln().max(floor)).collect(),
    })
}

fn unmasked_rows(rows: usize, pad_mask: Option<&[bool]>) -> Result<Vec<usize>> {
    match pad_mask {
        None => Ok((0..rows).collect()),
        Some(m) if m.len() == rows => Ok((0..rows).filter(|&r| !m[r]).collect()),
        Some(m) => invalid(format!("pad mask has {} entries for {rows} rows", m.len())),
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return invalid(format!("temperature must be positive and finite, got {t}"));
    }
    Ok(())
}

fn student_log_probs<S: Scalar>(g: &mut Graph<S>, logits: Var, temperature: f64) -> Var {
    let z = if temperature == 1.0 {
        logits
    } else {
        g.scale(logits, S::of(1.0 / temperature))
    };
    g.log_softmax(z)
}

/// Mean over unmasked positions of `KL(p̂_teacher ‖ q_student)`.
///
/// The teacher's stored log-probabilities are divided by `temperature` and
/// renormalized over their support; the student side is the full softmax of
/// `logits / temperature` evaluated on the support ids. `pad_mask[r] == true`
/// excludes row `r`; `teacher` holds one entry per remaining row.
pub fn word_kd_loss<S: Scalar, L: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    teacher: &[TruncatedDistribution<L>],
    temperature: f64,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    check_temperature(temperature)?;
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return invalid("student logits must be [len, V]");
    }
    let (rows, vocab) = (shape[0], shape[1]);
    let keep = unmasked_rows(rows, pad_mask)?;
    if keep.len() != teacher.len() {
        return invalid(format!(
            "{} teacher distributions for {} unmasked positions",
            teacher.len(),
            keep.len()
        ));
    }
    if keep.is_empty() {
        return invalid("no unmasked positions");
    }
    let n = keep.len() as f64;
    let mut weights = vec![S::zero(); rows * vocab];
    let mut constant = 0.0;
    for (&r, dist) in keep.iter().zip(teacher) {
        dist.validate(vocab)?;
        let p_hat = dist.renormalized(temperature);
        for (&id, &p) in dist.token_ids.iter().zip(&p_hat) {
            weights[r * vocab + id as usize] -= S::of(p / n);
            if p > 0.0 {
                constant += p * p.ln() / n;
            }
        }
    }
    let logq = student_log_probs(g, logits, temperature);
    let cross = g.weighted_sum(logq, weights);
    Ok(g.add_scalar(cross, S::of(constant)))
}

/// Mean over unmasked positions of the cross entropy against
/// `(1 - epsilon) * onehot(gold) + epsilon * uniform(V)`.
pub fn label_smoothed_ce<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    gold: &[u32],
    epsilon: f64,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return invalid(format!("epsilon must lie in [0, 1), got {epsilon}"));
    }
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return invalid("student logits must be [len, V]");
    }
    let (rows, vocab) = (shape[0], shape[1]);
    let keep = unmasked_rows(rows, pad_mask)?;
    if keep.len() != gold.len() {
        return invalid(format!("{} gold tokens for {} unmasked positions", gold.len(), keep.len()));
    }
    if keep.is_empty() {
        return invalid("no unmasked positions");
    }
    let n = keep.len() as f64;
    let smooth = S::of(epsilon / vocab as f64 / n);
    let hit = S::of((1.0 - epsilon) / n);
    let mut weights = vec![S::zero(); rows * vocab];
    for (&r, &y) in keep.iter().zip(gold) {
        if y as usize >= vocab {
            return Err(KdError::InvalidToken { id: y, vocab });
        }
        let row = &mut weights[r * vocab..(r + 1) * vocab];
        if epsilon > 0.0 {
            row.iter_mut().for_each(|w| *w = -smooth);
        }
        row[y as usize] -= hit;
    }
    let logq = g.log_softmax(logits);
    Ok(g.weighted_sum(logq, weights))
}

/// One component of a composed objective.
#[derive(Clone, Copy, Debug)]
pub enum LossTerm<'a, L = f64> {
    WordKd {
        teacher: &'a [TruncatedDistribution<L>],
        temperature: f64,
    },
    LabelSmoothedCe {
        gold: &'a [u32],
        epsilon: f64,
    },
}

/// Weighted sum of loss terms evaluated on the same logits.
pub fn compose_loss<S: Scalar, L: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    terms: &[(LossTerm<L>, f64)],
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    if terms.is_empty() {
        return invalid("compose_loss needs at least one term");
    }
    if terms.iter().any(|(_, w)| !(*w >= 0.0)) || !terms.iter().any(|(_, w)| *w > 0.0) {
        return invalid("weights must be non-negative with at least one positive");
    }
    let mut total: Option<Var> = None;
    for (term, weight) in terms {
        let loss = match *term {
            LossTerm::WordKd { teacher, temperature } => word_kd_loss(g, logits, teacher, temperature, pad_mask)?,
            LossTerm::LabelSmoothedCe { gold, epsilon } => label_smoothed_ce(g, logits, gold, epsilon, pad_mask)?,
        };
        let scaled = if *weight == 1.0 { loss } else { g.scale(loss, S::of(*weight)) };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    }
    Ok(total.unwrap())
}

/// Value of [`word_kd_loss`] on a plain logits tensor.
pub fn word_kd_loss_value<S: Scalar, L: Scalar>(
    logits: &Tensor<S>,
    teacher: &[TruncatedDistribution<L>],
    temperature: f64,
    pad_mask: Option<&[bool]>,
) -> Result<S> {
    let mut g = Graph::new();
    let z = g.leaf(logits);
    let loss = word_kd_loss(&mut g, z, teacher, temperature, pad_mask)?;
    Ok(g.value(loss).item())
}

/// Value of [`label_smoothed_ce`] on a plain logits tensor.
pub fn label_smoothed_ce_value<S: Scalar>(
    logits: &Tensor<S>,
    gold: &[u32],
    epsilon: f64,
    pad_mask: Option<&[bool]>,
) -> Result<S> {
    let mut g = Graph::new();
    let z = g.leaf(logits);
    let loss = label_smoothed_ce(&mut g, z, gold, epsilon, pad_mask)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(ids: &[u32], probs: &[f64]) -> TruncatedDistribution<f64> {
        TruncatedDistribution {
            token_ids: ids.to_vec(),
            logprobs: probs.iter().map(|p| p.ln()).collect(),
        }
    }

    #[test]
    fn topk_examples() {
        let p = [0.5f64, 0.3, 0.1, 0.1];
        let t = truncate_topk(&p, 2).unwrap();
        assert_eq!(t.token_ids, vec![0, 1]);
        assert_abs_diff_eq!(t.logprobs[0].exp(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.logprobs[1].exp(), 0.3, epsilon = 1e-15);
        assert_eq!(truncate_topk(&p, 1).unwrap().token_ids, vec![0]);
        let all = truncate_topk(&p, 9).unwrap();
        assert_eq!(all.token_ids, vec![0, 1, 2, 3]);
        assert!(truncate_topk(&p, 0).is_err());
        assert!(truncate_topk(&[0.5, 0.1], 1).is_err());
    }

    #[test]
    fn topk_ties_prefer_lower_id() {
        let t = truncate_topk(&[0.2, 0.4, 0.4], 2).unwrap();
        assert_eq!(t.token_ids, vec![1, 2]);
    }

    #[test]
    fn kd_uniform_student_example() {
        // teacher {a: 0.75, b: 0.25} after renormalization; student uniform over 4
        let logits = Tensor::<f64>::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let teacher = [dist(&[0, 1], &[0.6, 0.2])];
        let loss = word_kd_loss_value(&logits, &teacher, 1.0, None).unwrap();
        let want = 0.75 * (0.75f64 / 0.25).ln() + 0.25 * (0.25f64 / 0.25).ln();
        assert_abs_diff_eq!(loss, want, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.8240, epsilon = 5e-5);
    }

    #[test]
    fn kd_zero_when_student_matches_support() {
        let mut logits = vec![-1e9f64; 5];
        logits[1] = 0.7f64.ln();
        logits[3] = 0.3f64.ln();
        let logits = Tensor::new(vec![1, 5], logits).unwrap();
        let teacher = [dist(&[1, 3], &[0.35, 0.15])];
        let loss = word_kd_loss_value(&logits, &teacher, 1.0, None).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kd_gradient_identity() {
        let z = [0.3, -1.2, 0.8, 0.1];
        let logits = Tensor::<f64>::new(vec![1, 4], z.to_vec()).unwrap().with_requires_grad(true);
        let teacher = [dist(&[2, 0], &[0.5, 0.25])];
        let mut g = Graph::new();
        let v = g.leaf(&logits);
        let loss = word_kd_loss(&mut g, v, &teacher, 1.0, None).unwrap();
        let grads = g.backward(loss).unwrap();
        let q = crate::numerics::softmax_with_temperature(&logits, 1.0).unwrap();
        let p_hat = [1.0 / 3.0, 0.0, 2.0 / 3.0, 0.0];
        for j in 0..4 {
            assert_abs_diff_eq!(grads.get(v).unwrap()[j], q.data()[j] - p_hat[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn kd_errors() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            word_kd_loss_value(&logits, &[dist(&[5], &[0.9])], 1.0, None),
            Err(KdError::InvalidToken { id: 5, .. })
        ));
        assert!(word_kd_loss_value(&logits, &[dist(&[0], &[0.9])], 0.0, None).is_err());
        assert!(word_kd_loss_value(&logits, &[dist(&[0], &[0.9])], -2.0, None).is_err());
        assert!(word_kd_loss_value::<f64, f64>(&logits, &[], 1.0, None).is_err());
    }

    #[test]
    fn masked_rows_are_skipped() {
        let logits = Tensor::<f64>::new(vec![2, 3], vec![0.1, 0.2, 0.3, 5.0, -5.0, 0.0]).unwrap();
        let one = Tensor::<f64>::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let t = [dist(&[0, 2], &[0.5, 0.4])];
        let masked = word_kd_loss_value(&logits, &t, 1.0, Some(&[false, true])).unwrap();
        let plain = word_kd_loss_value(&one, &t, 1.0, None).unwrap();
        assert_eq!(masked, plain);
        let ce_m = label_smoothed_ce_value(&logits, &[2], 0.1, Some(&[false, true])).unwrap();
        let ce_p = label_smoothed_ce_value(&one, &[2], 0.1, None).unwrap();
        assert_eq!(ce_m, ce_p);
    }

    #[test]
    fn ce_examples() {
        let logits = Tensor::<f64>::new(vec![1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = label_smoothed_ce_value(&logits, &[0], 0.1, None).unwrap();
        let log_z = (2f64.exp() + 3.0).ln();
        let want = -(0.925 * (2.0 - log_z) + 3.0 * 0.025 * (0.0 - log_z));
        assert_abs_diff_eq!(loss, want, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.4908, epsilon = 5e-5);

        let nll = label_smoothed_ce_value(&logits, &[0], 0.0, None).unwrap();
        assert_abs_diff_eq!(nll, -(2.0 - log_z), epsilon = 1e-12);

        let flat = Tensor::<f64>::new(vec![1, 6], vec![0.4; 6]).unwrap();
        for eps in [0.0, 0.1, 0.5] {
            for gold in 0..6 {
                let l = label_smoothed_ce_value(&flat, &[gold], eps, None).unwrap();
                assert_abs_diff_eq!(l, 6f64.ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ce_errors() {
        let logits = Tensor::<f64>::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(matches!(
            label_smoothed_ce_value(&logits, &[4], 0.1, None),
            Err(KdError::InvalidToken { id: 4, .. })
        ));
        assert!(label_smoothed_ce_value(&logits, &[0], 1.0, None).is_err());
        assert!(label_smoothed_ce_value(&logits, &[0, 1], 0.1, None).is_err());
    }

    #[test]
    fn composition() {
        let logits = Tensor::<f64>::new(vec![2, 4], vec![0.3, -0.2, 1.1, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let teacher = [dist(&[2, 0], &[0.6, 0.3]), dist(&[3, 1, 0], &[0.5, 0.2, 0.1])];
        let gold = [2u32, 3];
        let kd = LossTerm::WordKd {
            teacher: &teacher,
            temperature: 1.0,
        };
        let ce = LossTerm::LabelSmoothedCe {
            gold: &gold,
            epsilon: 0.1,
        };
        let value = |terms: &[(LossTerm, f64)]| {
            let mut g = Graph::new();
            let z = g.leaf(&logits);
            let l = compose_loss(&mut g, z, terms, None).unwrap();
            g.value(l).item()
        };
        let kd_alone = word_kd_loss_value(&logits, &teacher, 1.0, None).unwrap();
        let ce_alone = label_smoothed_ce_value(&logits, &gold, 0.1, None).unwrap();
        assert_eq!(value(&[(kd, 1.0)]), kd_alone);
        assert_abs_diff_eq!(value(&[(kd, 0.5), (kd, 0.5)]), kd_alone, epsilon = 1e-15);
        assert_abs_diff_eq!(value(&[(kd, 1.0), (ce, 1.0)]), kd_alone + ce_alone, epsilon = 1e-12);

        let mut g = Graph::<f64>::new();
        let z = g.leaf(&logits);
        assert!(compose_loss::<f64, f64>(&mut g, z, &[], None).is_err());
        assert!(compose_loss(&mut g, z, &[(kd, 0.0)], None).is_err());
        assert!(compose_loss(&mut g, z, &[(kd, -1.0), (ce, 2.0)], None).is_err());
    }

    #[test]
    fn temperature_scales_both_sides() {
        // at high T both distributions flatten, so the divergence shrinks
        let logits = Tensor::<f64>::new(vec![1, 3], vec![2.0, 0.0, -2.0]).unwrap();
        let teacher = [dist(&[2, 1], &[0.7, 0.2])];
        let cold = word_kd_loss_value(&logits, &teacher, 1.0, None).unwrap();
        let hot = word_kd_loss_value(&logits, &teacher, 8.0, None).unwrap();
        assert!(hot < cold);
        assert!(hot >= 0.0);
    }
}

//! Offline evaluation metrics.

/// Bins used by [`ece`].
pub const ECE_BINS: usize = 10;

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// sharing their average rank. Returns 0.5 when one class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y > 0.5).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    (pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len().max(1) as f64).sqrt()
}

pub fn log_loss(p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = super::clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / y.len().max(1) as f64
}

/// Expected calibration error over equal-width probability bins.
pub fn ece(p: &[f64], y: &[f64]) -> f64 {
    let mut sum_p = [0.0; ECE_BINS];
    let mut sum_y = [0.0; ECE_BINS];
    let mut cnt = [0usize; ECE_BINS];
    for (&p, &y) in p.iter().zip(y) {
        let b = ((p * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        sum_p[b] += p;
        sum_y[b] += y;
        cnt[b] += 1;
    }
    let n = p.len().max(1) as f64;
    (0..ECE_BINS).filter(|&b| cnt[b] > 0).map(|b| (sum_p[b] - sum_y[b]).abs() / n).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pairwise definition: P(score_pos > score_neg) + 0.5 P(tie).
    fn auc_pairwise(s: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.4, 0.9, 0.05];
        let y = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        assert!((auc(&s, &y) - auc_pairwise(&s, &y)).abs() < 1e-12);
        assert_eq!(auc(&[1.0, 2.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[1.0, 1.0], &[0.0, 1.0]), 0.5);
    }

    #[test]
    fn ece_of_perfect_bins_is_zero() {
        let p = [0.25, 0.25, 0.25, 0.25];
        let y = [1.0, 0.0, 0.0, 0.0];
        assert!(ece(&p, &y).abs() < 1e-12);
        assert!((ece(&[0.9, 0.9], &[0.0, 0.0]) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn rmse_basic() {
        assert!((rmse(&[1.0, 3.0], &[0.0, 0.0]) - 5f64.sqrt()).abs() < 1e-12);
    }
}

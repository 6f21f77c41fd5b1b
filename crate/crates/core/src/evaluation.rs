//! ROC-AUC with missing labels, multi-task aggregation, transfer analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability that a random positive outscores a random negative, ties
/// credited one half. Runs in `O(n log n)` via midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", (scores.len(), 1), (labels.len(), 1)));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {i} is NaN")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data("undefined AUC: labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let midrank = (start + end + 1) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += midrank * tied_pos as f64;
        start = end;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskAuc {
    /// `None` for tasks whose observed labels hold a single class.
    pub per_task: Vec<Option<f64>>,
    pub mean: f64,
}

impl MultiTaskAuc {
    pub fn defined(&self) -> usize {
        self.per_task.iter().flatten().count()
    }
}

/// Per-task AUC over the observed entries of each column. `mask`, when
/// given, is row-major with the shape of `labels`.
pub fn multi_task_auc(scores: &Tensor, labels: &Tensor, mask: Option<&[bool]>) -> Result<MultiTaskAuc> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape("multi_task_auc", scores.shape(), labels.shape()));
    }
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(Error::shape("multi_task_auc mask", labels.shape(), (m.len(), 1)));
        }
    }
    let (n, t) = scores.shape();
    let mut per_task = Vec::with_capacity(t);
    for task in 0..t {
        let mut s = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for row in 0..n {
            if mask.is_some_and(|m| !m[row * t + task]) {
                continue;
            }
            s.push(scores.get(row, task));
            y.push(labels.get(row, task) > 0.5);
        }
        let defined = y.iter().any(|&b| b) && y.iter().any(|&b| !b);
        per_task.push(if defined { Some(roc_auc(&s, &y)?) } else { None });
    }
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Data("undefined AUC on every task".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MultiTaskAuc { per_task, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: usize,
    pub pretrained: f64,
    pub baseline: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub tasks: Vec<TaskDelta>,
    /// Tasks with `delta >= 0`.
    pub non_negative: usize,
    pub negative: usize,
    /// Most negative delta, or 0 when no task transfers negatively.
    pub worst_negative: f64,
    pub all_pretrained_above_half: bool,
}

pub fn transfer_report(pretrained: &[f64], baseline: &[f64]) -> Result<TransferReport> {
    if pretrained.len() != baseline.len() {
        return Err(Error::Contract(format!(
            "task lists differ: {} pretrained vs {} baseline",
            pretrained.len(),
            baseline.len()
        )));
    }
    let tasks: Vec<TaskDelta> = pretrained
        .iter()
        .zip(baseline)
        .enumerate()
        .map(|(task, (&p, &b))| TaskDelta {
            task,
            pretrained: p,
            baseline: b,
            delta: p - b,
        })
        .collect();
    let negative = tasks.iter().filter(|t| t.delta < 0.0).count();
    let worst_negative = tasks.iter().map(|t| t.delta).fold(0.0, f64::min);
    Ok(TransferReport {
        non_negative: tasks.len() - negative,
        negative,
        worst_negative,
        all_pretrained_above_half: pretrained.iter().all(|&p| p > 0.5),
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    credit += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.2, 0.8, 0.6], &[true, false, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let err = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(err.to_string().contains("undefined AUC"));
    }

    #[test]
    fn multi_task_examples() {
        let s = Tensor::from_rows(&[vec![0.9], vec![0.1]], 1).unwrap();
        let y = Tensor::from_rows(&[vec![1.0], vec![0.0]], 1).unwrap();
        assert_eq!(multi_task_auc(&s, &y, None).unwrap().mean, 1.0);

        let s = Tensor::from_rows(&[vec![0.9, 0.3], vec![0.1, 0.7], vec![0.5, 0.2]], 2).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0], vec![0.0, 0.0]], 2).unwrap();
        let mask = [true, true, true, true, true, false];
        let r = multi_task_auc(&s, &y, Some(&mask)).unwrap();
        assert_eq!(r.per_task, vec![Some(1.0), None]);
        assert_eq!(r.mean, 1.0);

        let all_pos = Tensor::filled(3, 2, 1.0);
        assert!(multi_task_auc(&s, &all_pos, None).is_err());
    }

    #[test]
    fn multi_task_decomposes_into_single_tasks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (n, t) = (40, 5);
        let s = Tensor::new(n, t, (0..n * t).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = Tensor::new(n, t, (0..n * t).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect()).unwrap();
        let mask: Vec<bool> = (0..n * t).map(|_| rng.random_bool(0.8)).collect();
        let r = multi_task_auc(&s, &y, Some(&mask)).unwrap();
        for task in 0..t {
            let rows: Vec<usize> = (0..n).filter(|&i| mask[i * t + task]).collect();
            let sc: Vec<f64> = rows.iter().map(|&i| s.get(i, task)).collect();
            let lb: Vec<bool> = rows.iter().map(|&i| y.get(i, task) > 0.5).collect();
            assert_eq!(r.per_task[task], Some(roc_auc(&sc, &lb).unwrap()));
        }
    }

    #[test]
    fn transfer_examples() {
        let same = transfer_report(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert_eq!((same.negative, same.worst_negative), (0, 0.0));
        let r = transfer_report(&[0.7, 0.57], &[0.6, 0.7]).unwrap();
        assert_eq!(r.negative, 1);
        assert_eq!(r.non_negative, 1);
        assert!((r.worst_negative + 0.13).abs() < 1e-12);
        assert!(r.all_pretrained_above_half);
        assert!(transfer_report(&[0.5], &[0.5, 0.6]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| f64::from(d.0) / 7.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
            let fast = roc_auc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_auc(&scores, &labels)).abs() < 1e-12);
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0).collect();
            prop_assert!((roc_auc(&cubed, &labels).unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn negated_scores_complement(
            data in prop::collection::btree_map(any::<i32>(), any::<bool>(), 2..100)
        ) {
            let scores: Vec<f64> = data.keys().map(|&k| f64::from(k)).collect();
            let labels: Vec<bool> = data.values().copied().collect();
            prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let total = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn transfer_counts_match_sign_scan(
            pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let b: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let r = transfer_report(&p, &b).unwrap();
            let neg = pairs.iter().filter(|x| x.0 < x.1).count();
            prop_assert_eq!(r.negative, neg);
            prop_assert_eq!(r.negative + r.non_negative, pairs.len());
        }
    }
}

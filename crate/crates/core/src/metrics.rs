//! Multi-label evaluation: rank AUC, thresholded F1 and precision at K.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and binary labels for `notes × codes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    pub notes: usize,
    pub codes: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl EvalBatch {
    pub fn new(notes: usize, codes: usize, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != notes * codes || labels.len() != notes * codes {
            return Err(Error::Shape {
                op: "eval_batch",
                left: vec![notes, codes],
                right: vec![scores.len(), labels.len()],
            });
        }
        Ok(Self {
            notes,
            codes,
            scores,
            labels,
        })
    }

    pub fn from_rows(scores: Vec<Vec<f64>>, labels: Vec<Vec<bool>>) -> Result<Self> {
        let notes = scores.len();
        let codes = scores.first().map_or(0, Vec::len);
        Self::new(
            notes,
            codes,
            scores.into_iter().flatten().collect(),
            labels.into_iter().flatten().collect(),
        )
    }

    fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.notes)
            .map(|r| (self.scores[r * self.codes + c], self.labels[r * self.codes + c]))
            .unzip()
    }

    fn row(&self, r: usize) -> (&[f64], &[bool]) {
        let span = r * self.codes..(r + 1) * self.codes;
        (&self.scores[span.clone()], &self.labels[span])
    }
}

/// Mann-Whitney AUC with ties counted as one half. `None` unless both
/// classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean per-code AUC over codes having both classes, and the number of
/// codes skipped.
pub fn macro_auc(batch: &EvalBatch) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..batch.codes {
        let (s, l) = batch.column(c);
        if let Some(a) = auc(&s, &l) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("macro AUC: no code has both classes"));
    }
    Ok((total / used as f64, batch.codes - used))
}

pub fn micro_auc(batch: &EvalBatch) -> Result<f64> {
    auc(&batch.scores, &batch.labels).ok_or(Error::UndefinedMetric("micro AUC: single class"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// `(macro, micro)` F1 with predictions `score >= threshold`.
pub fn f1_scores(batch: &EvalBatch, threshold: f64) -> (f64, f64) {
    let mut per_code = vec![Counts::default(); batch.codes];
    for (i, (&s, &l)) in batch.scores.iter().zip(&batch.labels).enumerate() {
        let c = &mut per_code[i % batch.codes.max(1)];
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    let pooled = per_code.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let macro_f1 = if batch.codes == 0 {
        0.0
    } else {
        per_code.iter().map(|c| c.f1()).sum::<f64>() / batch.codes as f64
    };
    (macro_f1, pooled.f1())
}

/// Indices of the `k` highest scores, ties by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn precision_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("P@K needs 1 <= K <= {}, got {k}", scores.len())));
    }
    let hits = top_k_indices(scores, k).into_iter().filter(|&i| labels[i]).count();
    Ok(hits as f64 / k as f64)
}

pub fn mean_precision_at_k(batch: &EvalBatch, k: usize) -> Result<f64> {
    if batch.notes == 0 {
        return Err(Error::UndefinedMetric("P@K over zero notes"));
    }
    let mut total = 0.0;
    for r in 0..batch.notes {
        let (s, l) = batch.row(r);
        total += precision_at_k(s, l, k)?;
    }
    Ok(total / batch.notes as f64)
}

pub const DEFAULT_P_AT: [usize; 3] = [5, 8, 15];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub p_at: BTreeMap<usize, f64>,
    /// Codes left out of macro AUC for lacking a positive or a negative.
    pub skipped_codes: usize,
    pub notes: usize,
}

/// All metrics; undefined AUCs become `None` and `K` values above the code
/// count are left out.
pub fn evaluate(batch: &EvalBatch, ks: &[usize]) -> MetricReport {
    let (macro_auc, skipped_codes) = match macro_auc(batch) {
        Ok((v, s)) => (Some(v), s),
        Err(_) => (None, batch.codes),
    };
    let (macro_f1, micro_f1) = f1_scores(batch, 0.5);
    let p_at = ks
        .iter()
        .filter_map(|&k| mean_precision_at_k(batch, k).ok().map(|v| (k, v)))
        .collect();
    MetricReport {
        macro_auc,
        micro_auc: micro_auc(batch).ok(),
        macro_f1,
        micro_f1,
        p_at,
        skipped_codes,
        notes: batch.notes,
    }
}

impl MetricReport {
    /// Aligned two-line table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x));
        let mut cols: Vec<(String, String)> = vec![
            ("Macro AUC".into(), fmt(self.macro_auc)),
            ("Micro AUC".into(), fmt(self.micro_auc)),
            ("Macro F1".into(), fmt(Some(self.macro_f1))),
            ("Micro F1".into(), fmt(Some(self.micro_f1))),
        ];
        for (k, v) in &self.p_at {
            cols.push((format!("P@{k}"), fmt(Some(*v))));
        }
        let mut head = String::new();
        let mut body = String::new();
        for (i, (h, v)) in cols.iter().enumerate() {
            let w = h.len().max(v.len());
            let sep = if i == 0 { "" } else { "  " };
            let _ = write!(head, "{sep}{h:>w$}");
            let _ = write!(body, "{sep}{v:>w$}");
        }
        format!("{head}\n{body}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
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
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, true, false]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
        let b = EvalBatch::from_rows(vec![vec![0.2], vec![0.3]], vec![vec![true], vec![true]]).unwrap();
        assert!(micro_auc(&b).is_err());
        assert!(macro_auc(&b).is_err());
        assert_eq!(evaluate(&b, &[1]).macro_auc, None);
    }

    #[test]
    fn auc_matches_pair_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..50 * 20).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let l: Vec<bool> = (0..50 * 20).map(|_| rng.gen_bool(0.3)).collect();
        let b = EvalBatch::new(50, 20, s.clone(), l.clone()).unwrap();
        assert!((micro_auc(&b).unwrap() - pair_auc(&s, &l)).abs() < 1e-12);
        let (m, skipped) = macro_auc(&b).unwrap();
        let mut total = 0.0;
        let mut used = 0;
        for c in 0..20 {
            let (cs, cl) = b.column(c);
            if cl.iter().any(|&x| x) && cl.iter().any(|&x| !x) {
                total += pair_auc(&cs, &cl);
                used += 1;
            }
        }
        assert_eq!(skipped, 20 - used);
        assert!((m - total / used as f64).abs() < 1e-12);
    }

    #[test]
    fn f1_cases() {
        let labels = vec![vec![true, false, true], vec![false, true, false]];
        let exact: Vec<Vec<f64>> = labels
            .iter()
            .map(|r| r.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect())
            .collect();
        let b = EvalBatch::from_rows(exact, labels.clone()).unwrap();
        assert_eq!(f1_scores(&b, 0.5), (1.0, 1.0));
        let b = EvalBatch::from_rows(vec![vec![0.1; 3]; 2], labels).unwrap();
        assert_eq!(f1_scores(&b, 0.5).1, 0.0);
        // a code with no positives and no predicted positives contributes 0
        let b = EvalBatch::from_rows(vec![vec![0.9, 0.1]], vec![vec![true, false]]).unwrap();
        assert_eq!(f1_scores(&b, 0.5), (0.5, 1.0));
    }

    #[test]
    fn precision_at_k_example() {
        let p = precision_at_k(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false], 2).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(precision_at_k(&[0.5; 4], &[false; 4], 3).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[0.5, 0.5, 0.5], &[true, true, false], 2).unwrap(), 1.0);
        assert!(precision_at_k(&[0.5], &[true], 2).is_err());
    }

    #[test]
    fn report_json_and_table() {
        let b = EvalBatch::from_rows(
            vec![vec![0.9, 0.2, 0.7], vec![0.1, 0.8, 0.3]],
            vec![vec![true, false, true], vec![false, true, false]],
        )
        .unwrap();
        let r = evaluate(&b, &[1, 2, 5]);
        assert_eq!(r.p_at.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[0].contains("Macro AUC") && lines[0].contains("P@2"));
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            s in proptest::collection::vec(0.0f64..1.0, 30),
            l in proptest::collection::vec(any::<bool>(), 30),
        ) {
            let a = auc(&s, &l);
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(a.map(|x| (x * 1e12).round()), auc(&t, &l).map(|x| (x * 1e12).round()));
        }

        #[test]
        fn micro_f1_invariant_under_code_permutation(
            s in proptest::collection::vec(0.0f64..1.0, 24),
            l in proptest::collection::vec(any::<bool>(), 24),
            shift in 0usize..6,
        ) {
            let b = EvalBatch::new(4, 6, s.clone(), l.clone()).unwrap();
            let perm = |v: usize| (v + shift) % 6;
            let mut ps = vec![0.0; 24];
            let mut pl = vec![false; 24];
            for r in 0..4 {
                for c in 0..6 {
                    ps[r * 6 + perm(c)] = s[r * 6 + c];
                    pl[r * 6 + perm(c)] = l[r * 6 + c];
                }
            }
            let pb = EvalBatch::new(4, 6, ps, pl).unwrap();
            prop_assert_eq!(f1_scores(&b, 0.5).1, f1_scores(&pb, 0.5).1);
        }

        #[test]
        fn hit_count_non_decreasing_in_k(
            s in proptest::collection::vec(0.0f64..1.0, 10),
            l in proptest::collection::vec(any::<bool>(), 10),
        ) {
            let mut prev = 0.0;
            for k in 1..=10 {
                let hits = precision_at_k(&s, &l, k).unwrap() * k as f64;
                prop_assert!(hits >= prev - 1e-9);
                prev = hits;
            }
        }
    }
}

//! Multi-label and binary evaluation metrics.
//!
//! F1 and balanced accuracy are percentages; Hamming loss is a fraction.
//! Label matrices are slices of equal-length boolean rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Branch;

/// Zero-denominator conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Conventions {
    /// Per-label F1 when TP + FP + FN = 0.
    pub empty_label_f1: f64,
    /// Per-sample F1 when both truth and prediction are empty.
    pub empty_sample_f1: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions { empty_label_f1: 0.0, empty_sample_f1: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    fn merge(mut self, o: Counts) -> Counts {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
        self
    }

    /// F1 in percent, or `None` when TP + FP + FN = 0.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 100.0 * (2 * self.tp) as f64 / denom as f64)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// (TPR + TNR) / 2 in percent, 0/0 components counting as 0.
    pub fn balanced_accuracy(&self) -> f64 {
        100.0 * (self.recall() + self.specificity()) / 2.0
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-label confusion counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfusion {
    pub labels: Vec<Counts>,
    pub n_samples: u64,
}

impl LabelConfusion {
    pub fn pooled(&self) -> Counts {
        self.labels.iter().fold(Counts::default(), |a, &c| a.merge(c))
    }
}

fn check_shapes(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<usize> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!("{} prediction rows", truth.len()), pred.len()));
    }
    let m = truth.first().map_or(0, Vec::len);
    for (t, p) in truth.iter().zip(pred) {
        if t.len() != m || p.len() != m {
            return Err(Error::shape(format!("rows of width {m}"), format!("{} / {}", t.len(), p.len())));
        }
    }
    Ok(m)
}

pub fn confusion(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<LabelConfusion> {
    let m = check_shapes(truth, pred)?;
    let mut labels = vec![Counts::default(); m];
    for (t, p) in truth.iter().zip(pred) {
        for j in 0..m {
            labels[j].add(t[j], p[j]);
        }
    }
    Ok(LabelConfusion { labels, n_samples: truth.len() as u64 })
}

/// Per-sample F1 in percent.
pub fn sample_f1(truth: &[bool], pred: &[bool], conv: &Conventions) -> f64 {
    let inter = truth.iter().zip(pred).filter(|(&t, &p)| t && p).count();
    let size = truth.iter().filter(|&&t| t).count() + pred.iter().filter(|&&p| p).count();
    if size == 0 {
        conv.empty_sample_f1
    } else {
        100.0 * (2 * inter) as f64 / size as f64
    }
}

fn sample_ba(truth: &[bool], pred: &[bool]) -> f64 {
    let mut c = Counts::default();
    for (&t, &p) in truth.iter().zip(pred) {
        c.add(t, p);
    }
    c.balanced_accuracy()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
    pub samples: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn weighted_mean(conf: &LabelConfusion, per_label: &[f64]) -> f64 {
    let total: u64 = conf.labels.iter().map(Counts::support).sum();
    if total == 0 {
        return 0.0;
    }
    conf.labels.iter().zip(per_label).map(|(c, v)| c.support() as f64 * v).sum::<f64>() / total as f64
}

pub fn per_label_f1(conf: &LabelConfusion, conv: &Conventions) -> Vec<f64> {
    conf.labels.iter().map(|c| c.f1().unwrap_or(conv.empty_label_f1)).collect()
}

pub fn f1_suite(conf: &LabelConfusion, truth: &[Vec<bool>], pred: &[Vec<bool>], conv: &Conventions) -> Result<Suite> {
    check_shapes(truth, pred)?;
    let per = per_label_f1(conf, conv);
    Ok(Suite {
        micro: conf.pooled().f1().unwrap_or(conv.empty_label_f1),
        macro_: mean(per.iter().copied()),
        weighted: weighted_mean(conf, &per),
        samples: mean(truth.iter().zip(pred).map(|(t, p)| sample_f1(t, p, conv))),
    })
}

pub fn ba_suite(conf: &LabelConfusion, truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<Suite> {
    check_shapes(truth, pred)?;
    let per: Vec<f64> = conf.labels.iter().map(Counts::balanced_accuracy).collect();
    Ok(Suite {
        micro: conf.pooled().balanced_accuracy(),
        macro_: mean(per.iter().copied()),
        weighted: weighted_mean(conf, &per),
        samples: mean(truth.iter().zip(pred).map(|(t, p)| sample_ba(t, p))),
    })
}

pub fn hamming_loss(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<f64> {
    let m = check_shapes(truth, pred)?;
    let cells = truth.len() * m;
    if cells == 0 {
        return Ok(0.0);
    }
    let wrong: usize = truth.iter().zip(pred).map(|(t, p)| t.iter().zip(p).filter(|(a, b)| a != b).count()).sum();
    Ok(wrong as f64 / cells as f64)
}

/// Pairwise label counts and their ratios to the column label's total.
pub fn cooccurrence(truth: &[Vec<bool>]) -> Result<(Vec<Vec<u64>>, Vec<Vec<f64>>)> {
    let m = check_shapes(truth, truth)?;
    let mut counts = vec![vec![0u64; m]; m];
    for row in truth {
        let on: Vec<usize> = (0..m).filter(|&j| row[j]).collect();
        for &i in &on {
            for &j in &on {
                counts[i][j] += 1;
            }
        }
    }
    let ratios = (0..m)
        .map(|i| (0..m).map(|j| ratio(counts[i][j], counts[j][j])).collect())
        .collect();
    Ok((counts, ratios))
}

/// Cell (i, j): among samples whose label j was missed (truth has j, the
/// prediction does not), the fraction that wrongly predict i.
pub fn misclassification_matrix(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    let m = check_shapes(truth, pred)?;
    let mut hits = vec![vec![0u64; m]; m];
    let mut missed = vec![0u64; m];
    for (t, p) in truth.iter().zip(pred) {
        for j in (0..m).filter(|&j| t[j] && !p[j]) {
            missed[j] += 1;
            for i in (0..m).filter(|&i| p[i] && !t[i]) {
                hits[i][j] += 1;
            }
        }
    }
    Ok((0..m).map(|i| (0..m).map(|j| ratio(hits[i][j], missed[j])).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreRow {
    pub genre: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMetrics {
    pub n_samples: usize,
    pub f1: Suite,
    pub ba: Suite,
    pub hamming_loss: f64,
    pub genres: Vec<GenreRow>,
    pub cooccurrence: Vec<Vec<u64>>,
    pub cooccurrence_ratio: Vec<Vec<f64>>,
    pub misclassification: Vec<Vec<f64>>,
}

pub fn branch_metrics(truth: &[Vec<bool>], pred: &[Vec<bool>], names: &[String], conv: &Conventions) -> Result<BranchMetrics> {
    let m = check_shapes(truth, pred)?;
    if !truth.is_empty() && m != names.len() {
        return Err(Error::shape(format!("{} genre names", m), names.len()));
    }
    let conf = confusion(truth, pred)?;
    let per = per_label_f1(&conf, conv);
    let genres = if truth.is_empty() {
        Vec::new()
    } else {
        names
            .iter()
            .zip(&conf.labels)
            .zip(&per)
            .map(|((name, c), &f1)| GenreRow {
                genre: name.clone(),
                support: c.support(),
                precision: 100.0 * c.precision(),
                recall: 100.0 * c.recall(),
                f1,
                balanced_accuracy: c.balanced_accuracy(),
            })
            .collect()
    };
    let (cooc, cooc_ratio) = cooccurrence(truth)?;
    Ok(BranchMetrics {
        n_samples: truth.len(),
        f1: f1_suite(&conf, truth, pred, conv)?,
        ba: ba_suite(&conf, truth, pred)?,
        hamming_loss: hamming_loss(truth, pred)?,
        genres,
        cooccurrence: cooc,
        cooccurrence_ratio: cooc_ratio,
        misclassification: misclassification_matrix(truth, pred)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level1Metrics {
    /// Accuracy, percent.
    pub accuracy: f64,
    /// Macro F1 over the two branches, percent.
    pub f1: f64,
}

pub fn level1_metrics(truth: &[Branch], pred: &[Branch]) -> Result<Level1Metrics> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!("{} predictions", truth.len()), pred.len()));
    }
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let f1 = mean(Branch::ALL.iter().map(|&b| {
        let mut c = Counts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t == b, p == b);
        }
        c.f1().unwrap_or(0.0)
    }));
    Ok(Level1Metrics { accuracy: 100.0 * ratio(correct as u64, truth.len() as u64), f1 })
}

/// Ground truth and prediction for one sample at both levels.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalSample {
    pub truth_branch: Branch,
    pub truth: Vec<bool>,
    pub pred_branch: Branch,
    /// Level-2 prediction in `pred_branch`'s label space.
    pub pred: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level1: Level1Metrics,
    pub fiction: BranchMetrics,
    pub nonfiction: BranchMetrics,
}

impl MetricsReport {
    pub fn branch(&self, b: Branch) -> &BranchMetrics {
        match b {
            Branch::Fiction => &self.fiction,
            Branch::Nonfiction => &self.nonfiction,
        }
    }
}

/// Level-1 metrics over all samples; Level-2 metrics per true branch, where a
/// prediction routed to the wrong branch counts as predicting no genre.
pub fn evaluate_hierarchical(
    samples: &[HierarchicalSample],
    fiction_names: &[String],
    nonfiction_names: &[String],
    conv: &Conventions,
) -> Result<MetricsReport> {
    let truth1: Vec<Branch> = samples.iter().map(|s| s.truth_branch).collect();
    let pred1: Vec<Branch> = samples.iter().map(|s| s.pred_branch).collect();
    let level1 = level1_metrics(&truth1, &pred1)?;
    let per_branch = |b: Branch, names: &[String]| {
        let (truth, pred): (Vec<_>, Vec<_>) = samples
            .iter()
            .filter(|s| s.truth_branch == b)
            .map(|s| {
                let pred = if s.pred_branch == b { s.pred.clone() } else { vec![false; s.truth.len()] };
                (s.truth.clone(), pred)
            })
            .unzip();
        branch_metrics(&truth, &pred, names, conv)
    };
    Ok(MetricsReport {
        level1,
        fiction: per_branch(Branch::Fiction, fiction_names)?,
        nonfiction: per_branch(Branch::Nonfiction, nonfiction_names)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&x| x == 1).collect()).collect()
    }

    #[test]
    fn confusion_by_hand() {
        let c = confusion(&b(&[&[1, 0], &[0, 1]]), &b(&[&[1, 1], &[0, 0]])).unwrap();
        assert_eq!(c.labels[0], Counts { tp: 1, fp: 0, fn_: 0, tn: 1 });
        assert_eq!(c.labels[1], Counts { tp: 0, fp: 1, fn_: 1, tn: 0 });
        let t = b(&[&[1, 0, 1], &[0, 1, 1]]);
        let c = confusion(&t, &t).unwrap();
        assert!(c.labels.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        let c = confusion(&t, &b(&[&[0, 0, 0], &[0, 0, 0]])).unwrap();
        assert!(c.labels.iter().all(|c| c.tp == 0 && c.fp == 0));
        assert!(matches!(confusion(&t, &b(&[&[0, 0]])), Err(Error::Shape { .. })));
    }

    #[test]
    fn f1_values() {
        let c = Counts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert!((c.f1().unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let t = b(&[&[1, 0, 1], &[0, 1, 0], &[0, 0, 0]]);
        let conf = confusion(&t, &t).unwrap();
        let s = f1_suite(&conf, &t, &t, &Conventions::default()).unwrap();
        assert_eq!((s.micro, s.macro_, s.weighted, s.samples), (100.0, 100.0, 100.0, 100.0));
        assert_eq!(sample_f1(&[false, false], &[false, false], &Conventions::default()), 100.0);
    }

    #[test]
    fn ba_values() {
        let c = Counts { tp: 1, fp: 1, fn_: 1, tn: 3 };
        assert!((c.balanced_accuracy() - 62.5).abs() < 1e-12);
        let t = b(&[&[1, 0], &[0, 1]]);
        let conf = confusion(&t, &t).unwrap();
        let s = ba_suite(&conf, &t, &t).unwrap();
        assert_eq!((s.micro, s.macro_, s.weighted, s.samples), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn hamming() {
        let t = b(&[&[1, 0, 1], &[0, 1, 0]]);
        assert!((hamming_loss(&t, &b(&[&[1, 1, 1], &[0, 0, 0]])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hamming_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(hamming_loss(&t, &b(&[&[0, 1, 0], &[1, 0, 1]])).unwrap(), 1.0);
    }

    #[test]
    fn cooccurrence_single_sample() {
        let (c, r) = cooccurrence(&b(&[&[0, 1, 1]])).unwrap();
        assert_eq!((c[1][2], c[2][1], c[1][1], c[2][2], c[0][0]), (1, 1, 1, 1, 0));
        assert_eq!((r[1][1], r[2][2], r[0][0]), (1.0, 1.0, 0.0));
    }

    #[test]
    fn misclassification_cases() {
        let t = b(&[&[1, 0, 0], &[0, 1, 1]]);
        assert!(misclassification_matrix(&t, &t).unwrap().iter().flatten().all(|&x| x == 0.0));
        let m = misclassification_matrix(&b(&[&[0, 1, 0]]), &b(&[&[0, 0, 1]])).unwrap();
        assert_eq!(m[2][1], 1.0);
        assert_eq!(m.iter().flatten().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn wrong_branch_counts_as_empty() {
        let s = vec![
            HierarchicalSample { truth_branch: Branch::Fiction, truth: vec![true, false], pred_branch: Branch::Fiction, pred: vec![true, false] },
            HierarchicalSample { truth_branch: Branch::Fiction, truth: vec![false, true], pred_branch: Branch::Nonfiction, pred: vec![true] },
            HierarchicalSample { truth_branch: Branch::Nonfiction, truth: vec![true], pred_branch: Branch::Nonfiction, pred: vec![true] },
        ];
        let names = |n: usize| (0..n).map(|i| format!("g{i}")).collect::<Vec<_>>();
        let r = evaluate_hierarchical(&s, &names(2), &names(1), &Conventions::default()).unwrap();
        assert!((r.level1.accuracy - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.fiction.n_samples, 2);
        assert_eq!(r.fiction.genres[1].recall, 0.0);
        assert_eq!(r.fiction.f1.samples, 50.0);
        assert_eq!(r.nonfiction.f1.macro_, 100.0);
    }

    #[test]
    fn level1_macro() {
        use Branch::*;
        let r = level1_metrics(&[Fiction, Fiction, Nonfiction, Nonfiction], &[Fiction, Nonfiction, Nonfiction, Nonfiction]).unwrap();
        assert_eq!(r.accuracy, 75.0);
        // fiction: tp1 fn1 → 66.67; nonfiction: tp2 fp1 → 80
        assert!((r.f1 - (200.0 / 3.0 + 80.0) / 2.0).abs() < 1e-12);
    }
}

//! Turns squared reconstruction errors into anomaly decisions and scores.
//!
//! The threshold is the nearest-rank p-quantile of the training-normal
//! errors (no interpolation), and classification uses a strict `>` at the
//! threshold; both conventions are fixed so independent implementations
//! match bit for bit. Metrics with an empty denominator return a defined
//! sentinel instead of NaN so result tables stay total: precision with zero
//! predicted positives is reported as 1.0 with a flag, and F1 as 0.

use serde::{Deserialize, Serialize};

use crate::dataio::{MainClass, RecordLabel};
use crate::error::{Error, Result};

/// Anomaly threshold in squared-error units, plus the quantile it came from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub quantile: f64,
}

/// Nearest-rank p-quantile of the training errors: the `ceil(p * n)`-th
/// order statistic.
pub fn fit_threshold(train_errors: &[f64], p: f64) -> Result<Threshold> {
    if train_errors.is_empty() {
        return Err(Error::Config("threshold needs at least one training error".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("threshold quantile must be in (0, 1), got {p}")));
    }
    let mut sorted = train_errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    Ok(Threshold {
        value: sorted[rank - 1],
        quantile: p,
    })
}

/// Flag anomalies: `error > threshold`, strictly.
pub fn classify(errors: &[f64], th: &Threshold) -> Vec<bool> {
    errors.iter().map(|e| *e > th.value).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub precision: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    /// Set when no positives were predicted, in which case precision is the
    /// 1.0 sentinel and F1 is 0.
    pub precision_degenerate: bool,
}

/// Score flags against binary labels (attack = positive).
pub fn score(flags: &[bool], attacks: &[bool]) -> Result<(Metrics, ConfusionCounts)> {
    if flags.len() != attacks.len() {
        return Err(Error::Dimension(format!(
            "score: {} flags vs {} labels",
            flags.len(),
            attacks.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&f, &a) in flags.iter().zip(attacks) {
        match (f, a) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let total = c.total();
    let acc = if total == 0 {
        0.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    };
    let predicted_pos = c.tp + c.fp;
    let precision_degenerate = predicted_pos == 0;
    let precision = if precision_degenerate {
        1.0
    } else {
        c.tp as f64 / predicted_pos as f64
    };
    let tpr = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let fpr = if c.fp + c.tn == 0 {
        0.0
    } else {
        c.fp as f64 / (c.fp + c.tn) as f64
    };
    let f1 = if precision_degenerate || precision + tpr == 0.0 {
        0.0
    } else {
        2.0 * precision * tpr / (precision + tpr)
    };
    Ok((
        Metrics {
            acc,
            precision,
            tpr,
            fpr,
            f1,
            precision_degenerate,
        },
        c,
    ))
}

/// ROC curve: `(fpr, tpr)` pairs with both endpoints, and the trapezoid AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweep thresholds over the nearest-rank quantiles of the error
/// distribution at `n_points` evenly spaced fractions (plus the +/- infinity
/// endpoints) and integrate TPR over FPR with the trapezoid rule.
///
/// With `n_points >= errors.len()` the sweep hits every distinct error
/// value, and the trapezoid AUC equals the Mann-Whitney statistic with ties
/// counted 1/2.
pub fn roc(errors: &[f64], attacks: &[bool], n_points: usize) -> Result<RocCurve> {
    if errors.len() != attacks.len() {
        return Err(Error::Dimension(format!(
            "roc: {} errors vs {} labels",
            errors.len(),
            attacks.len()
        )));
    }
    if n_points == 0 {
        return Err(Error::Config("roc needs n_points >= 1".into()));
    }
    let pos = attacks.iter().filter(|a| **a).count();
    let neg = attacks.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config(
            "roc needs both classes present in the labels".into(),
        ));
    }

    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut thresholds: Vec<f64> = Vec::with_capacity(n_points);
    for j in 1..=n_points {
        let frac = j as f64 / n_points as f64;
        let rank = ((frac * n as f64).ceil() as usize).clamp(1, n);
        thresholds.push(sorted[rank - 1]);
    }
    thresholds.sort_by(|a, b| a.total_cmp(b));
    thresholds.dedup();

    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push((0.0, 0.0)); // threshold = +inf
    points.push((1.0, 1.0)); // threshold = -inf
    for t in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&e, &a) in errors.iter().zip(attacks) {
            if e > t {
                if a {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();

    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5;
    }
    Ok(RocCurve { points, auc })
}

/// Scope of a per-class row: every attack in the class, only the sub-classes
/// seen in the training taxonomy, or only the test-set-novel ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Known,
    Novel,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::All => write!(f, "all"),
            Scope::Known => write!(f, "known"),
            Scope::Novel => write!(f, "novel"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: MainClass,
    pub scope: Scope,
    pub attacks: usize,
    pub detected: usize,
    pub tpr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassReport {
    pub rows: Vec<ClassRow>,
    pub warnings: Vec<String>,
}

/// Detection rate per attack class and per known-vs-novel sub-class split.
/// Classes with zero records are omitted. Sub-classes outside the taxonomy
/// arrive here already mapped to [`MainClass::Unknown`] and are reported
/// with a warning.
pub fn per_class_eval(errors: &[f64], labels: &[RecordLabel], th: &Threshold) -> Result<PerClassReport> {
    if errors.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "per_class_eval: {} errors vs {} labels",
            errors.len(),
            labels.len()
        )));
    }
    let classes = [
        MainClass::Dos,
        MainClass::Probe,
        MainClass::U2r,
        MainClass::R2l,
        MainClass::Unknown,
    ];
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for class in classes {
        for scope in [Scope::All, Scope::Known, Scope::Novel] {
            let mut attacks = 0usize;
            let mut detected = 0usize;
            for (e, l) in errors.iter().zip(labels) {
                if l.class != class {
                    continue;
                }
                let in_scope = match scope {
                    Scope::All => true,
                    Scope::Known => !l.novel,
                    Scope::Novel => l.novel,
                };
                if !in_scope {
                    continue;
                }
                attacks += 1;
                if *e > th.value {
                    detected += 1;
                }
            }
            if attacks == 0 {
                continue;
            }
            rows.push(ClassRow {
                class,
                scope,
                attacks,
                detected,
                tpr: detected as f64 / attacks as f64,
            });
        }
    }
    if rows.iter().any(|r| r.class == MainClass::Unknown) {
        warnings.push("records with sub-classes outside the taxonomy manifest were scored under class 'unknown'".into());
    }
    Ok(PerClassReport { rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn nearest_rank_threshold() {
        let th = fit_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(th.value, 2.0);
        let th = fit_threshold(&[1.0, 2.0, 3.0, 4.0], 0.999).unwrap();
        assert_eq!(th.value, 4.0);
        assert!(fit_threshold(&[], 0.5).is_err());
        assert!(fit_threshold(&[1.0], 0.0).is_err());
    }

    #[test]
    fn classify_is_strict_at_the_threshold() {
        let th = Threshold {
            value: 2.0,
            quantile: 0.5,
        };
        assert_eq!(classify(&[2.0], &th), vec![false]);
        assert_eq!(classify(&[2.0 + 1e-12], &th), vec![true]);
        let th_pos = Threshold {
            value: 0.5,
            quantile: 0.5,
        };
        assert_eq!(classify(&[0.0, 0.0, 0.0], &th_pos), vec![false; 3]);
    }

    #[test]
    fn score_hand_example() {
        // tp=8, fn=2, fp=1, tn=9.
        let mut flags = Vec::new();
        let mut attacks = Vec::new();
        for _ in 0..8 {
            flags.push(true);
            attacks.push(true);
        }
        for _ in 0..2 {
            flags.push(false);
            attacks.push(true);
        }
        flags.push(true);
        attacks.push(false);
        for _ in 0..9 {
            flags.push(false);
            attacks.push(false);
        }
        let (m, c) = score(&flags, &attacks).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (8, 2, 1, 9));
        assert_relative_eq!(m.tpr, 0.8, max_relative = 1e-12);
        assert_relative_eq!(m.fpr, 0.1, max_relative = 1e-12);
        assert_relative_eq!(m.precision, 8.0 / 9.0, max_relative = 1e-12);
        let pre = 8.0 / 9.0;
        assert_relative_eq!(m.f1, 2.0 * pre * 0.8 / (pre + 0.8), max_relative = 1e-12);
    }

    #[test]
    fn score_all_correct_and_degenerate() {
        let (m, _) = score(&[true, false], &[true, false]).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.fpr, 0.0);

        let (m, _) = score(&[false, false], &[true, false]).unwrap();
        assert!(m.precision_degenerate);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn roc_perfect_separation() {
        let errors = [0.1, 0.2, 5.0, 6.0];
        let attacks = [false, false, true, true];
        let curve = roc(&errors, &attacks, 50).unwrap();
        assert_relative_eq!(curve.auc, 1.0, max_relative = 1e-12);
        assert_eq!(curve.points.first().unwrap(), &(0.0, 0.0));
        assert_eq!(curve.points.last().unwrap(), &(1.0, 1.0));
    }

    #[test]
    fn roc_constant_scores_are_chance() {
        let errors = [1.0; 6];
        let attacks = [true, false, true, false, true, false];
        let curve = roc(&errors, &attacks, 10).unwrap();
        assert_relative_eq!(curve.auc, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(roc(&[1.0, 2.0], &[true, true], 10).is_err());
    }

    #[test]
    fn per_class_rows_cover_all_attacks() {
        let labels = vec![
            RecordLabel::normal(),
            RecordLabel::attack(MainClass::Dos, "neptune", false),
            RecordLabel::attack(MainClass::Dos, "apache2", true),
            RecordLabel::attack(MainClass::U2r, "ps", true),
        ];
        let errors = [0.1, 5.0, 0.2, 9.0];
        let th = Threshold {
            value: 1.0,
            quantile: 0.5,
        };
        let report = per_class_eval(&errors, &labels, &th).unwrap();
        let total_attacks: usize = report
            .rows
            .iter()
            .filter(|r| r.scope == Scope::All)
            .map(|r| r.attacks)
            .sum();
        assert_eq!(total_attacks, 3);
        // Probe has zero records: no row.
        assert!(report.rows.iter().all(|r| r.class != MainClass::Probe));
        let dos_all = report
            .rows
            .iter()
            .find(|r| r.class == MainClass::Dos && r.scope == Scope::All)
            .unwrap();
        assert_eq!(dos_all.attacks, 2);
        assert_eq!(dos_all.detected, 1);
    }
}

//! Evaluation metrics: CCC, macro-F1, accuracy and the challenge totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_EXPR_CLASSES: usize = 7;

/// Denominators below this make CCC evaluate to zero.
pub const CCC_EPS: f64 = 1e-12;

/// Weights of F1 and accuracy in the expression total.
pub const EXPR_F1_WEIGHT: f64 = 0.67;
pub const EXPR_ACC_WEIGHT: f64 = 0.33;

/// Population (divide-by-N) moments of a pair of series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl CccStats {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::contract(format!(
                "series lengths differ: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::contract("CCC needs at least two samples"));
        }
        let n = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let (mut var_x, mut var_y, mut cov_xy) = (0.0, 0.0, 0.0);
        for (&a, &b) in x.iter().zip(y) {
            let (dx, dy) = (a - mean_x, b - mean_y);
            var_x += dx * dx;
            var_y += dy * dy;
            cov_xy += dx * dy;
        }
        Ok(Self {
            mean_x,
            mean_y,
            var_x: var_x / n,
            var_y: var_y / n,
            cov_xy: cov_xy / n,
        })
    }

    pub fn denominator(&self) -> f64 {
        let d = self.mean_x - self.mean_y;
        self.var_x + self.var_y + d * d
    }

    pub fn ccc(&self) -> f64 {
        let den = self.denominator();
        if den < CCC_EPS {
            0.0
        } else {
            2.0 * self.cov_xy / den
        }
    }
}

/// Concordance correlation coefficient with population statistics.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(CccStats::compute(x, y)?.ccc())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let s = CccStats::compute(x, y)?;
    let den = (s.var_x * s.var_y).sqrt();
    Ok(if den < CCC_EPS { 0.0 } else { s.cov_xy / den })
}

fn check_labels(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.is_empty() || gold.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "label lengths differ: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Per-class F1 scores. Classes with no true positives (including classes
/// absent from both sequences) score 0.
pub fn per_class_f1(pred: &[usize], gold: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    check_labels(pred, gold)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::contract(format!(
                "label out of range [0, {n_classes}): pred {p}, gold {g}"
            )));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Unweighted mean of the per-class F1 over all `n_classes` classes.
pub fn macro_f1(pred: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(pred, gold, n_classes)?;
    Ok(f1.iter().sum::<f64>() / n_classes as f64)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_labels(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn total_expr(f1: f64, acc: f64) -> f64 {
    EXPR_F1_WEIGHT * f1 + EXPR_ACC_WEIGHT * acc
}

pub fn total_va(ccc_v: f64, ccc_a: f64) -> f64 {
    (ccc_v + ccc_a) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprScores {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub total: f64,
    pub frames: usize,
}

impl ExprScores {
    pub fn compute(pred: &[usize], gold: &[usize]) -> Result<Self> {
        let macro_f1 = macro_f1(pred, gold, N_EXPR_CLASSES)?;
        let accuracy = accuracy(pred, gold)?;
        Ok(Self {
            macro_f1,
            accuracy,
            total: total_expr(macro_f1, accuracy),
            frames: pred.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaScores {
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub total: f64,
    pub frames: usize,
    /// Set when either CCC hit the zero-denominator rule.
    pub degenerate: bool,
}

impl VaScores {
    pub fn compute(pred_v: &[f64], pred_a: &[f64], gold_v: &[f64], gold_a: &[f64]) -> Result<Self> {
        let sv = CccStats::compute(pred_v, gold_v)?;
        let sa = CccStats::compute(pred_a, gold_a)?;
        let (ccc_v, ccc_a) = (sv.ccc(), sa.ccc());
        Ok(Self {
            ccc_v,
            ccc_a,
            total: total_va(ccc_v, ccc_a),
            frames: pred_v.len(),
            degenerate: sv.denominator() < CCC_EPS || sa.denominator() < CCC_EPS,
        })
    }
}

/// Evaluation report. Totals are always derived from the component scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub ccc_v: Option<f64>,
    pub ccc_a: Option<f64>,
    pub total_expr: Option<f64>,
    pub total_va: Option<f64>,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
    /// Per-video scores; the top-level numbers are over the concatenation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_video: Vec<VideoReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub video_id: String,
    pub report: EvalReport,
}

impl EvalReport {
    pub fn from_expr(s: &ExprScores) -> Self {
        Self {
            macro_f1: Some(s.macro_f1),
            accuracy: Some(s.accuracy),
            ccc_v: None,
            ccc_a: None,
            total_expr: Some(total_expr(s.macro_f1, s.accuracy)),
            total_va: None,
            frames: s.frames,
            degenerate: false,
            per_video: Vec::new(),
        }
    }

    pub fn from_va(s: &VaScores) -> Self {
        Self {
            macro_f1: None,
            accuracy: None,
            ccc_v: Some(s.ccc_v),
            ccc_a: Some(s.ccc_a),
            total_expr: None,
            total_va: Some(total_va(s.ccc_v, s.ccc_a)),
            frames: s.frames,
            degenerate: s.degenerate,
            per_video: Vec::new(),
        }
    }

    /// True when every present total equals the formula applied to its own
    /// components.
    pub fn is_consistent(&self) -> bool {
        let expr_ok = match (self.macro_f1, self.accuracy, self.total_expr) {
            (Some(f), Some(a), Some(t)) => t == total_expr(f, a),
            (None, None, None) => true,
            _ => false,
        };
        let va_ok = match (self.ccc_v, self.ccc_a, self.total_va) {
            (Some(v), Some(a), Some(t)) => t == total_va(v, a),
            (None, None, None) => true,
            _ => false,
        };
        expr_ok && va_ok && self.per_video.iter().all(|v| v.report.is_consistent())
    }
}

//! Early fusion of the visual streams and late weighted-average ensembling.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ExprScores, VaScores};
use crate::Task;

/// Per-stream feature widths. Stream order is fixed: face, context, body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionDims {
    pub face: usize,
    pub context: usize,
    pub body: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        Self {
            face: 2048,
            context: 2048,
            body: 2048,
        }
    }
}

impl FusionDims {
    pub fn total(&self) -> usize {
        self.face + self.context + self.body
    }

    /// Column ranges of face, context and body in the fused vector.
    pub fn spans(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.face;
        let b = a + self.context;
        [0..a, a..b, b..b + self.body]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamFeatures {
    pub frame_index: usize,
    pub face: Option<Array1<f64>>,
    pub context: Option<Array1<f64>>,
    pub body: Option<Array1<f64>>,
}

impl StreamFeatures {
    pub fn any_present(&self) -> bool {
        self.face.is_some() || self.context.is_some() || self.body.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    pub values: Array1<f64>,
    /// Face, context, body.
    pub presence: [bool; 3],
}

/// Concatenates `[face, context, body]`, zero-filling absent streams.
pub fn fuse_streams(s: &StreamFeatures, dims: &FusionDims) -> Result<FusedVector> {
    if !s.any_present() {
        return Err(Error::contract(format!("frame {}: every stream is absent", s.frame_index)));
    }
    let mut values = Array1::zeros(dims.total());
    let streams = [(&s.face, "face"), (&s.context, "context"), (&s.body, "body")];
    let mut presence = [false; 3];
    for ((stream, name), (span, present)) in streams.iter().zip(dims.spans().into_iter().zip(presence.iter_mut())) {
        let Some(v) = stream else { continue };
        if v.len() != span.len() {
            return Err(Error::contract(format!(
                "frame {}: {name} vector has {} values, expected {}",
                s.frame_index,
                v.len(),
                span.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Malformed(format!("frame {}: non-finite {name} features", s.frame_index)));
        }
        values.slice_mut(s![span]).assign(v);
        *present = true;
    }
    Ok(FusedVector { values, presence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub task: Task,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() != self.weights.len() {
            return Err(Error::contract("need one weight per member and at least one member"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("ensemble weights must be non-negative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("ensemble weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Element-wise weighted average of member outputs. Expression members are
/// probability rows and the result rows are renormalised to sum to 1.
pub fn ensemble_predict(outputs: &[ArrayView2<f64>], spec: &EnsembleSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    if outputs.len() != spec.weights.len() {
        return Err(Error::contract(format!(
            "{} member outputs for {} weights",
            outputs.len(),
            spec.weights.len()
        )));
    }
    let shape = outputs[0].dim();
    if outputs.iter().any(|o| o.dim() != shape) {
        return Err(Error::contract("member outputs differ in shape"));
    }
    let mut out = Array2::zeros(shape);
    for (o, &w) in outputs.iter().zip(&spec.weights) {
        if w != 0.0 {
            out.scaled_add(w, o);
        }
    }
    if spec.task == Task::Expr && spec.weights.iter().filter(|&&w| w != 0.0).count() > 1 {
        for mut row in out.rows_mut() {
            let sum = row.sum();
            if sum > 0.0 {
                row /= sum;
            }
        }
    }
    Ok(out)
}

/// Validation labels for weight selection.
#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    Expr(Vec<usize>),
    /// `frames x 2` valence, arousal.
    Va(Array2<f64>),
}

impl Gold {
    pub fn task(&self) -> Task {
        match self {
            Gold::Expr(_) => Task::Expr,
            Gold::Va(_) => Task::Va,
        }
    }

    fn len(&self) -> usize {
        match self {
            Gold::Expr(v) => v.len(),
            Gold::Va(a) => a.nrows(),
        }
    }
}

pub fn argmax_rows(p: ArrayView2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Challenge total of `pred` against `gold`.
pub fn validation_total(pred: ArrayView2<f64>, gold: &Gold) -> Result<f64> {
    match gold {
        Gold::Expr(labels) => Ok(ExprScores::compute(&argmax_rows(pred), labels)?.total),
        Gold::Va(va) => {
            let col = |m: ArrayView2<f64>, j: usize| m.column(j).to_vec();
            Ok(VaScores::compute(&col(pred, 0), &col(pred, 1), &col(va.view(), 0), &col(va.view(), 1))?.total)
        }
    }
}

/// Continuous secondary score for breaking ties in the challenge total,
/// which is flat across many weightings once argmax decisions stop
/// changing: mean probability on the gold class (expression) or negative
/// mean squared error (VA).
pub fn tie_break_score(pred: ArrayView2<f64>, gold: &Gold) -> f64 {
    match gold {
        Gold::Expr(labels) => {
            labels.iter().enumerate().map(|(t, &g)| pred[[t, g]]).sum::<f64>() / labels.len() as f64
        }
        Gold::Va(va) => -(&pred - va).mapv(|d| d * d).mean().unwrap_or(0.0),
    }
}

/// All compositions of `units` into `parts` non-negative integers, in
/// lexicographic order.
fn compositions(units: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(left - k, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, parts, &mut Vec::new(), &mut out);
    out
}

/// Scores within this of each other count as tied.
pub const SCORE_TIE_EPS: f64 = 1e-12;

/// Exhaustive search over the weight simplex with spacing `step`. Returns the
/// weights with the best validation total. Ties go to the better
/// [`tie_break_score`], then to the lexicographically smallest weights.
pub fn grid_search_weights(
    member_outputs: &[ArrayView2<f64>],
    member_ids: &[String],
    gold: &Gold,
    step: f64,
) -> Result<(EnsembleSpec, f64)> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("grid step must lie in (0, 1]"));
    }
    let units = (1.0 / step).round() as usize;
    if ((units as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("grid step {step} does not divide 1")));
    }
    if member_outputs.is_empty() || member_outputs.len() != member_ids.len() {
        return Err(Error::contract("need at least one member and one id per member"));
    }
    if gold.len() == 0 {
        return Err(Error::Empty("validation set"));
    }
    if member_outputs.iter().any(|o| o.nrows() != gold.len()) {
        return Err(Error::contract("member outputs and validation labels differ in length"));
    }
    let task = gold.task();
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for comp in compositions(units, member_outputs.len()) {
        let weights: Vec<f64> = comp.iter().map(|&k| k as f64 / units as f64).collect();
        let spec = EnsembleSpec {
            members: member_ids.to_vec(),
            weights: weights.clone(),
            task,
        };
        let fused = ensemble_predict(member_outputs, &spec)?;
        let score = validation_total(fused.view(), gold)?;
        let second = tie_break_score(fused.view(), gold);
        let better = best.as_ref().is_none_or(|(_, b, b2)| {
            score > b + SCORE_TIE_EPS || (score >= b - SCORE_TIE_EPS && second > b2 + SCORE_TIE_EPS)
        });
        if better {
            best = Some((weights, score, second));
        }
    }
    let (weights, score, _) = best.expect("the simplex grid is never empty");
    Ok((
        EnsembleSpec {
            members: member_ids.to_vec(),
            weights,
            task,
        },
        score,
    ))
}

/// Stacks member outputs of several videos into one matrix per member.
pub fn stack_rows(parts: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::contract(e.to_string()))
}

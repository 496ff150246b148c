//! Mini-batch training of a [`SeqModel`] on sequence windows.

use ndarray::{s, Array2};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{SeqGrads, SeqModel};
use crate::data::{SequenceWindow, VideoData};
use crate::error::{Error, Result};
use crate::fusion::argmax_rows;
use crate::losses::{
    ccc_loss_masked, combined_expr_loss, cross_entropy_loss, embedding_loss, mse_loss, EmbeddingTable,
};
use crate::metrics::{EvalReport, ExprScores, VaScores, VideoReport};
use crate::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaLoss {
    Ccc,
    Mse,
    CccMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub gradient_clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub lambda_emb: f64,
    /// Divide the embedding term by the embedding width.
    pub emb_normalize: bool,
    pub va_loss: VaLoss,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            gradient_clip_norm: 5.0,
            optimizer: OptimizerKind::Adam,
            lambda_emb: 1.0,
            emb_normalize: false,
            va_loss: VaLoss::Ccc,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.gradient_clip_norm >= 0.0) {
            return Err(Error::config("gradient_clip_norm must be non-negative"));
        }
        if !(self.lambda_emb >= 0.0) {
            return Err(Error::config("lambda_emb must be non-negative"));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD or Adam over the model's flattened tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &SeqModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut SeqModel, grads: &SeqGrads) {
        self.step += 1;
        let grads = grads.tensors();
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (k, ((_, params), (_, g))) in model.tensors_mut().into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in params.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..params.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Loss and gradients of one window, or `None` when the window carries no
/// usable labels (no labelled frame for expression, fewer than two for VA).
pub fn window_loss(
    model: &SeqModel,
    window: &SequenceWindow,
    table: Option<&EmbeddingTable>,
    cfg: &TrainConfig,
) -> Result<Option<(f64, SeqGrads)>> {
    let task = model.spec.task;
    let mask = window.label_mask(task);
    let labelled = mask.iter().filter(|&&m| m).count();
    if labelled == 0 || (task == Task::Va && labelled < 2) {
        return Ok(None);
    }
    let (out, cache) = model.forward(window.features.view())?;
    match task {
        Task::Expr => {
            let targets = window.expr_targets();
            let ce = cross_entropy_loss(out.view(), &targets)?;
            match (&model.emb_projection, table) {
                (Some(proj), Some(table)) if cfg.lambda_emb > 0.0 => {
                    let emb = embedding_loss(window.features.view(), proj, table, &targets, cfg.emb_normalize)?;
                    let total = combined_expr_loss(&ce, &emb, cfg.lambda_emb)?;
                    let grads = model.backward(total.grad_logits.view(), &cache, Some(&total.grad_proj))?;
                    Ok(Some((total.value, grads)))
                }
                (Some(_), None) if cfg.lambda_emb > 0.0 => {
                    Err(Error::config("model has an embedding projection but no embedding table was given"))
                }
                _ => Ok(Some((ce.value, model.backward(ce.grad.view(), &cache, None)?))),
            }
        }
        Task::Va => {
            let gold = window.va_targets();
            let loss = match cfg.va_loss {
                VaLoss::Ccc => ccc_loss_masked(out.view(), gold.view(), &mask)?,
                VaLoss::Mse => mse_loss(out.view(), gold.view(), Some(&mask))?,
                VaLoss::CccMse => {
                    let a = ccc_loss_masked(out.view(), gold.view(), &mask)?;
                    let b = mse_loss(out.view(), gold.view(), Some(&mask))?;
                    crate::losses::LossValue {
                        value: a.value + b.value,
                        grad: a.grad + b.grad,
                    }
                }
            };
            Ok(Some((loss.value, model.backward(loss.grad.view(), &cache, None)?)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task: Task,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Trains `model` in place. Window order within each epoch is a seeded
/// shuffle; gradients of a batch are reduced in window order, so the run is
/// fully determined by the seed.
pub fn fit(
    model: &mut SeqModel,
    train: &[SequenceWindow],
    validation: Option<&[SequenceWindow]>,
    table: Option<&EmbeddingTable>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    if let Some(w) = train.iter().find(|w| w.features.ncols() != model.spec.input_dim) {
        return Err(Error::contract(format!(
            "window {}@{} has width {}, model expects {}",
            w.video_id,
            w.start,
            w.features.ncols(),
            model.spec.input_dim
        )));
    }
    if !train.iter().any(|w| w.label_mask(model.spec.task).iter().any(|&m| m)) {
        return Err(Error::Empty("no labelled frames for the model's task"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        task: model.spec.task,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut loss_n, mut norm_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<SeqGrads> = None;
            let mut used = 0usize;
            for &i in batch {
                let Some((loss, grads)) = window_loss(model, &train[i], table, cfg)? else {
                    continue;
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                loss_sum += loss;
                loss_n += 1;
                used += 1;
                match acc.as_mut() {
                    Some(a) => a.add_scaled(&grads, 1.0),
                    None => acc = Some(grads),
                }
            }
            let Some(mut grads) = acc else { continue };
            grads.scale(1.0 / used as f64);
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            let norm = grads.global_norm();
            if cfg.gradient_clip_norm > 0.0 && norm > cfg.gradient_clip_norm {
                grads.scale(cfg.gradient_clip_norm / norm);
            }
            norm_sum += norm;
            batches += 1;
            opt.apply(model, &grads);
            step += 1;
        }
        let validation = validation.map(|v| evaluate(model, v)).transpose()?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            grad_norm: norm_sum / batches.max(1) as f64,
            validation,
        });
    }
    Ok(log)
}

/// Scores `model` over every valid, labelled frame of `windows`, with a
/// per-video breakdown.
pub fn evaluate(model: &SeqModel, windows: &[SequenceWindow]) -> Result<EvalReport> {
    let task = model.spec.task;
    let mut per_video: Vec<(String, FramePairs)> = Vec::new();
    for w in windows {
        let out = model.predict(w.features.view())?;
        let mask = w.label_mask(task);
        let entry = match per_video.iter_mut().find(|(id, _)| *id == w.video_id) {
            Some((_, e)) => e,
            None => {
                per_video.push((w.video_id.clone(), FramePairs::default()));
                &mut per_video.last_mut().expect("just pushed").1
            }
        };
        let pred_labels = argmax_rows(out.view());
        for (t, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            match task {
                Task::Expr => {
                    entry.pred_c.push(pred_labels[t]);
                    entry.gold_c.push(w.labels[t].expr.expect("masked as labelled"));
                }
                Task::Va => {
                    let (v, a) = w.labels[t].va_pair().expect("masked as labelled");
                    entry.pred_v.push(out[[t, 0]]);
                    entry.pred_a.push(out[[t, 1]]);
                    entry.gold_v.push(v);
                    entry.gold_a.push(a);
                }
            }
        }
    }
    let mut all = FramePairs::default();
    let mut videos = Vec::new();
    for (id, pairs) in &per_video {
        if let Ok(r) = pairs.report(task) {
            videos.push(VideoReport {
                video_id: id.clone(),
                report: r,
            });
        }
        all.extend(pairs);
    }
    let mut report = all.report(task)?;
    report.per_video = videos;
    Ok(report)
}

#[derive(Debug, Default, Clone)]
struct FramePairs {
    pred_c: Vec<usize>,
    gold_c: Vec<usize>,
    pred_v: Vec<f64>,
    pred_a: Vec<f64>,
    gold_v: Vec<f64>,
    gold_a: Vec<f64>,
}

impl FramePairs {
    fn extend(&mut self, o: &FramePairs) {
        self.pred_c.extend(&o.pred_c);
        self.gold_c.extend(&o.gold_c);
        self.pred_v.extend(&o.pred_v);
        self.pred_a.extend(&o.pred_a);
        self.gold_v.extend(&o.gold_v);
        self.gold_a.extend(&o.gold_a);
    }

    fn report(&self, task: Task) -> Result<EvalReport> {
        Ok(match task {
            Task::Expr => EvalReport::from_expr(&ExprScores::compute(&self.pred_c, &self.gold_c)?),
            Task::Va => EvalReport::from_va(&VaScores::compute(&self.pred_v, &self.pred_a, &self.gold_v, &self.gold_a)?),
        })
    }
}

/// Whole-video prediction: non-overlapping windows of `t_len`, stitched
/// back to one row per frame (`N x n_out`; probabilities for expression).
pub fn predict_video(model: &SeqModel, video: &VideoData, t_len: usize) -> Result<Array2<f64>> {
    let n = video.features.nrows();
    let mut out = Array2::zeros((n, model.spec.n_out()));
    for w in video.windows(t_len, t_len)? {
        let pred = match model.spec.task {
            Task::Expr => model.predict_proba(w.features.view())?,
            Task::Va => model.predict(w.features.view())?,
        };
        let real = w.valid_mask.iter().filter(|&&v| v).count();
        out.slice_mut(s![w.start..w.start + real, ..]).assign(&pred.slice(s![..real, ..]));
    }
    Ok(out)
}

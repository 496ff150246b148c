//! Bidirectional LSTM with a per-frame linear head.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{backward_direction, run_direction, CellCache, LstmGrads, LstmParams};
use crate::error::{Error, Result};
use crate::losses::{softmax_rows, EmbProjection};
use crate::Task;

/// Width of the fused visual feature vector at full scale.
pub const FULL_INPUT_DIM: usize = 6144;
/// LSTM hidden units at full scale.
pub const FULL_HIDDEN_DIM: usize = 512;

/// Largest f64 below 1; `tanh` itself rounds to 1.0 for |z| > ~19.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub task: Task,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    /// Word-embedding dimension for the congruity projection, if any.
    pub emb_dim: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("input_dim and hidden_dim must be positive"));
        }
        if self.emb_dim == Some(0) {
            return Err(Error::config("emb_dim must be positive when set"));
        }
        if self.emb_dim.is_some() && self.task != Task::Expr {
            return Err(Error::config("the embedding projection applies to the expression task only"));
        }
        Ok(())
    }

    pub fn n_out(&self) -> usize {
        self.task.n_out()
    }

    fn head_width(&self) -> usize {
        self.hidden_dim * if self.bidirectional { 2 } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    pub spec: ModelSpec,
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
    /// `n_out x (dirs * h)`
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub emb_projection: Option<EmbProjection>,
}

/// Everything `SeqModel::backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fwd: Vec<CellCache>,
    bwd: Option<Vec<CellCache>>,
    hidden: Array2<f64>,
    outputs: Array2<f64>,
}

impl ForwardCache {
    /// Per-frame concatenated hidden states, `T x (dirs * h)`.
    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.view()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqGrads {
    pub forward: LstmGrads,
    pub backward: Option<LstmGrads>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub emb_projection: Option<Array2<f64>>,
    /// Gradient with respect to the input sequence, `T x d_in`.
    pub inputs: Array2<f64>,
}

impl SeqModel {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            forward: LstmParams::zeros(spec.input_dim, spec.hidden_dim),
            backward: spec
                .bidirectional
                .then(|| LstmParams::zeros(spec.input_dim, spec.hidden_dim)),
            head_w: Array2::zeros((spec.n_out(), spec.head_width())),
            head_b: Array1::zeros(spec.n_out()),
            emb_projection: spec.emb_dim.map(|d| EmbProjection {
                matrix: Array2::zeros((d, spec.input_dim)),
            }),
        })
    }

    /// Seeded initialisation: LSTM weights and the head uniform in
    /// `+-1/sqrt(fan)`, forget bias 1, projection uniform in `+-1/sqrt(d_in)`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.forward = LstmParams::init(spec.input_dim, spec.hidden_dim, &mut rng);
        if spec.bidirectional {
            model.backward = Some(LstmParams::init(spec.input_dim, spec.hidden_dim, &mut rng));
        }
        let k = 1.0 / (spec.head_width() as f64).sqrt();
        model.head_w.mapv_inplace(|_| rng.random_range(-k..k));
        if let Some(p) = model.emb_projection.as_mut() {
            let k = 1.0 / (spec.input_dim as f64).sqrt();
            p.matrix.mapv_inplace(|_| rng.random_range(-k..k));
        }
        Ok(model)
    }

    pub fn forward(&self, xs: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if xs.nrows() == 0 {
            return Err(Error::Empty("input sequence"));
        }
        if xs.ncols() != self.spec.input_dim {
            return Err(Error::contract(format!(
                "input width {} != model input_dim {}",
                xs.ncols(),
                self.spec.input_dim
            )));
        }
        let (hf, fwd) = run_direction(xs, &self.forward, false)?;
        let (hidden, bwd) = match &self.backward {
            Some(p) => {
                let (hb, bwd) = run_direction(xs, p, true)?;
                (concatenate![Axis(1), hf, hb], Some(bwd))
            }
            None => (hf, None),
        };
        let mut outputs = hidden.dot(&self.head_w.t()) + &self.head_b;
        if self.spec.task == Task::Va {
            outputs.mapv_inplace(|z| z.tanh().clamp(-BELOW_ONE, BELOW_ONE));
        }
        let cache = ForwardCache {
            fwd,
            bwd,
            hidden,
            outputs: outputs.clone(),
        };
        Ok((outputs, cache))
    }

    /// Per-frame outputs: logits for expression, tanh-bounded (v, a) for VA.
    pub fn predict(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(xs)?.0)
    }

    /// Class probabilities per frame (expression models).
    pub fn predict_proba(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.spec.task != Task::Expr {
            return Err(Error::contract("probabilities only exist for the expression task"));
        }
        Ok(softmax_rows(self.predict(xs)?.view()))
    }

    /// Reverse-mode gradients given `d_out = dL/d(outputs)` (`T x n_out`).
    /// `d_proj` is added to the projection gradient when the loss touched it.
    pub fn backward(&self, d_out: ArrayView2<f64>, cache: &ForwardCache, d_proj: Option<&Array2<f64>>) -> Result<SeqGrads> {
        if d_out.dim() != cache.outputs.dim() {
            return Err(Error::contract(format!(
                "upstream gradient {:?} != output shape {:?}",
                d_out.dim(),
                cache.outputs.dim()
            )));
        }
        if cache.bwd.is_some() != self.backward.is_some() {
            return Err(Error::contract("cache was produced by a model with different directionality"));
        }
        let d_pre = match self.spec.task {
            Task::Va => &d_out * &cache.outputs.mapv(|y| 1.0 - y * y),
            Task::Expr => d_out.to_owned(),
        };
        let head_w = d_pre.t().dot(&cache.hidden).as_standard_layout().into_owned();
        let head_b = d_pre.sum_axis(Axis(0));
        let d_hidden = d_pre.dot(&self.head_w);
        let h = self.spec.hidden_dim;

        let (forward, mut inputs) = backward_direction(d_hidden.slice(s![.., ..h]), &cache.fwd, &self.forward, false)?;
        let backward = match (&self.backward, &cache.bwd) {
            (Some(p), Some(c)) => {
                let (g, dx) = backward_direction(d_hidden.slice(s![.., h..]), c, p, true)?;
                inputs += &dx;
                Some(g)
            }
            _ => None,
        };
        let emb_projection = self.emb_projection.as_ref().map(|p| match d_proj {
            Some(g) => g.clone(),
            None => Array2::zeros(p.matrix.dim()),
        });
        Ok(SeqGrads {
            forward,
            backward,
            head_w,
            head_b,
            emb_projection,
            inputs,
        })
    }

    /// Parameter tensors in checkpoint order: forward `w, u, b`, backward
    /// `w, u, b` (bidirectional only), head `w, b`, projection (if any).
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("forward.w", slice(&self.forward.w)),
            ("forward.u", slice(&self.forward.u)),
            ("forward.b", self.forward.b.as_slice().expect("contiguous")),
        ];
        if let Some(p) = &self.backward {
            out.push(("backward.w", slice(&p.w)));
            out.push(("backward.u", slice(&p.u)));
            out.push(("backward.b", p.b.as_slice().expect("contiguous")));
        }
        out.push(("head.w", slice(&self.head_w)));
        out.push(("head.b", self.head_b.as_slice().expect("contiguous")));
        if let Some(p) = &self.emb_projection {
            out.push(("emb_projection", slice(&p.matrix)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("forward.w", slice_mut(&mut self.forward.w)),
            ("forward.u", slice_mut(&mut self.forward.u)),
            ("forward.b", self.forward.b.as_slice_mut().expect("contiguous")),
        ];
        if let Some(p) = &mut self.backward {
            out.push(("backward.w", slice_mut(&mut p.w)));
            out.push(("backward.u", slice_mut(&mut p.u)));
            out.push(("backward.b", p.b.as_slice_mut().expect("contiguous")));
        }
        out.push(("head.w", slice_mut(&mut self.head_w)));
        out.push(("head.b", self.head_b.as_slice_mut().expect("contiguous")));
        if let Some(p) = &mut self.emb_projection {
            out.push(("emb_projection", slice_mut(&mut p.matrix)));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl SeqGrads {
    /// Same order as [`SeqModel::tensors`].
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("forward.w", slice(&self.forward.w)),
            ("forward.u", slice(&self.forward.u)),
            ("forward.b", self.forward.b.as_slice().expect("contiguous")),
        ];
        if let Some(g) = &self.backward {
            out.push(("backward.w", slice(&g.w)));
            out.push(("backward.u", slice(&g.u)));
            out.push(("backward.b", g.b.as_slice().expect("contiguous")));
        }
        out.push(("head.w", slice(&self.head_w)));
        out.push(("head.b", self.head_b.as_slice().expect("contiguous")));
        if let Some(g) = &self.emb_projection {
            out.push(("emb_projection", slice(g)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("forward.w", slice_mut(&mut self.forward.w)),
            ("forward.u", slice_mut(&mut self.forward.u)),
            ("forward.b", self.forward.b.as_slice_mut().expect("contiguous")),
        ];
        if let Some(g) = &mut self.backward {
            out.push(("backward.w", slice_mut(&mut g.w)));
            out.push(("backward.u", slice_mut(&mut g.u)));
            out.push(("backward.b", g.b.as_slice_mut().expect("contiguous")));
        }
        out.push(("head.w", slice_mut(&mut self.head_w)));
        out.push(("head.b", self.head_b.as_slice_mut().expect("contiguous")));
        if let Some(g) = &mut self.emb_projection {
            out.push(("emb_projection", slice_mut(g)));
        }
        out
    }

    /// Adds `k * other` into `self`.
    pub fn add_scaled(&mut self, other: &SeqGrads, k: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

/// Per-frame outputs of `model` on `xs`.
pub fn bilstm_forward(xs: ArrayView2<f64>, model: &SeqModel) -> Result<Array2<f64>> {
    model.predict(xs)
}

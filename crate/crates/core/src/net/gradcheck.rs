//! Central finite-difference verification of every analytic gradient.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, SeqModel};
use crate::error::{Error, Result};
use crate::losses::{
    ccc_loss, ccc_loss_masked, combined_expr_loss, cross_entropy_loss, embedding_loss, mse_loss, EmbProjection,
    EmbeddingTable,
};
use crate::metrics::N_EXPR_CLASSES;
use crate::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub emb_dim: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            input_dim: 8,
            hidden_dim: 4,
            seq_len: 3,
            emb_dim: 5,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Worst agreement seen for one loss across all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Parameter (and element) where the worst error occurred.
    pub worst_at: String,
    pub n_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub checks: Vec<LossCheck>,
    pub passed: bool,
}

/// Floor on the denominator. Central differences at step `1e-5` carry
/// roundoff of about `eps * |L| / step`, around `1e-10` for the losses here;
/// this floor asks for `1e-9` absolute agreement on near-zero gradients.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

struct Tracker {
    name: &'static str,
    max: f64,
    worst_at: String,
    n: usize,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max: 0.0,
            worst_at: String::new(),
            n: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.n += 1;
        // NaN compares false everywhere, so catch it explicitly.
        if e > self.max || e.is_nan() {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
            self.worst_at = at();
        }
    }

    fn finish(self, tol: f64) -> LossCheck {
        LossCheck {
            name: self.name.to_string(),
            max_rel_error: self.max,
            worst_at: self.worst_at,
            n_checked: self.n,
            passed: self.max < tol,
        }
    }
}

/// Central difference of `f` with respect to every entry of `x`, compared
/// with `analytic` (same shape).
fn check_array(
    tr: &mut Tracker,
    label: &str,
    x: &mut Array2<f64>,
    analytic: ArrayView2<f64>,
    step: f64,
    mut f: impl FnMut(&Array2<f64>) -> Result<f64>,
) -> Result<()> {
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + step;
        let plus = f(x)?;
        x[[r, c]] = orig - step;
        let minus = f(x)?;
        x[[r, c]] = orig;
        tr.record(analytic[[r, c]], (plus - minus) / (2.0 * step), || format!("{label}[{r},{c}]"));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random mask with at least `min_true` set entries.
fn random_mask(rng: &mut ChaCha8Rng, n: usize, min_true: usize) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        if m.iter().filter(|&&b| b).count() >= min_true.min(n) {
            return m;
        }
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    random_mask(rng, n, 1)
        .into_iter()
        .map(|keep| keep.then(|| rng.random_range(0..N_EXPR_CLASSES)))
        .collect()
}

fn random_table(rng: &mut ChaCha8Rng, dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::new(
        (0..N_EXPR_CLASSES).map(|c| format!("class{c}")).collect(),
        uniform(rng, (N_EXPR_CLASSES, dim), -1.0, 1.0),
    )
}

fn check_mse(rng: &mut ChaCha8Rng, tr: &mut Tracker, step: f64) -> Result<()> {
    let shape = (rng.random_range(1..8), rng.random_range(1..4));
    let mut pred = uniform(rng, shape, -2.0, 2.0);
    let target = uniform(rng, shape, -2.0, 2.0);
    let mask = random_mask(rng, shape.0, 1);
    let g = mse_loss(pred.view(), target.view(), Some(&mask))?.grad;
    check_array(tr, "pred", &mut pred, g.view(), step, |p| {
        Ok(mse_loss(p.view(), target.view(), Some(&mask))?.value)
    })
}

fn check_ccc(rng: &mut ChaCha8Rng, tr: &mut Tracker, step: f64) -> Result<()> {
    let n = rng.random_range(3..12);
    let mut pred = uniform(rng, (n, 2), -1.0, 1.0);
    let gold = uniform(rng, (n, 2), -1.0, 1.0);
    let eval = |p: &Array2<f64>| {
        ccc_loss(
            &p.column(0).to_vec(),
            &gold.column(0).to_vec(),
            &p.column(1).to_vec(),
            &gold.column(1).to_vec(),
        )
    };
    let g = eval(&pred)?.grad;
    check_array(tr, "pred", &mut pred, g.view(), step, |p| Ok(eval(p)?.value))
}

fn check_ce(rng: &mut ChaCha8Rng, tr: &mut Tracker, step: f64) -> Result<()> {
    let t = rng.random_range(1..8);
    let mut logits = uniform(rng, (t, N_EXPR_CLASSES), -3.0, 3.0);
    let gold = random_labels(rng, t);
    let g = cross_entropy_loss(logits.view(), &gold)?.grad;
    check_array(tr, "logits", &mut logits, g.view(), step, |l| {
        Ok(cross_entropy_loss(l.view(), &gold)?.value)
    })
}

fn check_embedding(rng: &mut ChaCha8Rng, tr: &mut Tracker, step: f64, emb_dim: usize) -> Result<()> {
    let t = rng.random_range(1..6);
    let d_v = rng.random_range(1..8);
    let table = random_table(rng, emb_dim)?;
    let mut fused = uniform(rng, (t, d_v), -1.0, 1.0);
    let mut proj = uniform(rng, (emb_dim, d_v), -1.0, 1.0);
    let gold = random_labels(rng, t);
    let normalize = rng.random_bool(0.5);
    let eval = |f: &Array2<f64>, p: &Array2<f64>| {
        embedding_loss(f.view(), &EmbProjection { matrix: p.clone() }, &table, &gold, normalize)
    };
    let base = eval(&fused, &proj)?;
    check_array(tr, "fused", &mut fused, base.loss.grad.view(), step, |f| Ok(eval(f, &proj)?.loss.value))?;
    check_array(tr, "proj", &mut proj, base.grad_proj.view(), step, |p| Ok(eval(&fused, p)?.loss.value))
}

enum SeqLoss<'a> {
    Expr {
        gold: Vec<Option<usize>>,
        table: &'a EmbeddingTable,
        lambda: f64,
    },
    VaCcc {
        gold: Array2<f64>,
        mask: Vec<bool>,
    },
    VaMse {
        gold: Array2<f64>,
        mask: Vec<bool>,
    },
}

impl SeqLoss<'_> {
    /// Loss value, parameter gradients and the full input gradient (the
    /// embedding term also reads the inputs directly).
    fn eval(&self, model: &SeqModel, xs: &Array2<f64>, with_grads: bool) -> Result<(f64, Option<(Vec<Vec<f64>>, Array2<f64>)>)> {
        let (out, cache) = model.forward(xs.view())?;
        let (value, d_out, d_proj, d_in_extra) = match self {
            SeqLoss::Expr { gold, table, lambda } => {
                let ce = cross_entropy_loss(out.view(), gold)?;
                let proj = model.emb_projection.as_ref().expect("expression check uses a projection");
                let emb = embedding_loss(xs.view(), proj, table, gold, false)?;
                let total = combined_expr_loss(&ce, &emb, *lambda)?;
                (total.value, total.grad_logits, Some(total.grad_proj), Some(total.grad_fused))
            }
            SeqLoss::VaCcc { gold, mask } => {
                let l = ccc_loss_masked(out.view(), gold.view(), mask)?;
                (l.value, l.grad, None, None)
            }
            SeqLoss::VaMse { gold, mask } => {
                let l = mse_loss(out.view(), gold.view(), Some(mask))?;
                (l.value, l.grad, None, None)
            }
        };
        if !with_grads {
            return Ok((value, None));
        }
        let grads = model.backward(d_out.view(), &cache, d_proj.as_ref())?;
        let mut d_in = grads.inputs.clone();
        if let Some(extra) = d_in_extra {
            d_in += &extra;
        }
        let flat = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        Ok((value, Some((flat, d_in))))
    }
}

fn check_bptt(model: &mut SeqModel, xs: &mut Array2<f64>, loss: &SeqLoss, tr: &mut Tracker, step: f64) -> Result<()> {
    let (_, grads) = loss.eval(model, xs, true)?;
    let (param_grads, input_grads) = grads.expect("requested");
    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
    for (k, name) in names.iter().enumerate() {
        for i in 0..param_grads[k].len() {
            let orig = model.tensors()[k].1[i];
            model.tensors_mut()[k].1[i] = orig + step;
            let plus = loss.eval(model, xs, false)?.0;
            model.tensors_mut()[k].1[i] = orig - step;
            let minus = loss.eval(model, xs, false)?.0;
            model.tensors_mut()[k].1[i] = orig;
            tr.record(param_grads[k][i], (plus - minus) / (2.0 * step), || format!("{name}[{i}]"));
        }
    }
    let frozen = model.clone();
    check_array(tr, "inputs", xs, input_grads.view(), step, |x| Ok(loss.eval(&frozen, x, false)?.0))
}

fn seq_model(cfg: &GradCheckConfig, task: Task, emb: bool, rng: &mut ChaCha8Rng) -> Result<SeqModel> {
    let spec = ModelSpec {
        task,
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        bidirectional: true,
        emb_dim: emb.then_some(cfg.emb_dim),
    };
    let mut model = SeqModel::new(spec, rng.random())?;
    // Non-trivial biases so every gate path carries gradient.
    for (name, t) in model.tensors_mut() {
        if name.ends_with(".b") {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    Ok(model)
}

/// Runs every check on `cfg.instances` seeded random instances.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 || cfg.seq_len == 0 || cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.emb_dim == 0 {
        return Err(Error::config("gradcheck sizes must be positive"));
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::config("gradcheck step and tolerance must be positive"));
    }
    let mut trackers = [
        Tracker::new("mse"),
        Tracker::new("ccc"),
        Tracker::new("cross_entropy"),
        Tracker::new("embedding"),
        Tracker::new("bptt_expr_ce_emb"),
        Tracker::new("bptt_va_ccc"),
        Tracker::new("bptt_va_mse"),
    ];
    let t = cfg.seq_len;
    for inst in 0..cfg.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(inst as u64));
        let [mse, ccc, ce, emb, b_expr, b_ccc, b_mse] = &mut trackers;
        check_mse(&mut rng, mse, cfg.step)?;
        check_ccc(&mut rng, ccc, cfg.step)?;
        check_ce(&mut rng, ce, cfg.step)?;
        check_embedding(&mut rng, emb, cfg.step, cfg.emb_dim)?;

        let table = random_table(&mut rng, cfg.emb_dim)?;
        let mut model = seq_model(cfg, Task::Expr, true, &mut rng)?;
        let mut xs = uniform(&mut rng, (t, cfg.input_dim), -1.0, 1.0);
        let loss = SeqLoss::Expr {
            gold: random_labels(&mut rng, t),
            table: &table,
            lambda: rng.random_range(0.1..2.0),
        };
        check_bptt(&mut model, &mut xs, &loss, b_expr, cfg.step)?;

        for (tracker, use_ccc) in [(b_ccc, true), (b_mse, false)] {
            let mut model = seq_model(cfg, Task::Va, false, &mut rng)?;
            let mut xs = uniform(&mut rng, (t, cfg.input_dim), -1.0, 1.0);
            let gold = uniform(&mut rng, (t, 2), -0.9, 0.9);
            let mask = random_mask(&mut rng, t, 2);
            let loss = if use_ccc {
                SeqLoss::VaCcc { gold, mask }
            } else {
                SeqLoss::VaMse { gold, mask }
            };
            check_bptt(&mut model, &mut xs, &loss, tracker, cfg.step)?;
        }
    }
    let checks: Vec<LossCheck> = trackers.into_iter().map(|tr| tr.finish(cfg.tolerance)).collect();
    Ok(GradCheckReport {
        config: cfg.clone(),
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Numerical gradient of a scalar function of a vector, for ad-hoc checks.
pub fn numeric_gradient(x: &Array1<f64>, step: f64, mut f: impl FnMut(&Array1<f64>) -> f64) -> Array1<f64> {
    let mut x = x.clone();
    let mut g = Array1::zeros(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

//! Training objectives with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its prediction argument, shaped like that argument. Frames excluded by a
//! mask or by a missing label get zero gradient and do not count towards the
//! averaging denominator.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::metrics::{CccStats, CCC_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossValue {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            value: self.value * k,
            grad: &self.grad * k,
        }
    }
}

pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<LossValue> {
    if pred.dim() != target.dim() {
        return Err(Error::contract(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let rows = pred.nrows();
    let keep = |t: usize| mask.is_none_or(|m| m[t]);
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(Error::contract("mask length differs from frame count"));
        }
    }
    let n = (0..rows).filter(|&t| keep(t)).count() * pred.ncols();
    if n == 0 {
        return Err(Error::Empty("no frames left for MSE"));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut sum = 0.0;
    for t in (0..rows).filter(|&t| keep(t)) {
        for j in 0..pred.ncols() {
            let d = pred[[t, j]] - target[[t, j]];
            sum += d * d;
            grad[[t, j]] = 2.0 * d / n as f64;
        }
    }
    Ok(LossValue {
        value: sum / n as f64,
        grad,
    })
}

/// d(rho_c)/dx_i for rho_c = ccc(x, y), population statistics.
fn ccc_grad_x(x: &[f64], y: &[f64], stats: &CccStats) -> Vec<f64> {
    let den = stats.denominator();
    if den < CCC_EPS {
        return vec![0.0; x.len()];
    }
    let rho = stats.ccc();
    let n = x.len() as f64;
    let gap = stats.mean_x - stats.mean_y;
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| 2.0 / (n * den) * ((yi - stats.mean_y) - rho * ((xi - stats.mean_x) + gap)))
        .collect()
}

/// `1 - (rho_v + rho_a) / 2`; the gradient has shape `T x 2` with valence
/// in column 0 and arousal in column 1.
pub fn ccc_loss(pred_v: &[f64], gold_v: &[f64], pred_a: &[f64], gold_a: &[f64]) -> Result<LossValue> {
    if pred_v.len() != pred_a.len() {
        return Err(Error::contract("valence and arousal predictions differ in length"));
    }
    let sv = CccStats::compute(pred_v, gold_v)?;
    let sa = CccStats::compute(pred_a, gold_a)?;
    let gv = ccc_grad_x(pred_v, gold_v, &sv);
    let ga = ccc_grad_x(pred_a, gold_a, &sa);
    let mut grad = Array2::zeros((pred_v.len(), 2));
    for t in 0..pred_v.len() {
        grad[[t, 0]] = -0.5 * gv[t];
        grad[[t, 1]] = -0.5 * ga[t];
    }
    Ok(LossValue {
        value: 1.0 - (sv.ccc() + sa.ccc()) / 2.0,
        grad,
    })
}

/// CCC loss over the masked rows of `T x 2` prediction/gold matrices.
pub fn ccc_loss_masked(pred: ArrayView2<f64>, gold: ArrayView2<f64>, mask: &[bool]) -> Result<LossValue> {
    if pred.dim() != gold.dim() || pred.ncols() != 2 || mask.len() != pred.nrows() {
        return Err(Error::contract("CCC loss expects matching T x 2 inputs and a T-long mask"));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    let col = |m: &ArrayView2<f64>, j: usize| idx.iter().map(|&t| m[[t, j]]).collect::<Vec<_>>();
    let dense = ccc_loss(&col(&pred, 0), &col(&gold, 0), &col(&pred, 1), &col(&gold, 1))?;
    let mut grad = Array2::zeros(pred.dim());
    for (k, &t) in idx.iter().enumerate() {
        grad.row_mut(t).assign(&dense.grad.row(k));
    }
    Ok(LossValue {
        value: dense.value,
        grad,
    })
}

pub fn softmax_row(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|z| (z - max).exp());
    let s = p.sum();
    p /= s;
    p
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (mut dst, src) in out.rows_mut().into_iter().zip(logits.rows()) {
        dst.assign(&softmax_row(src));
    }
    out
}

/// Mean of `-log softmax(logits)[gold]` over labelled frames.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, gold: &[Option<usize>]) -> Result<LossValue> {
    if gold.len() != logits.nrows() {
        return Err(Error::contract("label count differs from frame count"));
    }
    let n = gold.iter().flatten().count();
    if n == 0 {
        return Err(Error::Empty("all frames unlabelled"));
    }
    let classes = logits.ncols();
    let mut grad = Array2::zeros(logits.dim());
    let mut sum = 0.0;
    for (t, label) in gold.iter().enumerate() {
        let Some(g) = *label else { continue };
        if g >= classes {
            return Err(Error::contract(format!("label {g} outside [0, {classes})")));
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        sum += lse - row[g];
        let mut gr = grad.row_mut(t);
        for (j, z) in row.iter().enumerate() {
            gr[j] = (z - lse).exp() / n as f64;
        }
        gr[g] -= 1.0 / n as f64;
    }
    Ok(LossValue {
        value: sum / n as f64,
        grad,
    })
}

/// Word embeddings for the class labels (GloVe text layout).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if names.len() != vectors.nrows() {
            return Err(Error::config("one embedding row per class name required"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("embedding vectors must be finite"));
        }
        Ok(Self { names, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn vector(&self, class: usize) -> Result<ArrayView1<'_, f64>> {
        if class >= self.n_classes() {
            return Err(Error::config(format!(
                "class {class} has no embedding (table holds {})",
                self.n_classes()
            )));
        }
        Ok(self.vectors.row(class))
    }

    /// Parses `name v1 ... vd` lines. With `order`, rows are rearranged to
    /// follow those class names; every one must be present.
    pub fn parse<R: BufRead>(input: R, order: Option<&[&str]>) -> Result<Self> {
        let mut names = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<embedding table>", e))?;
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let vals = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Malformed(format!("embedding line {}: {e}", lineno + 1)))?;
            if let Some(first) = rows.first() {
                if first.len() != vals.len() {
                    return Err(Error::Malformed(format!(
                        "embedding line {}: dimension {} != {}",
                        lineno + 1,
                        vals.len(),
                        first.len()
                    )));
                }
            }
            names.push(name.to_string());
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(Error::Empty("embedding table"));
        }
        let (names, rows) = match order {
            None => (names, rows),
            Some(order) => {
                let index: HashMap<&str, usize> =
                    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                let mut picked = Vec::with_capacity(order.len());
                for &class in order {
                    let i = *index.get(class).ok_or_else(|| {
                        Error::config(format!("class `{class}` missing from embedding table"))
                    })?;
                    picked.push(rows[i].clone());
                }
                (order.iter().map(|s| s.to_string()).collect(), picked)
            }
        };
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let vectors = Array2::from_shape_vec((names.len(), d), flat)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        Self::new(names, vectors)
    }

    pub fn load(path: &Path, order: Option<&[&str]>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(f), order)
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (name, row) in self.names.iter().zip(self.vectors.rows()) {
            write!(out, "{name}")?;
            for v in row {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Linear map from fused visual features to the word-embedding space,
/// `d_t x d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbProjection {
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoss {
    /// Value and gradient with respect to the fused features (`T x d_v`).
    pub loss: LossValue,
    /// Gradient with respect to the projection matrix.
    pub grad_proj: Array2<f64>,
}

/// `||W f - e_gold||^2` per labelled frame, averaged over those frames.
/// With `normalize`, each frame's term is also divided by the embedding
/// dimension, giving a per-coordinate mean squared error.
pub fn embedding_loss(
    fused: ArrayView2<f64>,
    proj: &EmbProjection,
    table: &EmbeddingTable,
    gold: &[Option<usize>],
    normalize: bool,
) -> Result<EmbeddingLoss> {
    let (d_t, d_v) = proj.matrix.dim();
    if fused.ncols() != d_v || table.dim() != d_t || gold.len() != fused.nrows() {
        return Err(Error::contract(format!(
            "embedding loss dims: fused {:?}, projection {:?}, table dim {}, labels {}",
            fused.dim(),
            proj.matrix.dim(),
            table.dim(),
            gold.len()
        )));
    }
    let n = gold.iter().flatten().count();
    if n == 0 {
        return Err(Error::Empty("all frames unlabelled"));
    }
    let scale = 1.0 / n as f64 / if normalize { d_t as f64 } else { 1.0 };
    let mut value = 0.0;
    let mut grad_fused = Array2::zeros(fused.dim());
    let mut grad_proj = Array2::zeros(proj.matrix.dim());
    for (t, label) in gold.iter().enumerate() {
        let Some(g) = *label else { continue };
        let f = fused.row(t);
        let resid = proj.matrix.dot(&f) - table.vector(g)?;
        value += resid.dot(&resid);
        let g_u = resid * (2.0 * scale);
        grad_fused.row_mut(t).assign(&proj.matrix.t().dot(&g_u));
        grad_proj += &outer(g_u.view(), f);
    }
    Ok(EmbeddingLoss {
        loss: LossValue {
            value: value * scale,
            grad: grad_fused,
        },
        grad_proj,
    })
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Cross-entropy plus weighted embedding congruity.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprLoss {
    pub value: f64,
    pub grad_logits: Array2<f64>,
    pub grad_fused: Array2<f64>,
    pub grad_proj: Array2<f64>,
}

pub fn combined_expr_loss(ce: &LossValue, emb: &EmbeddingLoss, lambda_emb: f64) -> Result<ExprLoss> {
    if !(lambda_emb >= 0.0) {
        return Err(Error::config("lambda_emb must be non-negative"));
    }
    Ok(ExprLoss {
        value: ce.value + lambda_emb * emb.loss.value,
        grad_logits: ce.grad.clone(),
        grad_fused: &emb.loss.grad * lambda_emb,
        grad_proj: &emb.grad_proj * lambda_emb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn central_diff(mut f: impl FnMut(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            g[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn table(d: usize, k: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
        EmbeddingTable::new((0..k).map(|i| format!("c{i}")).collect(), random(rng, k, d)).unwrap()
    }

    #[test]
    fn mse_cases() {
        let p = array![[0.5], [0.5]];
        let t = array![[0.0], [1.0]];
        assert_eq!(mse_loss(p.view(), t.view(), None).unwrap().value, 0.25);
        let z = mse_loss(t.view(), t.view(), None).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.iter().all(|&g| g == 0.0));
        let one = mse_loss(array![[1.0]].view(), array![[0.0]].view(), None).unwrap();
        assert_eq!(one.grad[[0, 0]], 2.0);
        assert!(mse_loss(p.view(), t.view(), Some(&[false, false])).is_err());
    }

    #[test]
    fn mse_ignores_masked_nan() {
        let p = array![[0.5], [f64::NAN]];
        let t = array![[0.0], [f64::NAN]];
        let l = mse_loss(p.view(), t.view(), Some(&[true, false])).unwrap();
        assert_eq!(l.value, 0.25);
        assert!(l.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ccc_loss_endpoints() {
        let x = [0.1, 0.5, -0.3, 0.9];
        assert!(ccc_loss(&x, &x, &x, &x).unwrap().value.abs() < 1e-15);
        let neg: Vec<f64> = [-1.0, 0.0, 1.0].to_vec();
        let pos: Vec<f64> = [1.0, 0.0, -1.0].to_vec();
        assert_eq!(ccc_loss(&neg, &pos, &neg, &pos).unwrap().value, 2.0);
        // rho_v = 1, rho_a = 0 (constant equal arousal hits the zero rule)
        let c = [0.2, 0.2, 0.2];
        assert_eq!(ccc_loss(&neg, &neg, &c, &c).unwrap().value, 0.5);
    }

    #[test]
    fn ccc_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t = rng.random_range(2..12);
            let pred = random(&mut rng, t, 2);
            let gold = random(&mut rng, t, 2);
            let mask = vec![true; t];
            let an = ccc_loss_masked(pred.view(), gold.view(), &mask).unwrap();
            let fd = central_diff(
                |p| ccc_loss_masked(p.view(), gold.view(), &mask).unwrap().value,
                &pred,
            );
            for (a, b) in an.grad.iter().zip(fd.iter()) {
                assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let sat = array![[100.0, 0.0, 0.0]];
        assert!(cross_entropy_loss(sat.view(), &[Some(0)]).unwrap().value < 1e-40);
        let z = Array2::zeros((1, 7));
        let v = cross_entropy_loss(z.view(), &[Some(3)]).unwrap().value;
        assert!((v - 7f64.ln()).abs() < 1e-12);
        let l = array![[2f64.ln(), 0.0]];
        assert!((cross_entropy_loss(l.view(), &[Some(0)]).unwrap().value - 1.5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(l.view(), &[None]).is_err());
    }

    #[test]
    fn cross_entropy_stable_at_extreme_logits() {
        let l = array![[1e4, -1e4, 0.0]];
        let v = cross_entropy_loss(l.view(), &[Some(1)]).unwrap();
        assert!(v.value.is_finite() && (v.value - 2e4).abs() < 1e-6);
        assert!(v.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, 5, 7) * 3.0;
        let gold = [Some(1), None, Some(6), Some(0), Some(3)];
        let an = cross_entropy_loss(logits.view(), &gold).unwrap();
        let fd = central_diff(|l| cross_entropy_loss(l.view(), &gold).unwrap().value, &logits);
        for (a, b) in an.grad.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4);
        }
        assert!(an.grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn embedding_hand_cases() {
        let proj = EmbProjection {
            matrix: Array2::eye(3),
        };
        let tbl = EmbeddingTable::new(vec!["zero".into(), "x".into()], array![[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]]).unwrap();
        let fused = array![[1.0, 2.0, 2.0]];
        let l = embedding_loss(fused.view(), &proj, &tbl, &[Some(0)], false).unwrap();
        assert_eq!(l.loss.value, 9.0);
        // identity projection: gradient wrt W f equals gradient wrt f
        assert_eq!(l.loss.grad.row(0).to_vec(), vec![2.0, 4.0, 4.0]);
        let l = embedding_loss(fused.view(), &proj, &tbl, &[Some(1)], false).unwrap();
        assert_eq!(l.loss.value, 0.0);
        assert!(matches!(
            embedding_loss(fused.view(), &proj, &tbl, &[Some(2)], false),
            Err(Error::Config(_))
        ));
        let n = embedding_loss(fused.view(), &proj, &tbl, &[Some(0)], true).unwrap();
        assert_eq!(n.loss.value, 3.0);
    }

    /// Eq. with the Iverson bracket summed over every class.
    fn embedding_loss_iverson(fused: ArrayView1<f64>, proj: &EmbProjection, tbl: &EmbeddingTable, gold: usize) -> f64 {
        let mut target = Array1::<f64>::zeros(tbl.dim());
        for c in 0..tbl.n_classes() {
            let bracket = if gold == c { 1.0 } else { 0.0 };
            target = target + tbl.vector(c).unwrap().mapv(|v| v * bracket);
        }
        let r = proj.matrix.dot(&fused) - target;
        r.dot(&r)
    }

    #[test]
    fn iverson_sum_collapses_to_gold_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tbl = table(5, 7, &mut rng);
        let proj = EmbProjection {
            matrix: random(&mut rng, 5, 4),
        };
        for gold in 0..7 {
            let f = random(&mut rng, 1, 4);
            let direct = embedding_loss(f.view(), &proj, &tbl, &[Some(gold)], false).unwrap();
            assert_eq!(direct.loss.value, embedding_loss_iverson(f.row(0), &proj, &tbl, gold));
        }
    }

    #[test]
    fn embedding_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tbl = table(4, 7, &mut rng);
        let proj = EmbProjection {
            matrix: random(&mut rng, 4, 6),
        };
        let fused = random(&mut rng, 3, 6);
        let gold = [Some(2), Some(5), None];
        let an = embedding_loss(fused.view(), &proj, &tbl, &gold, false).unwrap();
        let fd = central_diff(
            |f| embedding_loss(f.view(), &proj, &tbl, &gold, false).unwrap().loss.value,
            &fused,
        );
        for (a, b) in an.loss.grad.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4);
        }
        let fd = central_diff(
            |m| {
                let p = EmbProjection { matrix: m.clone() };
                embedding_loss(fused.view(), &p, &tbl, &gold, false).unwrap().loss.value
            },
            &proj.matrix,
        );
        for (a, b) in an.grad_proj.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4);
        }
    }

    #[test]
    fn combined_is_linear_in_lambda() {
        let ce = LossValue {
            value: 1.0,
            grad: array![[0.5]],
        };
        let emb = EmbeddingLoss {
            loss: LossValue {
                value: 0.5,
                grad: array![[1.0]],
            },
            grad_proj: array![[2.0]],
        };
        assert_eq!(combined_expr_loss(&ce, &emb, 1.0).unwrap().value, 1.5);
        let zero = combined_expr_loss(&ce, &emb, 0.0).unwrap();
        assert_eq!(zero.value, ce.value);
        assert_eq!(zero.grad_logits, ce.grad);
        let ce2 = LossValue { value: 2.0, ..ce.clone() };
        let emb3 = EmbeddingLoss {
            loss: LossValue { value: 3.0, ..emb.loss.clone() },
            ..emb.clone()
        };
        assert_eq!(combined_expr_loss(&ce2, &emb3, 0.5).unwrap().value, 3.5);
        for lam in [0.25, 0.5, 2.0] {
            let v = combined_expr_loss(&ce, &emb, lam).unwrap();
            assert_eq!(v.value, 1.0 + lam * 0.5);
            assert_eq!(v.grad_proj[[0, 0]], 2.0 * lam);
        }
        assert!(combined_expr_loss(&ce, &emb, -1.0).is_err());
    }

    #[test]
    fn table_parse_and_order() {
        let text = "happy 1 2\nsad 3 4\n\nangry 5 6\n";
        let t = EmbeddingTable::parse(text.as_bytes(), Some(&["sad", "happy"])).unwrap();
        assert_eq!(t.names(), ["sad", "happy"]);
        assert_eq!(t.vector(0).unwrap().to_vec(), vec![3.0, 4.0]);
        assert!(EmbeddingTable::parse(text.as_bytes(), Some(&["calm"])).is_err());
        assert!(EmbeddingTable::parse("a 1 2\nb 3\n".as_bytes(), None).is_err());
        let mut out = Vec::new();
        t.write(&mut out).unwrap();
        assert_eq!(EmbeddingTable::parse(&out[..], None).unwrap(), t);
    }
}

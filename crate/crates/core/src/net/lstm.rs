//! One direction of an LSTM layer and its backward pass.
//!
//! Gate rows are stacked `[input, forget, cell, output]`, each `h` rows tall.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h x d_in`
    pub w: Array2<f64>,
    /// `4h x h`
    pub u: Array2<f64>,
    /// `4h`
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w: Array2::zeros((4 * hidden_dim, input_dim)),
            u: Array2::zeros((4 * hidden_dim, hidden_dim)),
            b: Array1::zeros(4 * hidden_dim),
        }
    }

    /// Weights uniform in `+-1/sqrt(h)`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden_dim);
        p.w.mapv_inplace(|_| rng.random_range(-k..k));
        p.u.mapv_inplace(|_| rng.random_range(-k..k));
        p.b.slice_mut(s![hidden_dim..2 * hidden_dim]).fill(1.0);
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Gate activations and states kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CellCache {
    pub x: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn lstm_cell_forward(
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
    p: &LstmParams,
) -> Result<(Array1<f64>, Array1<f64>, CellCache)> {
    let h = p.hidden_dim();
    if x.len() != p.input_dim() || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::contract(format!(
            "cell dims: x {}, h {}, c {} for params d_in {}, h {h}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim()
        )));
    }
    if x.iter().any(|v| v.is_nan()) || h_prev.iter().any(|v| v.is_nan()) || c_prev.iter().any(|v| v.is_nan()) {
        return Err(Error::Malformed("NaN entering LSTM cell".into()));
    }
    let a = p.w.dot(&x) + p.u.dot(&h_prev) + &p.b;
    let i = a.slice(s![0..h]).mapv(sigmoid);
    let f = a.slice(s![h..2 * h]).mapv(sigmoid);
    let g = a.slice(s![2 * h..3 * h]).mapv(f64::tanh);
    let o = a.slice(s![3 * h..4 * h]).mapv(sigmoid);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h_t = &o * &tanh_c;
    let cache = CellCache {
        x: x.to_owned(),
        h_prev: h_prev.to_owned(),
        c_prev: c_prev.to_owned(),
        i,
        f,
        g,
        o,
        c: c.clone(),
        tanh_c,
    };
    Ok((h_t, c, cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmGrads {
    pub fn zeros_like(p: &LstmParams) -> Self {
        Self {
            w: Array2::zeros(p.w.dim()),
            u: Array2::zeros(p.u.dim()),
            b: Array1::zeros(p.b.len()),
        }
    }
}

/// Backward through one cell. `dh`, `dc` are the gradients reaching `h_t`
/// and `c_t`; returns `(dx, dh_prev, dc_prev)` and accumulates into `grads`.
pub fn lstm_cell_backward(
    dh: ArrayView1<f64>,
    dc: ArrayView1<f64>,
    cache: &CellCache,
    p: &LstmParams,
    grads: &mut LstmGrads,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let h = p.hidden_dim();
    let dc_total = &dc + &(&dh * &cache.o * cache.tanh_c.mapv(|t| 1.0 - t * t));
    let mut da = Array1::zeros(4 * h);
    for k in 0..h {
        let (i, f, g, o) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k]);
        da[k] = dc_total[k] * g * i * (1.0 - i);
        da[h + k] = dc_total[k] * cache.c_prev[k] * f * (1.0 - f);
        da[2 * h + k] = dc_total[k] * i * (1.0 - g * g);
        da[3 * h + k] = dh[k] * cache.tanh_c[k] * o * (1.0 - o);
    }
    let da_col = da.view().insert_axis(Axis(1));
    grads.w += &da_col.dot(&cache.x.view().insert_axis(Axis(0)));
    grads.u += &da_col.dot(&cache.h_prev.view().insert_axis(Axis(0)));
    grads.b += &da;
    let dx = p.w.t().dot(&da);
    let dh_prev = p.u.t().dot(&da);
    let dc_prev = &dc_total * &cache.f;
    (dx, dh_prev, dc_prev)
}

/// Runs one direction over `xs` (`T x d_in`) from zero state. With
/// `reverse`, time runs from the last frame to the first; the returned
/// hidden states are still indexed by frame.
pub fn run_direction(xs: ArrayView2<f64>, p: &LstmParams, reverse: bool) -> Result<(Array2<f64>, Vec<CellCache>)> {
    let t_len = xs.nrows();
    let h = p.hidden_dim();
    let mut hs = Array2::zeros((t_len, h));
    let mut caches = Vec::with_capacity(t_len);
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::zeros(h);
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let (h_t, c_t, cache) = lstm_cell_forward(xs.row(t), h_prev.view(), c_prev.view(), p)?;
        hs.row_mut(t).assign(&h_t);
        caches.push(cache);
        h_prev = h_t;
        c_prev = c_t;
    }
    Ok((hs, caches))
}

/// Backpropagation through time for one direction. `dhs` holds the
/// gradient reaching each frame's hidden state (`T x h`); returns parameter
/// gradients and input gradients (`T x d_in`).
pub fn backward_direction(
    dhs: ArrayView2<f64>,
    caches: &[CellCache],
    p: &LstmParams,
    reverse: bool,
) -> Result<(LstmGrads, Array2<f64>)> {
    let t_len = caches.len();
    if dhs.nrows() != t_len || dhs.ncols() != p.hidden_dim() {
        return Err(Error::contract(format!(
            "upstream gradient {:?} does not match {t_len} cached steps of width {}",
            dhs.dim(),
            p.hidden_dim()
        )));
    }
    let h = p.hidden_dim();
    let mut grads = LstmGrads::zeros_like(p);
    let mut dxs = Array2::zeros((t_len, p.input_dim()));
    let mut dh_next = Array1::zeros(h);
    let mut dc_next = Array1::zeros(h);
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let dh = &dhs.row(t) + &dh_next;
        let (dx, dh_prev, dc_prev) = lstm_cell_backward(dh.view(), dc_next.view(), &caches[step], p, &mut grads);
        dxs.row_mut(t).assign(&dx);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok((grads, dxs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let x = ndarray::array![0.7, -2.0, 5.0];
        let (h, c, _) = lstm_cell_forward(x.view(), Array1::zeros(2).view(), Array1::zeros(2).view(), &p).unwrap();
        assert!(h.iter().chain(c.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_alone_keeps_cell_empty() {
        let mut p = LstmParams::zeros(2, 3);
        p.b.slice_mut(s![3..6]).fill(1.0);
        let (h, c, cache) =
            lstm_cell_forward(Array1::zeros(2).view(), Array1::zeros(3).view(), Array1::zeros(3).view(), &p).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(cache.f.iter().all(|&f| f > 0.5));
    }

    #[test]
    fn gate_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LstmParams::init(4, 5, &mut rng);
        p.w.mapv_inplace(|v| v * 10.0);
        let x = Array1::from_shape_fn(4, |_| rng.random_range(-3.0..3.0));
        let (_, _, c) = lstm_cell_forward(x.view(), Array1::ones(5).view(), Array1::ones(5).view(), &p).unwrap();
        for v in c.i.iter().chain(c.f.iter()).chain(c.o.iter()) {
            assert!(*v > 0.0 && *v < 1.0);
        }
        assert!(c.g.iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn nan_input_fails_fast() {
        let p = LstmParams::zeros(2, 2);
        let x = ndarray::array![f64::NAN, 0.0];
        assert!(lstm_cell_forward(x.view(), Array1::zeros(2).view(), Array1::zeros(2).view(), &p).is_err());
    }

    #[test]
    fn init_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = LstmParams::init(6, 4, &mut rng);
        assert!(p.w.iter().chain(p.u.iter()).all(|v| v.abs() <= 0.5));
        assert_eq!(p.b.slice(s![4..8]).to_vec(), vec![1.0; 4]);
        assert!(p.b.slice(s![0..4]).iter().chain(p.b.slice(s![8..]).iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_direction_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::init(3, 4, &mut rng);
        let xs = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let (a, _) = run_direction(xs.view(), &p, false).unwrap();
        let mut edited = xs.clone();
        edited.row_mut(4).fill(9.0);
        let (b, _) = run_direction(edited.view(), &p, false).unwrap();
        assert_eq!(a.slice(s![..4, ..]), b.slice(s![..4, ..]));
        assert_ne!(a.row(4), b.row(4));
        let (a, _) = run_direction(xs.view(), &p, true).unwrap();
        let (b, _) = run_direction(edited.view(), &p, true).unwrap();
        assert_eq!(a.slice(s![5.., ..]), b.slice(s![5.., ..]));
    }
}

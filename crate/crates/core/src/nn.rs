//! Small deterministic f64 kernel: dense and LSTM layers with hand-written
//! reverse-mode gradients, softmax/cross-entropy, Adam/SGD, and a central
//! finite-difference oracle.
//!
//! All reductions run in a fixed index order so results are bitwise
//! reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to predicted probabilities inside the log of cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major matrix. Serialized as an array of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Dimension("ragged matrix rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    pub fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ * y`
    pub fn tmul_vec_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }

    /// `self[:, col] += a`
    pub fn add_to_col(&mut self, col: usize, a: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            self.data[r * self.cols + col] += ar;
        }
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform access to every scalar of a parameter container, in a fixed order.
pub trait Params: Clone {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn get_flat(&self, mut k: usize) -> f64 {
        for s in self.slices() {
            if k < s.len() {
                return s[k];
            }
            k -= s.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, mut k: usize, v: f64) {
        for s in self.slices_mut() {
            if k < s.len() {
                s[k] = v;
                return;
            }
            k -= s.len();
        }
        panic!("flat index out of range");
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn fill_with(&mut self, mut f: impl FnMut() -> f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x = f();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Matrix::zeros(output, input), b: vec![0.0; output] }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        self.w.mul_vec_add(x, &mut y);
        y
    }

    /// Accumulates parameter gradients for output gradient `dy` at input `x`
    /// and returns the gradient with respect to `x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut DenseParams) -> Vec<f64> {
        grads.w.add_outer(dy, x);
        for (g, d) in grads.b.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; x.len()];
        self.w.tmul_vec_add(dy, &mut dx);
        dx
    }
}

impl Params for DenseParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.w.data(), &self.b]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.data.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// LSTM weights; gate blocks are stacked in the order input, forget,
/// cell candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmParams {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Vec<f64>,
}

impl Params for LstmParams {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.w_x.data(), self.w_h.data(), &self.b]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w_x.data.as_mut_slice(), self.w_h.data.as_mut_slice(), self.b.as_mut_slice()]
    }
}

impl<P: Params> Params for Vec<P> {
    fn slices(&self) -> Vec<&[f64]> {
        self.iter().flat_map(Params::slices).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().flat_map(Params::slices_mut).collect()
    }
}

/// One recurrent step's input. One-hot inputs select a column of `W_x`
/// instead of multiplying a mostly-zero vector.
#[derive(Debug, Clone, PartialEq)]
pub enum StepInput {
    OneHot(usize),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone)]
struct LstmStep {
    input: StepInput,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, g, o]`, each of length h.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl LstmCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { w_x: Matrix::zeros(4 * hidden, input), w_h: Matrix::zeros(4 * hidden, hidden), b: vec![0.0; 4 * hidden] }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    fn check_shapes(&self) -> Result<()> {
        let h = self.hidden_dim();
        if h == 0 || self.w_h.rows() != 4 * h || self.w_x.rows() != 4 * h || self.b.len() != 4 * h {
            return Err(NnError::Dimension(format!(
                "LSTM blocks: w_x {}x{}, w_h {}x{}, b {}",
                self.w_x.rows(),
                self.w_x.cols(),
                self.w_h.rows(),
                self.w_h.cols(),
                self.b.len()
            )));
        }
        Ok(())
    }

    /// Runs the recurrence from a zero state and returns every hidden state.
    pub fn forward(&self, inputs: &[StepInput]) -> Result<(Vec<Vec<f64>>, LstmCache)> {
        self.check_shapes()?;
        let h = self.hidden_dim();
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut hs = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        for input in inputs {
            let mut z = self.b.clone();
            match input {
                StepInput::OneHot(id) => {
                    if *id >= self.input_dim() {
                        return Err(NnError::Dimension(format!("one-hot id {id} >= input dim {}", self.input_dim())));
                    }
                    for (r, zr) in z.iter_mut().enumerate() {
                        *zr += self.w_x.get(r, *id);
                    }
                }
                StepInput::Dense(x) => {
                    if x.len() != self.input_dim() {
                        return Err(NnError::Dimension(format!("input len {} != {}", x.len(), self.input_dim())));
                    }
                    self.w_x.mul_vec_add(x, &mut z);
                }
            }
            self.w_h.mul_vec_add(&h_prev, &mut z);

            let mut gates = z;
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if k / h == 2 { v.tanh() } else { sigmoid(*v) };
            }
            let (i, f, g, o) = (&gates[..h], &gates[h..2 * h], &gates[2 * h..3 * h], &gates[3 * h..]);
            let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();

            steps.push(LstmStep { input: input.clone(), h_prev, c_prev, gates, tanh_c });
            hs.push(h_new.clone());
            h_prev = h_new;
            c_prev = c;
        }
        Ok((hs, LstmCache { steps }))
    }

    /// Backpropagation through time. `dh[t]` is the loss gradient arriving
    /// at hidden state `t` from outside the recurrence. Returns input
    /// gradients for dense steps (zero vectors for one-hot steps).
    pub fn backward(&self, cache: &LstmCache, dh: &[Vec<f64>], grads: &mut LstmParams) -> Vec<Vec<f64>> {
        let h = self.hidden_dim();
        let n = cache.steps.len();
        assert_eq!(dh.len(), n, "one hidden-state gradient per step");
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dxs = vec![Vec::new(); n];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..n).rev() {
            let step = &cache.steps[t];
            let g = &step.gates;
            for j in 0..h {
                let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = step.tanh_c[j];
                let dht = dh[t][j] + dh_next[j];
                let dc = dht * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * cand * i * (1.0 - i);
                dz[h + j] = dc * step.c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - cand * cand);
                dz[3 * h + j] = dht * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            match &step.input {
                StepInput::OneHot(id) => {
                    grads.w_x.add_to_col(*id, &dz);
                    dxs[t] = vec![0.0; self.input_dim()];
                }
                StepInput::Dense(x) => {
                    grads.w_x.add_outer(&dz, x);
                    let mut dx = vec![0.0; x.len()];
                    self.w_x.tmul_vec_add(&dz, &mut dx);
                    dxs[t] = dx;
                }
            }
            grads.w_h.add_outer(&dz, &step.h_prev);
            for (gb, d) in grads.b.iter_mut().zip(&dz) {
                *gb += d;
            }
            dh_next.fill(0.0);
            self.w_h.tmul_vec_add(&dz, &mut dh_next);
        }
        dxs
    }
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: maps `dL/dq` to `dL/dlogits`.
pub fn softmax_backward(q: &[f64], dq: &[f64]) -> Vec<f64> {
    let s = dot(q, dq);
    q.iter().zip(dq).map(|(qi, di)| qi * (di - s)).collect()
}

/// `-Σ p_h ln(max(q_h, 1e-12))`
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NnError::Dimension(format!("cross-entropy of lengths {} and {}", p.len(), q.len())));
    }
    Ok(-p.iter().zip(q).fold(0.0, |acc, (pi, qi)| acc + pi * qi.max(CE_FLOOR).ln()))
}

/// Gradient of [`cross_entropy`] with respect to the predicted `q`.
pub fn cross_entropy_grad_q(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter().zip(q).map(|(pi, qi)| if *qi > CE_FLOOR { -pi / qi } else { 0.0 }).collect()
}

/// Central differences `(L(θ+h) - L(θ-h)) / 2h` for every scalar parameter.
pub fn finite_difference_gradient<P: Params>(mut loss: impl FnMut(&P) -> f64, params: &P, h: f64) -> P {
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    for k in 0..params.num_params() {
        let orig = params.get_flat(k);
        probe.set_flat(k, orig + h);
        let up = loss(&probe);
        probe.set_flat(k, orig - h);
        let down = loss(&probe);
        probe.set_flat(k, orig);
        grads.set_flat(k, (up - down) / (2.0 * h));
    }
    grads
}

/// Richardson extrapolation of two central differences (steps `h` and
/// `h/2`), accurate to O(h⁴). Allows a larger step, which keeps roundoff
/// small on tiny gradient components.
pub fn richardson_gradient<P: Params>(mut loss: impl FnMut(&P) -> f64, params: &P, h: f64) -> P {
    let coarse = finite_difference_gradient(&mut loss, params, h);
    let fine = finite_difference_gradient(&mut loss, params, h / 2.0);
    let mut out = params.zeros_like();
    for k in 0..params.num_params() {
        out.set_flat(k, (4.0 * fine.get_flat(k) - coarse.get_flat(k)) / 3.0);
    }
    out
}

/// Elementwise `|a - b| / max(|a|, |b|, 1e-8)`, maximized.
pub fn max_relative_error<P: Params>(a: &P, b: &P) -> f64 {
    a.to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P) -> Self {
        let shapes: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: shapes.clone(), v: shapes }
    }
}

fn check_same_shape<P: Params>(a: &P, b: &P) -> Result<()> {
    let sa: Vec<usize> = a.slices().iter().map(|s| s.len()).collect();
    let sb: Vec<usize> = b.slices().iter().map(|s| s.len()).collect();
    if sa != sb {
        return Err(NnError::Dimension("parameter and gradient shapes differ".into()));
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step<P: Params>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64) -> Result<()> {
    check_same_shape(params, grads)?;
    if state.m.len() != grads.slices().len() || state.m.iter().zip(grads.slices()).any(|(m, g)| m.len() != g.len()) {
        return Err(NnError::Dimension("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params.slices_mut().into_iter().zip(grads.slices()).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub fn sgd_step<P: Params>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    check_same_shape(params, grads)?;
    for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Vec<f64>);

    impl Params for Scalar {
        fn slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), [0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), [0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = 2f64.ln();
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
        // clamped: ln(1e-12)
        assert!((cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap() - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_lstm_gives_zero_states() {
        let lstm = LstmParams::zeros(3, 2);
        let inputs = vec![StepInput::Dense(vec![0.0; 3]); 4];
        let (hs, _) = lstm.forward(&inputs).unwrap();
        assert!(hs.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_bad_inputs() {
        let lstm = LstmParams::zeros(3, 2);
        assert!(lstm.forward(&[StepInput::OneHot(3)]).is_err());
        assert!(lstm.forward(&[StepInput::Dense(vec![0.0; 2])]).is_err());
    }

    /// Scalar single-cell evaluation written out gate by gate.
    fn naive_cell(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = p.hidden_dim();
        let mut h_new = vec![0.0; h];
        let mut c_new = vec![0.0; h];
        for j in 0..h {
            let pre = |block: usize| {
                let r = block * h + j;
                let mut s = p.b[r];
                for (k, xk) in x.iter().enumerate() {
                    s += p.w_x.get(r, k) * xk;
                }
                for (k, hk) in h_prev.iter().enumerate() {
                    s += p.w_h.get(r, k) * hk;
                }
                s
            };
            let i = 1.0 / (1.0 + (-pre(0)).exp());
            let f = 1.0 / (1.0 + (-pre(1)).exp());
            let g = pre(2).tanh();
            let o = 1.0 / (1.0 + (-pre(3)).exp());
            c_new[j] = f * c_prev[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    fn random_lstm(input: usize, hidden: usize, seed: u64) -> LstmParams {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut p = LstmParams::zeros(input, hidden);
        p.fill_with(&mut next);
        p
    }

    #[test]
    fn lstm_matches_naive_recurrence() {
        let p = random_lstm(3, 2, 7);
        let xs = [vec![0.3, -0.2, 0.9], vec![-1.0, 0.5, 0.1], vec![0.0, 0.7, -0.4]];
        let inputs: Vec<StepInput> = xs.iter().cloned().map(StepInput::Dense).collect();
        let (hs, _) = p.forward(&inputs).unwrap();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for (t, x) in xs.iter().enumerate() {
            (h, c) = naive_cell(&p, x, &h, &c);
            for j in 0..2 {
                assert!((hs[t][j] - h[j]).abs() < 1e-14);
            }
        }
        let (one, _) = p.forward(&inputs[..1]).unwrap();
        assert_eq!(one[0], hs[0]);
        // one-hot path equals the dense one-hot vector
        let (a, _) = p.forward(&[StepInput::OneHot(1)]).unwrap();
        let (b, _) = p.forward(&[StepInput::Dense(vec![0.0, 1.0, 0.0])]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_backward_matches_finite_differences() {
        let p = random_lstm(3, 2, 11);
        let inputs = vec![
            StepInput::OneHot(2),
            StepInput::Dense(vec![0.4, -0.3, 0.2]),
            StepInput::OneHot(0),
        ];
        let weights = [0.7, -1.3];
        let loss = |p: &LstmParams| {
            let (hs, _) = p.forward(&inputs).unwrap();
            hs.iter().map(|h| dot(h, &weights)).sum::<f64>()
        };
        let (hs, cache) = p.forward(&inputs).unwrap();
        let dh = vec![weights.to_vec(); hs.len()];
        let mut g = p.zeros_like();
        let dxs = p.backward(&cache, &dh, &mut g);
        let fd = finite_difference_gradient(loss, &p, 1e-5);
        assert!(max_relative_error(&g, &fd) < 1e-6, "{}", max_relative_error(&g, &fd));
        assert_eq!(dxs[0], vec![0.0; 3]);
    }

    #[test]
    fn dense_softmax_ce_gradient_closed_form() {
        let layer = DenseParams { w: Matrix::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3]]).unwrap(), b: vec![0.0, 0.1] };
        let x = [1.5, -0.5];
        let p = [1.0, 0.0];
        let q = softmax(&layer.forward(&x));
        let dlogits = softmax_backward(&q, &cross_entropy_grad_q(&p, &q));
        let mut g = layer.zeros_like();
        layer.backward(&x, &dlogits, &mut g);
        for r in 0..2 {
            for (c, xc) in x.iter().enumerate() {
                let expected = (q[r] - p[r]) * xc;
                assert!((g.w.get(r, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = random_lstm(2, 2, 3);
        let g = finite_difference_gradient(|_: &LstmParams| 4.2, &p, 1e-5);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|p: &Scalar| p.0[0] * p.0[0], &Scalar(vec![3.0]), 1e-5);
        assert!((g.0[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|p: &Scalar| 2.0 * p.0[0] - 0.5 * p.0[1], &Scalar(vec![1.0, 4.0]), 1e-5);
        assert!((g.0[0] - 2.0).abs() < 1e-9 && (g.0[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn richardson_is_exact_on_quartics() {
        // the h² term cancels and a cubic has no h⁴ term
        let g = richardson_gradient(|p: &Scalar| p.0[0].powi(3), &Scalar(vec![2.0]), 1e-2);
        assert!((g.0[0] - 12.0).abs() < 1e-9);
        let g = richardson_gradient(|p: &Scalar| p.0[0].sin(), &Scalar(vec![0.3]), 2e-3);
        assert!((g.0[0] - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut p = Scalar(vec![1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Scalar(vec![0.0]), &mut st, 0.1).unwrap();
        assert_eq!(p.0[0], 1.0);
        assert_eq!(st.t, 1);

        let mut p = Scalar(vec![1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &Scalar(vec![1.0]), &mut st, 0.1).unwrap();
        assert!(((1.0 - p.0[0]) - 0.1).abs() < 1e-6);

        assert!(adam_step(&mut p, &Scalar(vec![1.0, 2.0]), &mut st, 0.1).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // scalar recurrence: run it and check the frozen bound
        let mut p = Scalar(vec![1.0]);
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let g = Scalar(vec![2.0 * p.0[0]]);
            adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert!(p.0[0].abs() < 0.05, "{}", p.0[0]);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Scalar(vec![1.0]);
        sgd_step(&mut p, &Scalar(vec![2.0]), 0.25).unwrap();
        assert_eq!(p.0[0], 0.5);
    }

    #[test]
    fn matrix_serializes_as_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.1]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,0.1]]");
        assert_eq!(serde_json::from_str::<Matrix>(&s).unwrap(), m);
        assert!(serde_json::from_str::<Matrix>("[[1.0],[2.0,3.0]]").is_err());
    }
}

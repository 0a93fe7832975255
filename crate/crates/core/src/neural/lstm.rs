//! Single-direction LSTM with backpropagation through time.
//!
//! Gate pre-activations are stacked `[input, forget, output, candidate]`,
//! each `hidden` rows tall.

use rand::Rng;

use super::tensor::{sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Tensor::zeros(4 * hidden, input),
            w_h: Tensor::zeros(4 * hidden, hidden),
            b: Tensor::zeros(4 * hidden, 1),
        }
    }

    /// Uniform weights in `[-scale, scale]`, zero biases except the forget
    /// gate at 1.
    pub fn init<R: Rng>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut b = Tensor::zeros(4 * hidden, 1);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmParams {
            w_x: Tensor::uniform(4 * hidden, input, scale, rng),
            w_h: Tensor::uniform(4 * hidden, hidden, scale, rng),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }

    fn check(&self, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> Result<()> {
        let h = self.hidden();
        if self.w_x.rows() != 4 * h || self.w_h.rows() != 4 * h || self.b.rows() != 4 * h {
            return Err(Error::ShapeMismatch("gate blocks must be 4 × hidden rows".into()));
        }
        if h_prev.len() != h || c_prev.len() != h {
            return Err(Error::ShapeMismatch(format!(
                "state of size {}/{} for hidden size {h}",
                h_prev.len(),
                c_prev.len()
            )));
        }
        if x.len() != self.input() {
            return Err(Error::ShapeMismatch(format!(
                "input of size {} for input size {}",
                x.len(),
                self.input()
            )));
        }
        Ok(())
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate activations `[i, f, o, g]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn forward_step(p: &LstmParams, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> StepCache {
    let n = p.hidden();
    let mut z = p.b.data().to_vec();
    p.w_x.matvec_acc(x, &mut z);
    p.w_h.matvec_acc(h_prev, &mut z);
    for v in &mut z[..3 * n] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * n..] {
        *v = v.tanh();
    }
    let mut c = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut h = vec![0.0; n];
    for k in 0..n {
        let (i, f, o, g) = (z[k], z[n + k], z[2 * n + k], z[3 * n + k]);
        c[k] = f * c_prev[k] + i * g;
        tanh_c[k] = c[k].tanh();
        h[k] = o * tanh_c[k];
    }
    StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates: z,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_step(
    p: &LstmParams,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check(h_prev, c_prev, x)?;
    let s = forward_step(p, h_prev, c_prev, x);
    Ok((s.h, s.c))
}

/// Runs the sequence from a zero state and returns every step.
pub fn forward_seq<'a>(p: &LstmParams, inputs: impl IntoIterator<Item = &'a [f64]>) -> Vec<StepCache> {
    let n = p.hidden();
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut steps = Vec::new();
    for x in inputs {
        let s = forward_step(p, &h, &c, x);
        h.clone_from(&s.h);
        c.clone_from(&s.c);
        steps.push(s);
    }
    steps
}

/// Backward through one step. `dh`/`dc` are gradients w.r.t. this step's
/// outputs; returns gradients w.r.t. `(x, h_prev, c_prev)` and accumulates
/// parameter gradients into `grad`.
pub fn backward_step(
    p: &LstmParams,
    s: &StepCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = p.hidden();
    let g = &s.gates;
    let mut dz = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (i, f, o, gg) = (g[k], g[n + k], g[2 * n + k], g[3 * n + k]);
        let tc = s.tanh_c[k];
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dct * gg * i * (1.0 - i);
        dz[n + k] = dct * s.c_prev[k] * f * (1.0 - f);
        dz[2 * n + k] = dh[k] * tc * o * (1.0 - o);
        dz[3 * n + k] = dct * i * (1.0 - gg * gg);
        dc_prev[k] = dct * f;
    }
    grad.w_x.outer_acc(&dz, &s.x);
    grad.w_h.outer_acc(&dz, &s.h_prev);
    for (b, d) in grad.b.data_mut().iter_mut().zip(&dz) {
        *b += d;
    }
    let mut dx = vec![0.0; p.input()];
    p.w_x.matvec_t_acc(&dz, &mut dx);
    let mut dh_prev = vec![0.0; n];
    p.w_h.matvec_t_acc(&dz, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Backpropagates through a whole sequence given `dh_out[t]`, the gradient
/// arriving at each step's hidden output from outside the recurrence.
/// Returns the gradient for each step's input.
pub fn backward_seq(
    p: &LstmParams,
    steps: &[StepCache],
    dh_out: &[Vec<f64>],
    grad: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let n = p.hidden();
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dxs = vec![Vec::new(); steps.len()];
    for t in (0..steps.len()).rev() {
        let dh: Vec<f64> = dh_out[t].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dx, dh_prev, dc_prev) = backward_step(p, &steps[t], &dh, &dc_next, grad);
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dxs
}

/// Backward for a sequence whose only output is the final hidden state.
pub fn backward_final(
    p: &LstmParams,
    steps: &[StepCache],
    dh_final: &[f64],
    grad: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let n = p.hidden();
    let mut dh_out = vec![vec![0.0; n]; steps.len()];
    if let Some(last) = dh_out.last_mut() {
        last.copy_from_slice(dh_final);
    }
    backward_seq(p, steps, &dh_out, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn zero_step() {
        let p = LstmParams::zeros(3, 4);
        let (h, c) = lstm_step(&p, &[0.0; 4], &[0.0; 4], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn shape_mismatch() {
        let p = LstmParams::zeros(3, 4);
        assert!(matches!(lstm_step(&p, &[0.0; 3], &[0.0; 4], &[0.0; 3]), Err(Error::ShapeMismatch(_))));
        assert!(lstm_step(&p, &[0.0; 4], &[0.0; 4], &[0.0; 2]).is_err());
    }

    #[test]
    fn hidden_is_bounded() {
        let mut rng = seeded_rng(1, 1);
        let p = LstmParams::init(3, 5, 3.0, &mut rng);
        let mut h = vec![0.0; 5];
        let mut c = vec![0.0; 5];
        for t in 0..20 {
            let x = [t as f64, -2.0 * t as f64, 10.0];
            let (h2, c2) = lstm_step(&p, &h, &c, &x).unwrap();
            assert!(h2.iter().all(|v| v.abs() <= 1.0));
            h = h2;
            c = c2;
        }
    }

    fn objective(p: &LstmParams, xs: &[Vec<f64>], w: &[f64]) -> f64 {
        let steps = forward_seq(p, xs.iter().map(Vec::as_slice));
        steps.last().unwrap().h.iter().zip(w).map(|(h, w)| h * w).sum()
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut rng = seeded_rng(2, 2);
        let p = LstmParams::init(3, 4, 0.5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| Tensor::uniform(3, 1, 1.0, &mut rng).data().to_vec()).collect();
        let w = [0.3, -0.7, 1.1, 0.4];
        let steps = forward_seq(&p, xs.iter().map(Vec::as_slice));
        let mut grad = LstmParams::zeros(3, 4);
        let dxs = backward_final(&p, &steps, &w, &mut grad);
        let eps = 1e-6;
        let mut q = p.clone();
        for ti in 0..3 {
            for k in 0..q.tensors()[ti].data().len() {
                let orig = q.tensors()[ti].data()[k];
                q.tensors_mut()[ti].data_mut()[k] = orig + eps;
                let up = objective(&q, &xs, &w);
                q.tensors_mut()[ti].data_mut()[k] = orig - eps;
                let down = objective(&q, &xs, &w);
                q.tensors_mut()[ti].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad.tensors()[ti].data()[k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4 || (numeric - analytic).abs() < 1e-9, "tensor {ti} idx {k}: {numeric} vs {analytic}");
            }
        }
        let mut xs2 = xs.clone();
        for t in 0..3 {
            for k in 0..3 {
                let orig = xs2[t][k];
                xs2[t][k] = orig + eps;
                let up = objective(&p, &xs2, &w);
                xs2[t][k] = orig - eps;
                let down = objective(&p, &xs2, &w);
                xs2[t][k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                assert!((numeric - dxs[t][k]).abs() < 1e-8);
            }
        }
    }
}

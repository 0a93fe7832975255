use super::tensor::Tensor;

/// Anything that exposes its trainable tensors in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }
}

/// One SGD-with-momentum update on flat slices:
/// `g' = g + l2·θ; v ← momentum·v − lr·g'; θ ← θ + v`.
pub fn sgd_momentum_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    l2: f64,
) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + l2 * *p;
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// Momentum SGD over a whole [`ParamSet`], with optional global-norm
/// gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new<P: ParamSet>(params: &P, lr: f64, momentum: f64, l2: f64, clip_norm: Option<f64>) -> Self {
        Sgd {
            lr,
            momentum,
            l2,
            clip_norm,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.data().len()]).collect(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &mut P) {
        if let Some(max) = self.clip_norm {
            let norm = grads.sq_norm().sqrt();
            if norm > max {
                let scale = max / norm;
                for t in grads.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|g| *g *= scale);
                }
            }
        }
        let grads = grads.tensors();
        for ((p, g), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_momentum_update(p.data_mut(), g.data(), v, self.lr, self.momentum, self.l2);
        }
    }

    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }
}

//! One-hidden-layer perceptron for tabular risk prediction, trained with
//! SGD + momentum on the autodiff tape so its gradients share the same
//! finite-difference contract as the transformer.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::Matrix;
use crate::rng::{stream, tags};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub l2: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 32,
            l2: 1e-3,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Result<Mlp> {
        if hidden == 0 {
            return Err(Error::Config("mlp hidden width must be positive".to_string()));
        }
        if in_dim == 0 {
            return Err(Error::Config("mlp input width must be positive".to_string()));
        }
        let mut rng = stream(seed, &[tags::MLP]);
        let mut draw = |r: usize, c: usize, scale: f64| {
            Matrix::from_fn(r, c, |_, _| {
                rand::Rng::sample::<f64, _>(&mut rng, StandardNormal) * scale
            })
        };
        let s1 = 1.0 / fx::sqrt(in_dim as f64);
        let s2 = 1.0 / fx::sqrt(hidden as f64);
        Ok(Mlp {
            w1: draw(in_dim, hidden, s1),
            b1: Matrix::zeros(1, hidden),
            w2: draw(hidden, 1, s2),
            b2: Matrix::zeros(1, 1),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.w1.rows());
        let hidden = self.w1.cols();
        let mut z = 0.0;
        for j in 0..hidden {
            let mut h = self.b1.get(0, j);
            for (i, &v) in x.iter().enumerate() {
                h += v * self.w1.get(i, j);
            }
            z += gelu(h) * self.w2.get(j, 0);
        }
        z + self.b2.get(0, 0)
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        fx::sigmoid(self.logit(x))
    }

    /// Batched loss on a tape: weighted mean BCE plus `l2/2` on the weight
    /// matrices. Returns (loss var, [w1, b1, w2, b2] vars).
    pub fn loss_on_tape(
        tape: &mut Tape,
        vars: [Var; 4],
        x: &Matrix,
        y: &[bool],
        sample_weights: &[f64],
        l2: f64,
    ) -> Var {
        let [w1, b1, w2, b2] = vars;
        let n = x.rows();
        let xv = tape.leaf(x.clone());
        let h = tape.matmul(xv, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let z = tape.matmul(h, w2);
        let z = tape.add_row(z, b2); // n x 1 logits
        let yv = tape.leaf(Matrix::from_fn(n, 1, |r, _| if y[r] { 1.0 } else { 0.0 }));
        let wv = tape.leaf(Matrix::from_fn(n, 1, |r, _| sample_weights[r]));
        // BCE via softplus(z) - y z, elementwise then weighted mean.
        let sp = tape.softplus(z);
        let yz = tape.hadamard(yv, z);
        let per_row = tape.sub(sp, yz);
        let weighted = tape.hadamard(per_row, wv);
        let total = tape.sum_all(weighted);
        let mut loss = tape.scale(total, 1.0 / n as f64);
        if l2 > 0.0 {
            for w in [w1, w2] {
                let sq = tape.hadamard(w, w);
                let s = tape.sum_all(sq);
                let pen = tape.scale(s, 0.5 * l2);
                loss = tape.add(loss, pen);
            }
        }
        loss
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fx::tanh(0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)))
}

/// Train with seeded minibatch SGD + momentum; class weights balance the
/// label frequencies. Divergence (non-finite loss) is an error.
pub fn fit_mlp(x: &Matrix, y: &[bool], cfg: &MlpConfig) -> Result<Mlp> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("fit_mlp: empty design matrix".to_string()));
    }
    if y.len() != n {
        return Err(Error::Shape("fit_mlp: label length mismatch".to_string()));
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("batch_size and learning_rate must be positive".to_string()));
    }
    let mut model = Mlp::init(x.cols(), cfg.hidden, cfg.seed)?;
    let pos = y.iter().filter(|&&b| b).count();
    let (w_pos, w_neg) = class_weights(n, pos);
    let weights: Vec<f64> = y.iter().map(|&b| if b { w_pos } else { w_neg }).collect();

    let mut vel = [
        Matrix::zeros(x.cols(), cfg.hidden),
        Matrix::zeros(1, cfg.hidden),
        Matrix::zeros(cfg.hidden, 1),
        Matrix::zeros(1, 1),
    ];
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = stream(cfg.seed, &[tags::MLP, 1]);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = Matrix::from_fn(chunk.len(), x.cols(), |r, c| x.get(chunk[r], c));
            let yb: Vec<bool> = chunk.iter().map(|&i| y[i]).collect();
            let wb: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let mut tape = Tape::new();
            let vars = [
                tape.leaf(model.w1.clone()),
                tape.leaf(model.b1.clone()),
                tape.leaf(model.w2.clone()),
                tape.leaf(model.b2.clone()),
            ];
            let loss = Mlp::loss_on_tape(&mut tape, vars, &xb, &yb, &wb, cfg.l2);
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::Numerical(_) => {
                    Error::Numerical("fit_mlp: training diverged (non-finite loss)".to_string())
                }
                other => other,
            })?;
            let tensors = [&mut model.w1, &mut model.b1, &mut model.w2, &mut model.b2];
            for ((tensor, var), v) in tensors.into_iter().zip(vars).zip(vel.iter_mut()) {
                if let Some(g) = grads.of(var) {
                    *v = v.scale(cfg.momentum);
                    v.add_assign_scaled(g, -cfg.learning_rate);
                    tensor.add_assign(v);
                }
            }
        }
    }
    if !(model.w1.is_finite() && model.b1.is_finite() && model.w2.is_finite() && model.b2.is_finite())
    {
        return Err(Error::Numerical("fit_mlp: parameters diverged".to_string()));
    }
    Ok(model)
}

/// Inverse-frequency class weights normalized so the mean weight is 1.
pub fn class_weights(n: usize, pos: usize) -> (f64, f64) {
    if pos == 0 || pos == n {
        return (1.0, 1.0);
    }
    let nf = n as f64;
    (nf / (2.0 * pos as f64), nf / (2.0 * (n - pos) as f64))
}

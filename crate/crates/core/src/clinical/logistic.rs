//! L2-penalized logistic regression, fitted by damped Newton iterations to a
//! 1e-6 gradient-norm tolerance. The bias is unpenalized.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fx;
use crate::linalg::{cholesky_solve, Matrix};

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.weights.len());
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        fx::sigmoid(self.logit(x))
    }
}

/// Mean log-loss plus `lambda/2 * ||w||²` and its gradient at (w, b).
fn loss_and_grad(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    b: f64,
    lambda: f64,
) -> (f64, Vec<f64>, f64, Vec<f64>) {
    let n = x.rows();
    let p = x.cols();
    let mut loss = 0.0;
    let mut gw = vec![0.0; p];
    let mut gb = 0.0;
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let z = w.iter().zip(row).map(|(w, v)| w * v).sum::<f64>() + b;
        let pr = fx::sigmoid(z);
        probs.push(pr);
        // Stable -[y ln p + (1-y) ln(1-p)] = softplus(z) - y z.
        loss += fx::softplus(-fx::abs(z)) + z.max(0.0) - y[i] * z;
        let d = pr - y[i];
        for (g, &v) in gw.iter_mut().zip(row) {
            *g += d * v;
        }
        gb += d;
    }
    let nf = n as f64;
    loss /= nf;
    for (g, &wi) in gw.iter_mut().zip(w) {
        *g = *g / nf + lambda * wi;
    }
    gb /= nf;
    loss += 0.5 * lambda * w.iter().map(|&wi| wi * wi).sum::<f64>();
    (loss, gw, gb, probs)
}

/// Fit by minimizing `mean log-loss + lambda ||w||² / 2` (bias unpenalized).
/// Converges when the gradient sup-norm drops below 1e-6; if the iteration
/// cap is hit first the model is returned with `converged = false`.
pub fn fit_logistic_l2(x: &Matrix, y: &[bool], lambda: f64) -> Result<LogisticModel> {
    let n = x.rows();
    let p = x.cols();
    if n == 0 {
        return Err(Error::Empty("fit_logistic_l2: empty design matrix".to_string()));
    }
    if y.len() != n {
        return Err(Error::Shape("fit_logistic_l2: label length mismatch".to_string()));
    }
    if !x.is_finite() {
        return Err(Error::Numerical("fit_logistic_l2: non-finite design matrix".to_string()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".to_string()));
    }
    let yf: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0_f64; p];
    let mut b = 0.0_f64;
    let (mut loss, mut gw, mut gb, mut probs) = loss_and_grad(x, &yf, &w, b, lambda);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..MAX_ITERS {
        iterations = iter;
        let gnorm = gw.iter().fold(fx::abs(gb), |m, &g| m.max(fx::abs(g)));
        if gnorm < GRAD_TOL {
            converged = true;
            break;
        }
        // Newton system over [w; b] with the penalty on the weight block and
        // a whisper of ridge on the bias for numeric safety.
        let dim = p + 1;
        let mut h = Matrix::zeros(dim, dim);
        for i in 0..n {
            let row = x.row(i);
            let s = probs[i] * (1.0 - probs[i]) / n as f64;
            if s == 0.0 {
                continue;
            }
            for a in 0..p {
                let sa = s * row[a];
                if sa == 0.0 {
                    continue;
                }
                for c in a..p {
                    h.set(a, c, h.get(a, c) + sa * row[c]);
                }
                h.set(a, p, h.get(a, p) + sa);
            }
            h.set(p, p, h.get(p, p) + s);
        }
        for a in 0..dim {
            for c in 0..a {
                h.set(a, c, h.get(c, a));
            }
        }
        for a in 0..p {
            h.set(a, a, h.get(a, a) + lambda);
        }
        h.set(p, p, h.get(p, p) + 1e-10);
        let mut g = gw.clone();
        g.push(gb);
        let step = cholesky_solve(&h, &g)?;
        // Backtracking damping on the Newton step.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let w_new: Vec<f64> = w.iter().zip(&step).map(|(wi, s)| wi - scale * s).collect();
            let b_new = b - scale * step[p];
            let (l_new, gw_new, gb_new, probs_new) = loss_and_grad(x, &yf, &w_new, b_new, lambda);
            if l_new.is_finite() && l_new <= loss + 1e-12 {
                w = w_new;
                b = b_new;
                loss = l_new;
                gw = gw_new;
                gb = gb_new;
                probs = probs_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LogisticModel { weights: w, bias: b, lambda, converged, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]]) -> Matrix {
        let cols = rows[0].len();
        let mut m = Matrix::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    #[test]
    fn huge_lambda_shrinks_to_prevalence() {
        let x = design(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let y = [true, false, false, false];
        let model = fit_logistic_l2(&x, &y, 1e9).unwrap();
        assert!(model.weights[0].abs() < 1e-6);
        let p = model.predict_proba(&[10.0]);
        assert!((p - 0.25).abs() < 1e-3, "got {p}");
    }

    #[test]
    fn separable_data_orders_perfectly() {
        let x = design(&[&[-2.0], &[-1.5], &[-1.0], &[1.0], &[1.5], &[2.0]]);
        let y = [false, false, false, true, true, true];
        let model = fit_logistic_l2(&x, &y, 1e-4).unwrap();
        let neg_max = (0..3).map(|i| model.predict_proba(x.row(i))).fold(0.0, f64::max);
        let pos_min = (3..6).map(|i| model.predict_proba(x.row(i))).fold(1.0, f64::min);
        assert!(pos_min > neg_max);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let x = design(&[
            &[0.2, 1.0],
            &[-0.7, 0.3],
            &[1.4, -0.2],
            &[0.1, -1.1],
            &[-0.9, 0.8],
            &[0.6, 0.6],
        ]);
        let y = [true, false, true, false, false, true];
        let lambda = 0.05;
        let model = fit_logistic_l2(&x, &y, lambda).unwrap();
        assert!(model.converged);
        let yf: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let (_, gw, gb, _) = loss_and_grad(&x, &yf, &model.weights, model.bias, lambda);
        for g in gw {
            assert!(g.abs() < 1e-6);
        }
        assert!(gb.abs() < 1e-6);
    }
}

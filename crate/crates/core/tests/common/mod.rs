//! Retraining oracle shared by the influence tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use cat_aif::model::{
    dataset_gradient, dataset_hessian, dataset_loss, interaction_loss, local_gradient, local_hessian, Interaction,
    ParamVector,
};

/// The fit's penalized objective, mean loss + (λ/2)(Σ(a−1)² + Σb² + Σθ²),
/// optionally plus `eps` times the loss of one extra response at a fixed ability.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub train: &'a [Interaction],
    pub lambda: f64,
    pub extra: Option<(Interaction, f64, f64)>,
}

impl Objective<'_> {
    fn center(beta: &ParamVector, i: usize) -> f64 {
        if i < 2 * beta.index().n_items() && i.is_multiple_of(2) {
            1.0
        } else {
            0.0
        }
    }

    pub fn value(&self, beta: &ParamVector) -> f64 {
        let mut f = dataset_loss(self.train, beta).unwrap();
        for (i, v) in beta.values().iter().enumerate() {
            let d = v - Self::center(beta, i);
            f += 0.5 * self.lambda * d * d;
        }
        if let Some((z, theta, eps)) = self.extra {
            f += eps * interaction_loss(z.correct, &beta.item(z.item).unwrap(), theta);
        }
        f
    }

    pub fn grad_hess(&self, beta: &ParamVector) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::from_vec(dataset_gradient(self.train, beta).unwrap());
        let mut h = dataset_hessian(self.train, beta).unwrap();
        for (i, v) in beta.values().iter().enumerate() {
            g[i] += self.lambda * (v - Self::center(beta, i));
            h[(i, i)] += self.lambda;
        }
        if let Some((z, theta, eps)) = self.extra {
            let (oa, ob) = beta.index().item_offsets(z.item).unwrap();
            let item = beta.item(z.item).unwrap();
            let lg = local_gradient(z.correct, &item, theta);
            let lh = local_hessian(z.correct, &item, theta);
            g[oa] += eps * lg.da;
            g[ob] += eps * lg.db;
            h[(oa, oa)] += eps * lh[0][0];
            h[(oa, ob)] += eps * lh[0][1];
            h[(ob, oa)] += eps * lh[1][0];
            h[(ob, ob)] += eps * lh[1][1];
        }
        (g, h)
    }

    /// Levenberg-Marquardt descent from `start`. Returns a point with a
    /// vanishing gradient and a positive definite Hessian, or `None`.
    pub fn minimize(&self, start: &ParamVector) -> Option<ParamVector> {
        let n_items = start.index().n_items();
        let mut beta = start.clone();
        let mut mu = 0.0;
        for _ in 0..2000 {
            let (g, h) = self.grad_hess(&beta);
            if g.amax() < 1e-13 {
                return h.cholesky().map(|_| beta);
            }
            let f0 = self.value(&beta);
            loop {
                let mut m = h.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += mu;
                }
                if let Some(chol) = m.cholesky() {
                    let step = chol.solve(&g);
                    let next: Vec<f64> = beta.values().iter().zip(step.iter()).map(|(v, s)| v - s).collect();
                    let positive = next.iter().take(2 * n_items).step_by(2).all(|a| *a > 0.0);
                    if positive {
                        let cand = ParamVector::from_values(beta.index().clone(), next).ok()?;
                        // relative slack: near the optimum the decrease is below rounding
                        if self.value(&cand) <= f0 + 1e-14 * f0.abs() {
                            beta = cand;
                            mu = if mu < 1e-9 { 0.0 } else { mu * 0.1 };
                            break;
                        }
                    }
                }
                mu = if mu == 0.0 { 1e-6 } else { mu * 10.0 };
                if mu > 1e6 {
                    return None;
                }
            }
        }
        None
    }
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    dot / (norm(x) * norm(y))
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

//! ℓ2-regularized logistic regression on z-scored features.
//!
//! Minimizes `Σᵢ logloss(yᵢ, b + wᵀzᵢ) + (λ/2)‖w‖²` with Newton steps,
//! Armijo backtracking and a low-rank (Woodbury) solve of the Newton
//! system. The bias is not penalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::FeatureColumn;

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 500;
const REFINE_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero spread on the training rows; their weight is 0.
    pub constant: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    pub objective_at_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardization: Standardization,
    pub lambda: f64,
    pub columns: Vec<FeatureColumn>,
    pub diagnostics: FitDiagnostics,
}

fn standardize(x: &DMatrix<f64>) -> Standardization {
    let n = x.nrows() as f64;
    let mut mean = Vec::with_capacity(x.ncols());
    let mut std = Vec::with_capacity(x.ncols());
    let mut constant = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        let s = v.sqrt();
        let is_const = s == 0.0 || s <= 1e-12 * m.abs();
        mean.push(m);
        std.push(if is_const { 1.0 } else { s });
        constant.push(is_const);
    }
    Standardization { mean, std, constant }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    /// `n x (p + 1)`; last column is the intercept.
    z: &'a DMatrix<f64>,
    y: &'a [f64],
    lambda: f64,
    p: usize,
}

impl Problem<'_> {
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let eta = self.z * theta;
        let loss: f64 = eta
            .iter()
            .zip(self.y)
            .map(|(e, y)| softplus(*e) - y * e)
            .sum();
        let w = theta.rows(0, self.p);
        loss + 0.5 * self.lambda * w.norm_squared()
    }

    /// Magnitude of the terms summed in the objective: each row's loss is a
    /// difference of two terms of size about `|ηᵢ|`.
    fn rounding_scale(&self, theta: &DVector<f64>, f: f64) -> f64 {
        (self.z * theta).iter().map(|e| e.abs()).sum::<f64>() + f.abs().max(1.0)
    }

    /// Gradient and the per-row curvature weights `pᵢ(1 − pᵢ)`.
    fn gradient(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let prob: DVector<f64> = (self.z * theta).map(sigmoid);
        let resid = DVector::from_iterator(prob.len(), prob.iter().zip(self.y).map(|(p, y)| p - y));
        let mut g = self.z.transpose() * &resid;
        for j in 0..self.p {
            g[j] += self.lambda * theta[j];
        }
        (g, prob.map(|p| p * (1.0 - p)))
    }

    /// Solves `H d = −g` for `H = Zᵀ S Z + diag(λ,…,λ, 0)` through an
    /// `(n + 1)`-dimensional system (Woodbury), since rows ≪ columns here.
    /// The unpenalized intercept is handled by adding `μ` to its diagonal
    /// and subtracting it back as a rank-one term. `tau` adds damping.
    fn newton_direction(&self, g: &DVector<f64>, s: &DVector<f64>, tau: f64) -> Option<DVector<f64>> {
        let mut d = self.low_rank_solve(g, s, tau)?;
        // Iterative refinement: the small system is ill-conditioned when λ
        // is small, and an inexact direction stalls the line search.
        for _ in 0..REFINE_STEPS {
            let r = self.hessian_mul(s, tau, &d) + g;
            d += self.low_rank_solve(&r, s, tau)?;
        }
        d.iter().all(|x| x.is_finite()).then_some(d)
    }

    /// `H v` for the damped Hessian `Zᵀ S Z + diag(λ + τ, …, λ + τ, τ)`.
    fn hessian_mul(&self, s: &DVector<f64>, tau: f64, v: &DVector<f64>) -> DVector<f64> {
        let zv = (self.z * v).component_mul(s);
        let mut out = self.z.transpose() * zv;
        for j in 0..self.p {
            out[j] += (self.lambda + tau) * v[j];
        }
        out[self.p] += tau * v[self.p];
        out
    }

    fn low_rank_solve(&self, g: &DVector<f64>, s: &DVector<f64>, tau: f64) -> Option<DVector<f64>> {
        const MU: f64 = 1.0;
        let (n, q) = (self.z.nrows(), self.p + 1);
        let dinv = DVector::from_fn(q, |j, _| if j < self.p { 1.0 / (self.lambda + tau) } else { 1.0 / MU });
        // V = [S^½ Z; e_bᵀ]
        let mut v = DMatrix::zeros(n + 1, q);
        for i in 0..n {
            let w = s[i].sqrt();
            for j in 0..q {
                v[(i, j)] = w * self.z[(i, j)];
            }
        }
        v[(n, self.p)] = 1.0;
        let mut vd = v.clone();
        for j in 0..q {
            vd.column_mut(j).scale_mut(dinv[j]);
        }
        let mut m = &vd * v.transpose();
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        m[(n, n)] -= 1.0 / (MU - tau);
        let dg = g.component_mul(&dinv);
        let rhs = &v * &dg;
        let sol = m.lu().solve(&rhs)?;
        let d = -(dg - vd.transpose() * sol);
        d.iter().all(|x| x.is_finite()).then_some(d)
    }
}

/// Fits on the given rows. `labels[i]` is the class of row `i` of `x`.
pub fn fit(x: &DMatrix<f64>, labels: &[bool], lambda: f64, columns: &[FeatureColumn]) -> Result<ClassifierModel> {
    if x.nrows() != labels.len() {
        return Err(Error::Parameter(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if columns.len() != x.ncols() {
        return Err(Error::Schema(format!("{} columns but {} descriptors", x.ncols(), columns.len())));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("training features contain non-finite values".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Class("training rows must contain both classes".into()));
    }

    let st = standardize(x);
    let active: Vec<usize> = (0..x.ncols()).filter(|j| !st.constant[*j]).collect();
    let p = active.len();
    let mut z = DMatrix::zeros(x.nrows(), p + 1);
    for (c, &j) in active.iter().enumerate() {
        for i in 0..x.nrows() {
            z[(i, c)] = (x[(i, j)] - st.mean[j]) / st.std[j];
        }
    }
    z.column_mut(p).fill(1.0);
    let y: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let prob = Problem { z: &z, y: &y, lambda, p };

    let mut theta = DVector::zeros(p + 1);
    let objective_at_zero = prob.objective(&theta);
    let mut f = objective_at_zero;
    let mut iterations = 0;
    let (mut g, mut s) = prob.gradient(&theta);
    while g.norm() > GRAD_TOL {
        if iterations == MAX_ITER {
            return Err(Error::Optimization(format!(
                "no convergence after {MAX_ITER} Newton steps: |grad| = {:.3e}, objective = {f:.6e}",
                g.norm()
            )));
        }
        iterations += 1;
        let dir = [0.0, 1e-12, 1e-9, 1e-6]
            .iter()
            .find_map(|tau| prob.newton_direction(&g, &s, *tau))
            .ok_or_else(|| {
                Error::Optimization(format!(
                    "Newton system singular at step {iterations}, |grad| = {:.3e}",
                    g.norm()
                ))
            })?;
        let slope = g.dot(&dir);
        let (cand, fc) = match line_search(&prob, &theta, &dir, f, slope, &g) {
            Step::Accept(cand, fc) => (cand, fc),
            // The gradient norm is at its floating-point floor.
            Step::Stationary => break,
            Step::Stalled => {
                return Err(Error::Optimization(format!(
                    "line search stalled at step {iterations}: |grad| = {:.3e}",
                    g.norm()
                )))
            }
        };
        theta = cand;
        f = fc;
        (g, s) = prob.gradient(&theta);
    }

    let mut weights = vec![0.0; x.ncols()];
    for (c, &j) in active.iter().enumerate() {
        weights[j] = theta[c];
    }
    Ok(ClassifierModel {
        weights,
        bias: theta[p],
        standardization: st,
        lambda,
        columns: columns.to_vec(),
        diagnostics: FitDiagnostics {
            iterations,
            grad_norm: g.norm(),
            objective: f,
            objective_at_zero,
        },
    })
}

enum Step {
    Accept(DVector<f64>, f64),
    /// A full step changes the objective only by rounding and does not
    /// shrink the gradient.
    Stationary,
    Stalled,
}

/// Armijo backtracking. Near the optimum the objective change drops below
/// its rounding error, so there a full step is judged by the gradient norm.
fn line_search(prob: &Problem, theta: &DVector<f64>, dir: &DVector<f64>, f: f64, slope: f64, g: &DVector<f64>) -> Step {
    let full = theta + dir;
    let f_full = prob.objective(&full);
    if (f_full - f).abs() <= 16.0 * f64::EPSILON * prob.rounding_scale(&full, f) {
        let (g_full, _) = prob.gradient(&full);
        return if g_full.norm() < g.norm() {
            Step::Accept(full, f_full)
        } else {
            Step::Stationary
        };
    }
    let mut t = 1.0;
    for _ in 0..60 {
        let cand = theta + dir * t;
        let fc = prob.objective(&cand);
        if fc <= f + 1e-4 * t * slope {
            return Step::Accept(cand, fc);
        }
        t *= 0.5;
    }
    Step::Stalled
}

impl ClassifierModel {
    pub fn decision(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.weights.len() {
            return Err(Error::Schema(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.weights.len()
            )));
        }
        let st = &self.standardization;
        let mut s = self.bias;
        for (j, x) in row.iter().enumerate() {
            if !st.constant[j] {
                s += self.weights[j] * (x - st.mean[j]) / st.std[j];
            }
        }
        Ok(s)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(row)?))
    }

    pub fn check_columns(&self, columns: &[FeatureColumn]) -> Result<()> {
        if columns != self.columns.as_slice() {
            return Err(Error::Schema("feature columns differ from the model's training columns".into()));
        }
        Ok(())
    }

    /// Objective value at arbitrary parameters, for diagnostics and tests.
    pub fn objective_at(&self, x: &DMatrix<f64>, labels: &[bool], weights: &[f64], bias: f64) -> f64 {
        let st = &self.standardization;
        let mut total = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let mut e = bias;
            for j in 0..x.ncols() {
                if !st.constant[j] {
                    e += weights[j] * (x[(i, j)] - st.mean[j]) / st.std[j];
                }
            }
            total += softplus(e) - if *l { e } else { 0.0 };
        }
        total + 0.5 * self.lambda * weights.iter().map(|w| w * w).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter_io::{ModuleKind, SublayerKey};
    use crate::spectral::Family;

    fn cols(p: usize) -> Vec<FeatureColumn> {
        (0..p)
            .map(|i| FeatureColumn {
                sublayer: SublayerKey::new(0, ModuleKind::Query),
                family: Family::Magnitude,
                name: format!("f{i}"),
            })
            .collect()
    }

    fn data() -> (DMatrix<f64>, Vec<bool>) {
        let x = DMatrix::from_fn(12, 3, |i, j| ((i * 3 + j) as f64 * 1.7).sin() + if j == 0 { i as f64 * 0.2 } else { 0.0 });
        let labels = (0..12).map(|i| (i * 7) % 12 >= 5).collect();
        (x, labels)
    }

    #[test]
    fn gradient_vanishes_and_beats_zero() {
        let (x, l) = data();
        let m = fit(&x, &l, 1.0, &cols(3)).unwrap();
        assert!(m.diagnostics.grad_norm <= GRAD_TOL);
        assert!(m.diagnostics.objective <= m.diagnostics.objective_at_zero);
    }

    #[test]
    fn finite_difference_gradient_is_small() {
        let (x, l) = data();
        let m = fit(&x, &l, 0.5, &cols(3)).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut wp = m.weights.clone();
            let mut wm = m.weights.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (m.objective_at(&x, &l, &wp, m.bias) - m.objective_at(&x, &l, &wm, m.bias)) / (2.0 * h);
            assert!(fd.abs() < 1e-6, "{fd}");
        }
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let (mut x, l) = data();
        x.column_mut(1).fill(3.0);
        let m = fit(&x, &l, 1.0, &cols(3)).unwrap();
        assert_eq!(m.weights[1], 0.0);
        assert!(m.standardization.constant[1]);
    }

    #[test]
    fn label_flip_negates() {
        let (x, l) = data();
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let a = fit(&x, &l, 1.0, &cols(3)).unwrap();
        let b = fit(&x, &flipped, 1.0, &cols(3)).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u + v).abs() < 1e-6);
        }
        assert!((a.bias + b.bias).abs() < 1e-6);
    }

    #[test]
    fn null_model_is_one_half() {
        let (x, l) = data();
        let mut m = fit(&x, &l, 1.0, &cols(3)).unwrap();
        m.weights.fill(0.0);
        m.bias = 0.0;
        assert_eq!(m.predict_proba(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(matches!(m.predict_proba(&[1.0]), Err(Error::Schema(_))));
    }

    #[test]
    fn separable_data_converges() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { (i as f64).cos() });
        let l: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        for lambda in [0.01, 1.0, 100.0] {
            let m = fit(&x, &l, lambda, &cols(2)).unwrap();
            assert!(m.weights[0] > 0.0);
        }
    }

    #[test]
    fn low_rank_direction_matches_dense_solve() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let (n, p) = (23, 120);
        let mut z = DMatrix::from_fn(n, p + 1, |_, _| rng.random_range(-2.0..2.0));
        z.column_mut(p).fill(1.0);
        let y: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        for lambda in [0.01, 1.0, 100.0] {
            let prob = Problem { z: &z, y: &y, lambda, p };
            let theta = DVector::from_fn(p + 1, |_, _| rng.random_range(-0.01..0.01));
            let (g, s) = prob.gradient(&theta);
            let d = prob.newton_direction(&g, &s, 0.0).unwrap();
            let mut h = z.transpose() * DMatrix::from_diagonal(&s) * &z;
            for j in 0..p {
                h[(j, j)] += lambda;
            }
            assert!((&h * &d + &g).norm() <= 1e-8 * g.norm().max(1.0), "lambda {lambda}");
        }
    }
}

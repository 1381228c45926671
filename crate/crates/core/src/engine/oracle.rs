use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::model::{NodeObjective, ObjectiveKind};

/// `log(1 + exp(t))` without overflow.
#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `1 / (1 + exp(-t))` without overflow.
#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Minimization interface shared by node objectives, proximal terms and sums.
///
/// Every method takes the list of active coordinates; the point is assumed
/// to be zero elsewhere and returned gradients are zero outside `coords`.
pub trait Smooth {
    type Curvature;

    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn value_grad_on(&self, x: &[f64], coords: &[usize]) -> (f64, Vec<f64>);
    fn curvature(&self, x: &[f64]) -> Self::Curvature;
    fn hess_vec_on(&self, curv: &Self::Curvature, d: &[f64], coords: &[usize]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
struct Gram {
    xtx: DMatrix<f64>,
    xtb: DVector<f64>,
}

/// Value, gradient and Hessian-vector products of one node's objective.
#[derive(Debug, Clone)]
pub struct SmoothOracle<'a> {
    obj: &'a NodeObjective,
    gram: Option<Gram>,
}

impl<'a> SmoothOracle<'a> {
    pub fn new(obj: &'a NodeObjective) -> Self {
        let gram = match obj.kind {
            ObjectiveKind::LeastSquares => {
                let x = &obj.data.x;
                Some(Gram { xtx: x.tr_mul(x), xtb: x.tr_mul(&obj.data.y) })
            }
            ObjectiveKind::Logistic => None,
        };
        Self { obj, gram }
    }

    pub fn objective(&self) -> &'a NodeObjective {
        self.obj
    }

    /// `X theta`, skipping zero coordinates of `theta`.
    fn predictor(&self, theta: &[f64]) -> DVector<f64> {
        let x = &self.obj.data.x;
        let mut z = DVector::zeros(x.nrows());
        for (k, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                z.axpy(t, &x.column(k), 1.0);
            }
        }
        z
    }

    fn ridge(&self, theta: &[f64]) -> f64 {
        0.5 * self.obj.lambda * theta.iter().map(|t| t * t).sum::<f64>()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let z = self.predictor(theta);
        let y = &self.obj.data.y;
        let loss = match self.obj.kind {
            ObjectiveKind::Logistic => z.iter().zip(y.iter()).map(|(&zl, &yl)| softplus(-yl * zl)).sum(),
            ObjectiveKind::LeastSquares => z.iter().zip(y.iter()).map(|(&zl, &bl)| (zl - bl) * (zl - bl)).sum::<f64>(),
        };
        loss + self.ridge(theta)
    }

    /// Value and gradient restricted to `coords`.
    pub fn value_grad_on(&self, theta: &[f64], coords: &[usize]) -> (f64, Vec<f64>) {
        let n = self.obj.dim();
        let x = &self.obj.data.x;
        let y = &self.obj.data.y;
        let lambda = self.obj.lambda;
        let z = self.predictor(theta);
        let mut g = vec![0.0; n];
        let value = match self.obj.kind {
            ObjectiveKind::Logistic => {
                // d/dz_l softplus(-y_l z_l) = -y_l sigmoid(-y_l z_l)
                let mut loss = 0.0;
                let mut w = DVector::zeros(z.len());
                for l in 0..z.len() {
                    let m = y[l] * z[l];
                    loss += softplus(-m);
                    w[l] = -y[l] * sigmoid(-m);
                }
                for &k in coords {
                    g[k] = x.column(k).dot(&w) + lambda * theta[k];
                }
                loss
            }
            ObjectiveKind::LeastSquares => {
                let r = &z - y;
                let gram = self.gram.as_ref().expect("least squares keeps its Gram matrix");
                for &k in coords {
                    let mut acc = -gram.xtb[k];
                    for (j, &t) in theta.iter().enumerate() {
                        if t != 0.0 {
                            acc += gram.xtx[(k, j)] * t;
                        }
                    }
                    g[k] = 2.0 * acc + lambda * theta[k];
                }
                r.norm_squared()
            }
        };
        (value + self.ridge(theta), g)
    }

    pub fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let all: Vec<usize> = (0..self.obj.dim()).collect();
        self.value_grad_on(theta, &all)
    }

    /// Per-sample curvature weights; `None` for least squares, whose Hessian
    /// is constant.
    pub fn curvature_weights(&self, theta: &[f64]) -> Option<DVector<f64>> {
        match self.obj.kind {
            ObjectiveKind::LeastSquares => None,
            ObjectiveKind::Logistic => {
                let z = self.predictor(theta);
                Some(z.map(|zl| {
                    let s = sigmoid(zl);
                    s * (1.0 - s)
                }))
            }
        }
    }

    pub fn hess_vec_with(&self, weights: &Option<DVector<f64>>, d: &[f64], coords: &[usize]) -> Vec<f64> {
        let n = self.obj.dim();
        let lambda = self.obj.lambda;
        let mut out = vec![0.0; n];
        match (self.obj.kind, weights) {
            (ObjectiveKind::Logistic, Some(w)) => {
                let x = &self.obj.data.x;
                let mut xd = DVector::zeros(x.nrows());
                for &k in coords {
                    if d[k] != 0.0 {
                        xd.axpy(d[k], &x.column(k), 1.0);
                    }
                }
                xd.component_mul_assign(w);
                for &k in coords {
                    out[k] = x.column(k).dot(&xd) + lambda * d[k];
                }
            }
            _ => {
                let gram = self.gram.as_ref().expect("least squares keeps its Gram matrix");
                for &k in coords {
                    let mut acc = 0.0;
                    for &j in coords {
                        acc += gram.xtx[(k, j)] * d[j];
                    }
                    out[k] = 2.0 * acc + lambda * d[k];
                }
            }
        }
        out
    }

    /// Full-space Hessian-vector product.
    pub fn hess_vec(&self, theta: &[f64], d: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.obj.dim()).collect();
        self.hess_vec_with(&self.curvature_weights(theta), d, &all)
    }
}

impl Smooth for SmoothOracle<'_> {
    type Curvature = Option<DVector<f64>>;

    fn dim(&self) -> usize {
        self.obj.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        SmoothOracle::value(self, x)
    }

    fn value_grad_on(&self, x: &[f64], coords: &[usize]) -> (f64, Vec<f64>) {
        SmoothOracle::value_grad_on(self, x, coords)
    }

    fn curvature(&self, x: &[f64]) -> Self::Curvature {
        self.curvature_weights(x)
    }

    fn hess_vec_on(&self, curv: &Self::Curvature, d: &[f64], coords: &[usize]) -> Vec<f64> {
        self.hess_vec_with(curv, d, coords)
    }
}

/// Exact value and gradient of a node objective.
pub fn eval_value_grad(oracle: &SmoothOracle<'_>, x: &[f64]) -> (f64, Vec<f64>) {
    oracle.value_grad(x)
}

/// `f(x) + rho/2 |x - v|^2`.
pub struct Prox<'o, 'a> {
    pub oracle: &'o SmoothOracle<'a>,
    pub center: &'o [f64],
    pub rho: f64,
}

impl Smooth for Prox<'_, '_> {
    type Curvature = Option<DVector<f64>>;

    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let pen: f64 = x.iter().zip(self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.oracle.value(x) + 0.5 * self.rho * pen
    }

    fn value_grad_on(&self, x: &[f64], coords: &[usize]) -> (f64, Vec<f64>) {
        let (f, mut g) = self.oracle.value_grad_on(x, coords);
        for &k in coords {
            g[k] += self.rho * (x[k] - self.center[k]);
        }
        let pen: f64 = x.iter().zip(self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        (f + 0.5 * self.rho * pen, g)
    }

    fn curvature(&self, x: &[f64]) -> Self::Curvature {
        self.oracle.curvature_weights(x)
    }

    fn hess_vec_on(&self, curv: &Self::Curvature, d: &[f64], coords: &[usize]) -> Vec<f64> {
        let mut h = self.oracle.hess_vec_with(curv, d, coords);
        for &k in coords {
            h[k] += self.rho * d[k];
        }
        h
    }
}

/// `sum_i f_i`, all data in one place.
pub struct SumOracle<'a> {
    pub parts: Vec<SmoothOracle<'a>>,
}

impl Smooth for SumOracle<'_> {
    type Curvature = Vec<Option<DVector<f64>>>;

    fn dim(&self) -> usize {
        self.parts.first().map_or(0, |p| p.dim())
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.parts.iter().map(|p| p.value(x)).sum()
    }

    fn value_grad_on(&self, x: &[f64], coords: &[usize]) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut grad = vec![0.0; self.dim()];
        for p in &self.parts {
            let (f, g) = p.value_grad_on(x, coords);
            total += f;
            for &k in coords {
                grad[k] += g[k];
            }
        }
        (total, grad)
    }

    fn curvature(&self, x: &[f64]) -> Self::Curvature {
        self.parts.iter().map(|p| p.curvature_weights(x)).collect()
    }

    fn hess_vec_on(&self, curv: &Self::Curvature, d: &[f64], coords: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (p, c) in self.parts.iter().zip(curv) {
            let h = p.hess_vec_with(c, d, coords);
            for &k in coords {
                out[k] += h[k];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityInfo {
    /// Lower bound on the smallest Hessian eigenvalue, valid everywhere.
    pub m: f64,
}

/// Least squares: `lambda + 2 lambda_min(X'X)`. Logistic: the ridge weight,
/// since the loss Hessian is only positive semidefinite.
pub fn strong_convexity_constant(obj: &NodeObjective) -> ConvexityInfo {
    match obj.kind {
        ObjectiveKind::Logistic => ConvexityInfo { m: obj.lambda },
        ObjectiveKind::LeastSquares => {
            let x = &obj.data.x;
            let gram = x.tr_mul(x);
            let eig = SymmetricEigen::new(gram).eigenvalues;
            let max = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v));
            // eigenvalues at roundoff level count as zero
            let min = if min <= 1e-12 * max.max(1.0) { 0.0 } else { min };
            ConvexityInfo { m: obj.lambda + 2.0 * min }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn square() -> NodeObjective {
        NodeObjective::least_squares(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0)
    }

    #[test]
    fn logistic_at_origin() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let obj = NodeObjective::logistic(x.clone(), y.clone(), 0.7);
        let (f, g) = eval_value_grad(&SmoothOracle::new(&obj), &[0.0, 0.0]);
        assert!((f - 3.0 * 2f64.ln()).abs() < 1e-14);
        let expect = -0.5 * x.tr_mul(&y);
        for k in 0..2 {
            assert!((g[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn square_value_and_gradient() {
        let obj = square();
        let (f, g) = eval_value_grad(&SmoothOracle::new(&obj), &[1.0]);
        assert_eq!((f, g[0]), (1.0, 2.0));
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) == 1.0);
    }

    #[test]
    fn logistic_far_from_origin_stays_finite() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let obj = NodeObjective::logistic(x, y, 0.0);
        let (f, g) = SmoothOracle::new(&obj).value_grad(&[800.0]);
        assert!(f.is_finite() && g[0].is_finite());
        assert!((f - 800.0).abs() < 1e-9);
    }

    #[test]
    fn strong_convexity_least_squares_scalar() {
        let mut obj = square();
        obj.lambda = 0.5;
        assert!((strong_convexity_constant(&obj).m - 2.5).abs() < 1e-14);
    }

    #[test]
    fn strong_convexity_logistic_is_ridge() {
        let obj = NodeObjective::logistic(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, -1.0]), 1.0);
        assert_eq!(strong_convexity_constant(&obj).m, 1.0);
    }

    #[test]
    fn strong_convexity_rank_deficient_is_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
        let obj = NodeObjective::least_squares(x, DVector::zeros(3), 0.0);
        assert_eq!(strong_convexity_constant(&obj).m, 0.0);
    }
}

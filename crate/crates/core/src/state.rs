//! Order parameters (m, r, b, v) and trajectories of them.

use nalgebra::{DMatrix, DVector};

use crate::activations::ActivationKind;
use crate::linalg;

/// Sufficient statistics of the population loss: overlaps m (H×F), residual
/// key Gram root r (H×H symmetric), biases b (H) and scale v.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderState {
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v: f64,
    pub loss: Option<f64>,
}

impl OrderState {
    /// m = 0, r = η I, b = 0, v = 1: the large-D initialization.
    pub fn initial(heads: usize, features: usize, eta: f64) -> Self {
        OrderState {
            m: DMatrix::zeros(heads, features),
            r: DMatrix::identity(heads, heads) * eta,
            b: DVector::zeros(heads),
            v: 1.0,
            loss: None,
        }
    }

    pub fn zeros(heads: usize, features: usize) -> Self {
        Self::initial(heads, features, 0.0)
    }

    pub fn heads(&self) -> usize {
        self.m.nrows()
    }

    pub fn features(&self) -> usize {
        self.m.ncols()
    }

    /// q = m p⁻¹ mᵀ + r² in the asymptotic gram p = I.
    pub fn q(&self) -> DMatrix<f64> {
        &self.m * self.m.transpose() + &self.r * &self.r
    }

    /// Keeps only the listed heads (in the given order).
    pub fn select_heads(&self, keep: &[usize]) -> OrderState {
        let m = DMatrix::from_fn(keep.len(), self.features(), |i, f| self.m[(keep[i], f)]);
        let r = DMatrix::from_fn(keep.len(), keep.len(), |i, j| self.r[(keep[i], keep[j])]);
        let b = DVector::from_fn(keep.len(), |i, _| self.b[keep[i]]);
        OrderState { m, r, b, v: self.v, loss: None }
    }

    /// Relabels heads: head i of the result is head perm[i] of self.
    pub fn permute_heads(&self, perm: &[usize]) -> OrderState {
        let mut s = self.select_heads(perm);
        s.loss = self.loss;
        s
    }

    pub fn min_r_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.r)
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.r.iter()).chain(self.b.iter()).all(|x| x.is_finite()) && self.v.is_finite()
    }
}

/// Gradient of a scalar function of the order parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderGradients {
    pub m: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
    pub v: f64,
}

impl OrderGradients {
    pub fn zeros(heads: usize, features: usize) -> Self {
        OrderGradients {
            m: DMatrix::zeros(heads, features),
            r: DMatrix::zeros(heads, heads),
            b: DVector::zeros(heads),
            v: 0.0,
        }
    }

    /// Zeroes the parts the activation does not depend on.
    pub fn mask_for(&mut self, kind: ActivationKind) {
        if !kind.uses_bias() {
            self.b.fill(0.0);
        }
        if !kind.uses_scale() {
            self.v = 0.0;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(self.r.iter()).chain(self.b.iter()).all(|x| x.is_finite()) && self.v.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.m.norm_squared() + self.r.norm_squared() + self.b.norm_squared() + self.v * self.v).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub tau: f64,
    pub state: OrderState,
}

/// Time series of order parameters at effective times τ.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Set when a run stopped at its horizon without meeting its stopping rule.
    pub converged: Option<bool>,
}

impl Trajectory {
    pub fn push(&mut self, tau: f64, state: OrderState) {
        self.rows.push(TrajectoryRow { tau, state });
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First recorded τ at which `pred` holds.
    pub fn first_time<F: Fn(&OrderState) -> bool>(&self, pred: F) -> Option<f64> {
        self.rows.iter().find(|r| pred(&r.state)).map(|r| r.tau)
    }
}

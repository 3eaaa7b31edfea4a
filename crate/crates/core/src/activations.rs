//! The three attention activations and their first derivatives.
//!
//! Flat buffers use row-major H×L layout, index `h * L + l`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Softmax,
    SoftmaxOne,
    BSoftmax,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Softmax, ActivationKind::SoftmaxOne, ActivationKind::BSoftmax];

    pub fn uses_bias(self) -> bool {
        !matches!(self, ActivationKind::Softmax)
    }

    pub fn uses_scale(self) -> bool {
        matches!(self, ActivationKind::SoftmaxOne)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Softmax => "softmax",
            ActivationKind::SoftmaxOne => "softmax_one",
            ActivationKind::BSoftmax => "b_softmax",
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ActivationKind::Softmax),
            "softmax_one" | "softmax1" | "softmax-1" => Ok(ActivationKind::SoftmaxOne),
            "b_softmax" | "bsoftmax" | "b-softmax" => Ok(ActivationKind::BSoftmax),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

/// Attention weights σ(χ, b, v; h)_ℓ for every head and token.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    pub scores: DMatrix<f64>,
    pub row_sums: DVector<f64>,
}

/// Writes σ into `out` (H×L). For SoftmaxOne also writes the normalized
/// sink weight e^{b_h}/denominator into `sink` (length H); other kinds leave
/// it untouched.
#[inline]
pub fn scores_into(
    kind: ActivationKind,
    chi: &[f64],
    heads: usize,
    len: usize,
    b: &[f64],
    v: f64,
    out: &mut [f64],
    sink: &mut [f64],
) {
    match kind {
        ActivationKind::Softmax => {
            for h in 0..heads {
                let row = &chi[h * len..(h + 1) * len];
                let o = &mut out[h * len..(h + 1) * len];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (y, &x) in o.iter_mut().zip(row) {
                    *y = (x - mx).exp();
                    s += *y;
                }
                let inv = 1.0 / s;
                o.iter_mut().for_each(|y| *y *= inv);
            }
        }
        ActivationKind::SoftmaxOne => {
            for h in 0..heads {
                let row = &chi[h * len..(h + 1) * len];
                let o = &mut out[h * len..(h + 1) * len];
                let mx = row.iter().cloned().fold(b[h], f64::max);
                let e0 = (b[h] - mx).exp();
                let mut s = e0;
                for (y, &x) in o.iter_mut().zip(row) {
                    *y = (x - mx).exp();
                    s += *y;
                }
                let inv = 1.0 / s;
                sink[h] = e0 * inv;
                o.iter_mut().for_each(|y| *y *= v * inv);
            }
        }
        ActivationKind::BSoftmax => {
            let n = heads * len;
            let mut mx = f64::NEG_INFINITY;
            for h in 0..heads {
                for l in 0..len {
                    mx = mx.max(chi[h * len + l] + b[h]);
                }
            }
            let mut s = 0.0;
            for h in 0..heads {
                for l in 0..len {
                    let e = (chi[h * len + l] + b[h] - mx).exp();
                    out[h * len + l] = e;
                    s += e;
                }
            }
            let scale = heads as f64 / s;
            out[..n].iter_mut().for_each(|y| *y *= scale);
        }
    }
}

/// Vector-Jacobian product: given G = ∂ℓ/∂σ (H×L), accumulates ∂ℓ/∂χ into
/// `dchi` (overwritten), ∂ℓ/∂b into `db` (overwritten) and returns ∂ℓ/∂v.
/// `scores` and `sink` must come from [`scores_into`] at the same point.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn vjp_into(
    kind: ActivationKind,
    scores: &[f64],
    sink: &[f64],
    heads: usize,
    len: usize,
    v: f64,
    g: &[f64],
    dchi: &mut [f64],
    db: &mut [f64],
) -> f64 {
    match kind {
        ActivationKind::Softmax => {
            for h in 0..heads {
                let s = &scores[h * len..(h + 1) * len];
                let gg = &g[h * len..(h + 1) * len];
                let dot: f64 = s.iter().zip(gg).map(|(a, b)| a * b).sum();
                for l in 0..len {
                    dchi[h * len + l] = s[l] * (gg[l] - dot);
                }
                db[h] = 0.0;
            }
            0.0
        }
        ActivationKind::SoftmaxOne => {
            // scores = v ρ
            let mut dv = 0.0;
            let inv_v = 1.0 / v;
            for h in 0..heads {
                let s = &scores[h * len..(h + 1) * len];
                let gg = &g[h * len..(h + 1) * len];
                let rho_g: f64 = s.iter().zip(gg).map(|(a, b)| a * b).sum::<f64>() * inv_v;
                for l in 0..len {
                    dchi[h * len + l] = s[l] * (gg[l] - rho_g);
                }
                db[h] = -v * sink[h] * rho_g;
                dv += rho_g;
            }
            dv
        }
        ActivationKind::BSoftmax => {
            // scores = H π
            let n = heads * len;
            let hf = heads as f64;
            let pi_g: f64 = scores[..n].iter().zip(&g[..n]).map(|(a, b)| a * b).sum::<f64>() / hf;
            for h in 0..heads {
                let mut acc = 0.0;
                for l in 0..len {
                    let d = scores[h * len + l] * (g[h * len + l] - pi_g);
                    dchi[h * len + l] = d;
                    acc += d;
                }
                db[h] = acc;
            }
            0.0
        }
    }
}

fn check_finite(chi: &DMatrix<f64>, b: &DVector<f64>, v: f64) -> Result<()> {
    if chi.iter().all(|x| x.is_finite()) && b.iter().all(|x| x.is_finite()) && v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("activation input".into()))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Scores for pre-activations χ (H×L), biases b (H) and scale v.
pub fn scores(chi: &DMatrix<f64>, b: &DVector<f64>, v: f64, kind: ActivationKind) -> Result<ScoreField> {
    let (h, l) = chi.shape();
    if b.len() != h {
        return Err(Error::DimensionMismatch(format!("bias length {} for {h} heads", b.len())));
    }
    check_finite(chi, b, v)?;
    let flat = row_major(chi);
    let mut out = vec![0.0; h * l];
    let mut sink = vec![0.0; h];
    scores_into(kind, &flat, h, l, b.as_slice(), v, &mut out, &mut sink);
    let scores = DMatrix::from_row_slice(h, l, &out);
    let row_sums = DVector::from_fn(h, |i, _| scores.row(i).sum());
    Ok(ScoreField { scores, row_sums })
}

/// Full first derivatives of σ.
#[derive(Debug, Clone)]
pub struct ScoreJacobian {
    pub heads: usize,
    pub len: usize,
    /// ∂σ(h)_ℓ/∂χ_{h'ℓ'} at index ((h·L + ℓ)·H + h')·L + ℓ'.
    pub d_chi: Vec<f64>,
    /// ∂σ(h)_ℓ/∂b_{h'} at index (h·L + ℓ)·H + h'.
    pub d_b: Vec<f64>,
    /// ∂σ(h)_ℓ/∂v at index h·L + ℓ.
    pub d_v: Vec<f64>,
}

impl ScoreJacobian {
    #[inline]
    pub fn chi(&self, h: usize, l: usize, hp: usize, lp: usize) -> f64 {
        self.d_chi[((h * self.len + l) * self.heads + hp) * self.len + lp]
    }

    #[inline]
    pub fn bias(&self, h: usize, l: usize, hp: usize) -> f64 {
        self.d_b[(h * self.len + l) * self.heads + hp]
    }

    #[inline]
    pub fn scale(&self, h: usize, l: usize) -> f64 {
        self.d_v[h * self.len + l]
    }
}

/// Closed-form Jacobian of σ with respect to χ, b and v.
pub fn score_jacobian(chi: &DMatrix<f64>, b: &DVector<f64>, v: f64, kind: ActivationKind) -> Result<ScoreJacobian> {
    let (nh, nl) = chi.shape();
    let field = scores(chi, b, v, kind)?;
    let s = &field.scores;
    let mut d_chi = vec![0.0; nh * nl * nh * nl];
    let mut d_b = vec![0.0; nh * nl * nh];
    let mut d_v = vec![0.0; nh * nl];
    let idx = |h: usize, l: usize, hp: usize, lp: usize| ((h * nl + l) * nh + hp) * nl + lp;
    match kind {
        ActivationKind::Softmax => {
            for h in 0..nh {
                for l in 0..nl {
                    for lp in 0..nl {
                        let delta = if l == lp { 1.0 } else { 0.0 };
                        d_chi[idx(h, l, h, lp)] = s[(h, l)] * (delta - s[(h, lp)]);
                    }
                }
            }
        }
        ActivationKind::SoftmaxOne => {
            for h in 0..nh {
                let mx = chi.row(h).iter().cloned().fold(b[h], f64::max);
                let denom = (b[h] - mx).exp() + chi.row(h).iter().map(|x| (x - mx).exp()).sum::<f64>();
                let sink = (b[h] - mx).exp() / denom;
                for l in 0..nl {
                    let rho = s[(h, l)] / v;
                    for lp in 0..nl {
                        let delta = if l == lp { 1.0 } else { 0.0 };
                        d_chi[idx(h, l, h, lp)] = v * rho * (delta - s[(h, lp)] / v);
                    }
                    d_b[(h * nl + l) * nh + h] = -v * rho * sink;
                    d_v[h * nl + l] = rho;
                }
            }
        }
        ActivationKind::BSoftmax => {
            let hf = nh as f64;
            for h in 0..nh {
                for l in 0..nl {
                    for hp in 0..nh {
                        let mut row_b = 0.0;
                        for lp in 0..nl {
                            let delta = if h == hp && l == lp { 1.0 } else { 0.0 };
                            let d = s[(h, l)] * (delta - s[(hp, lp)] / hf);
                            d_chi[idx(h, l, hp, lp)] = d;
                            row_b += d;
                        }
                        d_b[(h * nl + l) * nh + hp] = row_b;
                    }
                }
            }
        }
    }
    Ok(ScoreJacobian { heads: nh, len: nl, d_chi, d_b, d_v })
}

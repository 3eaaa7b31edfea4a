//! Teacher side of the single-location model: feature-weight laws, spikes,
//! finite-D sequences and the frozen low-dimensional Monte-Carlo draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain, LabRng};

/// Law of the per-sequence feature weights θ ∈ R^F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaDistribution {
    /// θ = (√ν1, ±√ν2) with a fair sign.
    FlippingSpike { nu1: f64, nu2: f64 },
    /// θ = √ν e_f with f uniform over F ≥ 2 features.
    FlippingBasis { nu: f64, features: usize },
    /// Independent centered Gaussians with variances spaced linearly from ν1 to ν2.
    AnisoGaussian { nu1: f64, nu2: f64, features: usize },
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDistribution(format!("{name} must be positive and finite, got {x}")))
    }
}

impl ThetaDistribution {
    pub fn flipping_spike(nu1: f64, nu2: f64) -> Result<Self> {
        let d = ThetaDistribution::FlippingSpike { nu1, nu2 };
        d.validate()?;
        Ok(d)
    }

    pub fn flipping_basis(nu: f64, features: usize) -> Result<Self> {
        let d = ThetaDistribution::FlippingBasis { nu, features };
        d.validate()?;
        Ok(d)
    }

    pub fn aniso_gaussian(nu1: f64, nu2: f64, features: usize) -> Result<Self> {
        let d = ThetaDistribution::AnisoGaussian { nu1, nu2, features };
        d.validate()?;
        Ok(d)
    }

    /// Isotropic Gaussian N(0, ν I_F).
    pub fn isotropic_gaussian(nu: f64, features: usize) -> Result<Self> {
        Self::aniso_gaussian(nu, nu, features)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThetaDistribution::FlippingSpike { nu1, nu2 } => {
                positive("nu1", nu1)?;
                positive("nu2", nu2)
            }
            ThetaDistribution::FlippingBasis { nu, features } => {
                positive("nu", nu)?;
                if features < 2 {
                    return Err(Error::InvalidDistribution(format!(
                        "flipping basis needs at least 2 features, got {features}"
                    )));
                }
                Ok(())
            }
            ThetaDistribution::AnisoGaussian { nu1, nu2, features } => {
                positive("nu1", nu1)?;
                positive("nu2", nu2)?;
                if nu1 < nu2 {
                    return Err(Error::InvalidDistribution(format!(
                        "anisotropic gaussian needs nu1 >= nu2, got {nu1} < {nu2}"
                    )));
                }
                if features < 1 {
                    return Err(Error::InvalidDistribution("features must be at least 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            ThetaDistribution::FlippingSpike { .. } => 2,
            ThetaDistribution::FlippingBasis { features, .. } => features,
            ThetaDistribution::AnisoGaussian { features, .. } => features,
        }
    }

    /// Per-feature variances of the Gaussian kind. With one feature the
    /// interpolation degenerates and ν̃_1 = ν1.
    pub fn gaussian_variances(&self) -> Option<Vec<f64>> {
        match *self {
            ThetaDistribution::AnisoGaussian { nu1, nu2, features } => {
                if features == 1 {
                    return Some(vec![nu1]);
                }
                let step = (nu1 - nu2) / (features - 1) as f64;
                Some((0..features).map(|f| if f + 1 == features { nu2 } else { nu1 - step * f as f64 }).collect())
            }
            _ => None,
        }
    }

    /// Same family with its signal strength set to ν: both spike strengths
    /// for FlippingSpike, the spike strength for FlippingBasis, and the
    /// leading variance for AnisoGaussian (the ν2/ν1 ratio is kept).
    pub fn with_signal(&self, nu: f64) -> Result<Self> {
        let d = match *self {
            ThetaDistribution::FlippingSpike { .. } => ThetaDistribution::FlippingSpike { nu1: nu, nu2: nu },
            ThetaDistribution::FlippingBasis { features, .. } => ThetaDistribution::FlippingBasis { nu, features },
            ThetaDistribution::AnisoGaussian { nu1, nu2, features } => {
                ThetaDistribution::AnisoGaussian { nu1: nu, nu2: nu * nu2 / nu1, features }
            }
        };
        d.validate()?;
        Ok(d)
    }

    /// One draw of θ.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.features());
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match *self {
            ThetaDistribution::FlippingSpike { nu1, nu2 } => {
                out[0] = nu1.sqrt();
                out[1] = if rng.random_bool(0.5) { nu2.sqrt() } else { -nu2.sqrt() };
            }
            ThetaDistribution::FlippingBasis { nu, features } => {
                out.iter_mut().for_each(|x| *x = 0.0);
                out[rng.random_range(0..features)] = nu.sqrt();
            }
            ThetaDistribution::AnisoGaussian { .. } => {
                let vars = self.gaussian_variances().expect("gaussian kind");
                for (x, var) in out.iter_mut().zip(vars) {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = var.sqrt() * z;
                }
            }
        }
    }

    /// Atoms and probabilities for the discrete kinds.
    pub fn support(&self) -> Option<Vec<(DVector<f64>, f64)>> {
        match *self {
            ThetaDistribution::FlippingSpike { nu1, nu2 } => Some(vec![
                (DVector::from_vec(vec![nu1.sqrt(), nu2.sqrt()]), 0.5),
                (DVector::from_vec(vec![nu1.sqrt(), -nu2.sqrt()]), 0.5),
            ]),
            ThetaDistribution::FlippingBasis { nu, features } => Some(
                (0..features)
                    .map(|f| {
                        let mut a = DVector::zeros(features);
                        a[f] = nu.sqrt();
                        (a, 1.0 / features as f64)
                    })
                    .collect(),
            ),
            ThetaDistribution::AnisoGaussian { .. } => None,
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match *self {
            ThetaDistribution::FlippingSpike { nu1, .. } => DVector::from_vec(vec![nu1.sqrt(), 0.0]),
            ThetaDistribution::FlippingBasis { nu, features } => {
                DVector::from_element(features, nu.sqrt() / features as f64)
            }
            ThetaDistribution::AnisoGaussian { features, .. } => DVector::zeros(features),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match *self {
            ThetaDistribution::FlippingSpike { nu2, .. } => DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, nu2])),
            ThetaDistribution::FlippingBasis { nu, features } => {
                let f = features as f64;
                DMatrix::identity(features, features) * (nu / f) - DMatrix::from_element(features, features, nu / (f * f))
            }
            ThetaDistribution::AnisoGaussian { .. } => {
                DMatrix::from_diagonal(&DVector::from_vec(self.gaussian_variances().expect("gaussian kind")))
            }
        }
    }

    /// E[θθᵀ].
    pub fn second_moment(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.covariance() + &mu * mu.transpose()
    }
}

/// Teacher spikes k*_f as rows of an F×D matrix, with their Gram matrix.
#[derive(Debug, Clone)]
pub struct SpikeEnsemble {
    pub spikes: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

impl SpikeEnsemble {
    pub fn new(spikes: DMatrix<f64>) -> Self {
        let gram = &spikes * spikes.transpose();
        SpikeEnsemble { spikes, gram }
    }

    pub fn features(&self) -> usize {
        self.spikes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.spikes.ncols()
    }
}

/// Draws F spikes with i.i.d. N(0, 1/D) coordinates.
pub fn sample_spikes(features: usize, dim: usize, rng: &mut LabRng) -> SpikeEnsemble {
    let scale = 1.0 / (dim as f64).sqrt();
    let spikes = DMatrix::from_fn(features, dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    SpikeEnsemble::new(spikes)
}

/// A batch of finite-D sequences.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// One L×D matrix per sample, rows are tokens.
    pub tokens: Vec<DMatrix<f64>>,
    /// N_b×D, row μ is X^μ_ε.
    pub labels: DMatrix<f64>,
    pub epsilons: Vec<usize>,
    /// N_b×F.
    pub thetas: DMatrix<f64>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Draws N_b sequences of length L: the relevant token carries Σ_f θ_f k*_f
/// on top of standard Gaussian noise, every other token is pure noise.
pub fn sample_sequences(
    spikes: &SpikeEnsemble,
    dist: &ThetaDistribution,
    seq_len: usize,
    batch: usize,
    rng: &mut LabRng,
) -> SequenceBatch {
    let f = spikes.features();
    let d = spikes.dim();
    let mut tokens = Vec::with_capacity(batch);
    let mut labels = DMatrix::zeros(batch, d);
    let mut epsilons = Vec::with_capacity(batch);
    let mut thetas = DMatrix::zeros(batch, f);
    let mut theta = vec![0.0; f];
    for mu in 0..batch {
        let eps = rng.random_range(0..seq_len);
        dist.sample_into(rng, &mut theta);
        let mut x = DMatrix::from_fn(seq_len, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for (ff, &th) in theta.iter().enumerate() {
            for j in 0..d {
                x[(eps, j)] += th * spikes.spikes[(ff, j)];
            }
        }
        labels.set_row(mu, &x.row(eps));
        for (ff, &th) in theta.iter().enumerate() {
            thetas[(mu, ff)] = th;
        }
        epsilons.push(eps);
        tokens.push(x);
    }
    SequenceBatch { tokens, labels, epsilons, thetas }
}

/// Samples per RNG stream when generating Monte-Carlo sets.
pub(crate) const CHUNK: usize = 4096;

/// Frozen low-dimensional draws (ε, θ, χ*, ξ) for population averages.
///
/// Estimators evaluate every draw twice, at ξ and at −ξ, so a set built for
/// `n_mc` evaluations holds ⌈n_mc/2⌉ draws. The antithetic pairing makes
/// the r-gradient vanish exactly at r = 0 instead of only in expectation.
#[derive(Debug, Clone)]
pub struct McSampleSet {
    /// Number of stored draws.
    pub n: usize,
    pub seq_len: usize,
    pub features: usize,
    pub max_heads: usize,
    pub seed: u64,
    pub epsilons: Vec<usize>,
    /// n×F, sample-major.
    pub thetas: Vec<f64>,
    /// n×F×L, index (i·F + f)·L + ℓ.
    pub chi_star: Vec<f64>,
    /// n×H_max×L, index (i·H_max + h)·L + ℓ.
    pub xi: Vec<f64>,
}

impl McSampleSet {
    /// Number of loss evaluations per pass (two per draw).
    pub fn evaluations(&self) -> usize {
        2 * self.n
    }

    #[inline]
    pub fn chi(&self, i: usize) -> &[f64] {
        let w = self.features * self.seq_len;
        &self.chi_star[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn xi_of(&self, i: usize) -> &[f64] {
        let w = self.max_heads * self.seq_len;
        &self.xi[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.features..(i + 1) * self.features]
    }
}

const XI_SALT: u64 = 0x5E_0000;

/// Generates a frozen sample set for `n_mc` evaluations. Chunk c of
/// `CHUNK` draws uses stream c of (seed, domain), so the set is identical
/// for any thread count. Sets that differ only in `max_heads` share ε, θ,
/// χ* and the ξ of their common heads.
pub fn sample_mc_set_in(
    dist: &ThetaDistribution,
    seq_len: usize,
    max_heads: usize,
    n_mc: usize,
    seed: u64,
    domain: Domain,
) -> McSampleSet {
    let n = n_mc.div_ceil(2);
    let f = dist.features();
    let (l, hm) = (seq_len, max_heads);
    let mut epsilons = vec![0usize; n];
    let mut thetas = vec![0.0; n * f];
    let mut chi_star = vec![0.0; n * f * l];
    let mut xi = vec![0.0; n * hm * l];
    let n_chunks = n.div_ceil(CHUNK);
    let xi_chunks: Vec<&mut [f64]> = if hm > 0 {
        xi.chunks_mut(CHUNK * hm * l).collect()
    } else {
        (0..n_chunks).map(|_| <&mut [f64]>::default()).collect()
    };
    epsilons
        .par_chunks_mut(CHUNK)
        .zip(thetas.par_chunks_mut(CHUNK * f))
        .zip(chi_star.par_chunks_mut(CHUNK * f * l))
        .zip(xi_chunks.into_par_iter())
        .enumerate()
        .for_each(|(c, (((eps, th), chi), xs))| {
            let mut r = rng::stream(seed, domain, c as u64);
            for j in 0..eps.len() {
                let e = r.random_range(0..l);
                eps[j] = e;
                let t = &mut th[j * f..(j + 1) * f];
                dist.sample_into(&mut r, t);
                let ch = &mut chi[j * f * l..(j + 1) * f * l];
                for ff in 0..f {
                    for ll in 0..l {
                        let z: f64 = r.sample(StandardNormal);
                        ch[ff * l + ll] = if ll == e { z + t[ff] } else { z };
                    }
                }
            }
            // One stream per head: the draws of head h do not depend on max_heads.
            for h in 0..hm {
                let mut r = rng::stream(rng::derive_seed(seed, XI_SALT + h as u64), domain, c as u64);
                for j in 0..eps.len() {
                    for x in xs[(j * hm + h) * l..(j * hm + h + 1) * l].iter_mut() {
                        *x = r.sample(StandardNormal);
                    }
                }
            }
        });
    McSampleSet { n, seq_len, features: f, max_heads, seed, epsilons, thetas, chi_star, xi }
}

/// Frozen sample set in the default Monte-Carlo domain.
pub fn sample_mc_set(dist: &ThetaDistribution, seq_len: usize, max_heads: usize, n_mc: usize, seed: u64) -> McSampleSet {
    sample_mc_set_in(dist, seq_len, max_heads, n_mc, seed, Domain::McSamples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn atom_moments(d: &ThetaDistribution) -> (DVector<f64>, DMatrix<f64>, f64) {
        let sup = d.support().unwrap();
        let f = d.features();
        let mut mean = DVector::zeros(f);
        let mut total = 0.0;
        for (a, p) in &sup {
            mean += a * *p;
            total += p;
        }
        let mut cov = DMatrix::zeros(f, f);
        for (a, p) in &sup {
            let c = a - &mean;
            cov += &c * c.transpose() * *p;
        }
        (mean, cov, total)
    }

    #[test]
    fn discrete_moments_match_atoms() {
        for d in [
            ThetaDistribution::flipping_spike(2.0, 3.0).unwrap(),
            ThetaDistribution::flipping_basis(10.0, 4).unwrap(),
            ThetaDistribution::flipping_basis(1.5, 2).unwrap(),
        ] {
            let (m, c, t) = atom_moments(&d);
            assert_relative_eq!(t, 1.0, epsilon = 1e-15);
            assert_relative_eq!(m, d.mean(), epsilon = 1e-14);
            assert_relative_eq!(c, d.covariance(), epsilon = 1e-14);
        }
    }

    #[test]
    fn basis_moments_closed_form() {
        let d = ThetaDistribution::flipping_basis(10.0, 4).unwrap();
        assert_relative_eq!(d.mean()[0], 10f64.sqrt() / 4.0);
        assert_relative_eq!(d.covariance()[(0, 0)], 10.0 * (0.25 - 1.0 / 16.0), epsilon = 1e-14);
        assert_relative_eq!(d.covariance()[(0, 1)], -10.0 / 16.0, epsilon = 1e-14);
    }

    #[test]
    fn aniso_variances() {
        let d = ThetaDistribution::aniso_gaussian(8.0, 2.0, 2).unwrap();
        assert_eq!(d.covariance(), DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 2.0])));
        assert_eq!(d.mean(), DVector::zeros(2));
        let d3 = ThetaDistribution::aniso_gaussian(20.0, 1.0, 3).unwrap();
        assert_eq!(d3.gaussian_variances().unwrap(), vec![20.0, 10.5, 1.0]);
        let d1 = ThetaDistribution::aniso_gaussian(5.0, 1.0, 1).unwrap();
        assert_eq!(d1.gaussian_variances().unwrap(), vec![5.0]);
        assert!(d.support().is_none());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ThetaDistribution::aniso_gaussian(0.0, 0.0, 2).is_err());
        assert!(ThetaDistribution::aniso_gaussian(1.0, 2.0, 2).is_err());
        assert!(ThetaDistribution::flipping_spike(-1.0, 1.0).is_err());
        assert!(ThetaDistribution::flipping_basis(1.0, 1).is_err());
        assert!(ThetaDistribution::flipping_basis(f64::NAN, 3).is_err());
    }

    #[test]
    fn flipping_spike_draws() {
        let d = ThetaDistribution::flipping_spike(2.0, 2.0).unwrap();
        let mut r = rng::stream(1, Domain::Theta, 0);
        let mut plus = 0;
        for _ in 0..2000 {
            let t = d.sample(&mut r);
            assert_eq!(t[0], 2f64.sqrt());
            assert_eq!(t[1].abs(), 2f64.sqrt());
            if t[1] > 0.0 {
                plus += 1;
            }
        }
        assert!((plus as f64 - 1000.0).abs() < 5.0 * 500f64.sqrt());
    }

    #[test]
    fn spikes_gram() {
        let mut r = rng::stream(3, Domain::Spikes, 0);
        let s = sample_spikes(2, 10_000, &mut r);
        let tol = 5.0 / 100.0;
        assert!((s.gram[(0, 0)] - 1.0).abs() < tol);
        assert!((s.gram[(1, 1)] - 1.0).abs() < tol);
        assert!(s.gram[(0, 1)].abs() < tol);
        assert_eq!(s.gram, s.gram.transpose());

        let one = sample_spikes(1, 1, &mut r);
        assert_relative_eq!(one.gram[(0, 0)], one.spikes[(0, 0)].powi(2));

        let a = sample_spikes(2, 50, &mut rng::stream(9, Domain::Spikes, 0));
        let b = sample_spikes(2, 50, &mut rng::stream(9, Domain::Spikes, 0));
        assert_eq!(a.spikes, b.spikes);
    }

    #[test]
    fn sequences_plant_signal_on_label() {
        let mut r = rng::stream(4, Domain::Spikes, 0);
        let spikes = sample_spikes(2, 10_000, &mut r);
        let d = ThetaDistribution::flipping_spike(2.0, 2.0).unwrap();
        let batch = sample_sequences(&spikes, &d, 3, 1000, &mut r);
        let mut mean = 0.0;
        for mu in 0..batch.len() {
            assert_eq!(batch.labels.row(mu), batch.tokens[mu].row(batch.epsilons[mu]));
            mean += (batch.labels.row(mu) * spikes.spikes.row(0).transpose())[0];
        }
        mean /= batch.len() as f64;
        assert!((mean - 2f64.sqrt()).abs() < 0.1, "mean projection {mean}");
    }

    #[test]
    fn mc_set_reproducible_and_centered() {
        let d = ThetaDistribution::flipping_basis(10.0, 4).unwrap();
        let a = sample_mc_set(&d, 5, 2, 10_000, 11);
        let b = sample_mc_set(&d, 5, 2, 10_000, 11);
        assert_eq!(a.chi_star, b.chi_star);
        assert_eq!(a.xi, b.xi);
        assert_eq!(a.epsilons, b.epsilons);
        let no_heads = sample_mc_set(&d, 5, 0, 10_000, 11);
        assert!(no_heads.xi.is_empty());
        assert_eq!(no_heads.chi_star, a.chi_star);
        let wide = sample_mc_set(&d, 5, 4, 10_000, 11);
        assert_eq!(wide.epsilons, a.epsilons);
        for i in [0, 77, a.n - 1] {
            assert_eq!(&wide.xi_of(i)[..10], a.xi_of(i));
        }

        let mean = d.mean();
        let var = d.covariance();
        let n = a.n as f64;
        for f in 0..4 {
            let m: f64 = (0..a.n).map(|i| a.chi(i)[f * 5 + a.epsilons[i]]).sum::<f64>() / n;
            let tol = 3.0 * (1.0 + var[(f, f)]).sqrt() / n.sqrt();
            assert!((m - mean[f]).abs() < tol, "f={f} mean {m}");
        }
        // Noise part is standard normal.
        let mut s = 0.0;
        let mut s2 = 0.0;
        let mut cnt = 0.0;
        for i in 0..a.n {
            for f in 0..4 {
                for l in 0..5 {
                    let shift = if l == a.epsilons[i] { a.theta(i)[f] } else { 0.0 };
                    let z = a.chi(i)[f * 5 + l] - shift;
                    s += z;
                    s2 += z * z;
                    cnt += 1.0;
                }
            }
        }
        assert!((s / cnt).abs() < 5.0 / cnt.sqrt());
        assert!((s2 / cnt - 1.0).abs() < 5.0 * 2f64.sqrt() / cnt.sqrt());
    }
}

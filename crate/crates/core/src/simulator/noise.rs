use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FieldSample, SimError};
use crate::autodiff::{logistic, Tape, Tensor, Var};
use crate::rng::RngStream;

/// Diagonal measurement-noise model over `(x1, x2, d, log_m)`.
///
/// The minimum useful integration time follows an inverse-square flux law,
/// `r_min = clamp(r0 · (d / d_ref)² / (m / m_ref), r_floor, r_cap)` with
/// `m = exp(mass_scale · log_m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub prior_var: [f64; 4],
    pub post_var: [f64; 4],
    /// Integration time (minutes) at `d = d_ref`, `log_m = log_m_ref`.
    pub r0: f64,
    pub d_ref: f64,
    pub log_m_ref: f64,
    /// Natural-log mass range spanned by the standardized `log_m ∈ [0, 1]`.
    pub mass_scale: f64,
    pub r_floor: f64,
    pub r_cap: f64,
    /// Width (minutes) of the logistic transition in the smooth model.
    pub smooth_width: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            prior_var: [0.0, 0.0, 0.1, 0.25],
            post_var: [0.0, 0.0, 0.001, 0.1],
            // Median r_min of the default field population is 10 minutes.
            r0: 13.295,
            d_ref: 0.5,
            log_m_ref: 0.25,
            mass_scale: 100f64.ln(),
            r_floor: 1.0,
            r_cap: 60.0,
            smooth_width: 2.0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.prior_var.iter().chain(&self.post_var).all(|&v| v >= 0.0)
            && self.r0 > 0.0
            && self.d_ref > 0.0
            && self.r_floor >= 0.0
            && self.r_floor <= self.r_cap
            && self.smooth_width > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid noise model {self:?}")))
        }
    }

    /// Flux-law integration time before clamping.
    pub fn r_min_unclamped(&self, d: f64, log_m: f64) -> f64 {
        let dist = d / self.d_ref;
        self.r0 * dist * dist * (-self.mass_scale * (log_m - self.log_m_ref)).exp()
    }

    pub fn r_min(&self, d: f64, log_m: f64) -> f64 {
        self.r_min_unclamped(d, log_m).clamp(self.r_floor, self.r_cap)
    }

    /// A galaxy whose requirement exceeds the longest integration can never
    /// be measured.
    pub fn is_observable(&self, d: f64, log_m: f64) -> bool {
        self.r_min_unclamped(d, log_m) <= self.r_cap
    }

    /// Hard threshold: prior variances below `r_min`, posterior at or above it.
    pub fn posterior_var_step(&self, r: f64, d: f64, log_m: f64) -> [f64; 4] {
        if self.is_observable(d, log_m) && r >= self.r_min(d, log_m) {
            self.post_var
        } else {
            self.prior_var
        }
    }

    /// Logistic interpolation between prior and posterior variances centred
    /// on `r_min`; differentiable in `r`.
    pub fn posterior_var_smooth(&self, r: f64, d: f64, log_m: f64) -> [f64; 4] {
        let s = logistic((self.r_min(d, log_m) - r) / self.smooth_width);
        let mut out = [0.0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.post_var[i] + (self.prior_var[i] - self.post_var[i]) * s;
        }
        out
    }
}

/// `v′ = v + ε`, `ε ~ N(0, prior_var)` independently per galaxy.
pub fn apply_prior_noise(field: &FieldSample, noise: &NoiseModel, rng: &mut RngStream) -> Vec<[f64; 4]> {
    let sd = noise.prior_var.map(f64::sqrt);
    field
        .galaxies
        .iter()
        .map(|g| {
            let mut v = g.features();
            for (vi, s) in v.iter_mut().zip(sd) {
                let z: f64 = rng.sample(StandardNormal);
                *vi += s * z;
            }
            v
        })
        .collect()
}

/// Standard-normal draws for the `(d, log_m)` posterior noise, independent of
/// the allocation so the noise scale can be differentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws {
    pub d: Vec<f64>,
    pub log_m: Vec<f64>,
}

pub fn posterior_noise_draws(n: usize, rng: &mut RngStream) -> PosteriorDraws {
    let mut d = Vec::with_capacity(n);
    let mut log_m = Vec::with_capacity(n);
    for _ in 0..n {
        d.push(rng.sample(StandardNormal));
        log_m.push(rng.sample(StandardNormal));
    }
    PosteriorDraws { d, log_m }
}

/// Records `(d″, log_m″) = (d, log_m) + √Σ_smooth(r) ⊙ z` on the tape.
///
/// `allocations` is an `[N × 1]` column; the result is `[N × 2]`. Positions
/// carry zero variance and are returned unchanged by the caller.
pub fn apply_posterior_noise_with(
    tape: &mut Tape,
    field: &FieldSample,
    allocations: Var,
    noise: &NoiseModel,
    draws: &PosteriorDraws,
) -> Result<Var, SimError> {
    let n = field.len();
    let r_min: Vec<f64> = field.galaxies.iter().map(|g| noise.r_min(g.d, g.log_m)).collect();
    let r_min = tape.constant(Tensor::column(&r_min));
    let gap = tape.sub(r_min, allocations)?;
    let t = tape.scale(gap, 1.0 / noise.smooth_width);
    let s = tape.sigmoid(t);

    let mut cols = Vec::with_capacity(2);
    for (feature, z) in [(2usize, &draws.d), (3usize, &draws.log_m)] {
        let prior = noise.prior_var[feature];
        let post = noise.post_var[feature];
        let var = tape.scale(s, prior - post);
        let var = tape.add_scalar(var, post);
        let sd = tape.sqrt(var);
        let z = tape.constant(Tensor::column(&z[..n]));
        let eps = tape.mul(sd, z)?;
        let truth: Vec<f64> = field.galaxies.iter().map(|g| g.features()[feature]).collect();
        let truth = tape.constant(Tensor::column(&truth));
        cols.push(tape.add(truth, eps)?);
    }
    Ok(tape.concat_cols(&cols)?)
}

/// [`apply_posterior_noise_with`] drawing `z` from `rng`.
pub fn apply_posterior_noise(
    tape: &mut Tape,
    field: &FieldSample,
    allocations: Var,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Var, SimError> {
    let draws = posterior_noise_draws(field.len(), rng);
    apply_posterior_noise_with(tape, field, allocations, noise, &draws)
}

/// Posterior state under the hard-threshold model, all four features.
pub fn apply_posterior_noise_step(
    field: &FieldSample,
    allocations: &[f64],
    noise: &NoiseModel,
    draws: &PosteriorDraws,
) -> Vec<[f64; 4]> {
    field
        .galaxies
        .iter()
        .zip(allocations)
        .enumerate()
        .map(|(i, (g, &r))| {
            let var = noise.posterior_var_step(r, g.d, g.log_m);
            let mut v = g.features();
            v[2] += var[2].sqrt() * draws.d[i];
            v[3] += var[3].sqrt() * draws.log_m[i];
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::simulator::Galaxy;

    fn field_of(n: usize, d: f64, log_m: f64) -> FieldSample {
        FieldSample {
            phi: 0.3,
            galaxies: (0..n)
                .map(|i| Galaxy {
                    x1: i as f64 / n as f64,
                    x2: 0.5,
                    d,
                    log_m,
                })
                .collect(),
            origin: None,
        }
    }

    #[test]
    fn r_min_anchor_floor_and_inverse_square() {
        let nm = NoiseModel::default();
        assert!((nm.r_min(nm.d_ref, nm.log_m_ref) - nm.r0).abs() < 1e-12);
        assert_eq!(nm.r_min(1e-6, 0.3), 1.0);
        let a = nm.r_min_unclamped(0.2, 0.4);
        let b = nm.r_min_unclamped(0.4, 0.4);
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(nm.r_min(0.3, 0.2) < nm.r_min(0.6, 0.2));
        assert!(nm.r_min(0.6, 0.5) < nm.r_min(0.6, 0.2));
    }

    #[test]
    fn step_model_branches() {
        let nm = NoiseModel::default();
        let (d, lm) = (0.5, 0.25);
        assert_eq!(nm.posterior_var_step(0.0, d, lm), [0.0, 0.0, 0.1, 0.25]);
        assert_eq!(nm.posterior_var_step(59.0, d, lm), [0.0, 0.0, 0.001, 0.1]);
        let rm = nm.r_min(d, lm);
        assert_eq!(nm.posterior_var_step(rm, d, lm), nm.post_var);
        assert_eq!(nm.posterior_var_step(rm - 1e-9, d, lm), nm.prior_var);
        // requirement beyond 60 minutes: never observed
        assert!(!nm.is_observable(1.0, 0.0));
        assert_eq!(nm.posterior_var_step(60.0, 1.0, 0.0), nm.prior_var);
    }

    #[test]
    fn smooth_model_midpoint_and_saturation() {
        let nm = NoiseModel::default();
        let (d, lm) = (0.5, 0.25);
        let rm = nm.r_min(d, lm);
        assert!((nm.posterior_var_smooth(rm, d, lm)[2] - 0.0505).abs() < 1e-15);
        let far = nm.posterior_var_smooth(rm + 10.0 * nm.smooth_width, d, lm)[2];
        assert!((far - 0.001).abs() < 1e-4);
    }

    #[test]
    fn prior_noise_keeps_positions() {
        let nm = NoiseModel::default();
        let f = field_of(50, 0.5, 0.3);
        let v = apply_prior_noise(&f, &nm, &mut substream(1, "prior", 0));
        for (g, vi) in f.galaxies.iter().zip(&v) {
            assert_eq!(vi[0], g.x1);
            assert_eq!(vi[1], g.x2);
        }
    }

    #[test]
    fn prior_noise_std_matches_variance() {
        let nm = NoiseModel::default();
        let f = field_of(100_000, 0.5, 0.3);
        let v = apply_prior_noise(&f, &nm, &mut substream(2, "prior", 0));
        let n = v.len() as f64;
        let res: Vec<f64> = v.iter().map(|x| x[2] - 0.5).collect();
        let mean = res.iter().sum::<f64>() / n;
        let sd = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd / 0.1f64.sqrt() - 1.0).abs() < 0.02, "sd {sd}");
        // neighbouring galaxies uncorrelated
        let pairs = 10_000;
        let (a, b): (Vec<f64>, Vec<f64>) = (0..pairs).map(|i| (res[2 * i], res[2 * i + 1])).unzip();
        let corr = correlation(&a, &b);
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn posterior_d_variance(r: f64) -> f64 {
        let nm = NoiseModel::default();
        let n = 10_000;
        let f = field_of(n, 0.5, 0.25);
        let draws = posterior_noise_draws(n, &mut substream(3, "post", 0));
        let mut tape = Tape::new();
        let alloc = tape.constant(Tensor::column(&vec![r; n]));
        let out = apply_posterior_noise_with(&mut tape, &f, alloc, &nm, &draws).unwrap();
        let v = tape.value(out);
        (0..n).map(|i| (v.get2(i, 0) - 0.5).powi(2)).sum::<f64>() / n as f64
    }

    #[test]
    fn posterior_noise_limits() {
        let zero = posterior_d_variance(0.0);
        assert!((zero / 0.1 - 1.0).abs() < 0.05, "{zero}");
        let large = posterior_d_variance(60.0);
        assert!((large / 0.001 - 1.0).abs() < 0.05, "{large}");
    }

    #[test]
    fn step_posterior_uses_same_draws() {
        let nm = NoiseModel::default();
        let f = field_of(4, 0.5, 0.25);
        let draws = posterior_noise_draws(4, &mut substream(3, "post", 1));
        let v = apply_posterior_noise_step(&f, &[0.0, 60.0, 0.0, 60.0], &nm, &draws);
        assert!((v[0][2] - (0.5 + 0.1f64.sqrt() * draws.d[0])).abs() < 1e-15);
        assert!((v[1][2] - (0.5 + 0.001f64.sqrt() * draws.d[1])).abs() < 1e-15);
        assert_eq!(v[2][0], f.galaxies[2].x1);
    }
}

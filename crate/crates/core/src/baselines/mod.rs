//! Classical allocation policies: a luminosity threshold and a Beta-template
//! selection, both granting per-galaxy time by the greedy gain-per-minute
//! rule, plus a genetic algorithm to tune their parameters.
//!
//! Policies only see the prior state `v′`, so luminosity, `r_min` and
//! observability are all estimated from noisy `(d′, log_m′)`.

mod ga;

pub use ga::{ga_optimize, write_ga_history, GaConfig, GaGeneration, GaResult};

use rand::Rng;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::simulator::NoiseModel;

/// Floor on distance inside the luminosity.
pub const DISTANCE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("invalid Beta-template parameters {0:?}")]
    InvalidTemplate([f64; 4]),
    #[error("invalid luminosity threshold {0}")]
    InvalidThreshold(f64),
    #[error("genome has {got} genes, expected {expected}")]
    GenomeLength { expected: usize, got: usize },
    #[error("invalid GA config: {0}")]
    GaConfig(String),
}

/// `l = m / max(d, ε)²` with `m = exp(mass_scale · log_m)`.
pub fn luminosity(log_m: f64, d: f64, mass_scale: f64) -> f64 {
    let d = d.max(DISTANCE_FLOOR);
    (mass_scale * log_m).exp() / (d * d)
}

/// Candidate integration times `{step, 2·step, …, max}` minutes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub step: f64,
    pub max: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { step: 1.0, max: 60.0 }
    }
}

impl TimeGrid {
    pub fn len(&self) -> usize {
        (self.max / self.step + 1e-9).floor() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.step
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// Gain per minute `1/Σ_d(r) / r` under the hard-threshold model.
pub fn gain_per_minute(r: f64, d: f64, log_m: f64, noise: &NoiseModel) -> f64 {
    1.0 / noise.posterior_var_step(r, d, log_m)[2] / r
}

/// Grid maximizer of [`gain_per_minute`], ties toward smaller `r`.
///
/// The objective is `c/r` on each side of the threshold, so only the first
/// grid point and the first point at or above `r_min` can win.
pub fn greedy_allocation(d: f64, log_m: f64, noise: &NoiseModel, grid: &TimeGrid) -> f64 {
    let first = grid.point(0);
    if !noise.is_observable(d, log_m) {
        return first;
    }
    let r_min = noise.r_min(d, log_m);
    let idx = ((r_min / grid.step - 1e-12).ceil() as usize).max(1) - 1;
    if idx >= grid.len() {
        return first;
    }
    let threshold = grid.point(idx);
    if gain_per_minute(threshold, d, log_m, noise) > gain_per_minute(first, d, log_m, noise) {
        threshold
    } else {
        first
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline1Params {
    pub l_min: f64,
}

impl Baseline1Params {
    /// The single gene is `log10(l_min)`.
    pub fn from_genome(genome: &[f64]) -> Result<Self, BaselineError> {
        match genome {
            &[g] => Ok(Self { l_min: 10f64.powf(g) }),
            _ => Err(BaselineError::GenomeLength {
                expected: 1,
                got: genome.len(),
            }),
        }
    }
}

/// Funds galaxies with `l > l_min` in descending luminosity with their greedy
/// time, stopping at the first grant that would exceed `budget`.
/// Unobservable galaxies are skipped.
pub fn baseline1_allocate(
    prior: &[[f64; 4]],
    params: &Baseline1Params,
    budget: f64,
    noise: &NoiseModel,
    grid: &TimeGrid,
) -> Result<Vec<f64>, BaselineError> {
    if !(params.l_min >= 0.0) {
        return Err(BaselineError::InvalidThreshold(params.l_min));
    }
    let lum: Vec<f64> = prior.iter().map(|v| luminosity(v[3], v[2], noise.mass_scale)).collect();
    let mut order: Vec<usize> = (0..prior.len()).filter(|&i| lum[i] > params.l_min).collect();
    order.sort_by(|&a, &b| lum[b].total_cmp(&lum[a]).then(a.cmp(&b)));
    let mut alloc = vec![0.0; prior.len()];
    let mut used = 0.0;
    for i in order {
        let (d, log_m) = (prior[i][2], prior[i][3]);
        if !noise.is_observable(d, log_m) {
            continue;
        }
        let r = greedy_allocation(d, log_m, noise, grid);
        if used + r > budget {
            break;
        }
        used += r;
        alloc[i] = r;
    }
    Ok(alloc)
}

/// Beta-template shape parameters `(α, β, γ, δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline2Params {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Baseline2Params {
    pub fn from_genome(genome: &[f64]) -> Result<Self, BaselineError> {
        match genome {
            &[alpha, beta, gamma, delta] => Ok(Self { alpha, beta, gamma, delta }),
            _ => Err(BaselineError::GenomeLength {
                expected: 4,
                got: genome.len(),
            }),
        }
    }

    /// `α, β > 0` and `γ + δx > 0` on `[0, 1]`.
    pub fn validate(&self) -> Result<(), BaselineError> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.gamma > 0.0
            && self.gamma + self.delta > 0.0
            && [self.alpha, self.beta, self.gamma, self.delta].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(BaselineError::InvalidTemplate([self.alpha, self.beta, self.gamma, self.delta]))
        }
    }

    /// One `(d_cand, log_m_cand)` draw.
    pub fn sample_candidate(&self, rng: &mut RngStream) -> Result<(f64, f64), BaselineError> {
        let invalid = || BaselineError::InvalidTemplate([self.alpha, self.beta, self.gamma, self.delta]);
        let d = rng.sample(Beta::new(self.alpha, self.beta).map_err(|_| invalid())?);
        let mass = Beta::new(self.gamma + self.delta * d, self.gamma + self.delta * (1.0 - d)).map_err(|_| invalid())?;
        Ok((d, rng.sample(mass)))
    }
}

/// Draws candidates one at a time, matches each to the nearest unmatched
/// galaxy in `(d′, log_m′)` and grants its greedy time, until a grant would
/// exceed `budget` or every galaxy is matched.
pub fn baseline2_allocate(
    prior: &[[f64; 4]],
    params: &Baseline2Params,
    budget: f64,
    noise: &NoiseModel,
    grid: &TimeGrid,
    rng: &mut RngStream,
) -> Result<Vec<f64>, BaselineError> {
    params.validate()?;
    let mut alloc = vec![0.0; prior.len()];
    let mut matched = vec![false; prior.len()];
    let mut used = 0.0;
    for _ in 0..prior.len() {
        let (dc, mc) = params.sample_candidate(rng)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in prior.iter().enumerate() {
            if matched[i] {
                continue;
            }
            let dist = (v[2] - dc).powi(2) + (v[3] - mc).powi(2);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let Some((j, _)) = best else { break };
        matched[j] = true;
        let (d, log_m) = (prior[j][2], prior[j][3]);
        if !noise.is_observable(d, log_m) {
            continue;
        }
        let r = greedy_allocation(d, log_m, noise, grid);
        if used + r > budget {
            break;
        }
        used += r;
        alloc[j] = r;
    }
    Ok(alloc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn noise() -> NoiseModel {
        NoiseModel::default()
    }

    fn galaxies(n: usize, seed: u64) -> Vec<[f64; 4]> {
        let mut rng = substream(seed, "gal", 0);
        (0..n)
            .map(|_| [0.5, 0.5, rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }

    #[test]
    fn luminosity_arithmetic() {
        let s = 100f64.ln();
        let log_m = 4f64.ln() / s;
        assert!((luminosity(log_m, 2.0, s) - 1.0).abs() < 1e-12);
        let l1 = luminosity(0.3, 0.4, s);
        assert!((luminosity(0.3, 0.8, s) - l1 / 4.0).abs() < 1e-12 * l1);
        assert!(luminosity(0.31, 0.4, s) > l1);
        assert_eq!(luminosity(0.3, -0.2, s), luminosity(0.3, DISTANCE_FLOOR, s));
    }

    #[test]
    fn greedy_returns_first_grid_point_at_threshold() {
        let nz = noise();
        for v in galaxies(300, 1) {
            let r = greedy_allocation(v[2], v[3], &nz, &TimeGrid::default());
            if nz.is_observable(v[2], v[3]) {
                assert_eq!(r, nz.r_min(v[2], v[3]).ceil());
            } else {
                assert_eq!(r, 1.0);
            }
        }
    }

    #[test]
    fn baseline1_respects_threshold_and_budget() {
        let nz = noise();
        let g = galaxies(200, 2);
        let grid = TimeGrid::default();
        let none = baseline1_allocate(&g, &Baseline1Params { l_min: f64::MAX }, 1000.0, &nz, &grid).unwrap();
        assert!(none.iter().all(|&r| r == 0.0));
        for h in [0.0, 10.0, 300.0, 1000.0] {
            let a = baseline1_allocate(&g, &Baseline1Params { l_min: 0.0 }, h, &nz, &grid).unwrap();
            assert!(a.iter().sum::<f64>() <= h);
        }
        let slack = baseline1_allocate(&g, &Baseline1Params { l_min: 50.0 }, 1e9, &nz, &grid).unwrap();
        for (v, r) in g.iter().zip(&slack) {
            let funded = luminosity(v[3], v[2], nz.mass_scale) > 50.0 && nz.is_observable(v[2], v[3]);
            assert_eq!(*r > 0.0, funded);
        }
    }

    #[test]
    fn baseline1_funds_brightest_first() {
        let nz = noise();
        let g = galaxies(100, 3);
        let grid = TimeGrid::default();
        let a = baseline1_allocate(&g, &Baseline1Params { l_min: 0.0 }, 200.0, &nz, &grid).unwrap();
        let lum = |i: usize| luminosity(g[i][3], g[i][2], nz.mass_scale);
        let faintest_funded = (0..g.len()).filter(|&i| a[i] > 0.0).map(lum).fold(f64::INFINITY, f64::min);
        let first_skip = (0..g.len())
            .filter(|&i| a[i] == 0.0 && nz.is_observable(g[i][2], g[i][3]))
            .map(lum)
            .fold(0.0, f64::max);
        assert!(faintest_funded > first_skip);
    }

    #[test]
    fn baseline1_threshold_scale_invariance() {
        let nz = noise();
        let g = galaxies(150, 4);
        let grid = TimeGrid::default();
        let a = baseline1_allocate(&g, &Baseline1Params { l_min: 30.0 }, 800.0, &nz, &grid).unwrap();
        // Rescaling l and l_min by c leaves the selection l > l_min unchanged.
        let c = 7.5;
        let lum: Vec<f64> = g.iter().map(|v| c * luminosity(v[3], v[2], nz.mass_scale)).collect();
        for (i, r) in a.iter().enumerate() {
            if *r > 0.0 {
                assert!(lum[i] > c * 30.0);
            }
        }
    }

    #[test]
    fn beta_template_validation() {
        let ok = Baseline2Params { alpha: 1.0, beta: 1.0, gamma: 2.0, delta: -1.5 };
        assert!(ok.validate().is_ok());
        for bad in [
            Baseline2Params { alpha: 0.0, ..ok },
            Baseline2Params { beta: -1.0, ..ok },
            Baseline2Params { delta: -2.5, ..ok },
            Baseline2Params { gamma: 0.0, delta: 1.0, ..ok },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn uniform_template_mean() {
        let p = Baseline2Params { alpha: 1.0, beta: 1.0, gamma: 2.0, delta: 0.0 };
        let mut rng = substream(5, "beta", 0);
        let mean = (0..10_000).map(|_| p.sample_candidate(&mut rng).unwrap().0).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn zero_coupling_decouples_mass() {
        let p = Baseline2Params { alpha: 2.0, beta: 2.0, gamma: 3.0, delta: 0.0 };
        let mut rng = substream(6, "beta", 0);
        let draws: Vec<(f64, f64)> = (0..20_000).map(|_| p.sample_candidate(&mut rng).unwrap()).collect();
        let near: Vec<f64> = draws.iter().filter(|(d, _)| *d < 0.5).map(|x| x.1).collect();
        let far: Vec<f64> = draws.iter().filter(|(d, _)| *d >= 0.5).map(|x| x.1).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&near) - mean(&far)).abs() < 0.01);
        let coupled = Baseline2Params { delta: 6.0, ..p };
        let draws: Vec<(f64, f64)> = (0..20_000).map(|_| coupled.sample_candidate(&mut rng).unwrap()).collect();
        let near: Vec<f64> = draws.iter().filter(|(d, _)| *d < 0.5).map(|x| x.1).collect();
        let far: Vec<f64> = draws.iter().filter(|(d, _)| *d >= 0.5).map(|x| x.1).collect();
        assert!(mean(&far) > mean(&near) + 0.05);
    }

    #[test]
    fn baseline2_matches_each_galaxy_once_within_budget() {
        let nz = noise();
        let g = galaxies(120, 7);
        let grid = TimeGrid::default();
        let p = Baseline2Params { alpha: 1.5, beta: 3.0, gamma: 2.0, delta: 1.0 };
        for h in [0.0, 50.0, 700.0, 1e9] {
            let a = baseline2_allocate(&g, &p, h, &nz, &grid, &mut substream(8, "b2", 0)).unwrap();
            assert!(a.iter().sum::<f64>() <= h);
            for (v, r) in g.iter().zip(&a) {
                if *r > 0.0 {
                    assert_eq!(*r, greedy_allocation(v[2], v[3], &nz, &grid));
                }
            }
        }
        let slack = baseline2_allocate(&g, &p, 1e9, &nz, &grid, &mut substream(8, "b2", 0)).unwrap();
        for (v, r) in g.iter().zip(&slack) {
            assert_eq!(*r > 0.0, nz.is_observable(v[2], v[3]));
        }
        let bad = Baseline2Params { alpha: -1.0, ..p };
        assert!(baseline2_allocate(&g, &bad, 10.0, &nz, &grid, &mut substream(8, "b2", 0)).is_err());
    }

    #[test]
    fn genome_decoding() {
        assert_eq!(Baseline1Params::from_genome(&[2.0]).unwrap().l_min, 100.0);
        assert!(Baseline1Params::from_genome(&[1.0, 2.0]).is_err());
        let p = Baseline2Params::from_genome(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((p.alpha, p.delta), (1.0, 4.0));
    }

    #[test]
    fn unobservable_gets_first_grid_point() {
        let nz = noise();
        assert!(!nz.is_observable(1.0, 0.0));
        assert_eq!(greedy_allocation(1.0, 0.0, &nz, &TimeGrid::default()), 1.0);
    }
}

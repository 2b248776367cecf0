//! Synthetic galaxy fields whose clustering is driven by the hidden
//! parameter φ, plus the prior and allocation-dependent posterior
//! measurement-noise models.
//!
//! Fields come from a Neyman–Scott style process: Poisson cluster centres
//! scattered uniformly over the circular field and the distance axis, each
//! spawning a Poisson number of offspring with Gaussian dispersion
//! `σ_c(φ)`, mixed with a uniform background holding fraction `1 − f(φ)` of
//! the expected count. Larger φ means more clustered galaxies in tighter
//! clusters.

mod io;
mod noise;

pub use io::{read_field_csv, read_field_meta, write_field, FieldMeta};
pub use noise::{
    apply_posterior_noise, apply_posterior_noise_step, apply_posterior_noise_with, apply_prior_noise,
    posterior_noise_draws, NoiseModel, PosteriorDraws,
};

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AutodiffError;
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("phi {phi} outside prior support [{low}, {high}]")]
    PhiOutOfSupport { phi: f64, low: f64, high: f64 },
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error("no field with a galaxy count inside the configured bounds after {0} draws")]
    CountBounds(usize),
    #[error("field i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Parse(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Standardized galaxy features, each in `[0, 1]` for true values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Galaxy {
    pub x1: f64,
    pub x2: f64,
    pub d: f64,
    pub log_m: f64,
}

impl Galaxy {
    pub fn features(&self) -> [f64; 4] {
        [self.x1, self.x2, self.d, self.log_m]
    }

    pub fn from_features(v: [f64; 4]) -> Self {
        Self {
            x1: v[0],
            x2: v[1],
            d: v[2],
            log_m: v[3],
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x1, self.x2]
    }
}

/// One simulated field and the parameter that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub phi: f64,
    pub galaxies: Vec<Galaxy>,
    /// Seed, label and index of the stream that produced the field, if known.
    pub origin: Option<(u64, String, u64)>,
}

impl FieldSample {
    pub fn len(&self) -> usize {
        self.galaxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.galaxies.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.galaxies.iter().map(Galaxy::position).collect()
    }

    /// Same field with galaxy `i` moved to slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut galaxies = self.galaxies.clone();
        for (i, g) in self.galaxies.iter().enumerate() {
            galaxies[perm[i]] = *g;
        }
        Self {
            phi: self.phi,
            galaxies,
            origin: self.origin.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub phi_min: f64,
    pub phi_max: f64,
    /// Expected galaxies per field (after subsampling).
    pub mean_count: f64,
    /// Expected offspring per cluster centre.
    pub mean_cluster_size: f64,
    /// `σ_c(φ) = spread_base + spread_slope · (1 − φ̃)`
    pub spread_base: f64,
    pub spread_slope: f64,
    /// `f(φ) = fraction_base + fraction_slope · φ̃`
    pub fraction_base: f64,
    pub fraction_slope: f64,
    /// Angular radius of the field in degrees; the disk is mapped onto the
    /// unit square (centre 0.5, radius 0.5).
    pub field_radius_deg: f64,
    /// `log_m ~ Beta(mass_alpha, mass_beta)`
    pub mass_alpha: f64,
    pub mass_beta: f64,
    /// Optional galaxy-count window; fields outside it are redrawn.
    pub min_count: Option<usize>,
    pub max_count: Option<usize>,
    pub max_redraws: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            phi_min: 0.1,
            phi_max: 0.5,
            mean_count: 2000.0,
            mean_cluster_size: 10.0,
            spread_base: 0.05,
            spread_slope: 0.5,
            fraction_base: 0.3,
            fraction_slope: 0.5,
            field_radius_deg: 7.5,
            mass_alpha: 2.0,
            mass_beta: 5.0,
            min_count: None,
            max_count: None,
            max_redraws: 1000,
        }
    }
}

impl SimulatorConfig {
    /// Fields of roughly 100–300 galaxies for laptop-scale training.
    pub fn desk() -> Self {
        Self {
            mean_count: 200.0,
            min_count: Some(100),
            max_count: Some(300),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(0.0 < self.phi_min && self.phi_min < self.phi_max && self.phi_max < 1.0) {
            return bad("phi bounds must satisfy 0 < phi_min < phi_max < 1");
        }
        if self.mean_count <= 0.0 || self.mean_cluster_size <= 0.0 {
            return bad("mean_count and mean_cluster_size must be positive");
        }
        if self.mass_alpha <= 0.0 || self.mass_beta <= 0.0 {
            return bad("mass Beta parameters must be positive");
        }
        if let (Some(lo), Some(hi)) = (self.min_count, self.max_count) {
            if lo > hi {
                return bad("min_count > max_count");
            }
        }
        Ok(())
    }

    /// φ rescaled to `[0, 1]` over the prior range.
    pub fn phi_unit(&self, phi: f64) -> f64 {
        (phi - self.phi_min) / (self.phi_max - self.phi_min)
    }

    pub fn cluster_spread(&self, phi: f64) -> f64 {
        self.spread_base + self.spread_slope * (1.0 - self.phi_unit(phi))
    }

    pub fn clustered_fraction(&self, phi: f64) -> f64 {
        (self.fraction_base + self.fraction_slope * self.phi_unit(phi)).clamp(0.0, 1.0)
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// φ ~ Uniform(phi_min, phi_max).
pub fn sample_phi(cfg: &SimulatorConfig, rng: &mut RngStream) -> f64 {
    rng.random_range(cfg.phi_min..=cfg.phi_max)
}

const CENTER: f64 = 0.5;
const RADIUS: f64 = 0.5;

fn in_disk(x: f64, y: f64) -> bool {
    let (dx, dy) = (x - CENTER, y - CENTER);
    dx * dx + dy * dy <= RADIUS * RADIUS
}

fn uniform_in_disk(rng: &mut RngStream) -> (f64, f64) {
    loop {
        let x: f64 = rng.random();
        let y: f64 = rng.random();
        if in_disk(x, y) {
            return (x, y);
        }
    }
}

fn poisson(mean: f64, rng: &mut RngStream) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

const MAX_SCATTER_TRIES: usize = 10_000;

/// Gaussian offspring around `center`, redrawn until it lands in the field.
fn scatter(center: (f64, f64, f64), spread: f64, rng: &mut RngStream) -> (f64, f64, f64) {
    let mut pos = None;
    for _ in 0..MAX_SCATTER_TRIES {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        let (x, y) = (center.0 + spread * dx, center.1 + spread * dy);
        if in_disk(x, y) {
            pos = Some((x, y));
            break;
        }
    }
    let (x, y) = pos.unwrap_or_else(|| uniform_in_disk(rng));
    let mut d = None;
    for _ in 0..MAX_SCATTER_TRIES {
        let z: f64 = rng.sample(StandardNormal);
        let v = center.2 + spread * z;
        if (0.0..=1.0).contains(&v) {
            d = Some(v);
            break;
        }
    }
    let d = d.unwrap_or_else(|| rng.random());
    (x, y, d)
}

fn draw_field(phi: f64, cfg: &SimulatorConfig, rng: &mut RngStream) -> Vec<Galaxy> {
    let frac = cfg.clustered_fraction(phi);
    let spread = cfg.cluster_spread(phi);
    let mass = Beta::new(cfg.mass_alpha, cfg.mass_beta).expect("validated");
    let mut galaxies = Vec::with_capacity(cfg.mean_count as usize + 16);

    let n_background = poisson(cfg.mean_count * (1.0 - frac), rng);
    for _ in 0..n_background {
        let (x1, x2) = uniform_in_disk(rng);
        let d = rng.random();
        galaxies.push(Galaxy {
            x1,
            x2,
            d,
            log_m: mass.sample(rng),
        });
    }
    let n_centers = poisson(cfg.mean_count * frac / cfg.mean_cluster_size, rng);
    for _ in 0..n_centers {
        let (cx, cy) = uniform_in_disk(rng);
        let cd: f64 = rng.random();
        let size = poisson(cfg.mean_cluster_size, rng);
        for _ in 0..size {
            let (x1, x2, d) = scatter((cx, cy, cd), spread, rng);
            galaxies.push(Galaxy {
                x1,
                x2,
                d,
                log_m: mass.sample(rng),
            });
        }
    }
    galaxies
}

/// Draws one field for the given φ. Empty fields, and fields outside the
/// optional count window, are redrawn from the same stream.
pub fn simulate_field(phi: f64, cfg: &SimulatorConfig, rng: &mut RngStream) -> Result<FieldSample, SimError> {
    cfg.validate()?;
    if !(cfg.phi_min..=cfg.phi_max).contains(&phi) {
        return Err(SimError::PhiOutOfSupport {
            phi,
            low: cfg.phi_min,
            high: cfg.phi_max,
        });
    }
    let lo = cfg.min_count.unwrap_or(1).max(1);
    let hi = cfg.max_count.unwrap_or(usize::MAX);
    for _ in 0..cfg.max_redraws.max(1) {
        let galaxies = draw_field(phi, cfg, rng);
        if (lo..=hi).contains(&galaxies.len()) {
            return Ok(FieldSample {
                phi,
                galaxies,
                origin: None,
            });
        }
    }
    Err(SimError::CountBounds(cfg.max_redraws))
}

/// Samples φ and a field from dedicated substreams `(seed, label/phi, index)`
/// and `(seed, label/field, index)`.
pub fn simulate_indexed(
    cfg: &SimulatorConfig,
    seed: u64,
    label: &str,
    index: u64,
    fixed_phi: Option<f64>,
) -> Result<FieldSample, SimError> {
    let phi = match fixed_phi {
        Some(p) => p,
        None => sample_phi(cfg, &mut crate::rng::substream(seed, &format!("{label}/phi"), index)),
    };
    let mut rng = crate::rng::substream(seed, &format!("{label}/field"), index);
    let mut field = simulate_field(phi, cfg, &mut rng)?;
    field.origin = Some((seed, label.to_string(), index));
    Ok(field)
}

/// Mean distance from each galaxy to its nearest angular neighbour.
pub fn mean_nearest_neighbor_distance(field: &FieldSample) -> f64 {
    let pos = field.positions();
    let n = pos.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / n as f64
}

/// Mean number of other galaxies within `radius` in angular position.
pub fn mean_neighbors_within(field: &FieldSample, radius: f64) -> f64 {
    let pos = field.positions();
    let n = pos.len();
    if n == 0 {
        return 0.0;
    }
    let r2 = radius * radius;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if (pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2) <= r2 {
                pairs += 1;
            }
        }
    }
    2.0 * pairs as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn phi_draws_in_support_and_centered() {
        let cfg = SimulatorConfig::default();
        let mut rng = substream(11, "phi", 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let p = sample_phi(&cfg, &mut rng);
            assert!((0.1..=0.5).contains(&p));
            sum += p;
        }
        assert!((sum / n as f64 - 0.3).abs() < 0.002);
        let a: Vec<f64> = (0..5).map(|_| sample_phi(&cfg, &mut substream(3, "p", 0))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn features_stay_in_unit_interval() {
        let cfg = SimulatorConfig::desk();
        for (i, phi) in [0.1, 0.3, 0.5].into_iter().enumerate() {
            let f = simulate_field(phi, &cfg, &mut substream(2, "f", i as u64)).unwrap();
            assert!(!f.is_empty());
            for g in &f.galaxies {
                for v in g.features() {
                    assert!((0.0..=1.0).contains(&v), "{g:?}");
                }
                assert!(in_disk(g.x1, g.x2));
            }
        }
    }

    #[test]
    fn count_window_respected() {
        let cfg = SimulatorConfig::desk();
        for i in 0..20 {
            let f = simulate_field(0.5, &cfg, &mut substream(4, "f", i)).unwrap();
            assert!((100..=300).contains(&f.len()));
        }
    }

    #[test]
    fn phi_outside_prior_rejected() {
        let cfg = SimulatorConfig::default();
        assert!(matches!(
            simulate_field(0.9, &cfg, &mut substream(1, "f", 0)),
            Err(SimError::PhiOutOfSupport { .. })
        ));
    }

    #[test]
    fn spread_and_fraction_follow_phi() {
        let cfg = SimulatorConfig::default();
        assert!((cfg.cluster_spread(0.1) - 0.55).abs() < 1e-12);
        assert!((cfg.cluster_spread(0.5) - 0.05).abs() < 1e-12);
        assert!((cfg.clustered_fraction(0.1) - 0.3).abs() < 1e-12);
        assert!((cfg.clustered_fraction(0.5) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn indexed_fields_are_reproducible() {
        let cfg = SimulatorConfig::desk();
        let a = simulate_indexed(&cfg, 9, "train", 4, None).unwrap();
        let b = simulate_indexed(&cfg, 9, "train", 4, None).unwrap();
        assert_eq!(a, b);
        let c = simulate_indexed(&cfg, 9, "train", 5, None).unwrap();
        assert_ne!(a.galaxies, c.galaxies);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = SimulatorConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.mean_count = 123.0;
        assert_ne!(a.hash(), b.hash());
    }
}

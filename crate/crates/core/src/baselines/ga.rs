//! Real-valued genetic algorithm: tournament selection, single-point
//! crossover, Gaussian mutation and elitism.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each gene's range.
    pub mutation_scale: f64,
    /// Generations bred after the initial population.
    pub generations: usize,
    pub elitism: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            mutation_rate: 0.1,
            mutation_scale: 0.1,
            generations: 20,
            elitism: 1,
            tournament_size: 2,
            crossover_rate: 0.9,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |m: &str| Err(BaselineError::GaConfig(m.to_string()));
        if self.population < 2 {
            return bad("population must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.mutation_scale >= 0.0) {
            return bad("mutation scale must be >= 0");
        }
        if self.elitism >= self.population {
            return bad("elitism must be smaller than the population");
        }
        if self.tournament_size == 0 {
            return bad("tournament size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaGeneration {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_genome: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaResult {
    pub best_genome: Vec<f64>,
    pub best_fitness: f64,
    /// Generation 0 is the random initial population.
    pub history: Vec<GaGeneration>,
}

fn score(f: f64) -> f64 {
    if f.is_finite() {
        f
    } else {
        f64::NEG_INFINITY
    }
}

fn argmax(fitness: &[f64]) -> usize {
    let mut best = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f > fitness[best] {
            best = i;
        }
    }
    best
}

fn summarize(generation: usize, pop: &[Vec<f64>], fitness: &[f64]) -> GaGeneration {
    let best = argmax(fitness);
    let finite: Vec<f64> = fitness.iter().copied().filter(|f| f.is_finite()).collect();
    let mean_fitness = if finite.is_empty() {
        f64::NEG_INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    GaGeneration {
        generation,
        best_fitness: fitness[best],
        mean_fitness,
        best_genome: pop[best].clone(),
    }
}

/// Maximizes `fitness` over the box `bounds`. Non-finite fitness counts as
/// −∞. Elites carry their fitness forward without re-evaluation, so a
/// deterministic fitness makes the best-so-far curve non-decreasing.
pub fn ga_optimize<F>(mut fitness: F, cfg: &GaConfig, bounds: &[(f64, f64)], rng: &mut RngStream) -> Result<GaResult, BaselineError>
where
    F: FnMut(&[f64]) -> f64,
{
    cfg.validate()?;
    if bounds.is_empty() || bounds.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(BaselineError::GaConfig(format!("invalid bounds {bounds:?}")));
    }
    let genes = bounds.len();
    let mut pop: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
        .collect();
    let mut fit: Vec<f64> = pop.iter().map(|g| score(fitness(g))).collect();
    let mut history = vec![summarize(0, &pop, &fit)];
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    for generation in 1..=cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        let mut next: Vec<Vec<f64>> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<Option<f64>> = order[..cfg.elitism].iter().map(|&i| Some(fit[i])).collect();

        let tournament = |rng: &mut RngStream| {
            let mut best = rng.random_range(0..pop.len());
            for _ in 1..cfg.tournament_size {
                let c = rng.random_range(0..pop.len());
                if fit[c] > fit[best] {
                    best = c;
                }
            }
            best
        };
        while next.len() < cfg.population {
            let (pa, pb) = (tournament(rng), tournament(rng));
            let mut a = pop[pa].clone();
            let mut b = pop[pb].clone();
            if genes > 1 && rng.random::<f64>() < cfg.crossover_rate {
                let cut = rng.random_range(1..genes);
                for g in cut..genes {
                    std::mem::swap(&mut a[g], &mut b[g]);
                }
            }
            for child in [a, b] {
                if next.len() == cfg.population {
                    break;
                }
                let mut child = child;
                for (g, &(lo, hi)) in child.iter_mut().zip(bounds) {
                    if rng.random::<f64>() < cfg.mutation_rate {
                        *g += cfg.mutation_scale * (hi - lo) * std_normal.sample(rng);
                        *g = g.clamp(lo, hi);
                    }
                }
                next.push(child);
                next_fit.push(None);
            }
        }
        fit = next
            .iter()
            .zip(next_fit)
            .map(|(g, f)| f.unwrap_or_else(|| score(fitness(g))))
            .collect();
        pop = next;
        history.push(summarize(generation, &pop, &fit));
    }

    let mut best = 0;
    for (i, h) in history.iter().enumerate() {
        if h.best_fitness > history[best].best_fitness {
            best = i;
        }
    }
    Ok(GaResult {
        best_genome: history[best].best_genome.clone(),
        best_fitness: history[best].best_fitness,
        history,
    })
}

/// `generation,best_fitness,mean_fitness,gene_0,…` one row per generation.
pub fn write_ga_history(path: &Path, history: &[GaGeneration]) -> std::io::Result<()> {
    let genes = history.first().map_or(0, |h| h.best_genome.len());
    let mut out = String::from("generation,best_fitness,mean_fitness");
    for g in 0..genes {
        write!(out, ",gene_{g}").expect("string write");
    }
    out.push('\n');
    for h in history {
        write!(out, "{},{},{}", h.generation, h.best_fitness, h.mean_fitness).expect("string write");
        for g in &h.best_genome {
            write!(out, ",{g}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn shapes_and_elitism() {
        let cfg = GaConfig::default();
        let bounds = [(0.0, 1.0), (-2.0, 2.0), (5.0, 6.0)];
        let r = ga_optimize(
            |g| -(g[0] - 0.2).powi(2) - g[1].abs() - (g[2] - 5.5).powi(2),
            &cfg,
            &bounds,
            &mut substream(1, "ga", 0),
        )
        .unwrap();
        assert_eq!(r.history.len(), cfg.generations + 1);
        for w in r.history.windows(2) {
            assert!(w[1].best_fitness >= w[0].best_fitness);
        }
        for h in &r.history {
            assert_eq!(h.best_genome.len(), 3);
            for (g, (lo, hi)) in h.best_genome.iter().zip(bounds) {
                assert!((lo..=hi).contains(g));
            }
        }
    }

    #[test]
    fn non_finite_fitness_is_worst() {
        let r = ga_optimize(
            |g| if g[0] < 0.5 { f64::NAN } else { g[0] },
            &GaConfig::default(),
            &[(0.0, 1.0)],
            &mut substream(2, "ga", 0),
        )
        .unwrap();
        assert!(r.best_genome[0] >= 0.5);
        assert!(r.best_fitness.is_finite());
    }

    #[test]
    fn evaluation_count() {
        let cfg = GaConfig::default();
        let mut calls = 0;
        ga_optimize(
            |g| {
                calls += 1;
                g[0]
            },
            &cfg,
            &[(0.0, 1.0)],
            &mut substream(3, "ga", 0),
        )
        .unwrap();
        assert_eq!(calls, cfg.population + cfg.generations * (cfg.population - cfg.elitism));
    }

    #[test]
    fn rejects_bad_config() {
        let f = |g: &[f64]| g[0];
        let mut rng = substream(4, "ga", 0);
        for cfg in [
            GaConfig { population: 1, ..GaConfig::default() },
            GaConfig { mutation_rate: 1.5, ..GaConfig::default() },
            GaConfig { elitism: 20, ..GaConfig::default() },
        ] {
            assert!(ga_optimize(f, &cfg, &[(0.0, 1.0)], &mut rng).is_err());
        }
        assert!(ga_optimize(f, &GaConfig::default(), &[(1.0, 0.0)], &mut rng).is_err());
    }

    #[test]
    fn history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let r = ga_optimize(|g| g[0] + g[1], &GaConfig { generations: 2, ..GaConfig::default() }, &[(0.0, 1.0), (0.0, 1.0)], &mut substream(5, "ga", 0)).unwrap();
        let p = dir.path().join("h.csv");
        write_ga_history(&p, &r.history).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "generation,best_fitness,mean_fitness,gene_0,gene_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }
}

//! Precision of φ̂ over held-out fields for the trained allocator, the two
//! baselines and an all-zero allocation, all read out by the same trained
//! inference network under the hard-threshold noise model. Also produces the
//! allocation histogram and the mass–distance allocation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::baselines::{
    baseline1_allocate, baseline2_allocate, ga_optimize, BaselineError, Baseline1Params, Baseline2Params, GaConfig, GaResult,
    TimeGrid,
};
use crate::models::{allocate, infer_phi, GnnHyperparams};
use crate::rng::substream;
use crate::simulator::apply_posterior_noise_step;
use crate::trainer::{FieldSource, PreparedField, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("precision needs at least 2 residuals, got {0}")]
    TooFewResiduals(usize),
    #[error("grid needs at least 2 bins per axis, got {0}")]
    GridBins(usize),
    #[error("histogram needs at least 1 bin")]
    HistogramBins,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::graph::GraphError> for EvalError {
    fn from(e: crate::graph::GraphError) -> Self {
        EvalError::Train(e.into())
    }
}

/// How φ is chosen for evaluation fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhiEval {
    Fixed(f64),
    Prior,
}

impl PhiEval {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            PhiEval::Fixed(p) => Some(*p),
            PhiEval::Prior => None,
        }
    }
}

impl FromStr for PhiEval {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "prior" {
            return Ok(PhiEval::Prior);
        }
        s.parse::<f64>()
            .map(PhiEval::Fixed)
            .map_err(|_| format!("expected a number or \"prior\", got {s:?}"))
    }
}

impl std::fmt::Display for PhiEval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhiEval::Fixed(p) => write!(f, "{p}"),
            PhiEval::Prior => f.write_str("prior"),
        }
    }
}

impl Serialize for PhiEval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PhiEval::Fixed(p) => s.serialize_f64(*p),
            PhiEval::Prior => s.serialize_str("prior"),
        }
    }
}

impl<'de> Deserialize<'de> for PhiEval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(PhiEval::Fixed(p)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_fields: usize,
    pub phi: PhiEval,
    pub histogram_bins: usize,
    pub grid_bins: usize,
    /// Fields in the fixed GA fitness set (drawn from a separate stream).
    pub fitness_fields: usize,
    pub ga: GaConfig,
    /// Gene bounds for `log10(l_min)`.
    pub baseline1_bounds: (f64, f64),
    /// Gene bounds for `(α, β, γ, δ)`.
    pub baseline2_bounds: [(f64, f64); 4],
    pub time_grid: TimeGrid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_fields: 50,
            phi: PhiEval::Fixed(0.3),
            histogram_bins: 10,
            grid_bins: 4,
            fitness_fields: 20,
            ga: GaConfig::default(),
            baseline1_bounds: (0.0, 4.0),
            baseline2_bounds: [(0.2, 10.0), (0.2, 10.0), (0.2, 10.0), (-5.0, 10.0)],
            time_grid: TimeGrid::default(),
        }
    }
}

/// Trained networks plus everything needed to run them on fields.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a> {
    pub store: &'a ParameterStore,
    pub model: &'a GnnHyperparams,
    pub source: FieldSource<'a>,
    pub budget: f64,
    pub grid: TimeGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Gnn1,
    Baseline1(Baseline1Params),
    Baseline2(Baseline2Params),
    Zero,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gnn1 => "gnn1",
            Method::Baseline1(_) => "baseline1",
            Method::Baseline2(_) => "baseline2",
            Method::Zero => "zero",
        }
    }
}

/// Allocation chosen by `method` on the `index`-th field of `label`.
pub fn method_allocations(ctx: &EvalContext, method: &Method, field: &PreparedField, label: &str, index: u64) -> Result<Vec<f64>, EvalError> {
    let noise = ctx.source.noise;
    Ok(match method {
        Method::Gnn1 => allocate(&field.graph, &field.prior, ctx.model, ctx.store)?,
        Method::Baseline1(p) => baseline1_allocate(&field.prior, p, ctx.budget, noise, &ctx.grid)?,
        Method::Baseline2(p) => {
            let mut rng = substream(ctx.source.seed, &format!("{label}/baseline2"), index);
            baseline2_allocate(&field.prior, p, ctx.budget, noise, &ctx.grid, &mut rng)?
        }
        Method::Zero => vec![0.0; field.field.len()],
    })
}

/// φ̂ after hard-threshold measurement of the allocation, using the field's
/// fixed posterior draws.
pub fn predict(ctx: &EvalContext, field: &PreparedField, allocations: &[f64]) -> Result<f64, EvalError> {
    let post = apply_posterior_noise_step(&field.field, allocations, ctx.source.noise, &field.draws);
    Ok(infer_phi(&field.graph, &post, allocations, ctx.model, ctx.store)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precision {
    /// `1/var`, `+∞` when the residuals have zero variance.
    pub precision: f64,
    pub std: f64,
    pub variance: f64,
    pub mean: f64,
}

/// Population variance of the residuals and its inverse.
pub fn precision_metric(residuals: &[f64]) -> Result<Precision, EvalError> {
    if residuals.len() < 2 {
        return Err(EvalError::TooFewResiduals(residuals.len()));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let variance = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(Precision {
        precision: if variance > 0.0 { 1.0 / variance } else { f64::INFINITY },
        std: variance.sqrt(),
        variance,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub index: u64,
    pub phi: f64,
    pub phi_hat: f64,
    pub sum_r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub precision: f64,
    pub std: f64,
    pub bias: f64,
    pub fields: Vec<FieldRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodReport>,
    /// Pooled over all fields for the trained allocator.
    pub histogram: Histogram,
    pub grid: AllocationGrid,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

pub const EVAL_LABEL: &str = "eval";
pub const FITNESS_LABEL: &str = "fitness";

pub fn prepare_fields(ctx: &EvalContext, label: &str, n: usize, phi: PhiEval) -> Result<Vec<PreparedField>, EvalError> {
    (0..n as u64)
        .map(|i| Ok(ctx.source.prepare(label, i, phi.fixed())?))
        .collect()
}

/// Runs every method on the same `n_fields` fields and noise draws.
pub fn run_evaluation(ctx: &EvalContext, methods: &[Method], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let fields = prepare_fields(ctx, EVAL_LABEL, cfg.n_fields, cfg.phi)?;
    let mut reports = Vec::with_capacity(methods.len());
    let mut pooled_features = Vec::new();
    let mut pooled_alloc = Vec::new();
    for method in methods {
        let mut records = Vec::with_capacity(fields.len());
        for (i, f) in fields.iter().enumerate() {
            let alloc = method_allocations(ctx, method, f, EVAL_LABEL, i as u64)?;
            let phi_hat = predict(ctx, f, &alloc)?;
            records.push(FieldRecord {
                index: i as u64,
                phi: f.phi,
                phi_hat,
                sum_r: alloc.iter().sum(),
            });
            if *method == Method::Gnn1 {
                pooled_features.extend(f.field.galaxies.iter().map(|g| g.features()));
                pooled_alloc.extend(alloc);
            }
        }
        let residuals: Vec<f64> = records.iter().map(|r| r.phi_hat - r.phi).collect();
        let p = precision_metric(&residuals)?;
        reports.push(MethodReport {
            method: method.name().to_string(),
            precision: p.precision,
            std: p.std,
            bias: p.mean,
            fields: records,
        });
    }
    Ok(EvalReport {
        methods: reports,
        histogram: allocation_histogram(&pooled_alloc, cfg.histogram_bins, 60.0)?,
        grid: mass_distance_grid(&pooled_features, &pooled_alloc, cfg.grid_bins)?,
    })
}

/// Precision of φ̂ on a fixed set of fields under `method`; the GA fitness.
pub fn policy_precision(ctx: &EvalContext, method: &Method, fields: &[PreparedField], label: &str) -> Result<f64, EvalError> {
    let mut residuals = Vec::with_capacity(fields.len());
    for (i, f) in fields.iter().enumerate() {
        let alloc = method_allocations(ctx, method, f, label, i as u64)?;
        residuals.push(predict(ctx, f, &alloc)? - f.phi);
    }
    Ok(precision_metric(&residuals)?.precision)
}

/// GA-tuned parameters of both baselines.
#[derive(Clone, Debug)]
pub struct TunedBaselines {
    pub baseline1: Baseline1Params,
    pub baseline2: Baseline2Params,
    pub ga1: GaResult,
    pub ga2: GaResult,
}

/// Tunes both baselines for GNN₂ precision on the fitness field set.
/// Invalid genomes score −∞.
pub fn tune_baselines(ctx: &EvalContext, cfg: &EvalConfig) -> Result<TunedBaselines, EvalError> {
    let fields = prepare_fields(ctx, FITNESS_LABEL, cfg.fitness_fields, cfg.phi)?;
    let fitness1 = |g: &[f64]| match Baseline1Params::from_genome(g) {
        Ok(p) => policy_precision(ctx, &Method::Baseline1(p), &fields, FITNESS_LABEL).unwrap_or(f64::NEG_INFINITY),
        Err(_) => f64::NEG_INFINITY,
    };
    let ga1 = ga_optimize(fitness1, &cfg.ga, &[cfg.baseline1_bounds], &mut substream(ctx.source.seed, "ga/baseline1", 0))?;
    let fitness2 = |g: &[f64]| match Baseline2Params::from_genome(g) {
        Ok(p) => policy_precision(ctx, &Method::Baseline2(p), &fields, FITNESS_LABEL).unwrap_or(f64::NEG_INFINITY),
        Err(_) => f64::NEG_INFINITY,
    };
    let ga2 = ga_optimize(fitness2, &cfg.ga, &cfg.baseline2_bounds, &mut substream(ctx.source.seed, "ga/baseline2", 0))?;
    Ok(TunedBaselines {
        baseline1: Baseline1Params::from_genome(&ga1.best_genome)?,
        baseline2: Baseline2Params::from_genome(&ga2.best_genome)?,
        ga1,
        ga2,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = self.max / self.counts.len() as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    /// Share of the total count in the first and last bins.
    pub fn extreme_share(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let n = self.counts.len();
        let ends = if n == 1 { self.counts[0] } else { self.counts[0] + self.counts[n - 1] };
        ends as f64 / total as f64
    }
}

/// Fixed-width bins over `[0, max]`; `max` itself lands in the last bin.
pub fn allocation_histogram(allocations: &[f64], n_bins: usize, max: f64) -> Result<Histogram, EvalError> {
    if n_bins == 0 {
        return Err(EvalError::HistogramBins);
    }
    let mut counts = vec![0; n_bins];
    for &r in allocations {
        let b = ((r / max) * n_bins as f64).floor().clamp(0.0, (n_bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    Ok(Histogram { max, counts })
}

/// Counts, allocation-weighted counts and their ratio over `(d, log_m)`
/// bins of `[0, 1]²`. Values outside the square fall in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationGrid {
    pub bins: usize,
    /// Row-major `[d bin][log_m bin]`.
    pub counts: Vec<usize>,
    pub weighted: Vec<f64>,
}

impl AllocationGrid {
    fn at(&self, i_d: usize, i_m: usize) -> usize {
        i_d * self.bins + i_m
    }

    /// `weighted / count`, `None` for empty bins.
    pub fn ratio(&self, i_d: usize, i_m: usize) -> Option<f64> {
        let k = self.at(i_d, i_m);
        (self.counts[k] > 0).then(|| self.weighted[k] / self.counts[k] as f64)
    }

    /// Mean allocation over a quadrant: `near` = lower half of d,
    /// `heavy` = upper half of log_m. Odd bin counts put the middle bin in
    /// neither half.
    pub fn quadrant_ratio(&self, near: bool, heavy: bool) -> Option<f64> {
        let half = self.bins / 2;
        let d_range = if near { 0..half } else { self.bins - half..self.bins };
        let m_range = if heavy { self.bins - half..self.bins } else { 0..half };
        let (mut c, mut w) = (0usize, 0.0);
        for i in d_range {
            for j in m_range.clone() {
                c += self.counts[self.at(i, j)];
                w += self.weighted[self.at(i, j)];
            }
        }
        (c > 0).then(|| w / c as f64)
    }
}

pub fn mass_distance_grid(features: &[[f64; 4]], allocations: &[f64], bins: usize) -> Result<AllocationGrid, EvalError> {
    if bins < 2 {
        return Err(EvalError::GridBins(bins));
    }
    let bin = |x: f64| ((x * bins as f64).floor().clamp(0.0, (bins - 1) as f64)) as usize;
    let mut grid = AllocationGrid {
        bins,
        counts: vec![0; bins * bins],
        weighted: vec![0.0; bins * bins],
    };
    for (v, &r) in features.iter().zip(allocations) {
        let k = grid.at(bin(v[2]), bin(v[3]));
        grid.counts[k] += 1;
        grid.weighted[k] += r;
    }
    Ok(grid)
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,precision,std,bias,n_fields\n");
    for m in &report.methods {
        writeln!(out, "{},{},{},{},{}", m.method, m.precision, m.std, m.bias, m.fields.len()).expect("string write");
    }
    out
}

/// Methods ranked by precision, as an aligned text table.
pub fn report_table(report: &EvalReport) -> String {
    let mut ranked: Vec<&MethodReport> = report.methods.iter().collect();
    ranked.sort_by(|a, b| b.precision.total_cmp(&a.precision));
    let mut out = format!("{:<4} {:<10} {:>12} {:>10} {:>10} {:>8}\n", "rank", "method", "precision", "std", "bias", "fields");
    for (i, m) in ranked.iter().enumerate() {
        writeln!(
            out,
            "{:<4} {:<10} {:>12.2} {:>10.4} {:>10.4} {:>8}",
            i + 1,
            m.method,
            m.precision,
            m.std,
            m.bias,
            m.fields.len()
        )
        .expect("string write");
    }
    out
}

pub fn fields_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,field,phi,phi_hat,sum_r\n");
    for m in &report.methods {
        for f in &m.fields {
            writeln!(out, "{},{},{},{},{}", m.method, f.index, f.phi, f.phi_hat, f.sum_r).expect("string write");
        }
    }
    out
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.edges(i);
        writeln!(out, "{lo},{hi},{c}").expect("string write");
    }
    out
}

pub fn grid_csv(g: &AllocationGrid) -> String {
    let mut out = String::from("d_lo,d_hi,log_m_lo,log_m_hi,count,weighted,ratio\n");
    let w = 1.0 / g.bins as f64;
    for i in 0..g.bins {
        for j in 0..g.bins {
            let k = g.at(i, j);
            let ratio = g.ratio(i, j).map_or(String::new(), |r| r.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i as f64 * w,
                (i + 1) as f64 * w,
                j as f64 * w,
                (j + 1) as f64 * w,
                g.counts[k],
                g.weighted[k],
                ratio
            )
            .expect("string write");
        }
    }
    out
}

/// Bar chart of the histogram as a standalone SVG.
pub fn histogram_svg(h: &Histogram) -> String {
    let (w, ht, pad) = (400.0, 240.0, 30.0);
    let top = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - 2.0 * pad) / h.counts.len() as f64;
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\">\n");
    for (i, &c) in h.counts.iter().enumerate() {
        let bh = (ht - 2.0 * pad) * c as f64 / top;
        writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4a6fa5\"/>",
            pad + i as f64 * bw,
            ht - pad - bh,
            bw - 1.0,
            bh
        )
        .expect("string write");
    }
    writeln!(
        out,
        "<text x=\"{pad}\" y=\"{:.1}\" font-size=\"11\">0</text><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{} min</text>",
        ht - 10.0,
        w - pad - 30.0,
        ht - 10.0,
        h.max
    )
    .expect("string write");
    out.push_str("</svg>\n");
    out
}

/// Writes report.csv, report.txt, fields.csv, histogram.csv/.svg and grid.csv.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report_csv(report))?;
    fs::write(dir.join("report.txt"), report_table(report))?;
    fs::write(dir.join("fields.csv"), fields_csv(report))?;
    fs::write(dir.join("histogram.csv"), histogram_csv(&report.histogram))?;
    fs::write(dir.join("histogram.svg"), histogram_svg(&report.histogram))?;
    fs::write(dir.join("grid.csv"), grid_csv(&report.grid))?;
    Ok(())
}

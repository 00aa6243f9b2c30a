//! Unit-cost operation counts for graph construction and processing, and a
//! closed-form FLOP estimate of the graph pathway.

use std::io::Write;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::MlpSpec;
use crate::pipeline::GqnConfig;
use crate::query_init::{knn_edges, QuerySetSpec};

/// Neighbourhood size of the full-scene reference graph.
pub const FULL_GRAPH_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Edge operations, `N·K`.
    Processing,
    /// Pairwise distances, `N(N − 1)/2`.
    Naive,
    /// `N·log₂N + N·K`.
    Indexed,
}

impl CostMode {
    pub const ALL: [CostMode; 3] = [CostMode::Processing, CostMode::Naive, CostMode::Indexed];

    pub fn name(self) -> &'static str {
        match self {
            CostMode::Processing => "processing",
            CostMode::Naive => "naive",
            CostMode::Indexed => "indexed",
        }
    }
}

fn check(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(config_err!("graph of {n} nodes cannot have out-degree {k}"));
    }
    Ok(())
}

pub fn processing_cost(n: usize, k: usize) -> Result<u64> {
    check(n, k)?;
    Ok(n as u64 * k as u64)
}

pub fn naive_construction_cost(n: usize, k: usize) -> Result<u64> {
    check(n, k)?;
    Ok(n as u64 * (n as u64 - 1) / 2)
}

pub fn indexed_construction_cost(n: usize, k: usize) -> Result<f64> {
    check(n, k)?;
    let n = n as f64;
    Ok(n * n.log2() + n * k as f64)
}

pub fn construction_cost(n: usize, k: usize, mode: CostMode) -> Result<f64> {
    match mode {
        CostMode::Naive => Ok(naive_construction_cost(n, k)? as f64),
        CostMode::Indexed => indexed_construction_cost(n, k),
        CostMode::Processing => Err(config_err!("processing is not a construction mode")),
    }
}

/// `1 − peak/full`, exact, with its percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    pub numer: u64,
    pub denom: u64,
    pub percent: f64,
}

impl Reduction {
    fn exact(peak: u64, full: u64) -> Self {
        let r = Ratio::new(full - peak.min(full), full);
        Self {
            numer: *r.numer(),
            denom: *r.denom(),
            percent: 100.0 * *r.numer() as f64 / *r.denom() as f64,
        }
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.numer, self.denom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphCost {
    pub queries: usize,
    pub n: usize,
    pub k: usize,
    pub processing: u64,
    pub naive: u64,
    pub indexed: f64,
}

impl GraphCost {
    fn new(queries: usize, n: usize, k: usize) -> Result<Self> {
        Ok(Self {
            queries,
            n,
            k,
            processing: processing_cost(n, k)?,
            naive: naive_construction_cost(n, k)?,
            indexed: indexed_construction_cost(n, k)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub m_bev: usize,
    pub sets: Vec<GraphCost>,
    pub full: GraphCost,
    pub peak_processing: u64,
    pub peak_naive: u64,
    pub peak_indexed: f64,
    pub processing_reduction: Reduction,
    pub naive_reduction: Reduction,
    pub indexed_reduction_percent: f64,
    pub flops: u64,
}

impl CostReport {
    pub fn reduction_percent(&self, mode: CostMode) -> f64 {
        match mode {
            CostMode::Processing => self.processing_reduction.percent,
            CostMode::Naive => self.naive_reduction.percent,
            CostMode::Indexed => self.indexed_reduction_percent,
        }
    }

    /// `(peak query graph, full graph)` counts in the given mode.
    pub fn counts(&self, mode: CostMode) -> (f64, f64) {
        match mode {
            CostMode::Processing => (self.peak_processing as f64, self.full.processing as f64),
            CostMode::Naive => (self.peak_naive as f64, self.full.naive as f64),
            CostMode::Indexed => (self.peak_indexed, self.full.indexed),
        }
    }
}

/// Query graphs of `config` against one full-scene graph over all `m_bev`
/// cells with `K = full_k`.
pub fn compare_full_vs_queries(m_bev: usize, config: &GqnConfig, full_k: usize) -> Result<CostReport> {
    let counts = config.validate(m_bev)?;
    let sets = config
        .sets
        .iter()
        .zip(&counts)
        .map(|(s, &n)| GraphCost::new(s.queries, n, s.k))
        .collect::<Result<Vec<_>>>()?;
    let full = GraphCost::new(1, m_bev, full_k)?;
    let peak_processing = sets.iter().map(|s| s.processing).max().unwrap_or(0);
    let peak_naive = sets.iter().map(|s| s.naive).max().unwrap_or(0);
    let peak_indexed = sets.iter().map(|s| s.indexed).fold(0.0, f64::max);
    Ok(CostReport {
        m_bev,
        processing_reduction: Reduction::exact(peak_processing, full.processing),
        naive_reduction: Reduction::exact(peak_naive, full.naive),
        indexed_reduction_percent: 100.0 * (1.0 - peak_indexed / full.indexed),
        flops: flop_estimate(config, m_bev)?,
        sets,
        full,
        peak_processing,
        peak_naive,
        peak_indexed,
    })
}

fn rows(n: usize, spec: &MlpSpec) -> u64 {
    n as u64 * spec.flops_per_row()
}

/// Multiply-adds count two, softmax three per entry, max and mean one.
pub fn flop_estimate(config: &GqnConfig, m_bev: usize) -> Result<u64> {
    let counts = config.validate(m_bev)?;
    let modules = config.modules()?;
    let (m, d) = (m_bev as u64, config.d as u64);
    let tau = config.num_queries() as u64;

    let scoring = 2 * tau * m * d + 3 * tau * m;
    let mut graphs = 0;
    for (set, &n) in config.sets.iter().zip(&counts) {
        let (q, nn, k) = (set.queries as u64, n as u64, set.k as u64);
        let e = (nn * k) as usize;
        let edge_features = rows(e, &modules.edge.phi);
        let edge_attention = rows(e, &modules.edge.query) + rows(e, &modules.edge.key) + 2 * d * e as u64 + 3 * e as u64;
        let node_update = 2 * d * e as u64 + rows(n, &modules.edge.rho);
        let pooling = nn * d;
        let infusion = rows(n, &modules.context.eta);
        let projection = nn * d;
        graphs += q * (edge_features + edge_attention + node_update + pooling + infusion + projection) + m * d;
    }
    let per_round = 3 * 2 * tau * d * d + 2 * tau * tau * d + 3 * tau * tau + 2 * tau * tau * d + tau * d;
    let context = config.layers as u64 * per_round;
    let fusion = rows(m_bev, &modules.mlp1) + rows(m_bev, &modules.mlp2) + 3 * m + 3 * m * d;
    Ok(scoring + graphs + context + fusion)
}

/// Cost section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub m_bev: Vec<usize>,
    pub modes: Vec<CostMode>,
    pub sets: Vec<QuerySetSpec>,
    pub full_k: usize,
    pub d: usize,
    pub layers: usize,
    /// Time the exact kNN routine on graphs of at most this many nodes.
    pub wall_clock_max_nodes: usize,
}

impl Default for CostSpec {
    fn default() -> Self {
        let reference = GqnConfig::reference();
        Self {
            m_bev: vec![1024, 16384],
            modes: CostMode::ALL.to_vec(),
            sets: reference.sets,
            full_k: FULL_GRAPH_K,
            d: reference.d,
            layers: reference.layers,
            wall_clock_max_nodes: 0,
        }
    }
}

impl CostSpec {
    pub fn config(&self) -> GqnConfig {
        GqnConfig {
            d: self.d,
            layers: self.layers,
            sets: self.sets.clone(),
            ..GqnConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_bev.is_empty() {
            return Err(config_err!("the M_BEV sweep is empty"));
        }
        if self.modes.is_empty() {
            return Err(config_err!("no cost modes selected"));
        }
        let config = self.config();
        for &m in &self.m_bev {
            config.validate(m)?;
            check(m, self.full_k)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub m_bev: usize,
    pub mode: CostMode,
    pub peak_query: f64,
    pub full: f64,
    pub reduction_percent: f64,
    pub wall_query_ms: Option<f64>,
    pub wall_full_ms: Option<f64>,
}

fn time_knn(n: usize, k: usize, d: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let start = Instant::now();
    knn_edges(&refs, k)?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Reports for every swept `M_BEV` and one row per (M_BEV, mode).
pub fn run_bench(spec: &CostSpec, seed: u64) -> Result<(Vec<CostReport>, Vec<BenchRow>)> {
    spec.validate()?;
    let config = spec.config();
    let mut reports = Vec::new();
    let mut table = Vec::new();
    for &m in &spec.m_bev {
        let report = compare_full_vs_queries(m, &config, spec.full_k)?;
        let peak_set = report.sets.iter().max_by_key(|s| s.processing).expect("validated sets");
        for &mode in &spec.modes {
            let (peak_query, full) = report.counts(mode);
            let timed = |n: usize, k: usize| -> Result<Option<f64>> {
                if mode == CostMode::Processing || n > spec.wall_clock_max_nodes {
                    return Ok(None);
                }
                time_knn(n, k, spec.d, seed).map(Some)
            };
            table.push(BenchRow {
                m_bev: m,
                mode,
                peak_query,
                full,
                reduction_percent: report.reduction_percent(mode),
                wall_query_ms: timed(peak_set.n, peak_set.k)?,
                wall_full_ms: timed(m, spec.full_k)?,
            });
        }
        reports.push(report);
    }
    Ok((reports, table))
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["m_bev", "mode", "peak_query", "full", "reduction_percent", "wall_query_ms", "wall_full_ms"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.m_bev.to_string(),
            r.mode.name().to_string(),
            r.peak_query.to_string(),
            r.full.to_string(),
            format!("{:.4}", r.reduction_percent),
            opt(r.wall_query_ms),
            opt(r.wall_full_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

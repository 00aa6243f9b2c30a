//! Command-line commands and their artifacts.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
//! 3 numeric failure, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bev_scene::{generate_scene, sinusoidal_encoding, SceneSpec};
use crate::cost_model::{run_bench, write_bench_csv, CostSpec};
use crate::error::{config_err, GqnError, Result};
use crate::numerics::{grad_check_with, GradCheckConfig, GroupCheck, Tensor};
use crate::pipeline::{
    fused_sum_loss, init_params, run_scene, stub_global_map, toy_train, FlatScene, GqnConfig, GqnOutput,
    TrainSpec, GLOBAL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Largest grid the finite-difference check accepts.
pub const GRADCHECK_MAX_CELLS: usize = 1024;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub gqn: GqnConfig,
    pub cost: CostSpec,
    pub train: TrainSpec,
    pub output_dir: Option<PathBuf>,
    /// Overrides `gqn.seed` when present.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            gqn: GqnConfig::default(),
            cost: CostSpec::default(),
            train: TrainSpec::default(),
            output_dir: None,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    /// Seed precedence: `flag`, then the top-level `seed`, then `gqn.seed`
    /// (default 0). The winner is written back into `gqn.seed`.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = flag.or(self.seed).unwrap_or(self.gqn.seed);
        self.gqn.seed = seed;
        self.seed = Some(seed);
        seed
    }

    fn check_scene(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scene.d != self.gqn.d {
            return Err(config_err!("scene width {} vs gqn.d = {}", self.scene.d, self.gqn.d));
        }
        self.gqn.validate(self.scene.height * self.scene.width)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gqn", about = "Graph query networks over BEV grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `output_dir` from the config, else `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the pathway on the configured scene and write maps.
    Run,
    /// Compare tape gradients with central differences.
    Gradcheck,
    /// Analytic cost comparison against a full-scene graph.
    Bench,
    /// Train a readout and the pathway on the synthetic scene.
    TrainDemo,
}

/// Exit code and a one-line summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub message: String,
}

impl Outcome {
    fn ok(message: String) -> Self {
        Self { code: EXIT_OK, message }
    }

    fn from_error(e: &GqnError) -> Self {
        Self {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

/// Runs a parsed command line inside a pool of the requested size.
pub fn execute(cli: &Cli) -> Outcome {
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => return Outcome::from_error(&config_err!("cannot start {:?} threads: {e}", cli.threads)),
    };
    pool.install(|| {
        let mut config = match &cli.config {
            Some(path) => match RunConfig::load(path) {
                Ok(c) => c,
                Err(e) => return Outcome::from_error(&e),
            },
            None => RunConfig::default(),
        };
        config.resolve_seed(cli.seed);
        let out = cli
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let result = fs::create_dir_all(&out).map_err(GqnError::from).and_then(|_| match cli.command {
            Command::Run => cmd_run(&config, &out).map(|a| Outcome::ok(a.summary())),
            Command::Gradcheck => cmd_gradcheck(&config, &out),
            Command::Bench => cmd_bench(&config, &out),
            Command::TrainDemo => cmd_train_demo(&config, &out),
        });
        result.unwrap_or_else(|e| Outcome::from_error(&e))
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes)?;
    Ok(sha256_hex(bytes))
}

fn numeric(e: GqnError) -> GqnError {
    match e {
        GqnError::InvalidInput(m) => GqnError::Numeric(m),
        other => other,
    }
}

fn csv_bytes(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| GqnError::Io(e.into_error()))
}

/// Row `r, c`, the fused map, then every set map.
pub fn maps_csv(out: &GqnOutput<f64>, width: usize) -> Result<Vec<u8>> {
    let fused = out
        .fused
        .as_ref()
        .ok_or_else(|| GqnError::Contract("run produced no fused map".into()))?;
    let d = fused.cols();
    let mut header = vec!["r".to_string(), "c".to_string()];
    header.extend((0..d).map(|c| format!("fused_{c}")));
    for s in 0..out.set_maps.len() {
        header.extend((0..d).map(|c| format!("set{s}_{c}")));
    }
    let rows = (0..fused.rows()).map(|k| {
        let mut row = vec![(k / width).to_string(), (k % width).to_string()];
        row.extend(fused.row(k).iter().map(f64::to_string));
        for map in &out.set_maps {
            row.extend(map.row(k).iter().map(f64::to_string));
        }
        row
    });
    csv_bytes(header, rows)
}

/// One row per query: its set, `u` and the exchanged summary `g'`.
pub fn globals_csv(out: &GqnOutput<f64>) -> Result<Vec<u8>> {
    let d = out.globals.cols();
    let mut header = vec!["query".to_string(), "set".to_string()];
    header.extend((0..d).map(|c| format!("u_{c}")));
    header.extend((0..d).map(|c| format!("g_{c}")));
    let rows = out.queries.iter().enumerate().map(|(q, query)| {
        let mut row = vec![q.to_string(), query.set_id.to_string()];
        row.extend(query.global.iter().map(f64::to_string));
        row.extend(out.globals.row(q).iter().map(f64::to_string));
        row
    });
    csv_bytes(header, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub config: RunConfig,
    pub m_bev: usize,
    pub num_queries: usize,
    pub maps_sha256: String,
    pub globals_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub meta: RunMeta,
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn summary(&self) -> String {
        format!(
            "wrote maps.csv ({}), globals.csv, meta.json to {}",
            &self.meta.maps_sha256[..16],
            self.dir.display()
        )
    }
}

pub fn run_output(config: &RunConfig) -> Result<GqnOutput<f64>> {
    config.check_scene()?;
    let (grid, _) = generate_scene::<f64>(&config.scene)?;
    let enc = sinusoidal_encoding::<f64>(grid.height(), grid.width(), config.gqn.d, config.gqn.base)?;
    let flat = FlatScene::from_grid(&grid, &enc)?;
    let m = flat.num_cells();
    let params = init_params::<f64>(&config.gqn, m)?;
    let global = stub_global_map::<f64>(m, config.gqn.d, config.gqn.seed)?;
    let out = run_scene(&flat, &config.gqn, &params, Some(&global)).map_err(numeric)?;
    let finite = out.fused.as_ref().is_some_and(Tensor::all_finite) && out.globals.all_finite();
    if !finite {
        return Err(GqnError::Numeric("non-finite values in the output maps".into()));
    }
    Ok(out)
}

pub fn cmd_run(config: &RunConfig, dir: &Path) -> Result<RunArtifacts> {
    let out = run_output(config)?;
    let maps = maps_csv(&out, config.scene.width)?;
    let globals = globals_csv(&out)?;
    fs::create_dir_all(dir)?;
    let meta = RunMeta {
        config: config.clone(),
        m_bev: config.scene.height * config.scene.width,
        num_queries: config.gqn.num_queries(),
        maps_sha256: write_file(&dir.join("maps.csv"), &maps)?,
        globals_sha256: write_file(&dir.join("globals.csv"), &globals)?,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(RunArtifacts {
        meta,
        dir: dir.to_path_buf(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub groups: indexmap::IndexMap<String, GroupCheck>,
    /// Queries whose `u` row received an all-zero gradient.
    pub dead_queries: Vec<usize>,
    pub passed: bool,
}

/// Gradient check of `Σ fused` on the configured scene.
pub fn gradcheck_summary(config: &RunConfig) -> Result<GradCheckSummary> {
    let m = config.scene.height * config.scene.width;
    if m > GRADCHECK_MAX_CELLS {
        return Err(config_err!(
            "gradient check needs at most {GRADCHECK_MAX_CELLS} cells, the scene has {m}"
        ));
    }
    config.check_scene()?;
    let (grid, _) = generate_scene::<f64>(&config.scene)?;
    let enc = sinusoidal_encoding::<f64>(grid.height(), grid.width(), config.gqn.d, config.gqn.base)?;
    let flat = FlatScene::from_grid(&grid, &enc)?;
    let params = init_params::<f64>(&config.gqn, m)?;
    let global = stub_global_map::<f64>(m, config.gqn.d, config.gqn.seed)?;
    let modules = config.gqn.modules()?;
    let report = grad_check_with(
        |tape, b| fused_sum_loss(tape, b, &config.gqn, &modules, &flat, &global),
        &params,
        &GradCheckConfig::default(),
    )
    .map_err(numeric)?;
    let d = config.gqn.d;
    let dead_queries = report.analytic[GLOBAL]
        .chunks(d)
        .enumerate()
        .filter(|(_, row)| row.iter().all(|&g| g == 0.0))
        .map(|(q, _)| q)
        .collect::<Vec<_>>();
    let passed = report.max_rel_error <= GRADCHECK_TOLERANCE && dead_queries.is_empty();
    Ok(GradCheckSummary {
        eps: report.eps,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error: report.max_rel_error,
        groups: report.groups,
        dead_queries,
        passed,
    })
}

pub fn cmd_gradcheck(config: &RunConfig, dir: &Path) -> Result<Outcome> {
    let summary = gradcheck_summary(config)?;
    fs::write(dir.join("gradcheck.json"), serde_json::to_vec_pretty(&summary)?)?;
    let message = format!(
        "max relative error {:.3e} over {} groups; {}",
        summary.max_rel_error,
        summary.groups.len(),
        if summary.passed { "passed" } else { "FAILED" }
    );
    Ok(Outcome {
        code: if summary.passed { EXIT_OK } else { EXIT_NUMERIC },
        message,
    })
}

pub fn cmd_bench(config: &RunConfig, dir: &Path) -> Result<Outcome> {
    let (reports, rows) = run_bench(&config.cost, config.gqn.seed)?;
    fs::write(dir.join("cost_report.json"), serde_json::to_vec_pretty(&reports)?)?;
    let mut csv = Vec::new();
    write_bench_csv(&rows, &mut csv)?;
    fs::write(dir.join("bench.csv"), csv)?;
    let lines: Vec<String> = reports
        .iter()
        .map(|r| {
            let parts: Vec<String> = config
                .cost
                .modes
                .iter()
                .map(|&mode| format!("{} {:.1}%", mode.name(), r.reduction_percent(mode)))
                .collect();
            format!("M_BEV={} peak reduction: {}", r.m_bev, parts.join(", "))
        })
        .collect();
    Ok(Outcome::ok(lines.join("\n")))
}

pub fn cmd_train_demo(config: &RunConfig, dir: &Path) -> Result<Outcome> {
    config.check_scene()?;
    let curve = toy_train::<f64>(&config.scene, &config.train, &config.gqn)?;
    let rows = curve
        .losses
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .map(|(s, l)| vec![s.to_string(), l.to_string()]);
    fs::write(dir.join("loss_curve.csv"), csv_bytes(vec!["step".into(), "loss".into()], rows)?)?;
    let initial = curve.initial().unwrap_or(f64::NAN);
    let last = curve.last_finite().unwrap_or(f64::NAN);
    if curve.diverged {
        return Ok(Outcome {
            code: EXIT_DIVERGED,
            message: format!("training diverged; last finite loss {last}"),
        });
    }
    Ok(Outcome::ok(format!(
        "loss {initial:.6} -> {last:.6} ({:.1}% of initial) after {} steps",
        100.0 * last / initial,
        config.train.steps
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::from_json(r#"{"gqn": {"layers": 3}, "train": {"steps": 5}}"#).unwrap();
        assert_eq!(c.gqn.layers, 3);
        assert_eq!(c.gqn.d, 8);
        assert_eq!(c.train.steps, 5);
        let e = RunConfig::from_json(r#"{"gqn": {"depth": 3}}"#).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        let e = RunConfig::from_json("{not json").unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig::default();
        assert_eq!(c.resolve_seed(None), 0);
        let mut c2 = RunConfig::from_json(r#"{"gqn": {"seed": 4}}"#).unwrap();
        assert_eq!(c2.resolve_seed(None), 4);
        c2.seed = Some(9);
        assert_eq!(c2.resolve_seed(None), 9);
        assert_eq!(c2.resolve_seed(Some(11)), 11);
        assert_eq!(c.resolve_seed(Some(3)), 3);
        assert_eq!(c.gqn.seed, 3);
    }

    #[test]
    fn scene_width_must_match() {
        let mut c = RunConfig::default();
        c.scene.d = 12;
        assert!(matches!(run_output(&c), Err(GqnError::Config(_))));
    }

    #[test]
    fn gradcheck_guard() {
        let mut c = RunConfig::default();
        c.scene.height = 1000;
        c.scene.width = 1000;
        assert_eq!(gradcheck_summary(&c).unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn parses_command_line() {
        let cli = Cli::try_parse_from(["gqn", "bench", "--seed", "3", "--threads", "2"]).unwrap();
        assert_eq!(cli.command, Command::Bench);
        assert_eq!((cli.seed, cli.threads), (Some(3), Some(2)));
        assert!(Cli::try_parse_from(["gqn", "fly"]).is_err());
    }
}

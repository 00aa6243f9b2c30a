//! Acceptance suite: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line (run with `--nocapture` to see them).

use std::collections::HashSet;
use std::time::Instant;

use gqn_core::bev_scene::{flatten_grid, generate_scene, sinusoidal_encoding, CellPair, SceneSpec};
use gqn_core::cli::{cmd_run, gradcheck_summary, RunConfig};
use gqn_core::cost_model::{compare_full_vs_queries, flop_estimate, FULL_GRAPH_K};
use gqn_core::edge_focus::{edge_attention, EdgeFocusSpec};
use gqn_core::numerics::{ParamStore, Tape, Tensor};
use gqn_core::pipeline::{
    init_params, run_gqn, run_gqn_pairs, soft_fusion, stub_global_map, toy_train, GqnConfig, TrainSpec,
};
use gqn_core::query_init::{attention_weights, QuerySetSpec};
use num_rational::Ratio;
use num_traits::Signed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, title: &str, ok: bool, detail: String, start: Instant) {
    println!(
        "[{}] criterion {id}: {title}: {detail} ({:.2} s)",
        if ok { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(ok, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_1_peak_processing_reduction() {
    let start = Instant::now();
    let config = GqnConfig::reference();
    let exact = compare_full_vs_queries(10_000, &config, FULL_GRAPH_K).unwrap();
    let mut ok = exact.processing_reduction.ratio() == Ratio::new(41, 50);
    let mut detail = format!(
        "M=10000 reduction {}/{} = {:.1}%",
        exact.processing_reduction.numer, exact.processing_reduction.denom, exact.processing_reduction.percent
    );
    for m in [1024, 16384] {
        let r = compare_full_vs_queries(m, &config, FULL_GRAPH_K).unwrap();
        let shown = format!("{:.1}", r.processing_reduction.percent);
        ok &= shown == "82.0";
        detail.push_str(&format!(", M={m} {shown}%"));
    }
    report(1, "peak graph-processing reduction", ok, detail, start);
}

#[test]
fn criterion_2_construction_reduction() {
    let start = Instant::now();
    let config = GqnConfig::reference();
    let mut ok = true;
    let mut parts = Vec::new();
    for m in [64, 1024, 16384, 262_144] {
        let r = compare_full_vs_queries(m, &config, FULL_GRAPH_K).unwrap();
        let naive = r.naive_reduction.percent;
        let indexed = r.indexed_reduction_percent;
        ok &= naive >= 80.0 && (75.0..=82.0).contains(&indexed);
        parts.push(format!("M={m} naive {naive:.2}% indexed {indexed:.2}%"));
    }
    report(2, "construction reduction", ok, parts.join("; "), start);
}

fn single_set(ratio: f64, k: usize) -> GqnConfig {
    GqnConfig {
        sets: vec![QuerySetSpec::new(96, ratio, k)],
        ..GqnConfig::reference()
    }
}

#[test]
fn criterion_3_flop_trends() {
    let start = Instant::now();
    let m = 4096;
    let ks: Vec<i128> = (2..=24).step_by(2).collect();
    let flops: Vec<i128> = ks
        .iter()
        .map(|&k| flop_estimate(&single_set(0.2, k as usize), m).unwrap() as i128)
        .collect();
    let slope = Ratio::new(flops[1] - flops[0], ks[1] - ks[0]);
    let max_residual = ks
        .iter()
        .zip(&flops)
        .map(|(&k, &f)| (Ratio::from_integer(f) - (Ratio::from_integer(flops[0]) + slope * (k - ks[0]))).abs())
        .max()
        .unwrap();
    let mut ok = max_residual == Ratio::from_integer(0) && slope > Ratio::from_integer(0);

    let ratios = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5];
    let by_ratio: Vec<u64> = ratios.iter().map(|&r| flop_estimate(&single_set(r, 4), m).unwrap()).collect();
    ok &= by_ratio.windows(2).all(|w| w[0] < w[1]);

    let reference = GqnConfig::reference();
    ok &= flop_estimate(&reference, m).unwrap() == flop_estimate(&reference, m).unwrap();
    let detail = format!(
        "slope {} FLOPs per unit K, affine residual {}, ratio sweep {:.3}..{:.3} GFLOPs increasing",
        slope,
        max_residual,
        by_ratio[0] as f64 / 1e9,
        by_ratio[by_ratio.len() - 1] as f64 / 1e9
    );
    report(3, "FLOP-trend properties", ok, detail, start);
}

fn toy_gradcheck_config() -> RunConfig {
    RunConfig {
        scene: SceneSpec::small(),
        ..RunConfig::default()
    }
}

#[test]
fn criterion_4_differentiability() {
    let start = Instant::now();
    let config = toy_gradcheck_config();
    assert_eq!((config.scene.height, config.scene.width, config.gqn.d, config.gqn.layers), (8, 8, 8, 2));
    assert_eq!(config.gqn.sets.iter().map(|s| (s.queries, s.k)).collect::<Vec<_>>(), [(4, 2), (4, 3)]);
    let summary = gradcheck_summary(&config).unwrap();
    let expected = ["u", "phi", "edge_q", "edge_k", "rho", "ctx_attn", "eta", "mlp1", "mlp2"];
    let store = init_params::<f64>(&config.gqn, 64).unwrap();
    let mut ok = summary.passed && store.groups() == expected && summary.groups.len() == expected.len();
    let mut parts = Vec::new();
    for g in expected {
        let e = summary.groups.get(g).map(|c| c.max_rel_error).unwrap_or(f64::INFINITY);
        ok &= e <= 1e-4;
        parts.push(format!("{g} {e:.1e}"));
    }
    ok &= summary.dead_queries.is_empty();
    let detail = format!("max {:.2e}; {}; zero-gradient u rows {:?}", summary.max_rel_error, parts.join(", "), summary.dead_queries);
    report(4, "differentiability", ok, detail, start);
}

fn random_pairs(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<CellPair<f64>> {
    (0..m)
        .map(|index| CellPair {
            index,
            state: (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            position: vec![0.0; d],
        })
        .collect()
}

#[test]
fn criterion_5_normalization() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_alpha, mut worst_beta, mut worst_fusion) = (0f64, 0f64, 0f64);
    for instance in 0..10_000u64 {
        let d = 4 * rng.gen_range(1..=3);
        let m = rng.gen_range(2..=48);
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let alpha = attention_weights(&u, &random_pairs(&mut rng, m, d)).unwrap();
        worst_alpha = worst_alpha.max((alpha.iter().sum::<f64>() - 1.0).abs());

        let mut store = ParamStore::<f64>::new(instance);
        let spec = EdgeFocusSpec::new(d).unwrap();
        spec.register(&mut store).unwrap();
        let (n, k) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let feats: Vec<f64> = (0..n * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e = tape.leaf(Tensor::matrix(n * k, d, feats).unwrap());
        let beta = edge_attention(&mut tape, &spec.query, &spec.key, &b, e, k).unwrap();
        for r in 0..n {
            worst_beta = worst_beta.max((tape.value(beta).row(r).iter().sum::<f64>() - 1.0).abs());
        }

        let config = GqnConfig { d, ..GqnConfig::default() };
        let modules = config.modules().unwrap();
        let mut store = ParamStore::<f64>::new(instance);
        modules.mlp2.register(&mut store, "mlp2").unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let cells = rng.gen_range(1..=8);
        let mut map = || Tensor::matrix(cells, d, (0..cells * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let (g, h) = (tape.leaf(map()), tape.leaf(map()));
        let (_, w) = soft_fusion(&mut tape, &modules.mlp2, &b, g, h).unwrap();
        for r in 0..cells {
            worst_fusion = worst_fusion.max((tape.value(w).row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let ok = worst_alpha <= 1e-9 && worst_beta <= 1e-9 && worst_fusion <= 1e-9;
    let detail = format!(
        "10000 instances, max |Σ−1|: α {worst_alpha:.1e}, β {worst_beta:.1e}, fusion {worst_fusion:.1e}"
    );
    report(5, "normalization invariants", ok, detail, start);
}

#[test]
fn criterion_6_structure_and_flatten_order() {
    let start = Instant::now();
    let config = GqnConfig::default();
    let mut checked = 0;
    let mut violations = Vec::new();
    let mut permutations = 0;
    let mut mismatches = 0;
    let mut seed = 0u64;
    while checked < 1000 {
        let scene = SceneSpec { seed, ..SceneSpec::small() };
        let (grid, _) = generate_scene::<f64>(&scene).unwrap();
        let enc = sinusoidal_encoding::<f64>(8, 8, 8, config.base).unwrap();
        let params = init_params::<f64>(&GqnConfig { seed, ..config.clone() }, 64).unwrap();
        let global = stub_global_map::<f64>(64, 8, seed).unwrap();
        let out = run_gqn(&grid, &enc, &config, &params, Some(&global)).unwrap();
        for q in &out.queries {
            let n = q.num_nodes();
            let mut seen = HashSet::new();
            for (src, chunk) in q.edges.chunks(q.k).enumerate() {
                let targets: HashSet<usize> = chunk.iter().map(|e| e.target).collect();
                if chunk.len() != q.k || targets.len() != q.k || chunk.iter().any(|e| e.source != src || e.target == src || e.target >= n) {
                    violations.push(format!("seed {seed} set {} node {src}", q.set_id));
                }
                seen.extend(chunk.iter().map(|e| (e.source, e.target)));
            }
            let cells: HashSet<usize> = q.nodes.iter().map(|v| v.bev_index).collect();
            if q.edges.len() != n * q.k || seen.len() != q.edges.len() || cells.len() != n {
                violations.push(format!("seed {seed} set {}", q.set_id));
            }
            checked += 1;
        }
        if seed % 5 == 0 {
            let mut pairs = flatten_grid(&grid, &enc).unwrap();
            pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let other = run_gqn_pairs(&pairs, 8, 8, &config, &params, Some(&global)).unwrap();
            permutations += 1;
            if other.fused != out.fused || other.set_maps != out.set_maps || other.skip != out.skip || other.concat != out.concat {
                mismatches += 1;
            }
        }
        seed += 1;
    }
    let ok = violations.is_empty() && mismatches == 0;
    let detail = format!(
        "{checked} queries, {} structural violations; {permutations} shuffled inputs, {mismatches} map mismatches",
        violations.len()
    );
    report(6, "structural invariants", ok, detail, start);
}

/// Large enough that the parallel kernels and per-query fan-out engage.
fn determinism_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.scene.height = 32;
    c.scene.width = 32;
    c.scene.d = 16;
    c.gqn.d = 16;
    c.gqn.sets = vec![QuerySetSpec::new(8, 0.1, 4), QuerySetSpec::new(8, 0.2, 8)];
    c.resolve_seed(Some(7));
    c
}

#[test]
fn criterion_7_determinism() {
    let start = Instant::now();
    let config = determinism_config();
    let dir = tempfile::tempdir().unwrap();
    let mut digests = HashSet::new();
    for trial in 0..20 {
        for threads in [1, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let out = dir.path().join(format!("t{trial}_{threads}"));
            let a = pool.install(|| cmd_run(&config, &out)).unwrap();
            digests.insert(a.meta.maps_sha256);
        }
    }
    let ok = digests.len() == 1;
    let detail = format!(
        "40 runs (20 trials × 1 and 8 threads), {} distinct maps.csv digest(s)",
        digests.len()
    );
    report(7, "determinism", ok, detail, start);
}

fn pinned_curve() -> Vec<f64> {
    let mut r = csv::Reader::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/toy_loss_curve.csv")).unwrap();
    r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect()
}

#[test]
fn criterion_8_toy_training() {
    let start = Instant::now();
    let train = TrainSpec::default();
    assert_eq!((train.steps, train.learning_rate), (200, 1e-2));
    let curve = toy_train::<f64>(&SceneSpec::default(), &train, &GqnConfig::default()).unwrap();
    let pinned = pinned_curve();
    let worst = curve
        .losses
        .iter()
        .zip(&pinned)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
        .fold(0f64, f64::max);
    let ratio = curve.losses[200] / curve.losses[0];
    let ok = !curve.diverged && curve.losses.len() == 201 && pinned.len() == 201 && ratio <= 0.5 && worst <= 1e-9;
    let detail = format!(
        "loss {:.4} -> {:.4} (ratio {ratio:.4}), max deviation from pinned curve {worst:.1e}",
        curve.losses[0], curve.losses[200]
    );
    report(8, "toy training demo", ok, detail, start);
}

#[test]
fn criterion_9_shape_contracts() {
    let start = Instant::now();
    let config = GqnConfig::reference();
    let modules = config.modules().unwrap();
    let scene = SceneSpec { d: 64, ..SceneSpec::small() };
    let (grid, _) = generate_scene::<f64>(&scene).unwrap();
    let enc = sinusoidal_encoding::<f64>(8, 8, 64, config.base).unwrap();
    let params = init_params::<f64>(&config, 64).unwrap();
    let global = stub_global_map::<f64>(64, 64, 0).unwrap();
    let out = run_gqn(&grid, &enc, &config, &params, Some(&global)).unwrap();
    let fused = out.fused.as_ref().unwrap();
    let mlp1_in = params.get("mlp1.0.weight").unwrap().shape()[0];
    let ok = out.concat.cols() == 3 * 64
        && modules.mlp1.input_width() == 5 * 64
        && mlp1_in == 320
        && out.skip.cols() == 64
        && fused.cols() == 64
        && fused.rows() == 64;
    let detail = format!(
        "concat width {}, MLP1 input {mlp1_in}, skip width {}, fused {:?}",
        out.concat.cols(),
        out.skip.cols(),
        fused.shape()
    );
    report(9, "shape contracts", ok, detail, start);
}

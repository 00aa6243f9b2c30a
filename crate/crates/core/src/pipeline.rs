//! Multi-set orchestration: every query set runs end to end on one tape, is
//! projected back to the grid, concatenated, fused with the input through the
//! skip perceptron and, given a global-pathway map, blended per cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev_scene::{flatten_grid, generate_scene, sinusoidal_encoding, BevGrid, CellPair, PosEncoding, SceneSpec};
use crate::deep_context::{context_exchange, infuse_context, pool_query, DeepContextSpec};
use crate::edge_focus::{edge_focus, EdgeFocusSpec, EdgeLayout};
use crate::error::{config_err, shape_err, GqnError, Result};
use crate::numerics::{backward, mlp_forward, Binding, MlpSpec, ParamStore, Scalar, Tape, Tensor, Var};
use crate::query_init::{knn_edges, top_n, GraphNode, GraphQuery, QuerySetSpec};

pub const GLOBAL: &str = "u";
pub const MLP1: &str = "mlp1";
pub const MLP2: &str = "mlp2";
pub const READOUT: &str = "readout";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GqnConfig {
    pub d: usize,
    /// Context-exchange rounds.
    pub layers: usize,
    pub sets: Vec<QuerySetSpec>,
    /// Frequency base of the positional encoding.
    pub base: f64,
    pub seed: u64,
    pub share_context: bool,
}

impl Default for GqnConfig {
    /// Small configuration for 16×16 and 8×8 grids.
    fn default() -> Self {
        Self {
            d: 8,
            layers: 2,
            sets: vec![QuerySetSpec::new(4, 0.1, 2), QuerySetSpec::new(4, 0.2, 3)],
            base: 10_000.0,
            seed: 0,
            share_context: true,
        }
    }
}

impl GqnConfig {
    /// Full-size setting: `d = 64`, six exchange rounds, three sets of 32
    /// queries at 10/20/30% with K = 4/8/12.
    pub fn reference() -> Self {
        Self {
            d: 64,
            layers: 6,
            sets: vec![
                QuerySetSpec::new(32, 0.1, 4),
                QuerySetSpec::new(32, 0.2, 8),
                QuerySetSpec::new(32, 0.3, 12),
            ],
            ..Self::default()
        }
    }

    /// Total query count `τ`.
    pub fn num_queries(&self) -> usize {
        self.sets.iter().map(|s| s.queries).sum()
    }

    /// Checks the configuration against a grid of `m_bev` cells and returns
    /// the node count of each set.
    pub fn validate(&self, m_bev: usize) -> Result<Vec<usize>> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(config_err!("feature width d = {} must be a positive multiple of 4", self.d));
        }
        if self.sets.is_empty() {
            return Err(config_err!("at least one query set is required"));
        }
        if self.sets.windows(2).any(|w| w[0].ratio >= w[1].ratio) {
            return Err(config_err!("sampling ratios must be strictly ascending"));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(config_err!("frequency base {} must exceed 1", self.base));
        }
        self.sets.iter().map(|s| s.validate(m_bev)).collect()
    }

    pub fn modules(&self) -> Result<GqnModules> {
        let d = self.d;
        let s = self.sets.len();
        Ok(GqnModules {
            edge: EdgeFocusSpec::new(d)?,
            context: DeepContextSpec::new(d, self.layers, self.share_context)?,
            mlp1: MlpSpec::relu_hidden(&[(s + 2) * d, 2 * d, d])?,
            mlp2: MlpSpec::relu_hidden(&[2 * d, d, 2])?,
        })
    }
}

/// Perceptron layouts derived from a [`GqnConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct GqnModules {
    pub edge: EdgeFocusSpec,
    pub context: DeepContextSpec,
    /// `(S + 2)d → 2d → d`: input, S set maps and positional encoding.
    pub mlp1: MlpSpec,
    /// `2d → d → 2`.
    pub mlp2: MlpSpec,
}

/// Registers every learnable tensor of the pathway, seeded by `config.seed`.
pub fn init_params<T: Scalar>(config: &GqnConfig, m_bev: usize) -> Result<ParamStore<T>> {
    config.validate(m_bev)?;
    let modules = config.modules()?;
    let mut store = ParamStore::new(config.seed);
    store.register_uniform(GLOBAL, vec![config.num_queries(), config.d])?;
    modules.edge.register(&mut store)?;
    modules.context.register(&mut store, config.d)?;
    modules.mlp1.register(&mut store, MLP1)?;
    modules.mlp2.register(&mut store, MLP2)?;
    Ok(store)
}

/// Cell pairs laid out as tensors. Rows of `states`/`positions` follow the
/// pair order; `bev_states`/`bev_positions` follow BEV index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatScene<T> {
    pub height: usize,
    pub width: usize,
    pub states: Tensor<T>,
    pub positions: Tensor<T>,
    pub indices: Vec<usize>,
    pub bev_states: Tensor<T>,
    pub bev_positions: Tensor<T>,
}

impl<T: Scalar> FlatScene<T> {
    pub fn from_pairs(pairs: &[CellPair<T>], height: usize, width: usize) -> Result<Self> {
        let m = height * width;
        let d = pairs.first().map(|p| p.state.len()).unwrap_or(0);
        if pairs.len() != m || d == 0 {
            return Err(shape_err!("{} pairs for a {height}×{width} grid", pairs.len()));
        }
        let mut row_of = vec![usize::MAX; m];
        for (r, p) in pairs.iter().enumerate() {
            if p.index >= m || row_of[p.index] != usize::MAX || p.state.len() != d || p.position.len() != d {
                return Err(shape_err!("pair for cell {} is malformed or repeated", p.index));
            }
            row_of[p.index] = r;
        }
        let collect = |rows: &mut dyn Iterator<Item = &CellPair<T>>, pos: bool| -> Result<Tensor<T>> {
            let values = rows
                .flat_map(|p| if pos { p.position.clone() } else { p.state.clone() })
                .collect();
            Tensor::matrix(m, d, values)
        };
        Ok(Self {
            height,
            width,
            states: collect(&mut pairs.iter(), false)?,
            positions: collect(&mut pairs.iter(), true)?,
            indices: pairs.iter().map(|p| p.index).collect(),
            bev_states: collect(&mut row_of.iter().map(|&r| &pairs[r]), false)?,
            bev_positions: collect(&mut row_of.iter().map(|&r| &pairs[r]), true)?,
        })
    }

    pub fn from_grid(grid: &BevGrid<T>, enc: &PosEncoding<T>) -> Result<Self> {
        Self::from_pairs(&flatten_grid(grid, enc)?, grid.height(), grid.width())
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.states.cols()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars<T> {
    /// Per set, `[Q_s, M]` in pair order.
    pub alpha: Vec<Var>,
    /// Per set, `[Q_s·N_s, K_s]`.
    pub beta: Vec<Var>,
    pub set_maps: Vec<Var>,
    pub concat: Var,
    /// Exchanged summaries `g'`, `[τ, d]`.
    pub context: Var,
    pub skip: Var,
    pub fusion_weights: Option<Var>,
    pub fused: Option<Var>,
    pub queries: Vec<GraphQuery<T>>,
}

/// Per-cell mean of node outputs over contributing nodes; `[M, d]` in BEV
/// order. Untouched cells stay zero.
pub fn project_to_bev<T: Scalar>(tape: &mut Tape<T>, nodes: Var, cells: &[usize], m_bev: usize) -> Result<Var> {
    if cells.len() != tape.value(nodes).rows() {
        return Err(shape_err!("{} target cells for {} nodes", cells.len(), tape.value(nodes).rows()));
    }
    tape.scatter_mean(nodes, cells.to_vec(), m_bev)
}

/// Channel concatenation in set order.
pub fn concat_sets<T: Scalar>(tape: &mut Tape<T>, maps: &[Var]) -> Result<Var> {
    let Some(&first) = maps.first() else {
        return Err(shape_err!("no set maps to concatenate"));
    };
    let rows = tape.value(first).rows();
    if let Some(bad) = maps.iter().find(|&&v| tape.value(v).rows() != rows) {
        return Err(shape_err!("set maps with {rows} and {} cells", tape.value(*bad).rows()));
    }
    tape.concat_cols(maps)
}

/// `MLP1(input ‖ set maps ‖ encoding)` per cell.
pub fn skip_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    mlp1: &MlpSpec,
    params: &Binding,
    input: Var,
    concat: Var,
    encoding: Var,
) -> Result<Var> {
    let width: usize = [input, concat, encoding].iter().map(|&v| tape.value(v).cols()).sum();
    if width != mlp1.input_width() {
        return Err(shape_err!("skip input of width {width}, MLP1 expects {}", mlp1.input_width()));
    }
    let joined = tape.concat_cols(&[input, concat, encoding])?;
    mlp_forward(tape, mlp1, params, MLP1, joined)
}

/// Per-cell weights `softmax(MLP2(graph ‖ global))` and the blend
/// `w₀·graph + w₁·global`. Returns `(fused, weights)`.
pub fn soft_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    mlp2: &MlpSpec,
    params: &Binding,
    graph: Var,
    global: Var,
) -> Result<(Var, Var)> {
    if tape.value(graph).shape() != tape.value(global).shape() {
        return Err(shape_err!(
            "graph map {:?} vs global map {:?}",
            tape.value(graph).shape(),
            tape.value(global).shape()
        ));
    }
    let m = tape.value(graph).rows();
    let joined = tape.concat_cols(&[graph, global])?;
    let logits = mlp_forward(tape, mlp2, params, MLP2, joined)?;
    let weights = tape.softmax_rows(logits)?;
    let mut parts = [graph, global];
    for (c, part) in parts.iter_mut().enumerate() {
        let col = tape.slice_cols(weights, c, 1)?;
        let w = tape.reshape(col, vec![m])?;
        *part = tape.row_scale(*part, w)?;
    }
    Ok((tape.add(parts[0], parts[1])?, weights))
}

struct SetPass {
    nodes: usize,
    updated: Var,
    cells: Vec<usize>,
}

/// Records the whole pathway on `tape`. `global` is an optional `[M, d]`
/// global-pathway map in BEV order.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Binding,
    config: &GqnConfig,
    modules: &GqnModules,
    scene: &FlatScene<T>,
    global: Option<Var>,
) -> Result<ForwardVars<T>> {
    let m = scene.num_cells();
    let counts = config.validate(m)?;
    if scene.feature_dim() != config.d {
        return Err(shape_err!("scene width {} vs d = {}", scene.feature_dim(), config.d));
    }
    let x = tape.leaf(scene.states.clone());
    let xt = tape.transpose(x)?;
    let u = params.get(GLOBAL)?;
    let u_values = tape.value(u).clone();

    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut passes = Vec::new();
    let mut summaries = Vec::new();
    let mut queries = Vec::new();
    let mut offset = 0;
    for (set_id, (set, &n)) in config.sets.iter().zip(&counts).enumerate() {
        let us = tape.slice_rows(u, offset, set.queries)?;
        let scores = tape.matmul(us, xt)?;
        let alpha = tape.softmax_rows(scores)?;
        let av = tape.value(alpha).clone();

        let picked: Vec<(Vec<usize>, Vec<_>)> = (0..set.queries)
            .into_par_iter()
            .map(|q| {
                let rows = top_n(av.row(q), &scene.indices, n)?;
                let states: Vec<&[T]> = rows.iter().map(|&r| scene.states.row(r)).collect();
                let edges = knn_edges(&states, set.k)?;
                Ok((rows, edges))
            })
            .collect::<Result<_>>()?;

        let first_query = queries.len();
        let mut rows_all = Vec::with_capacity(set.queries * n);
        let mut weight_idx = Vec::with_capacity(set.queries * n);
        for (q, (rows, edges)) in picked.into_iter().enumerate() {
            weight_idx.extend(rows.iter().map(|&r| q * m + r));
            rows_all.extend_from_slice(&rows);
            queries.push(GraphQuery {
                global: u_values.row(offset + q).to_vec(),
                set_id,
                ratio: set.ratio,
                k: set.k,
                nodes: rows
                    .iter()
                    .map(|&r| GraphNode {
                        bev_index: scene.indices[r],
                        state: scene.states.row(r).to_vec(),
                        position: scene.positions.row(r).to_vec(),
                        weight: av.row(q)[r],
                    })
                    .collect(),
                edges,
            });
        }

        // Selected states are reweighted by M·α so the loss reaches u through
        // the selection weights; at uniform attention the factor is 1.
        let gathered = tape.gather_rows(x, rows_all.clone())?;
        let w = tape.gather(alpha, weight_idx)?;
        let w = tape.scale(w, T::lit(m as f64))?;
        let states = tape.row_scale(gathered, w)?;
        let pos_rows: Vec<Vec<T>> = rows_all.iter().map(|&r| scene.positions.row(r).to_vec()).collect();
        let positions = Tensor::from_rows(&pos_rows)?;
        let refs: Vec<&GraphQuery<T>> = queries[first_query..].iter().collect();
        let layout = EdgeLayout::from_queries(&refs)?;
        let ef = edge_focus(tape, &modules.edge, params, states, &positions, &layout)?;
        summaries.push(pool_query(tape, ef.updated, n)?);

        alphas.push(alpha);
        betas.push(ef.beta);
        passes.push(SetPass {
            nodes: n,
            updated: ef.updated,
            cells: rows_all.iter().map(|&r| scene.indices[r]).collect(),
        });
        offset += set.queries;
    }

    let stacked = tape.concat_rows(&summaries)?;
    let context = context_exchange(tape, &modules.context, params, stacked)?;

    let mut set_maps = Vec::new();
    let mut offset = 0;
    for (set, pass) in config.sets.iter().zip(&passes) {
        let ctx = tape.slice_rows(context, offset, set.queries)?;
        let infused = infuse_context(tape, &modules.context.eta, params, pass.updated, ctx, pass.nodes)?;
        set_maps.push(project_to_bev(tape, infused, &pass.cells, m)?);
        offset += set.queries;
    }
    let concat = concat_sets(tape, &set_maps)?;
    let input = tape.leaf(scene.bev_states.clone());
    let encoding = tape.leaf(scene.bev_positions.clone());
    let skip = skip_fuse(tape, &modules.mlp1, params, input, concat, encoding)?;
    let (fused, fusion_weights) = match global {
        Some(g) => {
            let (f, w) = soft_fusion(tape, &modules.mlp2, params, skip, g)?;
            (Some(f), Some(w))
        }
        None => (None, None),
    };
    Ok(ForwardVars {
        alpha: alphas,
        beta: betas,
        set_maps,
        concat,
        context,
        skip,
        fusion_weights,
        fused,
        queries,
    })
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GqnOutput<T> {
    /// `[M, d]` per set, BEV order.
    pub set_maps: Vec<Tensor<T>>,
    /// `[M, S·d]`.
    pub concat: Tensor<T>,
    /// Exchanged global summaries `g'`, `[τ, d]`.
    pub globals: Tensor<T>,
    pub skip: Tensor<T>,
    pub fusion_weights: Option<Tensor<T>>,
    pub fused: Option<Tensor<T>>,
    pub alpha: Vec<Tensor<T>>,
    pub beta: Vec<Tensor<T>>,
    pub queries: Vec<GraphQuery<T>>,
}

pub fn run_scene<T: Scalar>(
    scene: &FlatScene<T>,
    config: &GqnConfig,
    params: &ParamStore<T>,
    global: Option<&Tensor<T>>,
) -> Result<GqnOutput<T>> {
    let modules = config.modules()?;
    let mut tape = Tape::new();
    let binding = tape.bind(params);
    let g = global.map(|g| tape.leaf(g.clone()));
    let vars = forward(&mut tape, &binding, config, &modules, scene, g)?;
    let val = |v: Var| tape.value(v).clone();
    Ok(GqnOutput {
        set_maps: vars.set_maps.iter().map(|&v| val(v)).collect(),
        concat: val(vars.concat),
        globals: val(vars.context),
        skip: val(vars.skip),
        fusion_weights: vars.fusion_weights.map(val),
        fused: vars.fused.map(val),
        alpha: vars.alpha.iter().map(|&v| val(v)).collect(),
        beta: vars.beta.iter().map(|&v| val(v)).collect(),
        queries: vars.queries,
    })
}

pub fn run_gqn<T: Scalar>(
    grid: &BevGrid<T>,
    enc: &PosEncoding<T>,
    config: &GqnConfig,
    params: &ParamStore<T>,
    global: Option<&Tensor<T>>,
) -> Result<GqnOutput<T>> {
    run_scene(&FlatScene::from_grid(grid, enc)?, config, params, global)
}

/// Same as [`run_gqn`] for pairs in any order.
pub fn run_gqn_pairs<T: Scalar>(
    pairs: &[CellPair<T>],
    height: usize,
    width: usize,
    config: &GqnConfig,
    params: &ParamStore<T>,
    global: Option<&Tensor<T>>,
) -> Result<GqnOutput<T>> {
    run_scene(&FlatScene::from_pairs(pairs, height, width)?, config, params, global)
}

/// Stand-in global-pathway map, uniform in `[-1, 1)`.
pub fn stub_global_map<T: Scalar>(m_bev: usize, d: usize, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let values = (0..m_bev * d).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    Tensor::matrix(m_bev, d, values)
}

/// Scalar loss `Σ fused` used by the end-to-end gradient check.
pub fn fused_sum_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Binding,
    config: &GqnConfig,
    modules: &GqnModules,
    scene: &FlatScene<T>,
    global: &Tensor<T>,
) -> Result<Var> {
    let g = tape.leaf(global.clone());
    let vars = forward(tape, params, config, modules, scene, Some(g))?;
    let fused = vars.fused.ok_or_else(|| GqnError::Contract("fusion produced no map".into()))?;
    tape.sum(fused)
}

/// Step count and learning rate of the training demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCurve {
    /// Loss before each step, plus the loss after the last one.
    pub losses: Vec<f64>,
    pub diverged: bool,
}

impl LossCurve {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_finite(&self) -> Option<f64> {
        self.losses.iter().rev().copied().find(|l| l.is_finite())
    }
}

/// Plain gradient descent on the mean squared error between a one-channel
/// linear readout of the skip-fused map and the scene's occupancy mask.
pub fn toy_train<T: Scalar>(scene: &SceneSpec, train: &TrainSpec, config: &GqnConfig) -> Result<LossCurve> {
    if scene.d != config.d {
        return Err(config_err!("scene width {} vs d = {}", scene.d, config.d));
    }
    if !(train.learning_rate.is_finite() && train.learning_rate > 0.0) {
        return Err(config_err!("learning rate {} must be positive", train.learning_rate));
    }
    let (grid, truth) = generate_scene::<T>(scene)?;
    let enc = sinusoidal_encoding::<T>(grid.height(), grid.width(), config.d, config.base)?;
    let flat = FlatScene::from_grid(&grid, &enc)?;
    let m = flat.num_cells();
    let modules = config.modules()?;
    let readout = MlpSpec::linear(config.d, 1, true)?;
    let mut params = init_params::<T>(config, m)?;
    readout.register(&mut params, READOUT)?;
    let target = Tensor::matrix(m, 1, truth.mask().iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
    let lr = T::lit(train.learning_rate);

    let mut losses = Vec::with_capacity(train.steps + 1);
    for step in 0..=train.steps {
        let mut tape = Tape::new();
        let binding = tape.bind(&params);
        let loss = (|| -> Result<Var> {
            let vars = forward(&mut tape, &binding, config, &modules, &flat, None)?;
            let pred = mlp_forward(&mut tape, &readout, &binding, READOUT, vars.skip)?;
            let t = tape.leaf(target.clone());
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            tape.mean(sq)
        })();
        let loss = match loss {
            Ok(l) => l,
            Err(GqnError::Numeric(_)) | Err(GqnError::InvalidInput(_)) => {
                losses.push(f64::NAN);
                return Ok(LossCurve { losses, diverged: true });
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).item()?.as_f64();
        losses.push(value);
        if !value.is_finite() {
            return Ok(LossCurve { losses, diverged: true });
        }
        if step < train.steps {
            backward(&tape, loss, &mut params, &binding)?;
            params.sgd_step(lr)?;
        }
    }
    Ok(LossCurve { losses, diverged: false })
}

//! Synthetic bird's-eye-view grids.
//!
//! A scene is a `H × W` grid of `d`-wide state features with object boxes,
//! random clutter and noise, plus a separate sinusoidal positional encoding
//! per cell. Positions are never added into the state features: attention
//! scores read states only, edge features read raw position differences.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Scalar, Tensor};

/// State features of every cell, row-major (`index = r·W + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid<T> {
    height: usize,
    width: usize,
    features: Tensor<T>,
    /// Metres per cell; metadata only.
    pub cell_size: f64,
}

impl<T: Scalar> BevGrid<T> {
    pub fn new(height: usize, width: usize, features: Tensor<T>, cell_size: f64) -> Result<Self> {
        if features.rank() != 2 || features.rows() != height * width {
            return Err(shape_err!(
                "{height}×{width} grid needs [{}, d] features, got {:?}",
                height * width,
                features.shape()
            ));
        }
        Ok(Self {
            height,
            width,
            features,
            cell_size,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        self.features.row(row * self.width + col)
    }

    /// One CSV row per cell: `r,c,f0,…,f{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["r".to_string(), "c".to_string()];
        header.extend((0..self.feature_dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for r in 0..self.height {
            for c in 0..self.width {
                let mut rec = vec![r.to_string(), c.to_string()];
                rec.extend(self.cell(r, c).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed 2-D sinusoidal encoding of every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEncoding<T> {
    encoding: Tensor<T>,
    base: f64,
}

impl<T: Scalar> PosEncoding<T> {
    pub fn encoding(&self) -> &Tensor<T> {
        &self.encoding
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn cell(&self, index: usize) -> &[T] {
        self.encoding.row(index)
    }
}

/// Sinusoidal encoding of an `H × W` grid.
///
/// The first `d/2` channels encode the column, the last `d/2` the row. Within
/// each half, channel pair `(2i, 2i+1)` holds
/// `sin(pos / base^(2i/(d/2)))` and `cos(pos / base^(2i/(d/2)))`.
pub fn sinusoidal_encoding<T: Scalar>(
    height: usize,
    width: usize,
    d: usize,
    base: f64,
) -> Result<PosEncoding<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(config_err!("positional width {d} must be a positive multiple of 4"));
    }
    if !(base > 0.0 && base.is_finite()) {
        return Err(config_err!("frequency base must be positive, got {base}"));
    }
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half / 2)
        .map(|i| base.powf((2 * i) as f64 / half as f64).recip())
        .collect();
    let mut values = Vec::with_capacity(height * width * d);
    for r in 0..height {
        for c in 0..width {
            for pos in [c as f64, r as f64] {
                for &f in &inv_freq {
                    values.push(T::lit((pos * f).sin()));
                    values.push(T::lit((pos * f).cos()));
                }
            }
        }
    }
    Ok(PosEncoding {
        encoding: Tensor::matrix(height * width, d, values)?,
        base,
    })
}

/// An axis-aligned object footprint. `(row, col)` is the top-left cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    /// Radial-velocity-like value written into the last feature channel.
    #[serde(default)]
    pub doppler: f64,
    /// Feature signature of the object; drawn from the scene seed when absent.
    #[serde(default)]
    pub signature: Option<Vec<f64>>,
}

impl ObjectBox {
    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub cell_size: f64,
    pub boxes: Vec<ObjectBox>,
    /// Probability that a background cell holds clutter.
    pub clutter_density: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// The 16×16, `d = 8` toy scene: three objects of different sizes and
    /// speeds over light clutter.
    fn default() -> Self {
        let obj = |row, col, height, width, doppler| ObjectBox {
            row,
            col,
            height,
            width,
            doppler,
            signature: None,
        };
        Self {
            height: 16,
            width: 16,
            d: 8,
            cell_size: 0.5,
            boxes: vec![
                obj(2, 3, 3, 4, 1.5),
                obj(9, 9, 4, 3, -0.8),
                obj(11, 2, 2, 2, 0.0),
            ],
            clutter_density: 0.1,
            noise_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// An 8×8 scene with two objects, sized for finite-difference checks.
    pub fn small() -> Self {
        let mut spec = Self {
            height: 8,
            width: 8,
            ..Self::default()
        };
        spec.boxes.truncate(2);
        (spec.boxes[0].row, spec.boxes[0].col, spec.boxes[0].height, spec.boxes[0].width) = (1, 1, 2, 3);
        (spec.boxes[1].row, spec.boxes[1].col, spec.boxes[1].height, spec.boxes[1].width) = (4, 5, 3, 2);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.d == 0 {
            return Err(config_err!("scene dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(config_err!("clutter density {} outside [0, 1]", self.clutter_density));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(config_err!("noise amplitude must be nonnegative"));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.height == 0 || b.width == 0 || b.row + b.height > self.height || b.col + b.width > self.width {
                return Err(config_err!("box {i} does not lie inside the {}×{} grid", self.height, self.width));
            }
            if let Some(sig) = &b.signature {
                if sig.len() != self.d {
                    return Err(config_err!("box {i} signature has {} channels, expected {}", sig.len(), self.d));
                }
            }
        }
        Ok(())
    }
}

/// Supervision target derived from the boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    /// Owning box per cell; overlapping boxes resolve to the later one.
    pub object_id: Vec<Option<usize>>,
}

impl SceneTruth {
    pub fn mask(&self) -> Vec<bool> {
        self.object_id.iter().map(Option::is_some).collect()
    }

    pub fn occupied(&self) -> usize {
        self.object_id.iter().filter(|o| o.is_some()).count()
    }
}

const CLUTTER_MAGNITUDE: f64 = 0.2;
const EMPTY_NOISE_SCALE: f64 = 0.1;

/// Renders a scene.
///
/// Object cells carry the object's signature plus uniform noise of the given
/// amplitude; clutter cells carry low-magnitude random features; the rest is
/// scaled-down noise. The output is a pure function of `spec`.
pub fn generate_scene<T: Scalar>(spec: &SceneSpec) -> Result<(BevGrid<T>, SceneTruth)> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures: Vec<Vec<f64>> = spec
        .boxes
        .iter()
        .map(|b| {
            b.signature.clone().unwrap_or_else(|| {
                let mut s: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                s[d - 1] = b.doppler;
                s
            })
        })
        .collect();
    let mut values = Vec::with_capacity(spec.height * spec.width * d);
    let mut object_id = Vec::with_capacity(spec.height * spec.width);
    let noise = |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
        if scale == 0.0 {
            0.0
        } else {
            scale * rng.gen_range(-1.0..=1.0)
        }
    };
    for r in 0..spec.height {
        for c in 0..spec.width {
            let owner = spec.boxes.iter().rposition(|b| b.contains(r, c));
            object_id.push(owner);
            match owner {
                Some(o) => {
                    for ch in 0..d {
                        let v = signatures[o][ch] + noise(&mut rng, spec.noise_amplitude);
                        values.push(T::lit(v));
                    }
                }
                None if spec.clutter_density > 0.0 && rng.gen_bool(spec.clutter_density) => {
                    for _ in 0..d {
                        let v = noise(&mut rng, CLUTTER_MAGNITUDE) + noise(&mut rng, spec.noise_amplitude);
                        values.push(T::lit(v));
                    }
                }
                None => {
                    for _ in 0..d {
                        values.push(T::lit(noise(&mut rng, spec.noise_amplitude * EMPTY_NOISE_SCALE)));
                    }
                }
            }
        }
    }
    let grid = BevGrid::new(
        spec.height,
        spec.width,
        Tensor::matrix(spec.height * spec.width, d, values)?,
        spec.cell_size,
    )?;
    Ok((grid, SceneTruth { object_id }))
}

/// A cell's state and position, tagged with its BEV index.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPair<T> {
    pub index: usize,
    pub state: Vec<T>,
    pub position: Vec<T>,
}

/// Row-major list of `(x_k, p_k)` pairs.
pub fn flatten_grid<T: Scalar>(grid: &BevGrid<T>, enc: &PosEncoding<T>) -> Result<Vec<CellPair<T>>> {
    if enc.encoding.rows() != grid.num_cells() || enc.encoding.cols() != grid.feature_dim() {
        return Err(shape_err!(
            "encoding {:?} does not match grid of {} cells × {}",
            enc.encoding.shape(),
            grid.num_cells(),
            grid.feature_dim()
        ));
    }
    Ok((0..grid.num_cells())
        .map(|k| CellPair {
            index: k,
            state: grid.features.row(k).to_vec(),
            position: enc.encoding.row(k).to_vec(),
        })
        .collect())
}

/// Rebuilds the grid and encoding from pairs in any order.
pub fn unflatten_grid<T: Scalar>(
    pairs: &[CellPair<T>],
    height: usize,
    width: usize,
    cell_size: f64,
    base: f64,
) -> Result<(BevGrid<T>, PosEncoding<T>)> {
    let cells = height * width;
    let d = pairs.first().map(|p| p.state.len()).unwrap_or(0);
    if pairs.len() != cells || d == 0 {
        return Err(shape_err!("{} pairs for a {height}×{width} grid", pairs.len()));
    }
    let mut states = vec![T::zero(); cells * d];
    let mut positions = vec![T::zero(); cells * d];
    let mut seen = vec![false; cells];
    for p in pairs {
        if p.index >= cells || seen[p.index] || p.state.len() != d || p.position.len() != d {
            return Err(shape_err!("pair for cell {} is malformed or repeated", p.index));
        }
        seen[p.index] = true;
        states[p.index * d..(p.index + 1) * d].copy_from_slice(&p.state);
        positions[p.index * d..(p.index + 1) * d].copy_from_slice(&p.position);
    }
    Ok((
        BevGrid::new(height, width, Tensor::matrix(cells, d, states)?, cell_size)?,
        PosEncoding {
            encoding: Tensor::matrix(cells, d, positions)?,
            base,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_cell_is_sin_zero_cos_one() {
        for d in [4, 8, 16] {
            let enc = sinusoidal_encoding::<f64>(3, 5, d, 100.0).unwrap();
            let cell = enc.cell(0);
            for pair in cell.chunks(2) {
                assert_eq!(pair, &[0.0, 1.0]);
            }
        }
    }

    #[test]
    fn encoding_channel_formula() {
        let enc = sinusoidal_encoding::<f64>(4, 6, 8, 100.0).unwrap();
        let (r, c) = (3, 5);
        let cell = enc.cell(r * 6 + c);
        // half = 4; frequencies 1 and 100^(-2/4) = 0.1.
        let expect = [
            (5.0f64).sin(),
            (5.0f64).cos(),
            (0.5f64).sin(),
            (0.5f64).cos(),
            (3.0f64).sin(),
            (3.0f64).cos(),
            (0.3f64).sin(),
            (0.3f64).cos(),
        ];
        for (a, b) in cell.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(enc.encoding().values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encoding_needs_multiple_of_four() {
        assert!(matches!(
            sinusoidal_encoding::<f64>(2, 2, 6, 100.0),
            Err(crate::GqnError::Config(_))
        ));
    }

    fn bare_spec() -> SceneSpec {
        SceneSpec {
            height: 8,
            width: 8,
            d: 4,
            cell_size: 1.0,
            boxes: vec![ObjectBox {
                row: 2,
                col: 3,
                height: 3,
                width: 3,
                doppler: 1.0,
                signature: None,
            }],
            clutter_density: 0.0,
            noise_amplitude: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn clean_scene_is_nonzero_only_in_boxes() {
        let (grid, truth) = generate_scene::<f64>(&bare_spec()).unwrap();
        assert_eq!(truth.occupied(), 9);
        for k in 0..grid.num_cells() {
            let nonzero = grid.features().row(k).iter().any(|&v| v != 0.0);
            if truth.object_id[k].is_none() {
                assert!(!nonzero, "cell {k}");
            }
        }
        assert_eq!(grid.cell(2, 3)[3], 1.0);
    }

    #[test]
    fn later_box_wins_overlap() {
        let mut spec = bare_spec();
        spec.boxes.push(ObjectBox {
            row: 4,
            col: 5,
            height: 2,
            width: 2,
            doppler: -1.0,
            signature: Some(vec![9.0, 9.0, 9.0, -1.0]),
        });
        let (grid, truth) = generate_scene::<f64>(&spec).unwrap();
        // 9 + 4 − 1 overlapping cell
        assert_eq!(truth.occupied(), 12);
        assert_eq!(truth.object_id[4 * 8 + 5], Some(1));
        assert_eq!(grid.cell(4, 5), &[9.0, 9.0, 9.0, -1.0]);
    }

    #[test]
    fn scene_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene::<f64>(&spec).unwrap();
        let b = generate_scene::<f64>(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let mut spec = bare_spec();
        spec.boxes[0].row = 7;
        assert!(generate_scene::<f64>(&spec).is_err());
    }

    #[test]
    fn flatten_indexing() {
        let spec = SceneSpec {
            height: 2,
            width: 3,
            d: 4,
            boxes: vec![],
            ..bare_spec()
        };
        let (grid, _) = generate_scene::<f64>(&spec).unwrap();
        let enc = sinusoidal_encoding(2, 3, 4, 100.0).unwrap();
        let pairs = flatten_grid(&grid, &enc).unwrap();
        assert_eq!(pairs.len(), 6);
        assert_eq!(pairs[5].index, 5);
        assert_eq!(pairs[5].state, grid.cell(1, 2));
        assert_eq!(pairs[5].position, enc.cell(5));
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        let (g2, e2) = unflatten_grid(&shuffled, 2, 3, grid.cell_size, 100.0).unwrap();
        assert_eq!(g2, grid);
        assert_eq!(e2, enc);
    }

    #[test]
    fn flatten_rejects_mismatch() {
        let (grid, _) = generate_scene::<f64>(&bare_spec()).unwrap();
        let enc = sinusoidal_encoding(8, 8, 8, 100.0).unwrap();
        assert!(flatten_grid(&grid, &enc).is_err());
    }
}

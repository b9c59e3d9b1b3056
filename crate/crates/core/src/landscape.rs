//! Loss-surface workbench: two-dimensional slices of the loss around a
//! parameter point along random filter-normalized directions, plus the
//! deep-skinny training demo that contrasts a chain MLP with and without
//! output skips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::engine::{EvalGraph, ParamState};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::netgraph::{mlp, ActivationKind, AugmentOptions, NetworkSpec};
use crate::solvers::{init_truncated_gaussian, sgd_train, SgdConfig, TrainHistory};

/// How random slice directions are rescaled against the center point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionNorm {
    /// Each neuron's block (its incoming-weight slot, each output unit's
    /// column of `V`, each bias scalar) is rescaled to the norm of the
    /// matching center block; zero-norm center blocks zero the direction
    /// there. This is the filter-wise convention of loss-surface plots.
    PerBlock,
    /// The whole direction vector is rescaled to the norm of the whole
    /// center vector.
    Global,
}

/// A sampled 2-D restriction of the loss surface.
///
/// `values[i][j] = Φ(center + axis1[i]·dir1 + axis2[j]·dir2)`, with the
/// center cell at the midpoint of both axes (`resolution` is odd).
/// Parameters and directions are stored as flat vectors in canonical
/// schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub loss_kind: LossKind,
    pub resolution: usize,
    /// Half-width of the grid along each direction.
    pub extent: f64,
    /// `(min, max)` offset per axis.
    pub extents: ((f64, f64), (f64, f64)),
    /// Offsets along `dir1` (length `resolution`, symmetric around 0).
    pub axis1: Vec<f64>,
    /// Offsets along `dir2`.
    pub axis2: Vec<f64>,
    pub center: Vec<f64>,
    pub dir1: Vec<f64>,
    pub dir2: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    /// Loss at the center cell (offset 0 along both directions).
    pub fn center_value(&self) -> f64 {
        let mid = self.resolution / 2;
        self.values[mid][mid]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Flat `a,b,loss` table for external plotting tools.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "offset1,offset2,loss")?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", self.axis1[i], self.axis2[j], v)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Symmetric offsets `−extent … extent` with an exact 0 at the midpoint.
fn axis_offsets(extent: f64, resolution: usize) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.0];
    }
    (0..resolution)
        .map(|i| extent * ((2 * i) as f64 / (resolution - 1) as f64 - 1.0))
        .collect()
}

/// Draws a standard-normal direction over the full parameter vector.
fn draw_direction(rng: &mut ChaCha20Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Rescales `slice` to the Euclidean norm of `reference`; zero reference
/// blocks zero the direction block.
fn rescale_block(slice: &mut [f64], reference: &[f64]) {
    let ref_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir_norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 || dir_norm == 0.0 {
        slice.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let scale = ref_norm / dir_norm;
        slice.iter_mut().for_each(|v| *v *= scale);
    }
}

fn normalize_direction(
    dir: &mut [f64],
    center: &[f64],
    layout: &crate::engine::ParamLayout,
    norm: DirectionNorm,
) {
    match norm {
        DirectionNorm::Global => rescale_block(dir, center),
        DirectionNorm::PerBlock => {
            for slot in layout.slots() {
                let range = slot.offset..slot.offset + slot.len;
                rescale_block(&mut dir[range.clone()], &center[range]);
            }
            for o in layout.bias_offset()..layout.v_offset() {
                rescale_block(&mut dir[o..o + 1], &center[o..o + 1]);
            }
            // V is stored row-major (skip unit × output); an output unit's
            // incoming block is a column.
            let m = layout.output_count();
            let v0 = layout.v_offset();
            let rows = layout.skip_count();
            for j in 0..m {
                let mut dcol: Vec<f64> = (0..rows).map(|r| dir[v0 + r * m + j]).collect();
                let ccol: Vec<f64> = (0..rows).map(|r| center[v0 + r * m + j]).collect();
                rescale_block(&mut dcol, &ccol);
                for (r, v) in dcol.into_iter().enumerate() {
                    dir[v0 + r * m + j] = v;
                }
            }
        }
    }
}

/// Samples the loss on a `resolution × resolution` grid spanned by two
/// random directions around `center`, after per-block (filter-wise)
/// normalization. `resolution` must be odd so the center cell exists.
pub fn landscape_slice(
    spec: &NetworkSpec,
    data: &Dataset,
    center: &ParamState,
    seed: u64,
    extent: f64,
    resolution: usize,
    loss_kind: LossKind,
) -> Result<LandscapeGrid> {
    landscape_slice_with(
        spec,
        data,
        center,
        seed,
        extent,
        resolution,
        loss_kind,
        DirectionNorm::PerBlock,
    )
}

/// [`landscape_slice`] with an explicit normalization mode.
#[allow(clippy::too_many_arguments)]
pub fn landscape_slice_with(
    spec: &NetworkSpec,
    data: &Dataset,
    center: &ParamState,
    seed: u64,
    extent: f64,
    resolution: usize,
    loss_kind: LossKind,
    norm: DirectionNorm,
) -> Result<LandscapeGrid> {
    let graph = EvalGraph::new(spec)?;
    let layout = graph.layout();
    let flat_center = center.flatten(layout)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut dir1 = draw_direction(&mut rng, flat_center.len());
    let mut dir2 = draw_direction(&mut rng, flat_center.len());
    normalize_direction(&mut dir1, &flat_center, layout, norm);
    normalize_direction(&mut dir2, &flat_center, layout, norm);
    landscape_slice_with_directions(
        spec, data, center, &dir1, &dir2, extent, resolution, loss_kind,
    )
}

/// Grid evaluation along caller-supplied directions (no drawing, no
/// normalization) — the deterministic backbone of the random variants and
/// a hook for controlled experiments.
#[allow(clippy::too_many_arguments)]
pub fn landscape_slice_with_directions(
    spec: &NetworkSpec,
    data: &Dataset,
    center: &ParamState,
    dir1: &[f64],
    dir2: &[f64],
    extent: f64,
    resolution: usize,
    loss_kind: LossKind,
) -> Result<LandscapeGrid> {
    if resolution == 0 || resolution.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "grid resolution must be odd so the center cell exists, got {resolution}"
        )));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "extent must be finite and positive, got {extent}"
        )));
    }
    let graph = EvalGraph::new(spec)?;
    let layout = graph.layout();
    let flat_center = center.flatten(layout)?;
    if dir1.len() != flat_center.len() || dir2.len() != flat_center.len() {
        return Err(Error::ShapeMismatch(format!(
            "directions must have {} entries, got {} and {}",
            flat_center.len(),
            dir1.len(),
            dir2.len()
        )));
    }
    let offsets = axis_offsets(extent, resolution);
    // Cells are pure loss evaluations over shared immutable state.
    let cells: Vec<(usize, usize)> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| (i, j)))
        .collect();
    let flat_values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let a = offsets[i];
            let b = offsets[j];
            let point: Vec<f64> = flat_center
                .iter()
                .zip(dir1.iter().zip(dir2))
                .map(|(&c, (&d1, &d2))| c + a * d1 + b * d2)
                .collect();
            graph.loss_flat(&point, data, loss_kind, None)
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = flat_values
        .chunks(resolution)
        .map(|row| row.to_vec())
        .collect();
    Ok(LandscapeGrid {
        loss_kind,
        resolution,
        extent,
        extents: (
            (offsets[0], offsets[resolution - 1]),
            (offsets[0], offsets[resolution - 1]),
        ),
        axis1: offsets.clone(),
        axis2: offsets,
        center: flat_center,
        dir1: dir1.to_vec(),
        dir2: dir2.to_vec(),
        values,
    })
}

/// Outcome of [`deep_skinny_demo`]: the exact network trained, its final
/// parameters, and the epoch history.
#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub spec: NetworkSpec,
    pub params: ParamState,
    pub history: TrainHistory,
}

/// Builds a chain MLP of `depth` hidden layers of `width` units, optionally
/// augments it with `N` output skips (one per training sample, drawn across
/// all layers), and trains it with SGD — the side-by-side protocol showing
/// that very deep, narrow nets train once the skips are in place.
///
/// The skip flag changes only the skip set; the hidden topology is shared
/// by both variants.
pub fn deep_skinny_demo(
    depth: usize,
    width: usize,
    data: &Dataset,
    activation: ActivationKind,
    with_skips: bool,
    config: &SgdConfig,
) -> Result<DemoOutcome> {
    if width == 0 {
        return Err(Error::InvalidInput("width must be ≥ 1".into()));
    }
    if depth == 0 {
        return Err(Error::InvalidInput("depth must be ≥ 1".into()));
    }
    let widths = vec![width; depth];
    // The plain variant still needs a nonempty skip set to produce outputs;
    // wiring the deepest layer to the outputs is exactly the ordinary
    // "last hidden layer feeds the classifier" topology.
    let base = mlp(data.d(), &widths, data.m(), activation, true)?;
    let spec = if with_skips {
        let no_skip = mlp(data.d(), &widths, data.m(), activation, false)?;
        no_skip.augment_with_skips(
            data.n(),
            config.seed,
            &AugmentOptions {
                layer_range: None,
                keep_last_layer: false,
            },
        )?
    } else {
        base
    };
    let params0 = init_truncated_gaussian(&spec, config.seed)?;
    let (params, history) = sgd_train(&spec, data, &params0, config, LossKind::CrossEntropy)?;
    Ok(DemoOutcome {
        spec,
        params,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::engine::ParamLayout;
    use crate::solvers::random_feature_fit;

    const SIG: ActivationKind = ActivationKind::Sigmoid;

    fn setup() -> (NetworkSpec, Dataset, ParamState) {
        let spec = mlp(3, &[5], 2, SIG, true).unwrap();
        let data = synth_dataset(4, 3, 2, 1.5, 11).unwrap();
        let params = random_feature_fit(&spec, &data, 3, None).unwrap().params;
        (spec, data, params)
    }

    #[test]
    fn resolution_one_is_a_single_center_cell() {
        let (spec, data, params) = setup();
        let grid =
            landscape_slice(&spec, &data, &params, 5, 1.0, 1, LossKind::CrossEntropy).unwrap();
        assert_eq!(grid.values.len(), 1);
        assert_eq!(grid.values[0].len(), 1);
        let graph = EvalGraph::new(&spec).unwrap();
        let direct = graph.loss(&params, &data, LossKind::CrossEntropy).unwrap();
        assert_eq!(grid.center_value().to_bits(), direct.to_bits());
    }

    #[test]
    fn center_cell_matches_a_direct_evaluation() {
        let (spec, data, params) = setup();
        let grid =
            landscape_slice(&spec, &data, &params, 5, 0.7, 5, LossKind::CrossEntropy).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let direct = graph.loss(&params, &data, LossKind::CrossEntropy).unwrap();
        assert!((grid.center_value() - direct).abs() <= 1e-12);
        assert_eq!(grid.axis1[2], 0.0);
        assert_eq!(grid.extents.0, (-0.7, 0.7));
        assert!(grid.all_finite());
    }

    #[test]
    fn zero_second_direction_degenerates_to_one_axis() {
        let (spec, data, params) = setup();
        let layout = ParamLayout::of(&spec).unwrap();
        let n = layout.n_params();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let dir1 = draw_direction(&mut rng, n);
        let dir2 = vec![0.0; n];
        let grid = landscape_slice_with_directions(
            &spec,
            &data,
            &params,
            &dir1,
            &dir2,
            0.5,
            5,
            LossKind::CrossEntropy,
        )
        .unwrap();
        for row in &grid.values {
            for v in row {
                assert_eq!(v.to_bits(), row[0].to_bits());
            }
        }
    }

    #[test]
    fn per_block_normalization_matches_center_block_norms() {
        let (spec, data, params) = setup();
        let grid =
            landscape_slice(&spec, &data, &params, 21, 1.0, 3, LossKind::CrossEntropy).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        for slot in layout.slots() {
            let range = slot.offset..slot.offset + slot.len;
            let cn = norm(&grid.center[range.clone()]);
            let dn = norm(&grid.dir1[range]);
            if cn > 0.0 {
                assert!(
                    (dn - cn).abs() <= 1e-9 * cn.max(1.0),
                    "dir {dn} vs center {cn}"
                );
            } else {
                assert_eq!(dn, 0.0);
            }
        }
        // Biases start at zero here, so their direction entries must vanish.
        for o in layout.bias_offset()..layout.v_offset() {
            if grid.center[o] == 0.0 {
                assert_eq!(grid.dir1[o], 0.0);
            }
        }
        // Each output column of V is rescaled to the center column norm.
        let m = layout.output_count();
        let v0 = layout.v_offset();
        for j in 0..m {
            let ccol: Vec<f64> = (0..layout.skip_count())
                .map(|r| grid.center[v0 + r * m + j])
                .collect();
            let dcol: Vec<f64> = (0..layout.skip_count())
                .map(|r| grid.dir1[v0 + r * m + j])
                .collect();
            let (cn, dn) = (norm(&ccol), norm(&dcol));
            assert!((dn - cn).abs() <= 1e-9 * cn.max(1.0));
        }
    }

    #[test]
    fn global_normalization_matches_whole_vector_norm() {
        let (spec, data, params) = setup();
        let grid = landscape_slice_with(
            &spec,
            &data,
            &params,
            21,
            1.0,
            3,
            LossKind::CrossEntropy,
            DirectionNorm::Global,
        )
        .unwrap();
        let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cn = norm(&grid.center);
        assert!((norm(&grid.dir1) - cn).abs() <= 1e-9 * cn);
        assert!((norm(&grid.dir2) - cn).abs() <= 1e-9 * cn);
    }

    #[test]
    fn slices_are_seed_deterministic() {
        let (spec, data, params) = setup();
        let a = landscape_slice(&spec, &data, &params, 77, 1.0, 3, LossKind::Square).unwrap();
        let b = landscape_slice(&spec, &data, &params, 77, 1.0, 3, LossKind::Square).unwrap();
        assert_eq!(a, b);
        let c = landscape_slice(&spec, &data, &params, 78, 1.0, 3, LossKind::Square).unwrap();
        assert_ne!(a.dir1, c.dir1);
    }

    #[test]
    fn grid_survives_a_json_round_trip() {
        let (spec, data, params) = setup();
        let grid =
            landscape_slice(&spec, &data, &params, 5, 0.3, 3, LossKind::CrossEntropy).unwrap();
        let text = grid.to_json().unwrap();
        let back = LandscapeGrid::from_json(&text).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn csv_export_has_one_line_per_cell() {
        let (spec, data, params) = setup();
        let grid =
            landscape_slice(&spec, &data, &params, 5, 0.3, 3, LossKind::CrossEntropy).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        grid.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 9);
        assert!(text.starts_with("offset1,offset2,loss"));
    }

    #[test]
    fn even_resolution_is_rejected() {
        let (spec, data, params) = setup();
        assert!(matches!(
            landscape_slice(&spec, &data, &params, 5, 1.0, 4, LossKind::CrossEntropy).unwrap_err(),
            Error::InvalidInput(_)
        ));
        assert!(matches!(
            landscape_slice(&spec, &data, &params, 5, 0.0, 3, LossKind::CrossEntropy).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn depth_one_demo_trains_both_variants() {
        let data = synth_dataset(6, 3, 2, 3.0, 21).unwrap();
        let config = SgdConfig {
            epochs: 3,
            lr0: 0.05,
            seed: 2,
            ..SgdConfig::default()
        };
        let plain = deep_skinny_demo(1, 8, &data, SIG, false, &config).unwrap();
        let skip = deep_skinny_demo(1, 8, &data, SIG, true, &config).unwrap();
        assert_eq!(plain.history.epochs.len(), 3);
        assert_eq!(skip.history.epochs.len(), 3);
        assert_eq!(
            plain.spec.skip_count(),
            8,
            "plain variant taps the last layer"
        );
        assert_eq!(skip.spec.skip_count(), 6, "skip variant taps N units");
    }

    #[test]
    fn skip_flag_changes_only_the_skip_set() {
        let data = synth_dataset(5, 3, 2, 3.0, 23).unwrap();
        let config = SgdConfig {
            epochs: 1,
            seed: 4,
            ..SgdConfig::default()
        };
        let plain = deep_skinny_demo(2, 4, &data, SIG, false, &config).unwrap();
        let skip = deep_skinny_demo(2, 4, &data, SIG, true, &config).unwrap();
        // Hidden neurons agree one-for-one; only the output wiring differs.
        for (a, b) in plain
            .spec
            .neurons
            .iter()
            .zip(&skip.spec.neurons)
            .filter(|(a, _)| a.activation.is_some())
        {
            assert_eq!(a.id, b.id);
            assert_eq!(a.layer, b.layer);
            assert_eq!(a.inputs, b.inputs);
        }
        assert_ne!(plain.spec.skip_set, skip.spec.skip_set);
    }
}

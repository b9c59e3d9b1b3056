//! Numerical evaluation of skip-to-output networks: forward passes, the
//! skip-feature matrix `Ψ`, output logits `G = ΨV`, and reverse-mode
//! gradients for all supported losses.
//!
//! The engine compiles a validated [`NetworkSpec`] into a flat execution
//! plan once ([`EvalGraph::new`]) and then evaluates it over datasets. Two
//! rules keep results reproducible across runs and thread counts:
//!
//! * every per-unit accumulation runs in ascending source-id order, no
//!   matter how the unit's input list was declared, so two specs that
//!   differ only in declared edge order produce bit-identical values;
//! * dataset-level reductions fold a fixed number of contiguous partitions
//!   in index order. The partition count is the rayon thread count, or 1 in
//!   deterministic mode ([`EvalGraph::set_deterministic`]), which makes
//!   results independent of the machine's parallelism.
//!
//! Parameters live in [`ParamState`] keyed by unit (or sharing group) and
//! serialize to versioned JSON or to the compact binary checkpoint format
//! (magic `VLLY`). Both follow the canonical schema order defined by
//! [`ParamLayout`]: weight slots by first owning unit, then biases by unit
//! id, then the output-weight matrix `V` row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{self, LossKind};
use crate::netgraph::{ActivationKind, NetworkSpec};

/// Magic bytes opening every binary checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLLY";
/// Current binary checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Current JSON parameter schema version.
const PARAM_FORMAT: u32 = 1;

// ---------------------------------------------------------------------------
// Activation kernels
// ---------------------------------------------------------------------------

/// Evaluates an activation. All branches are overflow-safe for any finite
/// argument: the logistic uses the sign-split form and softplus the
/// `max(t,0) + log1p(e^{−γ|t|})/γ` form.
pub fn activate(kind: ActivationKind, t: f64) -> f64 {
    match kind {
        ActivationKind::Sigmoid => logistic(t),
        ActivationKind::Tanh => t.tanh(),
        ActivationKind::Softplus { gamma } => t.max(0.0) + (-gamma * t.abs()).exp().ln_1p() / gamma,
    }
}

/// First derivative of [`activate`]; strictly positive everywhere, which is
/// what makes pre-activation orderings survive the nonlinearity.
pub fn activate_slope(kind: ActivationKind, t: f64) -> f64 {
    match kind {
        ActivationKind::Sigmoid => {
            let s = logistic(t);
            s * (1.0 - s)
        }
        ActivationKind::Tanh => {
            let th = t.tanh();
            1.0 - th * th
        }
        ActivationKind::Softplus { gamma } => logistic(gamma * t),
    }
}

/// Inverse activation, used to translate feature-value targets back into
/// pre-activation space. Errors with [`Error::InvalidInput`] outside the
/// open range of the activation.
// Negated range comparisons are deliberate: a NaN comparison is false, so
// `!(y > lo && y < hi)` rejects NaN where `y <= lo || y >= hi` would not.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn activate_inverse(kind: ActivationKind, y: f64) -> Result<f64> {
    match kind {
        ActivationKind::Sigmoid => {
            if !(y > 0.0 && y < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "sigmoid inverse needs y in (0,1), got {y}"
                )));
            }
            // log(y/(1−y)) with log1p for the upper branch.
            Ok(y.ln() - (-y).ln_1p())
        }
        ActivationKind::Tanh => {
            if !(y > -1.0 && y < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "tanh inverse needs y in (−1,1), got {y}"
                )));
            }
            Ok(y.atanh())
        }
        ActivationKind::Softplus { gamma } => {
            if !(y > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "softplus inverse needs y > 0, got {y}"
                )));
            }
            // σ⁻¹(y) = y + log(1 − e^{−γy})/γ, with expm1 keeping the small-y
            // branch accurate (1 − e^{−u} ≈ u).
            Ok(y + (-(-gamma * y).exp_m1()).ln() / gamma)
        }
    }
}

/// Overflow-safe logistic function.
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Parameter schema
// ---------------------------------------------------------------------------

/// Owner of one weight vector: a single unit, or a sharing group whose
/// members all read through the same vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum WeightKey {
    Neuron(usize),
    Group(usize),
}

impl std::fmt::Display for WeightKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightKey::Neuron(id) => write!(f, "neuron {id}"),
            WeightKey::Group(id) => write!(f, "group {id}"),
        }
    }
}

/// One weight vector's place in the canonical flat schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightSlot {
    pub key: WeightKey,
    /// Vector length = fan-in of the owning unit(s).
    pub len: usize,
    /// Offset of the first element in the flat parameter vector.
    pub offset: usize,
    /// Smallest unit id reading through this slot; slots are ordered by it.
    pub first_unit: usize,
}

/// Canonical flat ordering of every trainable parameter of a network:
/// weight slots (ascending by first owning unit, each group appearing
/// once), then one bias per hidden unit ascending by id (biases are never
/// shared, even inside sharing groups), then `V` row-major with rows in
/// skip-set order.
///
/// Everything that must agree on parameter order — checkpoints, random
/// initialization, finite-difference sweeps, flat SGD updates — goes
/// through this layout.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    slots: Vec<WeightSlot>,
    slot_index: BTreeMap<WeightKey, usize>,
    d: usize,
    h: usize,
    m_out: usize,
    m_skip: usize,
    n_weights: usize,
}

impl ParamLayout {
    /// Derives the layout from a spec, rejecting structurally invalid
    /// networks with [`Error::InvalidInput`].
    pub fn of(spec: &NetworkSpec) -> Result<ParamLayout> {
        let report = spec.validate();
        if !report.is_valid() {
            let first = &report.violations[0];
            return Err(Error::InvalidInput(format!(
                "invalid network ({} violation(s); first: {})",
                report.violations.len(),
                first.message
            )));
        }
        let mut slots: Vec<WeightSlot> = Vec::new();
        let mut slot_index = BTreeMap::new();
        for id in spec.hidden_ids() {
            let n = spec.neuron(id).expect("validated hidden id");
            let key = n
                .sharing_group
                .map(WeightKey::Group)
                .unwrap_or(WeightKey::Neuron(id));
            if let std::collections::btree_map::Entry::Vacant(slot) = slot_index.entry(key) {
                slot.insert(slots.len());
                slots.push(WeightSlot {
                    key,
                    len: n.inputs.len(),
                    offset: 0,
                    first_unit: id,
                });
            }
        }
        let mut offset = 0;
        for s in &mut slots {
            s.offset = offset;
            offset += s.len;
        }
        Ok(ParamLayout {
            slots,
            slot_index,
            d: spec.d,
            h: spec.h,
            m_out: spec.m,
            m_skip: spec.skip_count(),
            n_weights: offset,
        })
    }

    /// Weight slots in schema order.
    pub fn slots(&self) -> &[WeightSlot] {
        &self.slots
    }

    /// Slot position for a weight owner, if the network has it.
    pub fn slot_of(&self, key: WeightKey) -> Option<usize> {
        self.slot_index.get(&key).copied()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn hidden_count(&self) -> usize {
        self.h
    }

    pub fn output_count(&self) -> usize {
        self.m_out
    }

    pub fn skip_count(&self) -> usize {
        self.m_skip
    }

    /// Total number of independent weight-vector entries.
    pub fn n_weights(&self) -> usize {
        self.n_weights
    }

    /// Offset of the bias block in the flat vector.
    pub fn bias_offset(&self) -> usize {
        self.n_weights
    }

    /// Offset of the row-major `V` block in the flat vector.
    pub fn v_offset(&self) -> usize {
        self.n_weights + self.h
    }

    /// Total flat parameter count.
    pub fn n_params(&self) -> usize {
        self.n_weights + self.h + self.m_skip * self.m_out
    }

    /// Hidden-unit ids in bias order (`d+1..=d+H`).
    fn bias_ids(&self) -> impl Iterator<Item = usize> {
        (self.d + 1)..=(self.d + self.h)
    }
}

/// All trainable parameters of one network. Plain data: weight vectors per
/// owner, one bias per hidden unit (biases are per-unit even under weight
/// sharing — the zero-error construction needs independent biases), and the
/// skip-to-output matrix `V` (skip-count × m, rows in skip-set order).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub weights: BTreeMap<WeightKey, Vec<f64>>,
    pub biases: BTreeMap<usize, f64>,
    pub v: Matrix,
}

/// Gradients reuse the parameter container: same keys, same shapes, entry
/// `k` holding `∂Φ/∂θ_k`.
pub type ParamGradient = ParamState;

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    #[serde(flatten)]
    owner: WeightKey,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BiasEntry {
    neuron: usize,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format: u32,
    weights: Vec<WeightEntry>,
    biases: Vec<BiasEntry>,
    v: Vec<Vec<f64>>,
}

impl ParamState {
    /// All-zero parameters shaped for `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Result<ParamState> {
        let layout = ParamLayout::of(spec)?;
        Ok(Self::from_flat(&layout, &vec![0.0; layout.n_params()]))
    }

    /// Checks that keys and shapes exactly match a layout.
    pub fn check_shapes(&self, layout: &ParamLayout) -> Result<()> {
        if self.weights.len() != layout.slots.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight vectors for a network with {} slots",
                self.weights.len(),
                layout.slots.len()
            )));
        }
        for slot in &layout.slots {
            match self.weights.get(&slot.key) {
                None => {
                    return Err(Error::ShapeMismatch(format!(
                        "missing weight vector for {}",
                        slot.key
                    )))
                }
                Some(w) if w.len() != slot.len => {
                    return Err(Error::ShapeMismatch(format!(
                        "weight vector for {} has length {}, expected {}",
                        slot.key,
                        w.len(),
                        slot.len
                    )))
                }
                _ => {}
            }
        }
        if self.biases.len() != layout.h {
            return Err(Error::ShapeMismatch(format!(
                "{} biases for {} hidden units",
                self.biases.len(),
                layout.h
            )));
        }
        for id in layout.bias_ids() {
            if !self.biases.contains_key(&id) {
                return Err(Error::ShapeMismatch(format!("missing bias for unit {id}")));
            }
        }
        if self.v.rows() != layout.m_skip || self.v.cols() != layout.m_out {
            return Err(Error::ShapeMismatch(format!(
                "V is {}×{}, expected {}×{}",
                self.v.rows(),
                self.v.cols(),
                layout.m_skip,
                layout.m_out
            )));
        }
        Ok(())
    }

    /// Serializes into the canonical flat schema order.
    pub fn flatten(&self, layout: &ParamLayout) -> Result<Vec<f64>> {
        self.check_shapes(layout)?;
        let mut flat = vec![0.0; layout.n_params()];
        for slot in &layout.slots {
            let w = &self.weights[&slot.key];
            flat[slot.offset..slot.offset + slot.len].copy_from_slice(w);
        }
        for (k, id) in layout.bias_ids().enumerate() {
            flat[layout.bias_offset() + k] = self.biases[&id];
        }
        flat[layout.v_offset()..].copy_from_slice(self.v.data());
        Ok(flat)
    }

    /// Rebuilds a state from a flat vector, checking length and finiteness.
    pub fn unflatten(layout: &ParamLayout, flat: &[f64]) -> Result<ParamState> {
        if flat.len() != layout.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, layout needs {}",
                flat.len(),
                layout.n_params()
            )));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite parameter at flat position {pos}"
            )));
        }
        Ok(Self::from_flat(layout, flat))
    }

    /// Length-checked but finiteness-tolerant rebuild (gradients may
    /// legitimately overflow on divergent parameters; the caller decides).
    fn from_flat(layout: &ParamLayout, flat: &[f64]) -> ParamState {
        debug_assert_eq!(flat.len(), layout.n_params());
        let mut weights = BTreeMap::new();
        for slot in &layout.slots {
            weights.insert(slot.key, flat[slot.offset..slot.offset + slot.len].to_vec());
        }
        let mut biases = BTreeMap::new();
        for (k, id) in layout.bias_ids().enumerate() {
            biases.insert(id, flat[layout.bias_offset() + k]);
        }
        let mut v = Matrix::zeros(layout.m_skip, layout.m_out);
        v.data_mut().copy_from_slice(&flat[layout.v_offset()..]);
        ParamState { weights, biases, v }
    }

    /// Versioned JSON form (self-describing; no layout needed to parse).
    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            format: PARAM_FORMAT,
            weights: self
                .weights
                .iter()
                .map(|(&owner, values)| WeightEntry {
                    owner,
                    values: values.clone(),
                })
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|(&neuron, &value)| BiasEntry { neuron, value })
                .collect(),
            v: self.v.to_nested(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ParamState> {
        let file: ParamFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.format != PARAM_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported parameter format {}, expected {PARAM_FORMAT}",
                file.format
            )));
        }
        let mut weights = BTreeMap::new();
        for entry in file.weights {
            if weights.insert(entry.owner, entry.values).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate weight entry for {}",
                    entry.owner
                )));
            }
        }
        let mut biases = BTreeMap::new();
        for entry in file.biases {
            if biases.insert(entry.neuron, entry.value).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate bias entry for unit {}",
                    entry.neuron
                )));
            }
        }
        let v = Matrix::from_rows(&file.v)?;
        Ok(ParamState { weights, biases, v })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<ParamState> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes the binary checkpoint: `VLLY`, version, then every parameter
    /// as little-endian f64 in schema order.
    pub fn save_checkpoint(&self, layout: &ParamLayout, path: impl AsRef<Path>) -> Result<()> {
        let flat = self.flatten(layout)?;
        let mut buf = Vec::with_capacity(8 + 8 * flat.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in &flat {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a binary checkpoint, validating magic, version, exact length,
    /// and finiteness.
    pub fn load_checkpoint(layout: &ParamLayout, path: impl AsRef<Path>) -> Result<ParamState> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::Parse(format!(
                "checkpoint truncated: {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Parse(
                "not a parameter checkpoint (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let expected = 8 * layout.n_params();
        if bytes.len() - 8 != expected {
            return Err(Error::Parse(format!(
                "checkpoint payload is {} bytes, expected {expected} ({} parameters)",
                bytes.len() - 8,
                layout.n_params()
            )));
        }
        let mut flat = Vec::with_capacity(layout.n_params());
        for chunk in bytes[8..].chunks_exact(8) {
            flat.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!(
                "checkpoint holds a non-finite value at parameter {pos}"
            )));
        }
        Ok(Self::from_flat(layout, &flat))
    }
}

// ---------------------------------------------------------------------------
// Evaluation plans
// ---------------------------------------------------------------------------

/// Skip-feature matrix: `values[i][k] = f_{pₖ}(xᵢ)` with columns ordered by
/// `column_order` (the skip set as declared).
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    pub values: Matrix,
    pub column_order: Vec<usize>,
}

/// One sample's forward pass: all hidden unit values, their pre-activations,
/// and the output logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `hidden[k]` is the value of unit `d+1+k`.
    pub hidden: Vec<f64>,
    /// Pre-activation of each hidden unit, same indexing.
    pub pre: Vec<f64>,
    /// Output row `G_{i:}` (length m).
    pub g_row: Vec<f64>,
}

/// Where a unit's inputs come from. Contiguous ascending input lists use a
/// slice dot product; anything else gathers through `(source, weight-slot)`
/// pairs sorted by source index, so summation order is always ascending
/// source order.
#[derive(Debug, Clone)]
enum Source {
    Inputs { start: usize, len: usize },
    Hidden { start: usize, len: usize },
    GatherInputs(Vec<(u32, u32)>),
    GatherHidden(Vec<(u32, u32)>),
}

#[derive(Debug, Clone)]
struct UnitPlan {
    act: ActivationKind,
    slot: usize,
    source: Source,
}

/// Samples processed together by the blocked batch kernels. Sized so a
/// block's transposed inputs and hidden values stay cache-resident for
/// typical dense layers; results are independent of the value (blocking
/// never changes accumulation order).
const SAMPLE_BLOCK: usize = 32;

/// A validated network compiled for evaluation.
#[derive(Debug, Clone)]
pub struct EvalGraph {
    spec: NetworkSpec,
    layout: ParamLayout,
    units: Vec<UnitPlan>,
    /// Hidden index (id − d − 1) of each skip unit, in skip-set order.
    skip_idx: Vec<usize>,
    deterministic: bool,
}

impl EvalGraph {
    /// Compiles a spec. Fails on structural violations, and on networks with
    /// no skip units (their outputs would be identically zero).
    pub fn new(spec: &NetworkSpec) -> Result<EvalGraph> {
        let layout = ParamLayout::of(spec)?;
        if spec.skip_set.is_empty() {
            return Err(Error::Unsupported(
                "network has no skip units; outputs would be identically zero".into(),
            ));
        }
        let d = spec.d;
        let mut units = Vec::with_capacity(spec.h);
        for id in spec.hidden_ids() {
            let n = spec.neuron(id).expect("validated hidden id");
            let act = n.activation.expect("hidden units carry activations");
            let key = n
                .sharing_group
                .map(WeightKey::Group)
                .unwrap_or(WeightKey::Neuron(id));
            let slot = layout.slot_of(key).expect("slot exists for hidden unit");
            let first_layer = n.layer == 1;
            let contiguous = n.inputs.windows(2).all(|w| w[1] == w[0] + 1);
            let base = if first_layer { 1 } else { d + 1 };
            let source = if contiguous {
                let start = n.inputs.first().map_or(0, |&f| f - base);
                if first_layer {
                    Source::Inputs {
                        start,
                        len: n.inputs.len(),
                    }
                } else {
                    Source::Hidden {
                        start,
                        len: n.inputs.len(),
                    }
                }
            } else {
                let mut pairs: Vec<(u32, u32)> = n
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(pos, &src)| ((src - base) as u32, pos as u32))
                    .collect();
                pairs.sort_unstable_by_key(|&(src, _)| src);
                if first_layer {
                    Source::GatherInputs(pairs)
                } else {
                    Source::GatherHidden(pairs)
                }
            };
            units.push(UnitPlan { act, slot, source });
        }
        let skip_idx = spec.skip_set.iter().map(|&p| p - d - 1).collect();
        Ok(EvalGraph {
            spec: spec.clone(),
            layout,
            units,
            skip_idx,
            deterministic: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// In deterministic mode all dataset reductions use a single partition,
    /// making results bit-identical across machines regardless of thread
    /// count (per-sample work is already order-fixed either way).
    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn partitions(&self) -> usize {
        if self.deterministic {
            1
        } else {
            rayon::current_num_threads().max(1)
        }
    }

    /// Evaluates every hidden unit for one sample, in id order. `z_out`, when
    /// given, receives pre-activations.
    fn hidden_values(
        &self,
        flat: &[f64],
        x: &[f64],
        f_out: &mut [f64],
        mut z_out: Option<&mut [f64]>,
    ) {
        for (idx, unit) in self.units.iter().enumerate() {
            let slot = &self.layout.slots[unit.slot];
            let w = &flat[slot.offset..slot.offset + slot.len];
            let mut z = flat[self.layout.bias_offset() + idx];
            match &unit.source {
                Source::Inputs { start, len } => {
                    for (wk, xk) in w.iter().zip(&x[*start..start + len]) {
                        z += wk * xk;
                    }
                }
                Source::Hidden { start, len } => {
                    for (wk, fk) in w.iter().zip(&f_out[*start..start + len]) {
                        z += wk * fk;
                    }
                }
                Source::GatherInputs(pairs) => {
                    for &(src, pos) in pairs {
                        z += w[pos as usize] * x[src as usize];
                    }
                }
                Source::GatherHidden(pairs) => {
                    for &(src, pos) in pairs {
                        z += w[pos as usize] * f_out[src as usize];
                    }
                }
            }
            if let Some(zbuf) = z_out.as_deref_mut() {
                zbuf[idx] = z;
            }
            f_out[idx] = activate(unit.act, z);
        }
    }

    /// Blocked hidden evaluation: all units for a block of `b` samples,
    /// weights outermost and samples innermost. For each (unit, sample) the
    /// accumulation order over inputs is exactly the one `hidden_values`
    /// uses, so results are bit-for-bit identical — the blocking only buys
    /// cache reuse of weight rows across the sample block.
    ///
    /// `xt` is the transposed input block (`xt[j·b + s] = x_s[j]`); `ft`
    /// (and `zt` when given) receive unit-major rows of the same shape.
    fn hidden_values_block(
        &self,
        flat: &[f64],
        xt: &[f64],
        b: usize,
        ft: &mut [f64],
        mut zt: Option<&mut [f64]>,
    ) {
        let bb = self.layout.bias_offset();
        for (idx, unit) in self.units.iter().enumerate() {
            let slot = &self.layout.slots[unit.slot];
            let w = &flat[slot.offset..slot.offset + slot.len];
            let (done, rest) = ft.split_at_mut(idx * b);
            let cur = &mut rest[..b];
            cur.fill(flat[bb + idx]);
            match &unit.source {
                Source::Inputs { start, len } => {
                    for (k, &wk) in w[..*len].iter().enumerate() {
                        let row = &xt[(start + k) * b..(start + k) * b + b];
                        for (c, &xv) in cur.iter_mut().zip(row) {
                            *c += wk * xv;
                        }
                    }
                }
                Source::Hidden { start, len } => {
                    for k in 0..*len {
                        let wk = w[k];
                        let row = &done[(start + k) * b..(start + k) * b + b];
                        for (c, &fv) in cur.iter_mut().zip(row) {
                            *c += wk * fv;
                        }
                    }
                }
                Source::GatherInputs(pairs) => {
                    for &(src, pos) in pairs {
                        let wk = w[pos as usize];
                        let row = &xt[src as usize * b..src as usize * b + b];
                        for (c, &xv) in cur.iter_mut().zip(row) {
                            *c += wk * xv;
                        }
                    }
                }
                Source::GatherHidden(pairs) => {
                    for &(src, pos) in pairs {
                        let wk = w[pos as usize];
                        let row = &done[src as usize * b..src as usize * b + b];
                        for (c, &fv) in cur.iter_mut().zip(row) {
                            *c += wk * fv;
                        }
                    }
                }
            }
            if let Some(zb) = zt.as_deref_mut() {
                zb[idx * b..idx * b + b].copy_from_slice(cur);
            }
            for c in cur.iter_mut() {
                *c = activate(unit.act, *c);
            }
        }
    }

    /// Transposes the input rows of `block` into `xt` (feature-major).
    fn transpose_inputs(&self, data: &Dataset, block: &[usize], xt: &mut [f64]) {
        let b = block.len();
        for (s, &i) in block.iter().enumerate() {
            for (j, &v) in data.x().row(i).iter().enumerate() {
                xt[j * b + s] = v;
            }
        }
    }

    /// Logit rows for a sample block: `gb[s·m + j]`, accumulated in
    /// skip-set order per sample exactly like `output_row`.
    fn output_rows_block(&self, flat: &[f64], ft: &[f64], b: usize, gb: &mut [f64]) {
        let m = self.layout.m_out;
        let vb = self.layout.v_offset();
        gb[..b * m].fill(0.0);
        for (col, &uidx) in self.skip_idx.iter().enumerate() {
            let vrow = &flat[vb + col * m..vb + (col + 1) * m];
            let frow = &ft[uidx * b..uidx * b + b];
            for (s, &psi) in frow.iter().enumerate() {
                let g = &mut gb[s * m..(s + 1) * m];
                for (gj, &vj) in g.iter_mut().zip(vrow) {
                    *gj += psi * vj;
                }
            }
        }
    }

    /// Output row `g = Ψ_{i:} V` accumulated in skip-set order.
    fn output_row(&self, flat: &[f64], f: &[f64], g: &mut [f64]) {
        g.fill(0.0);
        let m = self.layout.m_out;
        let vb = self.layout.v_offset();
        for (col, &uidx) in self.skip_idx.iter().enumerate() {
            let psi = f[uidx];
            let vrow = &flat[vb + col * m..vb + (col + 1) * m];
            for (gj, &vj) in g.iter_mut().zip(vrow) {
                *gj += psi * vj;
            }
        }
    }

    /// Full forward pass for a single input vector.
    pub fn forward(&self, params: &ParamState, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.layout.d {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.layout.d
            )));
        }
        let flat = params.flatten(&self.layout)?;
        let mut hidden = vec![0.0; self.layout.h];
        let mut pre = vec![0.0; self.layout.h];
        self.hidden_values(&flat, x, &mut hidden, Some(&mut pre));
        let mut g_row = vec![0.0; self.layout.m_out];
        self.output_row(&flat, &hidden, &mut g_row);
        Ok(ForwardPass { hidden, pre, g_row })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.layout.d {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} features, network expects {}",
                data.d(),
                self.layout.d
            )));
        }
        if data.m() != self.layout.m_out {
            return Err(Error::InvalidInput(format!(
                "dataset has {} classes, network has {} outputs",
                data.m(),
                self.layout.m_out
            )));
        }
        Ok(())
    }

    fn check_loss_kind(&self, kind: LossKind) -> Result<()> {
        if matches!(kind, LossKind::CrossEntropy | LossKind::Hinge) && self.layout.m_out < 2 {
            return Err(Error::Unsupported(format!(
                "{kind} needs m ≥ 2 output classes, got {}",
                self.layout.m_out
            )));
        }
        Ok(())
    }

    /// Skip-feature matrix over a whole dataset. Rows are independent, so
    /// this parallelizes freely without affecting bit-level results.
    pub fn psi(&self, params: &ParamState, data: &Dataset) -> Result<PsiMatrix> {
        self.check_dataset(data)?;
        let flat = params.flatten(&self.layout)?;
        Ok(self.psi_flat(&flat, data))
    }

    pub(crate) fn psi_flat(&self, flat: &[f64], data: &Dataset) -> PsiMatrix {
        let m_skip = self.layout.m_skip;
        let h = self.layout.h;
        let d = self.layout.d;
        let mut values = Matrix::zeros(data.n(), m_skip);
        values
            .data_mut()
            .par_chunks_mut(m_skip * SAMPLE_BLOCK)
            .enumerate()
            .for_each_init(
                || (vec![0.0; d * SAMPLE_BLOCK], vec![0.0; h * SAMPLE_BLOCK]),
                |(xt, ft), (bi, out_rows)| {
                    let b = out_rows.len() / m_skip;
                    let block: Vec<usize> = (bi * SAMPLE_BLOCK..bi * SAMPLE_BLOCK + b).collect();
                    self.transpose_inputs(data, &block, &mut xt[..d * b]);
                    self.hidden_values_block(flat, &xt[..d * b], b, &mut ft[..h * b], None);
                    for (col, &uidx) in self.skip_idx.iter().enumerate() {
                        let frow = &ft[uidx * b..uidx * b + b];
                        for (s, &v) in frow.iter().enumerate() {
                            out_rows[s * m_skip + col] = v;
                        }
                    }
                },
            );
        PsiMatrix {
            values,
            column_order: self.spec.skip_set.clone(),
        }
    }

    /// Output logits `G = ΨV` for a whole dataset.
    pub fn outputs(&self, params: &ParamState, data: &Dataset) -> Result<Matrix> {
        let psi = self.psi(params, data)?;
        psi.values.matmul(&params.v)
    }

    /// Loss of the network on a dataset (cross-entropy and hinge are means;
    /// square loss is the plain half sum of squares).
    pub fn loss(&self, params: &ParamState, data: &Dataset, kind: LossKind) -> Result<f64> {
        let flat = params.flatten(&self.layout)?;
        self.loss_flat(&flat, data, kind, None)
    }

    /// Loss and gradient over the full dataset.
    pub fn gradient(
        &self,
        params: &ParamState,
        data: &Dataset,
        kind: LossKind,
    ) -> Result<(f64, ParamGradient)> {
        let flat = params.flatten(&self.layout)?;
        let (loss, gflat) = self.gradient_flat(&flat, data, kind, None)?;
        Ok((loss, ParamState::from_flat(&self.layout, &gflat)))
    }

    /// Loss and gradient restricted to `indices`, with the same
    /// normalization rule applied to the batch (mean for cross-entropy and
    /// hinge, half sum of squares for square loss). This is the minibatch
    /// estimator SGD consumes.
    pub fn gradient_batch(
        &self,
        params: &ParamState,
        data: &Dataset,
        kind: LossKind,
        indices: &[usize],
    ) -> Result<(f64, ParamGradient)> {
        let flat = params.flatten(&self.layout)?;
        let (loss, gflat) = self.gradient_flat(&flat, data, kind, Some(indices))?;
        Ok((loss, ParamState::from_flat(&self.layout, &gflat)))
    }

    fn check_indices(&self, data: &Dataset, indices: Option<&[usize]>) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match indices {
            Some(list) => {
                if let Some(&bad) = list.iter().find(|&&i| i >= data.n()) {
                    return Err(Error::InvalidInput(format!(
                        "sample index {bad} out of range for {} samples",
                        data.n()
                    )));
                }
                list.to_vec()
            }
            None => (0..data.n()).collect(),
        };
        if idx.is_empty() {
            return Err(Error::InvalidInput("empty sample batch".into()));
        }
        Ok(idx)
    }

    /// Flat-parameter loss kernel shared by the public API, the trainers,
    /// and the landscape scans.
    pub(crate) fn loss_flat(
        &self,
        flat: &[f64],
        data: &Dataset,
        kind: LossKind,
        indices: Option<&[usize]>,
    ) -> Result<f64> {
        self.check_dataset(data)?;
        self.check_loss_kind(kind)?;
        let idx = self.check_indices(data, indices)?;
        debug_assert_eq!(flat.len(), self.layout.n_params());

        let h = self.layout.h;
        let d = self.layout.d;
        let m = self.layout.m_out;
        let parts = self.partitions();
        let chunk = idx.len().div_ceil(parts);
        let partials: Vec<f64> = idx
            .par_chunks(chunk)
            .map(|part| {
                let mut xt = vec![0.0; d * SAMPLE_BLOCK];
                let mut ft = vec![0.0; h * SAMPLE_BLOCK];
                let mut gb = vec![0.0; m * SAMPLE_BLOCK];
                let mut acc = 0.0;
                for block in part.chunks(SAMPLE_BLOCK) {
                    let b = block.len();
                    self.transpose_inputs(data, block, &mut xt[..d * b]);
                    self.hidden_values_block(flat, &xt[..d * b], b, &mut ft[..h * b], None);
                    self.output_rows_block(flat, &ft[..h * b], b, &mut gb);
                    for (s, &i) in block.iter().enumerate() {
                        let label = data.sample(i).1;
                        let g = &gb[s * m..(s + 1) * m];
                        acc += match kind {
                            LossKind::CrossEntropy => losses::row_cross_entropy(g, label),
                            LossKind::Square => losses::row_square(g, label),
                            LossKind::Hinge => losses::row_hinge(g, label),
                        };
                    }
                }
                acc
            })
            .collect();
        // Fixed partition count and in-order fold keep this reproducible.
        let total: f64 = partials.iter().sum();
        Ok(match kind {
            LossKind::CrossEntropy | LossKind::Hinge => total / idx.len() as f64,
            LossKind::Square => total,
        })
    }

    /// Flat-parameter reverse-mode kernel: returns the loss and `∂Φ/∂θ` in
    /// schema order.
    pub(crate) fn gradient_flat(
        &self,
        flat: &[f64],
        data: &Dataset,
        kind: LossKind,
        indices: Option<&[usize]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(data)?;
        self.check_loss_kind(kind)?;
        let idx = self.check_indices(data, indices)?;
        debug_assert_eq!(flat.len(), self.layout.n_params());

        let n_params = self.layout.n_params();
        let h = self.layout.h;
        let m = self.layout.m_out;
        let vb = self.layout.v_offset();
        let bb = self.layout.bias_offset();

        let d = self.layout.d;
        let parts = self.partitions();
        let chunk = idx.len().div_ceil(parts);
        let partials: Vec<(f64, Vec<f64>)> = idx
            .par_chunks(chunk)
            .map(|part| {
                let mut grad = vec![0.0; n_params];
                let mut xt = vec![0.0; d * SAMPLE_BLOCK];
                let mut ftb = vec![0.0; h * SAMPLE_BLOCK];
                let mut ztb = vec![0.0; h * SAMPLE_BLOCK];
                let mut fbuf = vec![0.0; h];
                let mut zbuf = vec![0.0; h];
                let mut dfbuf = vec![0.0; h];
                let mut gbuf = vec![0.0; m];
                let mut dgbuf = vec![0.0; m];
                let mut acc = 0.0;
                for block in part.chunks(SAMPLE_BLOCK) {
                    let b = block.len();
                    self.transpose_inputs(data, block, &mut xt[..d * b]);
                    self.hidden_values_block(
                        flat,
                        &xt[..d * b],
                        b,
                        &mut ftb[..h * b],
                        Some(&mut ztb[..h * b]),
                    );
                    for (s, &i) in block.iter().enumerate() {
                        let (x, label) = data.sample(i);
                        for u in 0..h {
                            fbuf[u] = ftb[u * b + s];
                            zbuf[u] = ztb[u * b + s];
                        }
                        self.output_row(flat, &fbuf, &mut gbuf);
                        acc += match kind {
                            LossKind::CrossEntropy => losses::row_cross_entropy(&gbuf, label),
                            LossKind::Square => losses::row_square(&gbuf, label),
                            LossKind::Hinge => losses::row_hinge(&gbuf, label),
                        };
                        losses::row_grad(kind, &gbuf, label, &mut dgbuf);

                        // Skip connections: V picks up ψ·dg, features pick up V·dg.
                        dfbuf.fill(0.0);
                        for (col, &uidx) in self.skip_idx.iter().enumerate() {
                            let psi = fbuf[uidx];
                            let vrow = &flat[vb + col * m..vb + (col + 1) * m];
                            let grow = &mut grad[vb + col * m..vb + (col + 1) * m];
                            let mut df = 0.0;
                            for ((gk, &vk), &dgk) in grow.iter_mut().zip(vrow).zip(&dgbuf) {
                                *gk += psi * dgk;
                                df += vk * dgk;
                            }
                            dfbuf[uidx] += df;
                        }

                        // Hidden units in reverse id order.
                        for uidx in (0..h).rev() {
                            let du = dfbuf[uidx];
                            if du == 0.0 {
                                continue;
                            }
                            let unit = &self.units[uidx];
                            let dz = du * activate_slope(unit.act, zbuf[uidx]);
                            grad[bb + uidx] += dz;
                            let slot = &self.layout.slots[unit.slot];
                            let woff = slot.offset;
                            match &unit.source {
                                Source::Inputs { start, len } => {
                                    for (k, &xk) in x[*start..start + len].iter().enumerate() {
                                        grad[woff + k] += dz * xk;
                                    }
                                }
                                Source::GatherInputs(pairs) => {
                                    for &(src, pos) in pairs {
                                        grad[woff + pos as usize] += dz * x[src as usize];
                                    }
                                }
                                Source::Hidden { start, len } => {
                                    let w = &flat[woff..woff + slot.len];
                                    for k in 0..*len {
                                        grad[woff + k] += dz * fbuf[start + k];
                                        dfbuf[start + k] += dz * w[k];
                                    }
                                }
                                Source::GatherHidden(pairs) => {
                                    let w = &flat[woff..woff + slot.len];
                                    for &(src, pos) in pairs {
                                        grad[woff + pos as usize] += dz * fbuf[src as usize];
                                        dfbuf[src as usize] += dz * w[pos as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                (acc, grad)
            })
            .collect();

        let mut grad = vec![0.0; n_params];
        let mut total = 0.0;
        for (part_loss, part_grad) in &partials {
            total += part_loss;
            for (g, p) in grad.iter_mut().zip(part_grad) {
                *g += p;
            }
        }
        if matches!(kind, LossKind::CrossEntropy | LossKind::Hinge) {
            let inv = 1.0 / idx.len() as f64;
            total *= inv;
            for g in &mut grad {
                *g *= inv;
            }
        }
        Ok((total, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::netgraph::{local1d, mlp, NeuronSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    const SIG: ActivationKind = ActivationKind::Sigmoid;

    fn random_flat(layout: &ParamLayout, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..layout.n_params())
            .map(|_| rng.random_range(-scale..scale))
            .collect()
    }

    fn random_params(spec: &NetworkSpec, scale: f64, seed: u64) -> ParamState {
        let layout = ParamLayout::of(spec).unwrap();
        ParamState::unflatten(&layout, &random_flat(&layout, scale, seed)).unwrap()
    }

    // -- activations --------------------------------------------------------

    #[test]
    fn activation_reference_values() {
        assert_eq!(activate(SIG, 0.0), 0.5);
        assert!((activate(SIG, 0.7) - 0.6681877721681662).abs() <= 1e-15);
        // Extended-precision reference values for softplus.
        let sp1 = ActivationKind::Softplus { gamma: 1.0 };
        assert!((activate(sp1, 30.0) - 30.000000000000092).abs() <= 1e-12);
        let sp20 = ActivationKind::softplus20();
        assert!((activate(sp20, 0.0) - 0.03465735902799726).abs() <= 1e-15);
        assert!((activate(sp20, 0.0) - std::f64::consts::LN_2 / 20.0).abs() <= 1e-17);
        assert_eq!(activate(ActivationKind::Tanh, 0.0), 0.0);
    }

    #[test]
    fn activations_survive_extreme_arguments() {
        let sp20 = ActivationKind::softplus20();
        assert_eq!(activate(sp20, 1000.0), 1000.0);
        assert!(activate(sp20, -1000.0) >= 0.0);
        assert!(activate(SIG, 800.0).is_finite());
        assert!(activate(SIG, -800.0) >= 0.0);
        assert!(activate(SIG, -800.0) < 1e-300);
        for t in [-750.0, -30.0, 0.0, 30.0, 750.0] {
            for kind in [SIG, ActivationKind::Tanh, sp20] {
                assert!(activate(kind, t).is_finite());
                assert!(activate_slope(kind, t).is_finite());
            }
        }
    }

    #[test]
    fn slopes_match_finite_differences_and_are_positive() {
        let kinds = [
            SIG,
            ActivationKind::Tanh,
            ActivationKind::softplus20(),
            ActivationKind::Softplus { gamma: 2.0 },
        ];
        assert_eq!(activate_slope(SIG, 0.0), 0.25);
        assert_eq!(activate_slope(ActivationKind::Tanh, 0.0), 1.0);
        assert_eq!(
            activate_slope(ActivationKind::Softplus { gamma: 2.0 }, 0.0),
            0.5
        );
        let hstep = 1e-6;
        for kind in kinds {
            for t in [-2.3, -0.4, 0.37, 1.9] {
                let fd = (activate(kind, t + hstep) - activate(kind, t - hstep)) / (2.0 * hstep);
                let exact = activate_slope(kind, t);
                assert!(exact > 0.0, "{kind} slope must be strictly positive");
                assert!(
                    (fd - exact).abs() <= 1e-7,
                    "{kind} at {t}: {exact} vs FD {fd}"
                );
            }
        }
    }

    #[test]
    fn activations_are_strictly_increasing() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for kind in [SIG, ActivationKind::Tanh, ActivationKind::softplus20()] {
            for _ in 0..100 {
                let a: f64 = rng.random_range(-8.0..8.0);
                let b: f64 = a + rng.random_range(1e-6..2.0);
                assert!(activate(kind, a) < activate(kind, b));
            }
        }
    }

    #[test]
    fn inverse_round_trips_and_rejects_out_of_range() {
        let kinds = [
            SIG,
            ActivationKind::Tanh,
            ActivationKind::softplus20(),
            ActivationKind::Softplus { gamma: 2.0 },
        ];
        for kind in kinds {
            for t in [-3.0, -0.5, 0.1, 2.0] {
                let y = activate(kind, t);
                let back = activate_inverse(kind, y).unwrap();
                assert!(
                    (back - t).abs() <= 1e-9,
                    "{kind}: inverse({y}) = {back}, wanted {t}"
                );
            }
        }
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(activate_inverse(SIG, bad).is_err());
        }
        assert!(activate_inverse(ActivationKind::Tanh, 1.0).is_err());
        assert!(activate_inverse(ActivationKind::softplus20(), 0.0).is_err());
        assert!(activate_inverse(ActivationKind::softplus20(), -1.0).is_err());
    }

    // -- layout -------------------------------------------------------------

    #[test]
    fn layout_orders_slots_biases_then_v() {
        let spec = mlp(3, &[4, 3], 2, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        // 4 first-layer units of fan-in 3, then 3 second-layer units of
        // fan-in 4 → 24 weights; 7 biases; V is 3×2.
        assert_eq!(layout.n_weights(), 24);
        assert_eq!(layout.bias_offset(), 24);
        assert_eq!(layout.v_offset(), 31);
        assert_eq!(layout.n_params(), 37);
        assert_eq!(layout.slots().len(), 7);
        let mut expected_offset = 0;
        for slot in layout.slots() {
            assert_eq!(slot.offset, expected_offset);
            expected_offset += slot.len;
            assert!(matches!(slot.key, WeightKey::Neuron(_)));
        }
    }

    #[test]
    fn layout_merges_sharing_groups_at_first_member() {
        let spec = local1d(6, 3, 3, 2, 2, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        // Two filters sharing across two positions each: 2 slots of length 3.
        assert_eq!(layout.slots().len(), 2);
        assert_eq!(layout.slots()[0].key, WeightKey::Group(1));
        assert_eq!(layout.slots()[0].first_unit, 7);
        assert_eq!(layout.slots()[1].key, WeightKey::Group(2));
        assert_eq!(layout.n_weights(), 6);
        assert_eq!(layout.n_params(), 6 + 4 + 4 * 2);
    }

    #[test]
    fn layout_rejects_invalid_specs() {
        let mut spec = mlp(3, &[2], 2, SIG, true).unwrap();
        spec.neurons[0].inputs = vec![9]; // forward reference
        let err = ParamLayout::of(&spec).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
    }

    // -- flatten / unflatten ------------------------------------------------

    #[test]
    fn flatten_round_trips_bit_exactly() {
        let spec = local1d(6, 3, 3, 2, 3, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        let flat = random_flat(&layout, 1.3, 7);
        let params = ParamState::unflatten(&layout, &flat).unwrap();
        let back = params.flatten(&layout).unwrap();
        assert_eq!(
            flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unflatten_checks_length_and_finiteness() {
        let spec = mlp(2, &[2], 2, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        assert!(matches!(
            ParamState::unflatten(&layout, &[0.0; 3]).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
        let mut flat = vec![0.0; layout.n_params()];
        flat[2] = f64::NAN;
        assert!(matches!(
            ParamState::unflatten(&layout, &flat).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let spec_a = mlp(2, &[2], 2, SIG, true).unwrap();
        let spec_b = mlp(2, &[3], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec_a).unwrap();
        let params_b = ParamState::zeros(&spec_b).unwrap();
        let err = graph.forward(&params_b, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    // -- forward ------------------------------------------------------------

    /// Three-unit chain d=1 → sigmoid → tanh → softplus(γ=2), single skip on
    /// the last unit. Expected values frozen from an extended-precision
    /// evaluation at x = 0.3.
    fn chain_spec() -> NetworkSpec {
        NetworkSpec {
            d: 1,
            h: 3,
            m: 1,
            neurons: vec![
                NeuronSpec {
                    id: 2,
                    layer: 1,
                    inputs: vec![1],
                    activation: Some(SIG),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 3,
                    layer: 2,
                    inputs: vec![2],
                    activation: Some(ActivationKind::Tanh),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 4,
                    layer: 3,
                    inputs: vec![3],
                    activation: Some(ActivationKind::Softplus { gamma: 2.0 }),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 5,
                    layer: 4,
                    inputs: vec![4],
                    activation: None,
                    sharing_group: None,
                },
            ],
            skip_set: vec![4],
        }
    }

    #[test]
    fn chain_forward_matches_reference_values() {
        let spec = chain_spec();
        let layout = ParamLayout::of(&spec).unwrap();
        // Schema order: w₂, w₃, w₄, b₂, b₃, b₄, V.
        let flat = [2.0, -1.0, 0.5, 0.1, 0.2, -0.3, 2.0];
        let params = ParamState::unflatten(&layout, &flat).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let pass = graph.forward(&params, &[0.3]).unwrap();
        assert!((pass.pre[0] - 0.7).abs() <= 1e-15);
        assert!((pass.hidden[0] - 0.6681877721681662).abs() <= 1e-15);
        assert!((pass.hidden[1] - -0.43673390642219667).abs() <= 1e-15);
        assert!((pass.hidden[2] - 0.15175715869432244).abs() <= 1e-15);
        assert!((pass.g_row[0] - 2.0 * 0.15175715869432244).abs() <= 1e-15);
    }

    #[test]
    fn zero_weight_sigmoid_unit_is_constant_half() {
        let spec = mlp(4, &[1], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = ParamState::zeros(&spec).unwrap();
        let pass = graph.forward(&params, &[3.0, -1.0, 0.0, 9.5]).unwrap();
        assert_eq!(pass.hidden[0], 0.5);
        assert_eq!(pass.g_row, vec![0.0, 0.0]);
    }

    #[test]
    fn psi_agrees_with_per_sample_forward() {
        let data = synth_dataset(7, 2, 2, 2.0, 11).unwrap();
        let spec = mlp(2, &[4, 3], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = random_params(&spec, 0.9, 5);
        let psi = graph.psi(&params, &data).unwrap();
        assert_eq!(psi.column_order, spec.skip_set);
        assert_eq!(psi.values.rows(), data.n());
        for i in 0..data.n() {
            let pass = graph.forward(&params, data.x().row(i)).unwrap();
            for (col, &p) in spec.skip_set.iter().enumerate() {
                let expect = pass.hidden[p - spec.d - 1];
                assert_eq!(psi.values.get(i, col).to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn duplicate_inputs_produce_identical_psi_rows() {
        let x = Matrix::from_rows(&[vec![0.4, -1.0], vec![0.4, -1.0], vec![1.0, 2.0]]).unwrap();
        let data = Dataset::new(x, vec![1, 2, 1], 2, "toy").unwrap();
        let spec = mlp(2, &[3], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = random_params(&spec, 1.0, 2);
        let psi = graph.psi(&params, &data).unwrap();
        for col in 0..psi.values.cols() {
            assert_eq!(
                psi.values.get(0, col).to_bits(),
                psi.values.get(1, col).to_bits()
            );
        }
    }

    #[test]
    fn psi_ranges_follow_the_activation() {
        let data = synth_dataset(20, 3, 2, 1.0, 9).unwrap();
        let sig_spec = mlp(3, &[5], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&sig_spec).unwrap();
        let psi = graph.psi(&random_params(&sig_spec, 2.0, 1), &data).unwrap();
        for &v in psi.values.data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid feature {v} outside (0,1)");
        }
        let sp_spec = mlp(3, &[5], 2, ActivationKind::softplus20(), true).unwrap();
        let graph = EvalGraph::new(&sp_spec).unwrap();
        let psi = graph.psi(&random_params(&sp_spec, 2.0, 1), &data).unwrap();
        for &v in psi.values.data() {
            assert!(v > 0.0, "softplus feature {v} not positive");
        }
    }

    #[test]
    fn outputs_are_invariant_under_column_rescaling() {
        // Scaling Ψ column k by c while dividing V row k by c leaves G
        // unchanged — the flat-valley direction in parameter space.
        let data = synth_dataset(6, 2, 3, 1.5, 4).unwrap();
        let spec = mlp(2, &[4], 3, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = random_params(&spec, 1.1, 8);
        let psi = graph.psi(&params, &data).unwrap();
        let g = psi.values.matmul(&params.v).unwrap();
        let c = 3.7;
        let k = 2;
        let scaled_psi = Matrix::from_fn(psi.values.rows(), psi.values.cols(), |i, j| {
            if j == k {
                psi.values.get(i, j) * c
            } else {
                psi.values.get(i, j)
            }
        })
        .unwrap();
        let scaled_v = Matrix::from_fn(params.v.rows(), params.v.cols(), |i, j| {
            if i == k {
                params.v.get(i, j) / c
            } else {
                params.v.get(i, j)
            }
        })
        .unwrap();
        let g2 = scaled_psi.matmul(&scaled_v).unwrap();
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn declared_input_order_does_not_change_values() {
        // Same unit with permuted input list (weights permuted to match)
        // must evaluate bit-identically: accumulation is id-sorted.
        let mk = |inputs: Vec<usize>| NetworkSpec {
            d: 3,
            h: 1,
            m: 1,
            neurons: vec![
                NeuronSpec {
                    id: 4,
                    layer: 1,
                    inputs,
                    activation: Some(SIG),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 5,
                    layer: 2,
                    inputs: vec![4],
                    activation: None,
                    sharing_group: None,
                },
            ],
            skip_set: vec![4],
        };
        let spec_fwd = mk(vec![1, 2, 3]);
        let spec_perm = mk(vec![3, 1, 2]);
        let (wa, wb, wc) = (0.173, -1.44, 0.9021);
        let layout_fwd = ParamLayout::of(&spec_fwd).unwrap();
        let layout_perm = ParamLayout::of(&spec_perm).unwrap();
        let p_fwd = ParamState::unflatten(&layout_fwd, &[wa, wb, wc, 0.31, 1.7]).unwrap();
        let p_perm = ParamState::unflatten(&layout_perm, &[wc, wa, wb, 0.31, 1.7]).unwrap();
        let x = [0.3, -1.1, 0.7];
        let f_fwd = EvalGraph::new(&spec_fwd)
            .unwrap()
            .forward(&p_fwd, &x)
            .unwrap();
        let f_perm = EvalGraph::new(&spec_perm)
            .unwrap()
            .forward(&p_perm, &x)
            .unwrap();
        assert_eq!(f_fwd.hidden[0].to_bits(), f_perm.hidden[0].to_bits());
        assert_eq!(f_fwd.g_row[0].to_bits(), f_perm.g_row[0].to_bits());

        // Gradients for corresponding weights must also agree bit-for-bit.
        let data =
            Dataset::new(Matrix::from_rows(&[x.to_vec()]).unwrap(), vec![1], 1, "t").unwrap();
        let ga = EvalGraph::new(&spec_fwd)
            .unwrap()
            .gradient(&p_fwd, &data, LossKind::Square)
            .unwrap()
            .1;
        let gb = EvalGraph::new(&spec_perm)
            .unwrap()
            .gradient(&p_perm, &data, LossKind::Square)
            .unwrap()
            .1;
        let wa_grad = ga.weights[&WeightKey::Neuron(4)].clone();
        let wb_grad = gb.weights[&WeightKey::Neuron(4)].clone();
        assert_eq!(wa_grad[0].to_bits(), wb_grad[1].to_bits()); // input 1
        assert_eq!(wa_grad[1].to_bits(), wb_grad[2].to_bits()); // input 2
        assert_eq!(wa_grad[2].to_bits(), wb_grad[0].to_bits()); // input 3
    }

    #[test]
    fn networks_without_skips_are_rejected() {
        let spec = mlp(2, &[3], 2, SIG, false).unwrap();
        let err = EvalGraph::new(&spec).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)), "{err}");
    }

    // -- gradients ----------------------------------------------------------

    #[test]
    fn zero_v_cross_entropy_gradient_matches_closed_form() {
        // With V = 0 all logits vanish, softmax is uniform, and
        // ∂Φ/∂V_{kj} = (1/N) Σᵢ Ψᵢₖ (1/m − [yᵢ = j]). Hidden weights and
        // biases get no signal at all.
        let data = synth_dataset(9, 3, 3, 1.5, 21).unwrap();
        let spec = mlp(3, &[5], 3, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let mut params = random_params(&spec, 1.0, 6);
        params.v = Matrix::zeros(5, 3);
        let psi = graph.psi(&params, &data).unwrap();
        let (loss, grad) = graph
            .gradient(&params, &data, LossKind::CrossEntropy)
            .unwrap();
        assert!((loss - 3.0_f64.ln()).abs() <= 1e-14);
        let n = data.n() as f64;
        for k in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for i in 0..data.n() {
                    let ind = if data.labels()[i] == j + 1 { 1.0 } else { 0.0 };
                    want += psi.values.get(i, k) * (1.0 / 3.0 - ind);
                }
                want /= n;
                assert!(
                    (grad.v.get(k, j) - want).abs() <= 1e-14,
                    "V[{k}][{j}]: {} vs {want}",
                    grad.v.get(k, j)
                );
            }
        }
        for w in grad.weights.values() {
            assert!(w.iter().all(|&g| g == 0.0));
        }
        assert!(grad.biases.values().all(|&b| b == 0.0));
    }

    #[test]
    fn square_loss_v_gradient_is_the_normal_equation_residual() {
        // ∂(½‖ΨV − Y‖²)/∂V = Ψᵀ(ΨV − Y).
        let data = synth_dataset(8, 2, 3, 1.0, 13).unwrap();
        let spec = mlp(2, &[4], 3, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = random_params(&spec, 0.8, 3);
        let psi = graph.psi(&params, &data).unwrap();
        let g = psi.values.matmul(&params.v).unwrap();
        let resid = g.sub(&data.one_hot()).unwrap();
        let want = psi.values.transpose().matmul(&resid).unwrap();
        let (_, grad) = graph.gradient(&params, &data, LossKind::Square).unwrap();
        for k in 0..4 {
            for j in 0..3 {
                assert!(
                    (grad.v.get(k, j) - want.get(k, j)).abs() <= 1e-12,
                    "V[{k}][{j}]"
                );
            }
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Every coordinate of every parameter, on a deep dense net and a
        // weight-shared local net, for all three losses.
        let nets = [
            (mlp(3, &[3, 2], 2, SIG, true).unwrap(), 31),
            (
                local1d(4, 2, 2, 2, 2, ActivationKind::softplus20(), true).unwrap(),
                41,
            ),
        ];
        for (spec, seed) in nets {
            let data = synth_dataset(6, spec.d, spec.m, 1.5, seed).unwrap();
            let graph = EvalGraph::new(&spec).unwrap();
            let layout = graph.layout().clone();
            let flat = random_flat(&layout, 0.8, seed);
            for kind in [LossKind::CrossEntropy, LossKind::Square, LossKind::Hinge] {
                let (_, grad) = graph.gradient_flat(&flat, &data, kind, None).unwrap();
                let hstep = 1e-6;
                for c in 0..layout.n_params() {
                    let mut plus = flat.clone();
                    let mut minus = flat.clone();
                    plus[c] += hstep;
                    minus[c] -= hstep;
                    let lp = graph.loss_flat(&plus, &data, kind, None).unwrap();
                    let lm = graph.loss_flat(&minus, &data, kind, None).unwrap();
                    let fd = (lp - lm) / (2.0 * hstep);
                    let rel = (fd - grad[c]).abs() / grad[c].abs().max(fd.abs()).max(1e-4);
                    assert!(
                        rel <= 1e-5,
                        "{kind} coord {c}: analytic {} vs FD {fd} (rel {rel})",
                        grad[c]
                    );
                }
            }
        }
    }

    #[test]
    fn batch_gradients_recombine_into_the_full_gradient() {
        let data = synth_dataset(10, 2, 2, 1.5, 2).unwrap();
        let spec = mlp(2, &[3], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let layout = graph.layout().clone();
        let flat = random_flat(&layout, 1.0, 9);
        let (full_loss, full) = graph
            .gradient_flat(&flat, &data, LossKind::CrossEntropy, None)
            .unwrap();
        let first: Vec<usize> = (0..4).collect();
        let second: Vec<usize> = (4..10).collect();
        let (l1, g1) = graph
            .gradient_flat(&flat, &data, LossKind::CrossEntropy, Some(&first))
            .unwrap();
        let (l2, g2) = graph
            .gradient_flat(&flat, &data, LossKind::CrossEntropy, Some(&second))
            .unwrap();
        // Means recombine with weights 4/10 and 6/10.
        assert!((full_loss - (0.4 * l1 + 0.6 * l2)).abs() <= 1e-12);
        for c in 0..layout.n_params() {
            let want = 0.4 * g1[c] + 0.6 * g2[c];
            assert!((full[c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn deterministic_mode_is_reproducible() {
        let data = synth_dataset(11, 3, 2, 1.0, 5).unwrap();
        let spec = mlp(3, &[4], 2, SIG, true).unwrap();
        let mut graph = EvalGraph::new(&spec).unwrap();
        graph.set_deterministic(true);
        assert!(graph.deterministic());
        let layout = graph.layout().clone();
        let flat = random_flat(&layout, 1.0, 14);
        let (l1, g1) = graph
            .gradient_flat(&flat, &data, LossKind::CrossEntropy, None)
            .unwrap();
        let (l2, g2) = graph
            .gradient_flat(&flat, &data, LossKind::CrossEntropy, None)
            .unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn invalid_batches_and_datasets_are_rejected() {
        let data = synth_dataset(5, 2, 2, 1.0, 1).unwrap();
        let spec = mlp(2, &[2], 2, SIG, true).unwrap();
        let graph = EvalGraph::new(&spec).unwrap();
        let params = ParamState::zeros(&spec).unwrap();
        assert!(matches!(
            graph
                .gradient_batch(&params, &data, LossKind::CrossEntropy, &[9])
                .unwrap_err(),
            Error::InvalidInput(_)
        ));
        assert!(matches!(
            graph
                .gradient_batch(&params, &data, LossKind::CrossEntropy, &[])
                .unwrap_err(),
            Error::InvalidInput(_)
        ));
        let wrong_d = synth_dataset(5, 3, 2, 1.0, 1).unwrap();
        assert!(matches!(
            graph.loss(&params, &wrong_d, LossKind::Square).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
        let wrong_m = synth_dataset(6, 2, 3, 1.0, 1).unwrap();
        assert!(matches!(
            graph.loss(&params, &wrong_m, LossKind::Square).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    // -- serialization ------------------------------------------------------

    #[test]
    fn checkpoint_bytes_follow_the_documented_schema() {
        let spec = mlp(1, &[1], 1, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        let params = ParamState::unflatten(&layout, &[1.5, -0.25, 3.0]).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.vlly");
        params.save_checkpoint(&layout, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"VLLY");
        want.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.5f64, -0.25, 3.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, want);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = local1d(6, 3, 3, 2, 2, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        let flat = random_flat(&layout, 2.0, 77);
        let params = ParamState::unflatten(&layout, &flat).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.vlly");
        params.save_checkpoint(&layout, &path).unwrap();
        let back = ParamState::load_checkpoint(&layout, &path).unwrap();
        assert_eq!(params, back);
        let flat_back = back.flatten(&layout).unwrap();
        for (a, b) in flat.iter().zip(&flat_back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_checkpoints_are_refused() {
        let spec = mlp(2, &[2], 2, SIG, true).unwrap();
        let layout = ParamLayout::of(&spec).unwrap();
        let params = ParamState::zeros(&spec).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.vlly");
        params.save_checkpoint(&layout, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            ParamState::load_checkpoint(&layout, &path).unwrap_err(),
            Error::Parse(_)
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            ParamState::load_checkpoint(&layout, &path).unwrap_err(),
            Error::Parse(_)
        ));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            ParamState::load_checkpoint(&layout, &path).unwrap_err(),
            Error::Parse(_)
        ));

        let mut long = good.clone();
        long.push(0);
        fs::write(&path, &long).unwrap();
        assert!(matches!(
            ParamState::load_checkpoint(&layout, &path).unwrap_err(),
            Error::Parse(_)
        ));

        fs::write(&path, &good[..5]).unwrap();
        assert!(matches!(
            ParamState::load_checkpoint(&layout, &path).unwrap_err(),
            Error::Parse(_)
        ));
    }

    #[test]
    fn json_round_trips_and_validates_format() {
        let spec = local1d(4, 2, 2, 2, 2, SIG, true).unwrap();
        let params = random_params(&spec, 1.0, 31);
        let text = params.to_json().unwrap();
        let back = ParamState::from_json(&text).unwrap();
        assert_eq!(params, back);
        assert!(text.contains("\"kind\": \"group\""));

        let bumped = text.replace("\"format\": 1", "\"format\": 2");
        assert!(matches!(
            ParamState::from_json(&bumped).unwrap_err(),
            Error::Parse(_)
        ));
        assert!(matches!(
            ParamState::from_json("{not json").unwrap_err(),
            Error::Parse(_)
        ));

        let dir = tempdir().unwrap();
        let path = dir.path().join("p.json");
        params.save_json(&path).unwrap();
        assert_eq!(ParamState::load_json(&path).unwrap(), params);
    }
}

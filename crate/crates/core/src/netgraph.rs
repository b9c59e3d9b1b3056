//! Network structure: immutable DAG specifications, structural validation,
//! theory-assumption checks, backward-path search, and skip augmentation.
//!
//! Ids are global and 1-based: network inputs occupy `1..=d`, hidden units
//! `d+1..=d+H`, output units `d+H+1..=d+H+m`. Acyclicity is enforced the
//! simple way — every edge must point from a smaller id to a larger one.
//! Hidden units live on layers `1..=L`; output units carry the sentinel
//! layer `L+1`. First-layer units read network inputs only; deeper units
//! read hidden units from strictly lower layers only.
//!
//! The *skip set* `{p₁..p_M}` lists the hidden units wired straight to every
//! output unit. Those edges always carry independent weights (`V`), never
//! sharing groups — the output rows of the parameter state belong to `V`,
//! not to the hidden weight map.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{row_key, Dataset};
use crate::error::{Error, Result};

/// Hidden-unit nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    /// Logistic function `1/(1+e^{−t})`: bounded, with vanishing left limit.
    Sigmoid,
    /// Hyperbolic tangent: bounded, but its left limit is −1, so it cannot
    /// sit on a skip unit.
    Tanh,
    /// Scaled softplus `log(1+e^{γt})/γ`, a smooth ReLU surrogate.
    Softplus { gamma: f64 },
}

impl ActivationKind {
    /// Shared shorthand for the common sharpness-20 softplus.
    pub fn softplus20() -> Self {
        ActivationKind::Softplus { gamma: 20.0 }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Sigmoid => write!(f, "sigmoid"),
            ActivationKind::Tanh => write!(f, "tanh"),
            ActivationKind::Softplus { gamma } => write!(f, "softplus(γ={gamma})"),
        }
    }
}

/// One unit of the network: a hidden unit (with activation) or an output
/// unit (linear, sentinel layer, inputs = the skip set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSpec {
    /// Global 1-based id.
    pub id: usize,
    /// Layer index; hidden layers start at 1, outputs sit one past the
    /// deepest hidden layer.
    pub layer: usize,
    /// Ordered incoming ids; position `k` owns weight `k` of the unit's
    /// weight vector.
    pub inputs: Vec<usize>,
    /// Nonlinearity; `None` exactly for output units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationKind>,
    /// Weight-sharing group id; members share one weight vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing_group: Option<usize>,
}

/// Complete architecture description. Immutable once built; every transform
/// returns a new spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input dimension.
    pub d: usize,
    /// Hidden-unit count.
    #[serde(rename = "H")]
    pub h: usize,
    /// Output-unit count (classes).
    pub m: usize,
    /// All hidden and output units, ascending by id.
    pub neurons: Vec<NeuronSpec>,
    /// Ordered skip units `p₁..p_M`; defines the column order of `Ψ` and the
    /// row order of `V`.
    pub skip_set: Vec<usize>,
}

/// Current on-disk schema version for network JSON files.
const NETWORK_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: u32,
    #[serde(flatten)]
    spec: NetworkSpec,
}

/// What a structural rule violation is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// `d` or `m` is zero.
    Dimensions,
    /// Neuron ids are not exactly `d+1..=d+H+m` in order.
    IdSequence,
    /// An edge points at an id ≥ the receiving unit (would create a cycle).
    ForwardEdge,
    /// An input reference is out of range (unknown id, or an output unit).
    InputRef,
    /// The same input id appears twice in one unit's input list.
    DuplicateInput,
    /// Layer discipline broken (first layer reading hidden units, deep layer
    /// reading raw inputs, or reading a layer that is not strictly lower).
    LayerOrder,
    /// A sharing group spans several layers.
    GroupLayerMismatch,
    /// A sharing group mixes units of different fan-in.
    GroupArity,
    /// Skip set malformed (non-hidden member or duplicate).
    SkipSet,
    /// Output unit mis-wired (wrong sentinel layer, inputs ≠ skip set, or a
    /// sharing group on an output).
    OutputWiring,
    /// Missing/forbidden activation, or a non-positive softplus γ.
    Activation,
}

/// A single structural violation with a human-readable description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Offending neuron id, when the violation is attributable to one.
    pub neuron: Option<usize>,
    pub message: String,
}

/// Everything `validate` found. An empty list means the spec is well-formed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, neuron: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            neuron,
            message: message.into(),
        });
    }
}

/// Which activation regime qualified the skip set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipBranch {
    /// All leading skip units are sigmoid (bounded, left limit 0).
    BoundedVanishing,
    /// All leading skip units are softplus, each with a qualifying
    /// skip-free backward path to the first layer.
    SoftplusPath,
}

/// Outcome of the theory-assumption check for a (spec, dataset) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// All hidden activations come from the analytic strictly-increasing
    /// family (always true for specs that pass validation; recorded for the
    /// report's completeness).
    pub analytic_increasing_ok: bool,
    /// The leading `N` skip units qualify under one of the two branches.
    pub skip_activation_ok: bool,
    /// Which branch qualified, if any.
    pub skip_branch: Option<SkipBranch>,
    /// For the softplus branch: the found backward path per skip unit.
    pub backward_paths: BTreeMap<usize, Vec<usize>>,
    /// Every first-layer unit distinguishes every pair of samples.
    pub distinct_patches_ok: bool,
    /// Violating `(sample r, sample s, first-layer unit)` triples, 0-based
    /// samples, unit by id.
    pub violating_pairs: Vec<(usize, usize, usize)>,
    /// Human-readable notes on whatever failed.
    pub notes: Vec<String>,
}

impl AssumptionReport {
    /// True when every checked assumption holds.
    pub fn all_ok(&self) -> bool {
        self.analytic_increasing_ok && self.skip_activation_ok && self.distinct_patches_ok
    }
}

impl NetworkSpec {
    /// Total unit count including network inputs.
    pub fn total_ids(&self) -> usize {
        self.d + self.h + self.m
    }

    /// Number of skip units `M`.
    pub fn skip_count(&self) -> usize {
        self.skip_set.len()
    }

    pub fn is_input_id(&self, id: usize) -> bool {
        (1..=self.d).contains(&id)
    }

    pub fn is_hidden_id(&self, id: usize) -> bool {
        id > self.d && id <= self.d + self.h
    }

    pub fn is_output_id(&self, id: usize) -> bool {
        id > self.d + self.h && id <= self.total_ids()
    }

    /// Looks up a unit by global id (hidden or output).
    pub fn neuron(&self, id: usize) -> Option<&NeuronSpec> {
        if id <= self.d {
            return None;
        }
        let idx = id - self.d - 1;
        match self.neurons.get(idx) {
            Some(n) if n.id == id => Some(n),
            // Fall back to a scan so diagnostics still work on specs whose id
            // sequence is broken.
            _ => self.neurons.iter().find(|n| n.id == id),
        }
    }

    /// Hidden unit ids in ascending order.
    pub fn hidden_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (self.d + 1)..=(self.d + self.h)
    }

    /// Deepest hidden layer (0 when there are no hidden units).
    pub fn max_hidden_layer(&self) -> usize {
        self.neurons
            .iter()
            .filter(|n| self.is_hidden_id(n.id))
            .map(|n| n.layer)
            .max()
            .unwrap_or(0)
    }

    /// Checks every structural rule and reports all violations found; never
    /// fails — a broken spec is an answer, not an error.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.d == 0 || self.m == 0 {
            report.push(
                ViolationKind::Dimensions,
                None,
                format!("need d ≥ 1 and m ≥ 1, got d = {}, m = {}", self.d, self.m),
            );
        }

        if self.neurons.len() != self.h + self.m {
            report.push(
                ViolationKind::IdSequence,
                None,
                format!(
                    "{} neurons declared, expected H + m = {}",
                    self.neurons.len(),
                    self.h + self.m
                ),
            );
        }
        for (idx, n) in self.neurons.iter().enumerate() {
            let expected = self.d + 1 + idx;
            if n.id != expected {
                report.push(
                    ViolationKind::IdSequence,
                    Some(n.id),
                    format!(
                        "neuron at position {idx} has id {}, expected {expected}",
                        n.id
                    ),
                );
            }
        }

        let by_id: HashMap<usize, &NeuronSpec> = self.neurons.iter().map(|n| (n.id, n)).collect();
        let max_hidden_layer = self.max_hidden_layer();

        for n in &self.neurons {
            let hidden = self.is_hidden_id(n.id);

            // Edge rules common to all units.
            let mut seen = BTreeSet::new();
            for &k in &n.inputs {
                if !seen.insert(k) {
                    report.push(
                        ViolationKind::DuplicateInput,
                        Some(n.id),
                        format!("input id {k} listed twice"),
                    );
                }
                if k >= n.id {
                    report.push(
                        ViolationKind::ForwardEdge,
                        Some(n.id),
                        format!("edge from {k} would not point backward (own id {})", n.id),
                    );
                }
                if k == 0 || k > self.d + self.h {
                    report.push(
                        ViolationKind::InputRef,
                        Some(n.id),
                        format!("input id {k} is not a network input or hidden unit"),
                    );
                }
            }

            if hidden {
                if n.layer < 1 {
                    report.push(
                        ViolationKind::LayerOrder,
                        Some(n.id),
                        "hidden unit layer must be ≥ 1",
                    );
                }
                match n.activation {
                    None => report.push(
                        ViolationKind::Activation,
                        Some(n.id),
                        "hidden unit lacks an activation",
                    ),
                    Some(ActivationKind::Softplus { gamma })
                        if !(gamma > 0.0 && gamma.is_finite()) =>
                    {
                        report.push(
                            ViolationKind::Activation,
                            Some(n.id),
                            format!("softplus γ must be positive and finite, got {gamma}"),
                        )
                    }
                    _ => {}
                }
                for &k in &n.inputs {
                    if n.layer == 1 {
                        if self.is_hidden_id(k) {
                            report.push(
                                ViolationKind::LayerOrder,
                                Some(n.id),
                                format!("first-layer unit reads hidden unit {k}"),
                            );
                        }
                    } else if self.is_input_id(k) {
                        report.push(
                            ViolationKind::LayerOrder,
                            Some(n.id),
                            format!("layer-{} unit reads network input {k} directly", n.layer),
                        );
                    } else if let Some(src) = by_id.get(&k) {
                        if self.is_hidden_id(k) && src.layer >= n.layer {
                            report.push(
                                ViolationKind::LayerOrder,
                                Some(n.id),
                                format!(
                                    "reads unit {k} on layer {} which is not strictly lower than {}",
                                    src.layer, n.layer
                                ),
                            );
                        }
                    }
                }
            } else if self.is_output_id(n.id) {
                if n.layer != max_hidden_layer + 1 {
                    report.push(
                        ViolationKind::OutputWiring,
                        Some(n.id),
                        format!(
                            "output unit layer {} ≠ sentinel {}",
                            n.layer,
                            max_hidden_layer + 1
                        ),
                    );
                }
                if n.activation.is_some() {
                    report.push(
                        ViolationKind::Activation,
                        Some(n.id),
                        "output units are linear; activation must be absent",
                    );
                }
                if n.sharing_group.is_some() {
                    report.push(
                        ViolationKind::OutputWiring,
                        Some(n.id),
                        "output units cannot join sharing groups (skip weights are independent)",
                    );
                }
                if n.inputs != self.skip_set {
                    report.push(
                        ViolationKind::OutputWiring,
                        Some(n.id),
                        "output unit inputs must equal the skip set, in order",
                    );
                }
            }
        }

        // Skip-set rules.
        let mut seen = BTreeSet::new();
        for &p in &self.skip_set {
            if !self.is_hidden_id(p) {
                report.push(
                    ViolationKind::SkipSet,
                    Some(p),
                    format!("skip set member {p} is not a hidden unit"),
                );
            }
            if !seen.insert(p) {
                report.push(
                    ViolationKind::SkipSet,
                    Some(p),
                    format!("skip set member {p} duplicated"),
                );
            }
        }

        // Sharing-group consistency (hidden units only; outputs flagged above).
        let mut groups: BTreeMap<usize, Vec<&NeuronSpec>> = BTreeMap::new();
        for n in &self.neurons {
            if self.is_hidden_id(n.id) {
                if let Some(g) = n.sharing_group {
                    groups.entry(g).or_default().push(n);
                }
            }
        }
        for (gid, members) in &groups {
            let layer0 = members[0].layer;
            if members.iter().any(|n| n.layer != layer0) {
                report.push(
                    ViolationKind::GroupLayerMismatch,
                    None,
                    format!("sharing group {gid} spans several layers"),
                );
            }
            let arity0 = members[0].inputs.len();
            if members.iter().any(|n| n.inputs.len() != arity0) {
                report.push(
                    ViolationKind::GroupArity,
                    None,
                    format!("sharing group {gid} mixes fan-ins"),
                );
            }
        }

        report
    }

    /// Ids structurally blocked for backward paths: skip units themselves
    /// plus everything sharing a weight group with one.
    pub(crate) fn blocked_for_paths(&self) -> BTreeSet<usize> {
        let mut blocked: BTreeSet<usize> = self.skip_set.iter().copied().collect();
        let skip_groups: BTreeSet<usize> = self
            .skip_set
            .iter()
            .filter_map(|&p| self.neuron(p).and_then(|n| n.sharing_group))
            .collect();
        if !skip_groups.is_empty() {
            for n in &self.neurons {
                if self.is_hidden_id(n.id) {
                    if let Some(g) = n.sharing_group {
                        if skip_groups.contains(&g) {
                            blocked.insert(n.id);
                        }
                    }
                }
            }
        }
        blocked
    }

    /// Searches for a backward path `p → … → first-layer unit` in which no
    /// unit after `p` is a skip unit or shares weights with one. Returns the
    /// path including both endpoints; a first-layer `p` is its own path.
    pub fn backward_path_exists(&self, p: usize) -> Result<Option<Vec<usize>>> {
        if !self.is_hidden_id(p) {
            return Err(Error::InvalidInput(format!(
                "backward path start {p} is not a hidden unit id"
            )));
        }
        let blocked = self.blocked_for_paths();
        let mut visited = BTreeSet::new();

        fn dfs(
            spec: &NetworkSpec,
            node: usize,
            blocked: &BTreeSet<usize>,
            visited: &mut BTreeSet<usize>,
            path: &mut Vec<usize>,
        ) -> bool {
            path.push(node);
            let n = spec.neuron(node).expect("hidden unit exists");
            if n.layer == 1 {
                return true;
            }
            for &k in &n.inputs {
                if !spec.is_hidden_id(k) || blocked.contains(&k) || !visited.insert(k) {
                    continue;
                }
                if dfs(spec, k, blocked, visited, path) {
                    return true;
                }
            }
            path.pop();
            false
        }

        let mut path = Vec::new();
        if dfs(self, p, &blocked, &mut visited, &mut path) {
            Ok(Some(path))
        } else {
            Ok(None)
        }
    }

    /// Checks the three theory assumptions for this spec on a dataset:
    /// activation family, skip-unit activation regime (on the leading `N`
    /// skip units), and first-layer patch distinctness.
    ///
    /// Fails outright — rather than reporting — when the spec is not even
    /// structurally valid, when the dataset shape disagrees, or when the
    /// skip set is smaller than the dataset (`M ≥ N` is a hard requirement
    /// for everything downstream).
    pub fn check_assumptions(&self, dataset: &Dataset) -> Result<AssumptionReport> {
        let validation = self.validate();
        if !validation.is_valid() {
            return Err(Error::InvalidInput(format!(
                "spec fails structural validation with {} violation(s); run validate for details",
                validation.violations.len()
            )));
        }
        if dataset.d() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} features but the network expects d = {}",
                dataset.d(),
                self.d
            )));
        }
        let n = dataset.n();
        if self.skip_count() < n {
            return Err(Error::Infeasible(format!(
                "skip set has M = {} units but the dataset has N = {n} samples; \
                 condition M ≥ N fails",
                self.skip_count()
            )));
        }

        let mut notes = Vec::new();

        // Skip-activation regime, judged on the leading N skip units only —
        // the feature-matrix arguments never look past column N.
        let leading = &self.skip_set[..n];
        let mut backward_paths = BTreeMap::new();
        let all_sigmoid = leading.iter().all(|&p| {
            matches!(
                self.neuron(p).and_then(|u| u.activation),
                Some(ActivationKind::Sigmoid)
            )
        });
        let all_softplus = leading.iter().all(|&p| {
            matches!(
                self.neuron(p).and_then(|u| u.activation),
                Some(ActivationKind::Softplus { .. })
            )
        });
        let (skip_activation_ok, skip_branch) = if all_sigmoid {
            (true, Some(SkipBranch::BoundedVanishing))
        } else if all_softplus {
            let mut ok = true;
            for &p in leading {
                match self.backward_path_exists(p)? {
                    Some(path) => {
                        backward_paths.insert(p, path);
                    }
                    None => {
                        ok = false;
                        notes.push(format!(
                            "softplus skip unit {p} has no backward path avoiding \
                             skip units and their sharing groups"
                        ));
                    }
                }
            }
            (
                ok,
                if ok {
                    Some(SkipBranch::SoftplusPath)
                } else {
                    None
                },
            )
        } else {
            for &p in leading {
                let act = self.neuron(p).and_then(|u| u.activation);
                if !matches!(
                    act,
                    Some(ActivationKind::Sigmoid | ActivationKind::Softplus { .. })
                ) {
                    notes.push(format!(
                        "skip unit {p} uses {}, which is neither bounded-with-vanishing-left-limit \
                         nor softplus",
                        act.map_or_else(|| "no activation".to_string(), |a| a.to_string()),
                    ));
                }
            }
            if notes.is_empty() {
                notes.push(
                    "leading skip units mix sigmoid and softplus; the theory needs one regime"
                        .to_string(),
                );
            }
            (false, None)
        };

        // Distinct input patches, grouped by support so an MLP's identical
        // first-layer supports are hashed once instead of per unit.
        let mut supports: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        for unit in &self.neurons {
            if self.is_hidden_id(unit.id) && unit.layer == 1 {
                supports.entry(&unit.inputs).or_default().push(unit.id);
            }
        }
        let mut violating_pairs = Vec::new();
        for (support, units) in supports {
            let mut first_with_patch: HashMap<Vec<u64>, usize> = HashMap::with_capacity(n);
            for i in 0..n {
                let row = dataset.x().row(i);
                let patch: Vec<f64> = support.iter().map(|&c| row[c - 1]).collect();
                match first_with_patch.entry(row_key(&patch)) {
                    std::collections::hash_map::Entry::Occupied(e) => {
                        let r = *e.get();
                        for &u in &units {
                            violating_pairs.push((r, i, u));
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(i);
                    }
                }
            }
        }
        violating_pairs.sort_unstable();
        let distinct_patches_ok = violating_pairs.is_empty();

        Ok(AssumptionReport {
            analytic_increasing_ok: true,
            skip_activation_ok,
            skip_branch,
            backward_paths,
            distinct_patches_ok,
            violating_pairs,
            notes,
        })
    }

    /// Returns a copy whose skip set is grown to `target_m` units: existing
    /// skip units stay, the last hidden layer is force-included when
    /// requested, and the remainder is a uniformly random subset of the
    /// candidate pool. Output units are rewired to the new skip set.
    pub fn augment_with_skips(
        &self,
        target_m: usize,
        seed: u64,
        options: &AugmentOptions,
    ) -> Result<NetworkSpec> {
        let mut mandatory: BTreeSet<usize> = self.skip_set.iter().copied().collect();
        if options.keep_last_layer {
            let last = self.max_hidden_layer();
            for unit in &self.neurons {
                if self.is_hidden_id(unit.id) && unit.layer == last {
                    mandatory.insert(unit.id);
                }
            }
        }
        if mandatory.len() > target_m {
            return Err(Error::Infeasible(format!(
                "{} units are already mandatory (existing skips / kept last layer) \
                 but target_M = {target_m}",
                mandatory.len()
            )));
        }

        let pool: Vec<usize> = self
            .neurons
            .iter()
            .filter(|u| self.is_hidden_id(u.id) && !mandatory.contains(&u.id))
            .filter(|u| match options.layer_range {
                Some((lo, hi)) => u.layer >= lo && u.layer <= hi,
                None => true,
            })
            .map(|u| u.id)
            .collect();
        let needed = target_m - mandatory.len();
        if needed > pool.len() {
            return Err(Error::Infeasible(format!(
                "target_M = {target_m} exceeds the {} available hidden units \
                 (pool {} + mandatory {})",
                pool.len() + mandatory.len(),
                pool.len(),
                mandatory.len()
            )));
        }

        // Partial Fisher–Yates over the ascending pool: a uniform
        // `needed`-subset, identical for identical seeds.
        let mut pool = pool;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for i in 0..needed {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut skip_set: Vec<usize> = mandatory
            .into_iter()
            .chain(pool[..needed].iter().copied())
            .collect();
        skip_set.sort_unstable();

        let mut out = self.clone();
        out.skip_set = skip_set.clone();
        for unit in &mut out.neurons {
            if unit.id > out.d + out.h {
                unit.inputs = skip_set.clone();
            }
        }
        Ok(out)
    }

    /// Serializes to the versioned JSON network format.
    pub fn to_json(&self) -> Result<String> {
        let file = NetworkFile {
            format: NETWORK_FORMAT,
            spec: self.clone(),
        };
        serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Parse(format!("cannot serialize network spec: {e}")))
    }

    /// Parses the versioned JSON network format.
    pub fn from_json(text: &str) -> Result<NetworkSpec> {
        let file: NetworkFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("cannot parse network spec: {e}")))?;
        if file.format != NETWORK_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported network format version {}, expected {NETWORK_FORMAT}",
                file.format
            )));
        }
        Ok(file.spec)
    }

    /// Writes the JSON network format to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads the JSON network format from a file.
    pub fn load(path: impl AsRef<Path>) -> Result<NetworkSpec> {
        let text = std::fs::read_to_string(path)?;
        NetworkSpec::from_json(&text)
    }
}

/// Options for [`NetworkSpec::augment_with_skips`].
#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    /// Restrict the random pool to hidden layers in this inclusive range
    /// (mirrors protocols that only tap an early block of the network).
    pub layer_range: Option<(usize, usize)>,
    /// Force-include every unit of the deepest hidden layer.
    pub keep_last_layer: bool,
}

/// Fully connected multi-layer perceptron: `widths[l]` hidden units on layer
/// `l+1`, every layer densely wired to the previous one. With
/// `skip_last_layer` the deepest hidden layer becomes the skip set;
/// otherwise the skip set starts empty (useful as augmentation input).
pub fn mlp(
    d: usize,
    widths: &[usize],
    m: usize,
    activation: ActivationKind,
    skip_last_layer: bool,
) -> Result<NetworkSpec> {
    if d == 0 || m == 0 || widths.is_empty() || widths.contains(&0) {
        return Err(Error::InvalidInput(
            "mlp needs d ≥ 1, m ≥ 1, and at least one nonempty hidden layer".into(),
        ));
    }
    let h: usize = widths.iter().sum();
    let mut neurons = Vec::with_capacity(h + m);
    let mut next_id = d + 1;
    let mut prev_layer_ids: Vec<usize> = (1..=d).collect();
    for (l, &width) in widths.iter().enumerate() {
        let mut layer_ids = Vec::with_capacity(width);
        for _ in 0..width {
            neurons.push(NeuronSpec {
                id: next_id,
                layer: l + 1,
                inputs: prev_layer_ids.clone(),
                activation: Some(activation),
                sharing_group: None,
            });
            layer_ids.push(next_id);
            next_id += 1;
        }
        prev_layer_ids = layer_ids;
    }
    let skip_set = if skip_last_layer {
        prev_layer_ids.clone()
    } else {
        Vec::new()
    };
    for _ in 0..m {
        neurons.push(NeuronSpec {
            id: next_id,
            layer: widths.len() + 1,
            inputs: skip_set.clone(),
            activation: None,
            sharing_group: None,
        });
        next_id += 1;
    }
    Ok(NetworkSpec {
        d,
        h,
        m,
        neurons,
        skip_set,
    })
}

/// Single locally connected layer over a 1-D input: `filters` filters slide a
/// `window`-wide support by `stride`. With `share_weights` each filter's
/// units form one sharing group (a convolution); without, weights are free
/// per position. All hidden units become skip units.
pub fn local1d(
    d: usize,
    window: usize,
    stride: usize,
    filters: usize,
    m: usize,
    activation: ActivationKind,
    share_weights: bool,
) -> Result<NetworkSpec> {
    if d == 0 || m == 0 || filters == 0 || stride == 0 || window == 0 || window > d {
        return Err(Error::InvalidInput(
            "local1d needs d ≥ window ≥ 1, stride ≥ 1, filters ≥ 1, m ≥ 1".into(),
        ));
    }
    let positions = (d - window) / stride + 1;
    let h = filters * positions;
    let mut neurons = Vec::with_capacity(h + m);
    let mut next_id = d + 1;
    for f in 0..filters {
        for pos in 0..positions {
            let start = pos * stride + 1;
            neurons.push(NeuronSpec {
                id: next_id,
                layer: 1,
                inputs: (start..start + window).collect(),
                activation: Some(activation),
                sharing_group: share_weights.then_some(f + 1),
            });
            next_id += 1;
        }
    }
    let skip_set: Vec<usize> = ((d + 1)..(d + 1 + h)).collect();
    for _ in 0..m {
        neurons.push(NeuronSpec {
            id: next_id,
            layer: 2,
            inputs: skip_set.clone(),
            activation: None,
            sharing_group: None,
        });
        next_id += 1;
    }
    Ok(NetworkSpec {
        d,
        h,
        m,
        neurons,
        skip_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::linalg::Matrix;

    fn has_violation(report: &ValidationReport, kind: ViolationKind) -> bool {
        report.violations.iter().any(|v| v.kind == kind)
    }

    #[test]
    fn one_layer_two_unit_net_is_valid() {
        let spec = mlp(2, &[2], 1, ActivationKind::Sigmoid, true).unwrap();
        assert_eq!(spec.h, 2);
        assert_eq!(spec.skip_set, vec![3, 4]);
        assert!(spec.validate().is_valid());
    }

    #[test]
    fn conv_style_builder_is_valid_with_and_without_sharing() {
        for share in [false, true] {
            let spec = local1d(6, 3, 1, 2, 2, ActivationKind::Tanh, share).unwrap();
            assert_eq!(spec.h, 8); // 2 filters × 4 positions
            let report = spec.validate();
            assert!(report.is_valid(), "violations: {:?}", report.violations);
        }
    }

    #[test]
    fn forward_edge_is_reported() {
        let mut spec = mlp(2, &[2], 1, ActivationKind::Sigmoid, true).unwrap();
        spec.neurons[0].inputs = vec![1, 3]; // id 3 reading itself
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::ForwardEdge));
    }

    #[test]
    fn sharing_group_across_layers_is_reported() {
        // Three-unit counterexample: two chained layers, one shared group.
        let mut spec = mlp(1, &[1, 1, 1], 1, ActivationKind::Sigmoid, true).unwrap();
        spec.neurons[0].sharing_group = Some(9);
        spec.neurons[1].sharing_group = Some(9);
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::GroupLayerMismatch));
    }

    #[test]
    fn sharing_group_arity_mismatch_is_reported() {
        let mut spec = local1d(4, 2, 1, 1, 1, ActivationKind::Sigmoid, true).unwrap();
        // Widen one member's window — same layer, wrong fan-in.
        spec.neurons[0].inputs = vec![1, 2, 3];
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::GroupArity));
    }

    #[test]
    fn layer_discipline_is_enforced() {
        let mut spec = mlp(2, &[1, 1], 1, ActivationKind::Sigmoid, true).unwrap();
        // Deep unit (id 4, layer 2) reading a raw input.
        spec.neurons[1].inputs = vec![1];
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::LayerOrder));

        let mut spec = mlp(2, &[1, 1], 1, ActivationKind::Sigmoid, true).unwrap();
        // First-layer unit reading a hidden unit (and a forward edge at that).
        spec.neurons[0].inputs = vec![4];
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::LayerOrder));
    }

    #[test]
    fn output_wiring_rules_are_enforced() {
        let mut spec = mlp(2, &[2], 2, ActivationKind::Sigmoid, true).unwrap();
        spec.neurons[2].inputs = vec![3]; // output ignoring part of the skip set
        let report = spec.validate();
        assert!(has_violation(&report, ViolationKind::OutputWiring));

        let mut spec = mlp(2, &[2], 2, ActivationKind::Sigmoid, true).unwrap();
        spec.neurons[3].activation = Some(ActivationKind::Sigmoid);
        assert!(has_violation(&spec.validate(), ViolationKind::Activation));

        let mut spec = mlp(2, &[2], 2, ActivationKind::Sigmoid, true).unwrap();
        spec.neurons[2].layer = 7;
        assert!(has_violation(&spec.validate(), ViolationKind::OutputWiring));
    }

    #[test]
    fn bad_softplus_gamma_is_reported() {
        let mut spec = mlp(2, &[1], 1, ActivationKind::Softplus { gamma: 0.0 }, true).unwrap();
        assert!(has_violation(&spec.validate(), ViolationKind::Activation));
        spec.neurons[0].activation = None;
        assert!(has_violation(&spec.validate(), ViolationKind::Activation));
    }

    #[test]
    fn json_round_trip_preserves_structure_and_checks_version() {
        let spec = local1d(5, 2, 1, 2, 3, ActivationKind::softplus20(), true).unwrap();
        let text = spec.to_json().unwrap();
        assert!(text.contains("\"format\": 1"));
        let back = NetworkSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);

        let bumped = text.replace("\"format\": 1", "\"format\": 2");
        assert!(matches!(
            NetworkSpec::from_json(&bumped).unwrap_err(),
            Error::Parse(_)
        ));
        assert!(matches!(
            NetworkSpec::from_json("not json").unwrap_err(),
            Error::Parse(_)
        ));
    }

    #[test]
    fn assumptions_hold_for_dense_net_on_distinct_samples() {
        let dataset = synth_dataset(6, 3, 2, 1.0, 1).unwrap();
        let spec = mlp(3, &[8], 2, ActivationKind::Sigmoid, true).unwrap();
        let report = spec.check_assumptions(&dataset).unwrap();
        assert!(report.all_ok(), "report: {report:?}");
        assert_eq!(report.skip_branch, Some(SkipBranch::BoundedVanishing));
        assert!(report.violating_pairs.is_empty());
    }

    #[test]
    fn duplicate_samples_violate_every_first_layer_unit() {
        let x = Matrix::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0]]).unwrap();
        let dataset = Dataset::new(x, vec![1, 2], 2, "dup").unwrap();
        let spec = mlp(2, &[4], 2, ActivationKind::Sigmoid, true).unwrap();
        let report = spec.check_assumptions(&dataset).unwrap();
        assert!(!report.distinct_patches_ok);
        let units: BTreeSet<usize> = report.violating_pairs.iter().map(|&(_, _, u)| u).collect();
        assert_eq!(units, spec.skip_set.iter().copied().collect());
        for &(r, s, _) in &report.violating_pairs {
            assert_eq!((r, s), (0, 1));
        }
    }

    #[test]
    fn small_skip_set_is_infeasible() {
        let dataset = synth_dataset(6, 3, 2, 1.0, 1).unwrap();
        let spec = mlp(3, &[4], 2, ActivationKind::Sigmoid, true).unwrap();
        match spec.check_assumptions(&dataset).unwrap_err() {
            Error::Infeasible(msg) => assert!(msg.contains("M ≥ N"), "message: {msg}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn tanh_skips_fail_the_activation_branch() {
        let dataset = synth_dataset(4, 3, 2, 1.0, 1).unwrap();
        let spec = mlp(3, &[4], 2, ActivationKind::Tanh, true).unwrap();
        let report = spec.check_assumptions(&dataset).unwrap();
        assert!(!report.skip_activation_ok);
        assert_eq!(report.skip_branch, None);
        assert!(!report.notes.is_empty());
    }

    #[test]
    fn softplus_chain_through_another_skip_unit_fails() {
        // Chain 1 → A(3) → B(4); both are skip units, so B's only backward
        // route passes through the skip unit A.
        let act = ActivationKind::Softplus { gamma: 1.0 };
        let spec = NetworkSpec {
            d: 2,
            h: 2,
            m: 1,
            neurons: vec![
                NeuronSpec {
                    id: 3,
                    layer: 1,
                    inputs: vec![1, 2],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 4,
                    layer: 2,
                    inputs: vec![3],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 5,
                    layer: 3,
                    inputs: vec![3, 4],
                    activation: None,
                    sharing_group: None,
                },
            ],
            skip_set: vec![3, 4],
        };
        assert!(spec.validate().is_valid());
        let dataset = synth_dataset(2, 2, 2, 1.0, 3).unwrap();
        let report = spec.check_assumptions(&dataset).unwrap();
        assert!(!report.skip_activation_ok);
        assert_eq!(spec.backward_path_exists(4).unwrap(), None);
        // The first-layer skip unit is its own backward path.
        assert_eq!(spec.backward_path_exists(3).unwrap(), Some(vec![3]));
    }

    #[test]
    fn diamond_dag_routes_around_blocked_branch() {
        // Inputs 1,2; first layer 3,4; second layer 5 (→3), 6 (→4);
        // third layer 7 reads both. Skips {7, 5} block the left branch.
        let act = ActivationKind::softplus20();
        let spec = NetworkSpec {
            d: 2,
            h: 5,
            m: 1,
            neurons: vec![
                NeuronSpec {
                    id: 3,
                    layer: 1,
                    inputs: vec![1, 2],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 4,
                    layer: 1,
                    inputs: vec![1, 2],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 5,
                    layer: 2,
                    inputs: vec![3],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 6,
                    layer: 2,
                    inputs: vec![4],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 7,
                    layer: 3,
                    inputs: vec![5, 6],
                    activation: Some(act),
                    sharing_group: None,
                },
                NeuronSpec {
                    id: 8,
                    layer: 4,
                    inputs: vec![7, 5],
                    activation: None,
                    sharing_group: None,
                },
            ],
            skip_set: vec![7, 5],
        };
        assert!(spec.validate().is_valid());
        assert_eq!(spec.backward_path_exists(7).unwrap(), Some(vec![7, 6, 4]));

        // Group-blocking: 6 sharing weights with the skip unit 5 closes the
        // remaining branch.
        let mut grouped = spec.clone();
        grouped.neurons[2].sharing_group = Some(1);
        grouped.neurons[3].sharing_group = Some(1);
        assert!(grouped.validate().is_valid());
        assert_eq!(grouped.backward_path_exists(7).unwrap(), None);
        assert!(grouped.backward_path_exists(99).is_err());
    }

    #[test]
    fn augmentation_is_deterministic_and_valid() {
        let spec = mlp(3, &[5], 2, ActivationKind::Sigmoid, false).unwrap();
        assert!(spec.validate().is_valid());
        let opts = AugmentOptions::default();
        let full = spec.augment_with_skips(5, 0, &opts).unwrap();
        assert_eq!(full.skip_set, vec![4, 5, 6, 7, 8]);
        assert!(full.validate().is_valid());

        let a = spec.augment_with_skips(3, 42, &opts).unwrap();
        let b = spec.augment_with_skips(3, 42, &opts).unwrap();
        assert_eq!(a.skip_set, b.skip_set);
        assert!(a.validate().is_valid());
        assert!(matches!(
            spec.augment_with_skips(6, 0, &opts).unwrap_err(),
            Error::Infeasible(_)
        ));
    }

    #[test]
    fn augmentation_extends_existing_skips_and_honors_options() {
        let spec = mlp(2, &[3, 3], 2, ActivationKind::Sigmoid, false).unwrap();
        // Seed an existing skip unit by hand.
        let seeded = {
            let mut s = spec.clone();
            s.skip_set = vec![3];
            for u in &mut s.neurons {
                if u.id > s.d + s.h {
                    u.inputs = vec![3];
                }
            }
            s
        };
        assert!(seeded.validate().is_valid());
        let out = seeded
            .augment_with_skips(3, 7, &AugmentOptions::default())
            .unwrap();
        assert!(out.skip_set.contains(&3), "existing skip unit dropped");
        assert_eq!(out.skip_set.len(), 3);

        // keep_last_layer forces units 6,7,8 (layer 2) in.
        let kept = spec
            .augment_with_skips(
                4,
                7,
                &AugmentOptions {
                    layer_range: None,
                    keep_last_layer: true,
                },
            )
            .unwrap();
        for id in [6, 7, 8] {
            assert!(kept.skip_set.contains(&id));
        }

        // layer_range restricts the random pool to layer 1.
        let pooled = spec
            .augment_with_skips(
                2,
                7,
                &AugmentOptions {
                    layer_range: Some((1, 1)),
                    keep_last_layer: false,
                },
            )
            .unwrap();
        for &p in &pooled.skip_set {
            assert!((3..=5).contains(&p), "unit {p} outside layer 1");
        }
    }

    #[test]
    fn augmentation_samples_uniformly() {
        let spec = mlp(2, &[100], 2, ActivationKind::Sigmoid, false).unwrap();
        let opts = AugmentOptions::default();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for seed in 0..1000 {
            let out = spec.augment_with_skips(10, seed, &opts).unwrap();
            assert_eq!(out.skip_set.len(), 10);
            for &p in &out.skip_set {
                *counts.entry(p).or_default() += 1;
            }
        }
        // Binomial(1000, 0.1): empirical frequency within 0.1 ± 0.03.
        for id in spec.hidden_ids() {
            let freq = counts.get(&id).copied().unwrap_or(0) as f64 / 1000.0;
            assert!(
                (freq - 0.1).abs() <= 0.03,
                "unit {id} selected with frequency {freq}"
            );
        }
    }
}

//! Constructive full-rank certificates for the skip-feature matrix.
//!
//! Given `N` training samples and a network whose leading `N` skip units
//! satisfy the structural assumptions, this module builds explicit hidden
//! parameters under which the leading `N×N` block of `Ψ` is provably
//! nonsingular, then verifies the bound numerically:
//!
//! 1. random first-layer weights, resampled until every first-layer unit
//!    separates all samples;
//! 2. unit-vector weights above the first layer, so each higher unit copies
//!    one lower unit `c(j)` (for softplus skips the copy chain follows a
//!    backward path that avoids skip units and their weight-sharing
//!    siblings);
//! 3. a greedy argmax permutation `π` of the samples so that, reordered,
//!    each skip unit's chain value strictly decreases below the diagonal;
//! 4. weight scales `α` and biases `b_{p_j} = β − α·f_{c(p_j)}(x_{π(j)})`
//!    that pin every diagonal entry to `σ(β)` while driving the
//!    strictly-lower triangle under a small `ε` (bounded activations), or —
//!    for softplus — a single `α` doubled until the determinant settles at
//!    `∏σ(β)`.
//!
//! A Leibniz expansion then gives `|det| ≥ ½·∏σ(β)` with
//! `ε = |∏σ(β)| / (2·N!·C^{N−1})`, which is the bound
//! [`verify_full_rank`] checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{activate, activate_inverse, EvalGraph, ParamState, WeightKey};
use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, determinant, numerical_rank, Matrix};
use crate::losses::zero_error_threshold;
use crate::netgraph::{NetworkSpec, SkipBranch};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Largest block size for which the verifier computes an exact determinant;
/// beyond this it falls back to a numerical rank decision.
pub const DET_GUARD: usize = 12;

/// Largest `N` for which the a-priori `ε` uses the factorial formula; past
/// it the formula underflows usefully and a fixed small fraction of
/// `∏σ(β)` is used instead (verification remains the ground truth).
const FACTORIAL_GUARD: usize = 8;

/// Attempts to redraw a first-layer weight vector before declaring the
/// data degenerate.
const MAX_RESAMPLES: usize = 100;

/// Tuning knobs for the construction. Omitted JSON fields fall back to the
/// [`Default`] values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateConfig {
    /// Diagonal anchor: every constructed diagonal entry equals `σ(β)`.
    /// Must keep `σ(β) ≠ 0` for all leading skip activations (any finite
    /// value works for sigmoid and softplus).
    #[serde(default)]
    pub beta: f64,
    /// Overrides the lower-triangle target `ε`; must stay below
    /// `min_j σ_{p_j}(β)`.
    #[serde(default)]
    pub epsilon_override: Option<f64>,
    /// Hard cap on any weight scale; exceeding it aborts with a numerical
    /// error rather than emitting unusable parameters.
    #[serde(default = "default_alpha_cap")]
    pub alpha_cap: f64,
    /// Doubling budget for the softplus branch.
    #[serde(default = "default_max_doublings")]
    pub max_alpha_doublings: u32,
}

fn default_alpha_cap() -> f64 {
    1e12
}

fn default_max_doublings() -> u32 {
    60
}

impl Default for CertificateConfig {
    fn default() -> Self {
        CertificateConfig {
            beta: 0.0,
            epsilon_override: None,
            alpha_cap: 1e12,
            max_alpha_doublings: 60,
        }
    }
}

/// Everything the construction fixed besides the parameters themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateScaffold {
    /// Sample order `π` (0-based): row `π[j]` carries the diagonal of
    /// column `j`.
    pub permutation: Vec<usize>,
    /// Lower-triangle target (bounded branch; recorded for both).
    pub epsilon: f64,
    /// Diagonal anchor.
    pub beta: f64,
    /// Applied weight scale per hidden unit id.
    pub alphas: BTreeMap<usize, f64>,
    /// Realized copy target `c(j)` per above-first-layer unit id.
    pub chooser: BTreeMap<usize, usize>,
    /// Which assumption branch the construction followed.
    pub branch: SkipBranch,
    /// Softplus only: doublings performed (0 for the bounded branch).
    pub doublings: u32,
    /// Softplus only: whether the determinant settled within the doubling
    /// budget. Always true for the bounded branch.
    pub stabilized: bool,
}

/// Constructed parameters plus their scaffold.
#[derive(Debug, Clone)]
pub struct CertificateBuild {
    /// Hidden weights and biases per the construction; `V` is zero (the
    /// certificate concerns features, not output fits).
    pub params: ParamState,
    pub scaffold: CertificateScaffold,
}

/// Outcome of the numerical check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Block size (= sample count).
    pub n: usize,
    /// Determinant of the reordered leading block, when `n ≤` [`DET_GUARD`].
    pub det_value: Option<f64>,
    /// `½·|∏_j σ_{p_j}(β)|`.
    pub bound: f64,
    /// `∏_j σ_{p_j}(β)` itself.
    pub product_sigma_beta: f64,
    /// Numerical rank of the leading block.
    pub rank: usize,
    /// Largest strictly-lower-triangular entry after reordering.
    pub lower_triangular_max: f64,
    pub epsilon: f64,
    pub beta: f64,
    /// Applied scales (empty when verifying foreign parameters).
    pub alphas: BTreeMap<usize, f64>,
    /// Row order used for the block (0-based sample indices).
    pub permutation: Vec<usize>,
    pub branch: Option<SkipBranch>,
    pub doublings: Option<u32>,
    pub stabilized: Option<bool>,
    /// Determinant path: `|det| ≥ bound·(1 − 1e-6)`. Rank path (`n >`
    /// [`DET_GUARD`]): the block has full numerical rank.
    pub passed: bool,
}

/// Greedy argmax ordering: step `j` picks, among the samples not yet
/// placed, the one maximizing column `j`'s value. After reordering, every
/// column strictly decreases below its diagonal. `values[j][i]` is column
/// `j`'s value on sample `i`; ties at any argmax step are reported as
/// degenerate data (the construction guarantees distinctness first).
pub fn ordering_permutation(values: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = values.len();
    if n == 0 {
        return Err(Error::InvalidInput("no columns to order".into()));
    }
    if values.iter().any(|col| col.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "need {n} values per column for {n} columns"
        )));
    }
    let mut used = vec![false; n];
    let mut pi = Vec::with_capacity(n);
    for col in values {
        let mut best: Option<usize> = None;
        let mut tied = false;
        for (i, &v) in col.iter().enumerate() {
            if used[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) => {
                    if v > col[b] {
                        best = Some(i);
                        tied = false;
                    } else if v == col[b] {
                        tied = true;
                    }
                }
            }
        }
        let b = best.expect("fewer placed than n");
        if tied {
            return Err(Error::DegenerateData(format!(
                "argmax tie while ordering samples (value {} appears twice)",
                col[b]
            )));
        }
        used[b] = true;
        pi.push(b);
    }
    Ok(pi)
}

/// A-priori lower-triangle target from the Leibniz estimate:
/// `|∏σ(β)| / (2·N!·C^{N−1})` with `C = 1` (the range bound of the bounded
/// skip activations), switching to `1e-6·|∏σ(β)|` once the factorial makes
/// the formula underflow usefully.
fn epsilon_for(n: usize, product_sigma_beta: f64) -> f64 {
    if n <= FACTORIAL_GUARD {
        let factorial: f64 = (1..=n).map(|k| k as f64).product();
        product_sigma_beta.abs() / (2.0 * factorial)
    } else {
        1e-6 * product_sigma_beta.abs()
    }
}

/// Per-pass values of every hidden unit (and pre-activation) per sample.
struct PassValues {
    /// `hidden[i][k]` = unit `d+1+k` on sample `i`.
    hidden: Vec<Vec<f64>>,
    /// Same indexing, pre-activations.
    pre: Vec<Vec<f64>>,
}

fn forward_all(graph: &EvalGraph, params: &ParamState, data: &Dataset) -> Result<PassValues> {
    let mut hidden = Vec::with_capacity(data.n());
    let mut pre = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let pass = graph.forward(params, data.x().row(i))?;
        hidden.push(pass.hidden);
        pre.push(pass.pre);
    }
    Ok(PassValues { hidden, pre })
}

/// Shared construction state.
struct Builder<'a> {
    spec: &'a NetworkSpec,
    data: &'a Dataset,
    graph: EvalGraph,
    /// Unscaled weight vector per layout slot.
    slot_u: Vec<Vec<f64>>,
    /// Scale per layout slot.
    slot_scale: Vec<f64>,
    /// Bias per hidden index.
    biases: Vec<f64>,
    /// Realized copy target per hidden index (above-first-layer units).
    chooser: Vec<Option<usize>>,
    /// Leading skip ids (`p_1..p_N`).
    leading: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn params(&self) -> ParamState {
        let layout = self.graph.layout();
        let mut weights = BTreeMap::new();
        for (s, slot) in layout.slots().iter().enumerate() {
            let scaled: Vec<f64> = self.slot_u[s]
                .iter()
                .map(|u| u * self.slot_scale[s])
                .collect();
            weights.insert(slot.key, scaled);
        }
        let mut biases = BTreeMap::new();
        for (k, &b) in self.biases.iter().enumerate() {
            biases.insert(self.spec.d + 1 + k, b);
        }
        ParamState {
            weights,
            biases,
            v: Matrix::zeros(layout.skip_count(), layout.output_count()),
        }
    }

    fn idx(&self, id: usize) -> usize {
        id - self.spec.d - 1
    }

    /// Follows realized copy targets from a skip unit down to the first
    /// layer; this root's pre-activations decide the unit's sample order.
    fn root_of(&self, p: usize) -> usize {
        let mut cur = p;
        while let Some(c) = self.chooser[self.idx(cur)] {
            cur = c;
        }
        cur
    }

    /// Chain value `f_{c(p)}(xᵢ)` (with the first-layer convention
    /// `f_{c(p)} = g_p`): the quantity whose differences the α bounds and
    /// biases are built from.
    fn chain_value(&self, pass: &PassValues, p: usize, i: usize) -> f64 {
        match self.chooser[self.idx(p)] {
            Some(c) => pass.hidden[i][self.idx(c)],
            None => pass.pre[i][self.idx(p)],
        }
    }
}

/// Draws first-layer weights, redrawing any slot whose member unit fails to
/// separate some sample pair exactly.
fn draw_first_layer(b: &mut Builder, rng: &mut ChaCha20Rng) -> Result<()> {
    use rand::Rng;
    let layout = b.graph.layout().clone();
    for (s, slot) in layout.slots().iter().enumerate() {
        let members: Vec<&crate::netgraph::NeuronSpec> = b
            .spec
            .hidden_ids()
            .filter_map(|id| b.spec.neuron(id))
            .filter(|n| {
                n.layer == 1
                    && match n.sharing_group {
                        Some(g) => slot.key == WeightKey::Group(g),
                        None => slot.key == WeightKey::Neuron(n.id),
                    }
            })
            .collect();
        if members.is_empty() {
            continue; // higher-layer slot
        }
        'resample: for attempt in 0..=MAX_RESAMPLES {
            if attempt == MAX_RESAMPLES {
                return Err(Error::DegenerateData(format!(
                    "could not separate all samples at first-layer {} after {MAX_RESAMPLES} draws",
                    slot.key
                )));
            }
            let u: Vec<f64> = (0..slot.len)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for member in &members {
                let mut keys = std::collections::HashSet::with_capacity(b.data.n());
                for i in 0..b.data.n() {
                    let x = b.data.x().row(i);
                    let mut g = 0.0;
                    for (&src, &w) in member.inputs.iter().zip(&u) {
                        g += w * x[src - 1];
                    }
                    if !keys.insert((g + 0.0).to_bits()) {
                        continue 'resample;
                    }
                }
            }
            b.slot_u[s] = u;
            break;
        }
    }
    Ok(())
}

/// Fixes the unit-vector position of every above-first-layer slot. For the
/// softplus branch, skip units' chains must follow the given backward
/// paths; merged or weight-shared assignments are re-checked afterwards.
fn choose_upper_weights(
    b: &mut Builder,
    backward_paths: &BTreeMap<usize, Vec<usize>>,
) -> Result<()> {
    let layout = b.graph.layout().clone();
    let mut slot_pos: BTreeMap<usize, usize> = BTreeMap::new();

    // Path-driven positions first (softplus branch; empty otherwise).
    for p in &b.leading {
        let Some(path) = backward_paths.get(p) else {
            continue;
        };
        for pair in path.windows(2) {
            let (node, succ) = (pair[0], pair[1]);
            let n = b.spec.neuron(node).expect("path node exists");
            let key = n
                .sharing_group
                .map(WeightKey::Group)
                .unwrap_or(WeightKey::Neuron(node));
            let s = layout.slot_of(key).expect("hidden slot");
            if slot_pos.contains_key(&s) {
                break; // merged into an earlier chain
            }
            let pos = n
                .inputs
                .iter()
                .position(|&src| src == succ)
                .expect("path follows declared edges");
            slot_pos.insert(s, pos);
        }
    }

    // Everything else copies its first declared input.
    for id in b.spec.hidden_ids() {
        let n = b.spec.neuron(id).expect("hidden id");
        if n.layer == 1 {
            continue;
        }
        let key = n
            .sharing_group
            .map(WeightKey::Group)
            .unwrap_or(WeightKey::Neuron(id));
        let s = layout.slot_of(key).expect("hidden slot");
        let pos = *slot_pos.entry(s).or_insert(0);
        let mut u = vec![0.0; n.inputs.len()];
        u[pos] = 1.0;
        b.slot_u[s] = u;
        let idx = b.idx(id);
        b.chooser[idx] = Some(n.inputs[pos]);
    }

    // Softplus branch: the realized chains (after sharing-induced merges)
    // must still reach the first layer through unblocked units.
    if !backward_paths.is_empty() {
        let blocked = b.spec.blocked_for_paths();
        for &p in &b.leading {
            let mut cur = p;
            loop {
                match b.chooser[b.idx(cur)] {
                    None => break, // first layer reached
                    Some(c) => {
                        if !b.spec.is_hidden_id(c) {
                            return Err(Error::Assumption(format!(
                                "realized chain from skip unit {p} left the hidden range at {c}"
                            )));
                        }
                        if blocked.contains(&c) {
                            return Err(Error::Assumption(format!(
                                "weight sharing rerouted the chain from skip unit {p} \
                                 through blocked unit {c}"
                            )));
                        }
                        cur = c;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Builds certificate parameters for the given network and samples.
///
/// Preconditions (checked): the structural assumptions hold for this
/// dataset, which includes `M ≥ N`. The returned parameters carry the
/// constructed hidden weights and biases with `V = 0`.
pub fn build_certificate_params(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &CertificateConfig,
    seed: u64,
) -> Result<CertificateBuild> {
    let assumptions = spec.check_assumptions(data)?;
    if !assumptions.all_ok() {
        return Err(Error::Assumption(format!(
            "network/data pair fails the structural assumptions: {}",
            assumptions.notes.join("; ")
        )));
    }
    let branch = assumptions
        .skip_branch
        .expect("all_ok implies a qualified branch");
    let n = data.n();
    let leading: Vec<usize> = spec.skip_set[..n].to_vec();

    // σ(β) must be nonzero on every leading skip unit.
    let mut product_sigma_beta = 1.0;
    let mut min_sigma_beta = f64::INFINITY;
    for &p in &leading {
        let act = spec
            .neuron(p)
            .and_then(|u| u.activation)
            .expect("skip unit");
        let s = activate(act, config.beta);
        if s == 0.0 {
            return Err(Error::InvalidInput(format!(
                "σ(β) = 0 at skip unit {p} for β = {}; pick a different β",
                config.beta
            )));
        }
        product_sigma_beta *= s;
        min_sigma_beta = min_sigma_beta.min(s.abs());
    }
    let epsilon = match config.epsilon_override {
        Some(e) => {
            if !(e > 0.0 && e < min_sigma_beta) {
                return Err(Error::InvalidInput(format!(
                    "epsilon override {e} must lie in (0, min σ(β)) = (0, {min_sigma_beta})"
                )));
            }
            e
        }
        None => epsilon_for(n, product_sigma_beta),
    };

    let graph = EvalGraph::new(spec)?;
    let n_slots = graph.layout().slots().len();
    let slot_lens: Vec<usize> = graph.layout().slots().iter().map(|s| s.len).collect();
    let mut builder = Builder {
        spec,
        data,
        graph,
        slot_u: slot_lens.iter().map(|&l| vec![0.0; l]).collect(),
        slot_scale: vec![1.0; n_slots],
        biases: vec![0.0; spec.h],
        chooser: vec![None; spec.h],
        leading,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    draw_first_layer(&mut builder, &mut rng)?;
    choose_upper_weights(&mut builder, &assumptions.backward_paths)?;

    // Sample order from the first-layer roots: every chain is a strictly
    // increasing image of its root's pre-activations, so the proxy pass
    // (α = 1, b = 0) pins the order once and for all.
    let proxy = forward_all(&builder.graph, &builder.params(), data)?;
    let root_columns: Vec<Vec<f64>> = builder
        .leading
        .clone()
        .iter()
        .map(|&p| {
            let root = builder.root_of(p);
            (0..n).map(|i| proxy.pre[i][builder.idx(root)]).collect()
        })
        .collect();
    let pi = ordering_permutation(&root_columns)?;

    let (alphas, doublings, stabilized) = match branch {
        SkipBranch::BoundedVanishing => bounded_alphas(&mut builder, &pi, epsilon, config)?,
        SkipBranch::SoftplusPath => softplus_alphas(&mut builder, &pi, product_sigma_beta, config)?,
    };

    let chooser = builder
        .chooser
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.map(|c| (spec.d + 1 + k, c)))
        .collect();
    Ok(CertificateBuild {
        params: builder.params(),
        scaffold: CertificateScaffold {
            permutation: pi,
            epsilon,
            beta: config.beta,
            alphas,
            chooser,
            branch,
            doublings,
            stabilized,
        },
    })
}

/// Bounded-activation branch: one α per layer (so sharing groups stay
/// consistent), bottom-up, each the max of `1` and the slopes
/// `(σ⁻¹(ε) − β)/δ` over that layer's leading skip units. Biases are read
/// back from a zero-bias forward pass so the final diagonal pre-activation
/// is `β` to machine precision.
fn bounded_alphas(
    b: &mut Builder,
    pi: &[usize],
    epsilon: f64,
    config: &CertificateConfig,
) -> Result<(BTreeMap<usize, f64>, u32, bool)> {
    let n = pi.len();
    let max_layer = b.spec.max_hidden_layer();
    let mut alphas = BTreeMap::new();
    for layer in 1..=max_layer {
        // Values of everything below this layer are final; this layer and
        // above still sit at scale 1, bias 0.
        let pass = forward_all(&b.graph, &b.params(), b.data)?;
        let mut alpha: f64 = 1.0;
        for (k, &p) in b.leading.clone().iter().enumerate() {
            if b.spec.neuron(p).expect("skip unit").layer != layer {
                continue;
            }
            let act = b.spec.neuron(p).and_then(|u| u.activation).expect("skip");
            let target = activate_inverse(act, epsilon)? - config.beta;
            let vk = b.chain_value(&pass, p, pi[k]);
            for i in (k + 1)..n {
                let delta = b.chain_value(&pass, p, pi[i]) - vk;
                if delta == 0.0 {
                    return Err(Error::DegenerateData(format!(
                        "chain values of skip unit {p} collapsed numerically \
                         (samples {} and {}); reseed or rescale the data",
                        pi[i], pi[k]
                    )));
                }
                debug_assert!(delta < 0.0, "ordering guarantees δ < 0");
                alpha = alpha.max(target / delta);
            }
        }
        if alpha > config.alpha_cap {
            return Err(Error::Numerical(format!(
                "layer {layer} needs α = {alpha:.3e}, above the cap {:.3e} \
                 (nearly coincident samples?)",
                config.alpha_cap
            )));
        }
        // Scale this layer's slots, then read the zero-bias pre-activations
        // to place the diagonal exactly at β.
        for (s, slot) in b.graph.layout().clone().slots().iter().enumerate() {
            let first = b.spec.neuron(slot.first_unit).expect("slot owner");
            if first.layer == layer {
                b.slot_scale[s] = alpha;
            }
        }
        let scaled = forward_all(&b.graph, &b.params(), b.data)?;
        for (k, &p) in b.leading.clone().iter().enumerate() {
            if b.spec.neuron(p).expect("skip unit").layer == layer {
                let idx = b.idx(p);
                b.biases[idx] = config.beta - scaled.pre[pi[k]][idx];
            }
        }
        for id in b.spec.hidden_ids() {
            if b.spec.neuron(id).expect("hidden").layer == layer {
                alphas.insert(id, alpha);
            }
        }
    }
    Ok((alphas, 0, true))
}

/// Softplus branch: every leading skip unit gets the same scale α (non-skip
/// units keep α = 1), doubled from 1 until the determinant of the reordered
/// block settles within half of `∏σ(β)`.
fn softplus_alphas(
    b: &mut Builder,
    pi: &[usize],
    product_sigma_beta: f64,
    config: &CertificateConfig,
) -> Result<(BTreeMap<usize, f64>, u32, bool)> {
    let n = pi.len();
    let leading = b.leading.clone();
    let skip_slots: Vec<usize> = {
        let layout = b.graph.layout();
        leading
            .iter()
            .map(|&p| {
                let u = b.spec.neuron(p).expect("skip unit");
                let key = u
                    .sharing_group
                    .map(WeightKey::Group)
                    .unwrap_or(WeightKey::Neuron(p));
                layout.slot_of(key).expect("skip slot")
            })
            .collect()
    };
    let mut alpha = 1.0;
    let mut doublings = 0;
    let mut stabilized = false;
    loop {
        for &s in &skip_slots {
            b.slot_scale[s] = alpha;
        }
        // Zero the skip biases, read back the scaled pre-activations, then
        // anchor each diagonal at β.
        for &p in &leading {
            let idx = b.idx(p);
            b.biases[idx] = 0.0;
        }
        let scaled = forward_all(&b.graph, &b.params(), b.data)?;
        for (k, &p) in leading.iter().enumerate() {
            let idx = b.idx(p);
            b.biases[idx] = config.beta - scaled.pre[pi[k]][idx];
        }
        let block = leading_block(&b.graph, &b.params(), b.data, pi, n)?;
        let det = determinant(&block)?;
        if (det - product_sigma_beta).abs() <= 0.5 * product_sigma_beta.abs() {
            stabilized = true;
            break;
        }
        if doublings >= config.max_alpha_doublings || alpha * 2.0 > config.alpha_cap {
            break; // certificate-failed report, not a crash
        }
        alpha *= 2.0;
        doublings += 1;
    }
    let mut alphas = BTreeMap::new();
    for id in b.spec.hidden_ids() {
        let is_leading = leading.contains(&id);
        alphas.insert(id, if is_leading { alpha } else { 1.0 });
    }
    Ok((alphas, doublings, stabilized))
}

/// Reordered leading block `B[i][j] = Ψ_{π(i), j}`, columns = leading skips.
fn leading_block(
    graph: &EvalGraph,
    params: &ParamState,
    data: &Dataset,
    pi: &[usize],
    n: usize,
) -> Result<Matrix> {
    let psi = graph.psi(params, data)?;
    Matrix::from_fn(n, n, |i, j| psi.values.get(pi[i], j))
}

/// Numerically checks the certificate bound for arbitrary parameters.
///
/// With a scaffold, the block rows follow its permutation and the report
/// echoes the construction metadata; without one (verifying foreign
/// parameters, e.g. a random draw), the identity order is used. For
/// `n ≤` [`DET_GUARD`] the decision is `|det| ≥ ½|∏σ(β)|·(1 − 1e-6)`;
/// beyond that it is full numerical rank.
pub fn verify_full_rank(
    spec: &NetworkSpec,
    data: &Dataset,
    params: &ParamState,
    scaffold: Option<&CertificateScaffold>,
    config: &CertificateConfig,
) -> Result<CertificateReport> {
    let n = data.n();
    if spec.skip_count() < n {
        return Err(Error::Infeasible(format!(
            "certificate needs M ≥ N skip units, but M = {} < N = {n}",
            spec.skip_count()
        )));
    }
    let graph = EvalGraph::new(spec)?;
    let beta = scaffold.map_or(config.beta, |s| s.beta);
    let mut product_sigma_beta = 1.0;
    for &p in &spec.skip_set[..n] {
        let act = spec
            .neuron(p)
            .and_then(|u| u.activation)
            .expect("skip unit");
        product_sigma_beta *= activate(act, beta);
    }
    let bound = 0.5 * product_sigma_beta.abs();
    let pi: Vec<usize> = match scaffold {
        Some(s) => {
            if s.permutation.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "scaffold orders {} samples, dataset has {n}",
                    s.permutation.len()
                )));
            }
            s.permutation.clone()
        }
        None => (0..n).collect(),
    };
    let block = leading_block(&graph, params, data, &pi, n)?;
    let det_value = if n <= DET_GUARD {
        Some(determinant(&block)?)
    } else {
        None
    };
    let rank = numerical_rank(&block, default_rank_tol(n, n))?;
    let mut lower_triangular_max: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            lower_triangular_max = lower_triangular_max.max(block.get(i, j));
        }
    }
    let epsilon = scaffold.map_or_else(|| epsilon_for(n, product_sigma_beta), |s| s.epsilon);
    let passed = match det_value {
        Some(det) => det.abs() >= bound * (1.0 - 1e-6),
        None => rank == n,
    };
    Ok(CertificateReport {
        n,
        det_value,
        bound,
        product_sigma_beta,
        rank,
        lower_triangular_max,
        epsilon,
        beta,
        alphas: scaffold.map_or_else(BTreeMap::new, |s| s.alphas.clone()),
        permutation: pi,
        branch: scaffold.map(|s| s.branch),
        doublings: scaffold.map(|s| s.doublings),
        stabilized: scaffold.map(|s| s.stabilized),
        passed,
    })
}

/// Builds and verifies in one step. A failed certificate (for example a
/// softplus doubling budget running out) is reported through
/// `report.passed`, not as an error.
pub fn certify(
    spec: &NetworkSpec,
    data: &Dataset,
    config: &CertificateConfig,
    seed: u64,
) -> Result<(ParamState, CertificateReport)> {
    let build = build_certificate_params(spec, data, config, seed)?;
    let report = verify_full_rank(spec, data, &build.params, Some(&build.scaffold), config)?;
    Ok((build.params, report))
}

/// Convenience used by tests and the demo flow: the certificate threshold
/// a loss must beat to force zero training error.
pub fn certificate_loss_threshold(n: usize) -> f64 {
    zero_error_threshold(n)
}

//! Hybrid energy regressor: a graph-convolution encoder branch feeding a
//! dense regression branch that predicts the stored energy from the right
//! Cauchy-Green tensor in Voigt form.
//!
//! The stress prediction is the exact input gradient of the energy output,
//! obtained by six forward-mode tangent channels through the dense branch.
//! Value-and-gradient training needs parameter gradients of both the energy
//! and that input gradient, so the backward pass runs in reverse over the
//! tangent-augmented forward computation (forward-over-reverse); the second
//! derivative of the activations enters there.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{feature_matrix, Graph, PropagationMode};
use crate::microstructure::Polycrystal;
use crate::tensor::STRESS_FROM_GRAD;

/// Identity in Voigt order; the input shift is measured from it.
pub const VOIGT_IDENTITY: [f64; 6] = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];

/// Pointwise nonlinearity of a dense or graph-convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z < 0.0 {
                    z.exp_m1()
                } else {
                    z
                }
            }
            Activation::Linear => z,
        }
    }

    /// First derivative. ELU is C1: both one-sided derivatives at 0 equal 1.
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z < 0.0 {
                    z.exp()
                } else {
                    1.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    /// Second derivative (zero almost everywhere except the ELU left branch).
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Elu if z < 0.0 => z.exp(),
            _ => 0.0,
        }
    }
}

/// One affine layer `z = x W + b` followed by its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Static shape of the network; stored verbatim in checkpoints so a loaded
/// model can be validated against the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Whether the graph-encoder branch exists.
    pub hybrid: bool,
    /// Node capacity of the flatten stage; graphs are zero-padded up to it.
    pub n_max: usize,
    /// Channel widths of the graph-convolution stack, starting at the
    /// 4 node features (volume fraction + three Euler angles).
    pub gcn_channels: Vec<usize>,
    /// Dense widths after the flatten; the last entry is the encoded vector
    /// dimension (linear activation, hidden layers ReLU).
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the regression branch (ELU), before the scalar
    /// linear output.
    pub mlp_hidden: Vec<usize>,
    pub propagation_mode: PropagationMode,
    /// Drop probability on the inputs of every encoder dense layer
    /// (training mode only).
    pub dropout_rate: f64,
    /// Weight-decay coefficient applied to graph-branch weight matrices.
    pub l2_coefficient: f64,
}

impl Architecture {
    /// Graph + dense hybrid with the default widths, unregularized.
    pub fn hybrid(n_max: usize) -> Self {
        Architecture {
            hybrid: true,
            n_max,
            gcn_channels: vec![4, 32, 64],
            encoder_widths: vec![64, 9],
            mlp_hidden: vec![64, 64],
            propagation_mode: PropagationMode::default(),
            dropout_rate: 0.0,
            l2_coefficient: 0.0,
        }
    }

    /// Hybrid with dropout and weight decay on the graph branch.
    pub fn hybrid_regularized(n_max: usize) -> Self {
        Architecture {
            dropout_rate: 0.2,
            l2_coefficient: 1e-4,
            ..Architecture::hybrid(n_max)
        }
    }

    /// Dense branch only; the energy is a function of the deformation input
    /// alone.
    pub fn mlp() -> Self {
        Architecture {
            hybrid: false,
            n_max: 0,
            gcn_channels: Vec::new(),
            encoder_widths: Vec::new(),
            mlp_hidden: vec![64, 64],
            propagation_mode: PropagationMode::default(),
            dropout_rate: 0.0,
            l2_coefficient: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hybrid {
            if self.n_max == 0 {
                return Err(Error::config("n_max must be at least 1 for a hybrid model"));
            }
            if self.gcn_channels.len() < 2 {
                return Err(Error::config(
                    "hybrid model needs at least one graph-convolution layer",
                ));
            }
            if self.gcn_channels[0] != 4 {
                return Err(Error::config(format!(
                    "graph branch expects 4 node features, got {} input channels",
                    self.gcn_channels[0]
                )));
            }
            if self.encoder_widths.is_empty() {
                return Err(Error::config("encoder needs at least one dense layer"));
            }
            if self.gcn_channels.iter().any(|&c| c == 0)
                || self.encoder_widths.iter().any(|&c| c == 0)
            {
                return Err(Error::config("layer widths must be nonzero"));
            }
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.iter().any(|&c| c == 0) {
            return Err(Error::config("regression branch needs nonzero hidden widths"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.l2_coefficient < 0.0 || !self.l2_coefficient.is_finite() {
            return Err(Error::config("l2 coefficient must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Encoded feature dimension (0 when there is no graph branch).
    pub fn encoded_dim(&self) -> usize {
        if self.hybrid {
            *self.encoder_widths.last().unwrap()
        } else {
            0
        }
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.encoded_dim() + 6
    }

    fn n_gcn_layers(&self) -> usize {
        if self.hybrid {
            self.gcn_channels.len() - 1
        } else {
            0
        }
    }

    fn n_encoder_layers(&self) -> usize {
        if self.hybrid {
            self.encoder_widths.len()
        } else {
            0
        }
    }

    /// (in, out, activation) triples in canonical layer order:
    /// graph-convolution stack, encoder dense stack, regression stack.
    fn layer_dims(&self) -> Vec<(usize, usize, Activation)> {
        let mut dims = Vec::new();
        if self.hybrid {
            for w in self.gcn_channels.windows(2) {
                dims.push((w[0], w[1], Activation::Relu));
            }
            let mut prev = self.n_max * *self.gcn_channels.last().unwrap();
            for (i, &width) in self.encoder_widths.iter().enumerate() {
                let act = if i + 1 == self.encoder_widths.len() {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                dims.push((prev, width, act));
                prev = width;
            }
        }
        let mut prev = self.mlp_input_dim();
        for &width in &self.mlp_hidden {
            dims.push((prev, width, Activation::Elu));
            prev = width;
        }
        dims.push((prev, 1, Activation::Linear));
        dims
    }
}

/// Componentwise affine map taking raw Voigt deformation inputs into the
/// network's normalized range: `(c - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: [f64; 6],
    pub scale: [f64; 6],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { shift: VOIGT_IDENTITY, scale: [1.0; 6] }
    }
}

impl Normalization {
    /// Fits shift/scale so that training inputs, measured from the identity,
    /// map componentwise onto [0, 1]. Constant components keep scale 1.
    pub fn fit(inputs: &[[f64; 6]]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::config("cannot fit input normalization to an empty set"));
        }
        let mut lo = [f64::INFINITY; 6];
        let mut hi = [f64::NEG_INFINITY; 6];
        for c in inputs {
            for k in 0..6 {
                let x = c[k] - VOIGT_IDENTITY[k];
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
            }
        }
        let mut shift = [0.0; 6];
        let mut scale = [1.0; 6];
        for k in 0..6 {
            shift[k] = VOIGT_IDENTITY[k] + lo[k];
            let range = hi[k] - lo[k];
            if range > 1e-12 {
                scale[k] = range;
            }
        }
        Ok(Normalization { shift, scale })
    }

    pub fn apply(&self, c: &[f64; 6]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for k in 0..6 {
            out[k] = (c[k] - self.shift[k]) / self.scale[k];
        }
        out
    }
}

/// Full parameter set, with layers stored flat in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layers: Vec<DenseLayer>,
    pub norm: Normalization,
}

impl ModelParams {
    /// Glorot-uniform initialization, deterministic in the seed.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(nin, nout, act)| {
                let limit = (6.0 / (nin + nout) as f64).sqrt();
                let w = Array2::from_shape_fn((nin, nout), |_| rng.gen_range(-limit..=limit));
                DenseLayer { w, b: Array1::zeros(nout), act }
            })
            .collect();
        Ok(ModelParams { arch, layers, norm: Normalization::default() })
    }

    /// All-zero parameters (predicts zero energy and stress everywhere).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(nin, nout, act)| DenseLayer {
                w: Array2::zeros((nin, nout)),
                b: Array1::zeros(nout),
                act,
            })
            .collect();
        Ok(ModelParams { arch, layers, norm: Normalization::default() })
    }

    pub fn gcn_layers(&self) -> &[DenseLayer] {
        &self.layers[..self.arch.n_gcn_layers()]
    }

    pub fn encoder_layers(&self) -> &[DenseLayer] {
        let a = self.arch.n_gcn_layers();
        &self.layers[a..a + self.arch.n_encoder_layers()]
    }

    pub fn mlp_layers(&self) -> &[DenseLayer] {
        &self.layers[self.arch.n_gcn_layers() + self.arch.n_encoder_layers()..]
    }

    /// Indices of layers whose weights carry the weight-decay penalty
    /// (the whole graph branch: convolution and encoder stacks).
    pub fn regularized_layer_range(&self) -> std::ops::Range<usize> {
        0..self.arch.n_gcn_layers() + self.arch.n_encoder_layers()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Gradient (or optimizer moment) storage mirroring `ModelParams::layers`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ParamGrads {
            layers: p
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim())))
                .collect(),
        }
    }
}

/// A graph prepared for the encoder: propagation operator and node features,
/// zero-padded to the architecture's node capacity.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub op: Array2<f64>,
    pub x: Array2<f64>,
    pub n_real: usize,
}

impl GraphInput {
    pub fn build(
        graph: &Graph,
        volumes: &[f64],
        orientations: &[crate::rotation::Orientation],
        mode: PropagationMode,
        n_max: usize,
    ) -> Result<Self> {
        let n = graph.n_nodes();
        if n > n_max {
            return Err(Error::config(format!(
                "graph has {n} nodes, exceeding the configured node capacity {n_max}"
            )));
        }
        let op_n = graph.propagation_operator(mode);
        let x_n = feature_matrix(volumes, orientations)?;
        let mut op = Array2::zeros((n_max, n_max));
        op.slice_mut(ndarray::s![..n, ..n]).assign(&op_n);
        let mut x = Array2::zeros((n_max, 4));
        x.slice_mut(ndarray::s![..n, ..]).assign(&x_n);
        Ok(GraphInput { op, x, n_real: n })
    }

    /// Contact graph plus volume/orientation features of a voxel polycrystal.
    pub fn from_polycrystal(
        poly: &Polycrystal,
        mode: PropagationMode,
        n_max: usize,
    ) -> Result<Self> {
        let graph = poly.contacts()?;
        let volumes = poly.volume_fractions()?;
        GraphInput::build(&graph, &volumes, &poly.orientations, mode, n_max)
    }
}

/// Which terms the training objective constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared energy error only.
    L2,
    /// Mean squared energy error plus mean squared error of all six stress
    /// components (the energy's input gradient mapped to stress).
    H1,
}

/// One labeled training record; `graph` indexes into the batch's graph slice.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem {
    pub graph: Option<usize>,
    pub c: [f64; 6],
    pub psi: f64,
    pub s: [f64; 6],
}

// ---------------------------------------------------------------------------
// Forward passes.

/// Saved forward state of the graph branch for one graph.
struct GraphTrace {
    /// Operator-propagated layer inputs `op . h` (pre-weight), per GCN layer.
    ph: Vec<Array2<f64>>,
    /// Pre-activations per GCN layer.
    gz: Vec<Array2<f64>>,
    /// Masked inputs of each encoder dense layer.
    eu: Vec<Array1<f64>>,
    /// Pre-activations per encoder layer.
    ez: Vec<Array1<f64>>,
    /// Encoder output (the encoded feature vector).
    enc: Array1<f64>,
    /// Dropout masks actually applied (empty in eval mode).
    masks: Vec<Option<Array1<f64>>>,
}

fn graph_forward(p: &ModelParams, g: &GraphInput, masks: &[Option<Array1<f64>>]) -> GraphTrace {
    let n_max = p.arch.n_max;
    debug_assert_eq!(g.op.nrows(), n_max);
    let mut h = g.x.clone();
    let mut ph = Vec::new();
    let mut gz = Vec::new();
    for layer in p.gcn_layers() {
        let propagated = g.op.dot(&h);
        let mut z = propagated.dot(&layer.w);
        for mut row in z.rows_mut() {
            row += &layer.b;
        }
        h = z.mapv(|v| layer.act.apply(v));
        ph.push(propagated);
        gz.push(z);
    }
    let flat_len = n_max * h.ncols();
    let flat = Array1::from_iter(h.iter().copied());
    debug_assert_eq!(flat.len(), flat_len);

    let mut u = flat;
    let mut eu = Vec::new();
    let mut ez = Vec::new();
    for (li, layer) in p.encoder_layers().iter().enumerate() {
        let masked = match &masks[li] {
            Some(m) => &u * m,
            None => u.clone(),
        };
        let z = masked.dot(&layer.w) + &layer.b;
        u = z.mapv(|v| layer.act.apply(v));
        eu.push(masked);
        ez.push(z);
    }
    GraphTrace { ph, gz, eu, ez, enc: u, masks: masks.to_vec() }
}

/// Inverted-dropout masks for the encoder stack: entries are 0 with the drop
/// probability, else 1/(1-rate), so eval mode needs no rescaling.
fn dropout_masks(p: &ModelParams, seed: u64, graph_slot: usize) -> Vec<Option<Array1<f64>>> {
    let rate = p.arch.dropout_rate;
    let enc = p.encoder_layers();
    if rate == 0.0 {
        return vec![None; enc.len()];
    }
    let keep = 1.0 - rate;
    enc.iter()
        .enumerate()
        .map(|(li, layer)| {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&(graph_slot as u64).to_le_bytes());
            key[16..24].copy_from_slice(&(li as u64).to_le_bytes());
            key[24..].copy_from_slice(b"dropmask");
            let mut rng = ChaCha12Rng::from_seed(key);
            Some(Array1::from_shape_fn(layer.in_dim(), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            }))
        })
        .collect()
}

fn eval_masks(p: &ModelParams) -> Vec<Option<Array1<f64>>> {
    vec![None; p.encoder_layers().len()]
}

/// Encoded feature vector of a graph in eval mode (dropout off).
pub fn encode_graph(p: &ModelParams, g: &GraphInput) -> Result<Array1<f64>> {
    if !p.arch.hybrid {
        return Err(Error::config("model has no graph branch to encode with"));
    }
    Ok(graph_forward(p, g, &eval_masks(p)).enc)
}

/// Value-and-tangent state of the regression branch for one sample.
struct MlpTrace {
    /// Layer inputs (index 0 is the concatenated input vector).
    x: Vec<Array1<f64>>,
    /// Tangent channels of each layer input, one per Voigt direction.
    xdot: Vec<[Array1<f64>; 6]>,
    /// Pre-activations.
    z: Vec<Array1<f64>>,
    /// Tangent pre-activations.
    zdot: Vec<[Array1<f64>; 6]>,
    psi: f64,
    /// d(psi)/d(normalized input), per Voigt direction.
    grad_norm: [f64; 6],
}

fn empty_tangents() -> [Array1<f64>; 6] {
    std::array::from_fn(|_| Array1::zeros(0))
}

/// Runs the dense branch. With `with_tangents`, six dual channels seeded by
/// unit vectors in the normalized deformation input ride along and produce
/// the input gradient exactly.
fn mlp_forward(
    p: &ModelParams,
    enc: Option<&Array1<f64>>,
    c_norm: &[f64; 6],
    with_tangents: bool,
) -> Result<MlpTrace> {
    let enc_dim = p.arch.encoded_dim();
    let mut x0 = Array1::zeros(enc_dim + 6);
    if let Some(e) = enc {
        debug_assert_eq!(e.len(), enc_dim);
        x0.slice_mut(ndarray::s![..enc_dim]).assign(e);
    }
    for k in 0..6 {
        x0[enc_dim + k] = c_norm[k];
    }
    let mut xdot0 = empty_tangents();
    if with_tangents {
        for (k, slot) in xdot0.iter_mut().enumerate() {
            let mut t = Array1::zeros(enc_dim + 6);
            t[enc_dim + k] = 1.0;
            *slot = t;
        }
    }

    let layers = p.mlp_layers();
    let mut x = vec![x0];
    let mut xdot = vec![xdot0];
    let mut z = Vec::with_capacity(layers.len());
    let mut zdot = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let zl = x[li].dot(&layer.w) + &layer.b;
        let zdl: [Array1<f64>; 6] = if with_tangents {
            std::array::from_fn(|k| xdot[li][k].dot(&layer.w))
        } else {
            empty_tangents()
        };
        let hl = zl.mapv(|v| layer.act.apply(v));
        let hdl: [Array1<f64>; 6] = if with_tangents {
            let d1 = zl.mapv(|v| layer.act.d1(v));
            std::array::from_fn(|k| &zdl[k] * &d1)
        } else {
            empty_tangents()
        };
        z.push(zl);
        zdot.push(zdl);
        x.push(hl);
        xdot.push(hdl);
    }
    let last_z = z.last().unwrap();
    debug_assert_eq!(last_z.len(), 1);
    let psi = last_z[0];
    if !psi.is_finite() {
        return Err(Error::numeric("non-finite network output in forward pass"));
    }
    let mut grad_norm = [0.0; 6];
    if with_tangents {
        for k in 0..6 {
            grad_norm[k] = zdot.last().unwrap()[k][0];
            if !grad_norm[k].is_finite() {
                return Err(Error::numeric("non-finite network gradient in forward pass"));
            }
        }
    }
    Ok(MlpTrace { x, xdot, z, zdot, psi, grad_norm })
}

/// Maps the gradient w.r.t. normalized inputs to the stress vector:
/// undo the input scaling, then apply the symmetric-tensor factors
/// (diagonal components doubled, off-diagonals left as-is).
fn stress_from_grad_norm(norm: &Normalization, grad_norm: &[f64; 6]) -> [f64; 6] {
    let mut s = [0.0; 6];
    for k in 0..6 {
        s[k] = STRESS_FROM_GRAD[k] * grad_norm[k] / norm.scale[k];
    }
    s
}

/// Predicted energy for one input (eval mode).
pub fn model_energy(p: &ModelParams, g: Option<&GraphInput>, c: &[f64; 6]) -> Result<f64> {
    let enc = graph_encoding(p, g)?;
    let t = mlp_forward(p, enc.as_ref(), &p.norm.apply(c), false)?;
    Ok(t.psi)
}

/// Predicted stress (exact input gradient of the energy, eval mode).
pub fn model_stress(p: &ModelParams, g: Option<&GraphInput>, c: &[f64; 6]) -> Result<[f64; 6]> {
    Ok(energy_and_stress(p, g, c)?.1)
}

/// Energy and stress from one tangent-augmented pass.
pub fn energy_and_stress(
    p: &ModelParams,
    g: Option<&GraphInput>,
    c: &[f64; 6],
) -> Result<(f64, [f64; 6])> {
    let enc = graph_encoding(p, g)?;
    let t = mlp_forward(p, enc.as_ref(), &p.norm.apply(c), true)?;
    Ok((t.psi, stress_from_grad_norm(&p.norm, &t.grad_norm)))
}

/// Graph-branch encoding, computed once per microstructure; None for
/// dense-only architectures. Point sweeps over one RVE should hoist this
/// and evaluate through the `_with_encoding` functions.
pub fn graph_encoding(p: &ModelParams, g: Option<&GraphInput>) -> Result<Option<Array1<f64>>> {
    if !p.arch.hybrid {
        return Ok(None);
    }
    match g {
        Some(g) => Ok(Some(encode_graph(p, g)?)),
        None => Err(Error::config("hybrid model requires a graph input")),
    }
}

/// `model_energy` with a precomputed encoding.
pub fn energy_with_encoding(
    p: &ModelParams,
    enc: Option<&Array1<f64>>,
    c: &[f64; 6],
) -> Result<f64> {
    Ok(mlp_forward(p, enc, &p.norm.apply(c), false)?.psi)
}

/// `energy_and_stress` with a precomputed encoding.
pub fn energy_and_stress_with_encoding(
    p: &ModelParams,
    enc: Option<&Array1<f64>>,
    c: &[f64; 6],
) -> Result<(f64, [f64; 6])> {
    let t = mlp_forward(p, enc, &p.norm.apply(c), true)?;
    Ok((t.psi, stress_from_grad_norm(&p.norm, &t.grad_norm)))
}

/// Eval-mode predictions for a labeled set; graph encodings are computed
/// once per distinct graph.
pub fn predict(
    p: &ModelParams,
    graphs: &[GraphInput],
    items: &[BatchItem],
) -> Result<Vec<(f64, [f64; 6])>> {
    let encodings = encode_used_graphs(p, graphs, items)?;
    items
        .iter()
        .map(|it| {
            let enc = item_encoding(p, &encodings, it)?;
            let t = mlp_forward(p, enc, &p.norm.apply(&it.c), true)?;
            Ok((t.psi, stress_from_grad_norm(&p.norm, &t.grad_norm)))
        })
        .collect()
}

fn encode_used_graphs(
    p: &ModelParams,
    graphs: &[GraphInput],
    items: &[BatchItem],
) -> Result<Vec<Option<Array1<f64>>>> {
    let mut encodings: Vec<Option<Array1<f64>>> = vec![None; graphs.len()];
    if !p.arch.hybrid {
        return Ok(encodings);
    }
    for it in items {
        let gi = it.graph.ok_or_else(|| {
            Error::config("hybrid model requires a graph input for every sample")
        })?;
        if gi >= graphs.len() {
            return Err(Error::config(format!(
                "sample references graph {gi} but only {} graphs were provided",
                graphs.len()
            )));
        }
        if encodings[gi].is_none() {
            encodings[gi] = Some(encode_graph(p, &graphs[gi])?);
        }
    }
    Ok(encodings)
}

fn item_encoding<'a>(
    p: &ModelParams,
    encodings: &'a [Option<Array1<f64>>],
    it: &BatchItem,
) -> Result<Option<&'a Array1<f64>>> {
    if !p.arch.hybrid {
        return Ok(None);
    }
    let gi = it
        .graph
        .ok_or_else(|| Error::config("hybrid model requires a graph input for every sample"))?;
    Ok(encodings[gi].as_ref())
}

// ---------------------------------------------------------------------------
// Loss and parameter gradients.

/// Data loss of a batch in eval mode (no dropout), without gradients.
pub fn batch_loss(
    p: &ModelParams,
    graphs: &[GraphInput],
    items: &[BatchItem],
    kind: LossKind,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::config("loss of an empty batch is undefined"));
    }
    let preds = predict(p, graphs, items)?;
    let n = items.len() as f64;
    let mut loss = 0.0;
    for (it, (psi_hat, s_hat)) in items.iter().zip(&preds) {
        loss += (psi_hat - it.psi).powi(2);
        if kind == LossKind::H1 {
            for k in 0..6 {
                loss += (s_hat[k] - it.s[k]).powi(2);
            }
        }
    }
    Ok(loss / n)
}

/// Training loss and exact parameter gradients.
///
/// Returns the data loss (energy MSE, plus stress-component MSE for the H1
/// kind). Gradients additionally carry the weight-decay term
/// `l2_coefficient * w` on graph-branch weight matrices; the reported loss
/// value does not include that penalty.
///
/// Dropout masks are drawn per (seed, graph, encoder layer), so samples of
/// the same graph within a batch share masks and the whole evaluation is
/// deterministic in `dropout_seed`.
pub fn loss_and_param_grads(
    p: &ModelParams,
    graphs: &[GraphInput],
    items: &[BatchItem],
    kind: LossKind,
    dropout_seed: u64,
) -> Result<(f64, ParamGrads)> {
    if items.is_empty() {
        return Err(Error::config("loss of an empty batch is undefined"));
    }
    let mut grads = ParamGrads::zeros_like(p);
    let n_gcn = p.arch.n_gcn_layers();
    let n_enc = p.arch.n_encoder_layers();
    let mlp_offset = n_gcn + n_enc;

    // Forward-trace each distinct graph once (training mode: dropout on).
    let used: BTreeSet<usize> = if p.arch.hybrid {
        items
            .iter()
            .map(|it| {
                it.graph.ok_or_else(|| {
                    Error::config("hybrid model requires a graph input for every sample")
                })
            })
            .collect::<Result<_>>()?
    } else {
        BTreeSet::new()
    };
    if let Some(&max) = used.iter().next_back() {
        if max >= graphs.len() {
            return Err(Error::config(format!(
                "sample references graph {max} but only {} graphs were provided",
                graphs.len()
            )));
        }
    }
    let mut traces: Vec<Option<(GraphTrace, Array1<f64>)>> = (0..graphs.len()).map(|_| None).collect();
    for &gi in &used {
        let masks = dropout_masks(p, dropout_seed, gi);
        let trace = graph_forward(p, &graphs[gi], &masks);
        let adj = Array1::zeros(trace.enc.len());
        traces[gi] = Some((trace, adj));
    }

    let with_tangents = kind == LossKind::H1;
    let inv_n = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mlp_layers = p.mlp_layers();

    for it in items {
        let enc = if p.arch.hybrid {
            let (trace, _) = traces[it.graph.unwrap()].as_ref().unwrap();
            Some(&trace.enc)
        } else {
            None
        };
        let t = mlp_forward(p, enc.map(|e| e as _), &p.norm.apply(&it.c), with_tangents)?;

        // Residual weights: d(loss)/d(psi_hat) and d(loss)/d(grad_norm_k).
        let a = 2.0 * (t.psi - it.psi) * inv_n;
        loss += (t.psi - it.psi).powi(2) * inv_n;
        let mut q = [0.0; 6];
        if with_tangents {
            let s_hat = stress_from_grad_norm(&p.norm, &t.grad_norm);
            for k in 0..6 {
                let factor = STRESS_FROM_GRAD[k] / p.norm.scale[k];
                loss += (s_hat[k] - it.s[k]).powi(2) * inv_n;
                q[k] = 2.0 * (s_hat[k] - it.s[k]) * inv_n * factor;
            }
        }

        // Reverse pass over the tangent-augmented regression branch.
        let n_layers = mlp_layers.len();
        let mut gz = Array1::from_elem(1, a);
        let mut gzdot: [Array1<f64>; 6] = if with_tangents {
            std::array::from_fn(|k| Array1::from_elem(1, q[k]))
        } else {
            empty_tangents()
        };
        for li in (0..n_layers).rev() {
            let layer = &mlp_layers[li];
            let (gw, gb) = &mut grads.layers[mlp_offset + li];
            // Weight gradient: value channel plus each tangent channel.
            *gw += &outer(&t.x[li], &gz);
            *gb += &gz;
            if with_tangents {
                for k in 0..6 {
                    *gw += &outer(&t.xdot[li][k], &gzdot[k]);
                }
            }
            // Pull adjoints to this layer's input.
            let mut gx = gz.dot(&layer.w.t());
            let mut gxdot: [Array1<f64>; 6] = if with_tangents {
                std::array::from_fn(|k| gzdot[k].dot(&layer.w.t()))
            } else {
                empty_tangents()
            };
            if li > 0 {
                // Convert input adjoints through the previous activation:
                // x_li = act(z_{li-1}), xdot = act'(z) * zdot.
                let prev = &mlp_layers[li - 1];
                let zp = &t.z[li - 1];
                let d1 = zp.mapv(|v| prev.act.d1(v));
                let mut gz_prev = &gx * &d1;
                if with_tangents {
                    let d2 = zp.mapv(|v| prev.act.d2(v));
                    for k in 0..6 {
                        gz_prev = gz_prev + &gxdot[k] * &t.zdot[li - 1][k] * &d2;
                        gxdot[k] = &gxdot[k] * &d1;
                    }
                }
                gz = gz_prev;
                gzdot = gxdot;
            } else if p.arch.hybrid {
                // Hand the encoded-vector adjoint to this sample's graph.
                let enc_dim = p.arch.encoded_dim();
                let (_, adj) = traces[it.graph.unwrap()].as_mut().unwrap();
                let gx_enc = gx.slice(ndarray::s![..enc_dim]);
                *adj += &gx_enc;
                let _ = &mut gx;
            }
        }
    }

    // Reverse pass per distinct graph with its accumulated adjoint.
    for &gi in &used {
        let (trace, adj) = traces[gi].take().unwrap();
        let enc_layers = p.encoder_layers();
        let mut g = adj;
        for li in (0..enc_layers.len()).rev() {
            let layer = &enc_layers[li];
            let d1 = trace.ez[li].mapv(|v| layer.act.d1(v));
            let gz = &g * &d1;
            let (gw, gb) = &mut grads.layers[n_gcn + li];
            *gw += &outer(&trace.eu[li], &gz);
            *gb += &gz;
            g = gz.dot(&layer.w.t());
            if let Some(mask) = &trace.masks[li] {
                g = &g * mask;
            }
        }
        // Unflatten into the final convolution activation's shape.
        let ch = *p.arch.gcn_channels.last().unwrap();
        let mut gh = Array2::from_shape_vec((p.arch.n_max, ch), g.to_vec())
            .expect("flatten length matches node capacity times channels");
        let gcn_layers = p.gcn_layers();
        for li in (0..gcn_layers.len()).rev() {
            let layer = &gcn_layers[li];
            let d1 = trace.gz[li].mapv(|v| layer.act.d1(v));
            let gzm = &gh * &d1;
            let (gw, gb) = &mut grads.layers[li];
            *gw += &trace.ph[li].t().dot(&gzm);
            *gb += &gzm.sum_axis(Axis(0));
            gh = graphs[gi].op.t().dot(&gzm.dot(&layer.w.t()));
        }
    }

    // Weight decay on the graph branch (weights only, not biases).
    let l2 = p.arch.l2_coefficient;
    if l2 > 0.0 {
        for li in p.regularized_layer_range() {
            let (gw, _) = &mut grads.layers[li];
            gw.scaled_add(l2, &p.layers[li].w);
        }
    }

    Ok((loss, grads))
}

fn outer(x: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    let xr = x.view().insert_axis(Axis(1));
    let gr = g.view().insert_axis(Axis(0));
    xr.dot(&gr)
}

// ---------------------------------------------------------------------------
// Checkpoint format.

/// Run provenance stored next to the architecture in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    norm: Normalization,
    meta: CheckpointMeta,
}

const CHECKPOINT_MAGIC: &str = "PGRN1";

/// Writes a checkpoint: text header (magic, JSON architecture/normalization/
/// provenance, payload length), raw little-endian f64 payload in canonical
/// layer order, and a trailing SHA-256 line over everything before it.
pub fn save_checkpoint(p: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        arch: p.arch.clone(),
        norm: p.norm.clone(),
        meta: meta.clone(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::config(format!("checkpoint header serialization failed: {e}")))?;
    let mut payload: Vec<u8> = Vec::with_capacity(p.n_params() * 8);
    for layer in &p.layers {
        for v in layer.w.iter().chain(layer.b.iter()) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    body.push(b'\n');
    body.extend_from_slice(header_json.as_bytes());
    body.push(b'\n');
    body.extend_from_slice(format!("PAYLOAD {}\n", payload.len()).as_bytes());
    body.extend_from_slice(&payload);
    let mut hasher = Sha256::new();
    hasher.update(&body);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    body.extend_from_slice(format!("\nSHA256 {hex}\n").as_bytes());
    std::fs::write(path, &body).map_err(|e| Error::io(path, e.to_string()))
}

/// Reads a checkpoint, validating the checksum and reconstructing parameters.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e.to_string()))?;
    let bad = |msg: &str| Error::io(path, format!("malformed checkpoint: {msg}"));

    let mut pos = 0usize;
    let next_line = |data: &[u8], pos: &mut usize| -> Result<String> {
        let start = *pos;
        let end = data[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| bad("missing line terminator"))?;
        *pos = end + 1;
        String::from_utf8(data[start..end].to_vec()).map_err(|_| bad("non-UTF-8 header"))
    };

    if next_line(&data, &mut pos)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let header_json = next_line(&data, &mut pos)?;
    let payload_line = next_line(&data, &mut pos)?;
    let payload_len: usize = payload_line
        .strip_prefix("PAYLOAD ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad payload length line"))?;
    if data.len() < pos + payload_len {
        return Err(bad("truncated payload"));
    }
    let payload = &data[pos..pos + payload_len];
    let body_end = pos + payload_len;

    let rest = &data[body_end..];
    let sha_line = rest
        .strip_prefix(b"\nSHA256 ")
        .ok_or_else(|| bad("missing checksum line"))?;
    let sha_hex = std::str::from_utf8(sha_line)
        .map_err(|_| bad("non-UTF-8 checksum"))?
        .trim_end_matches('\n');
    let mut hasher = Sha256::new();
    hasher.update(&data[..body_end]);
    let digest = hasher.finalize();
    let mut expect = String::with_capacity(64);
    for byte in digest {
        let _ = write!(expect, "{byte:02x}");
    }
    if sha_hex != expect {
        return Err(Error::verification(format!(
            "checkpoint checksum mismatch in {}",
            path.display()
        )));
    }

    let header: CheckpointHeader = serde_json::from_str(&header_json)
        .map_err(|e| bad(&format!("header parse failed: {e}")))?;
    header.arch.validate()?;
    let mut params = ModelParams::zeros(header.arch)?;
    params.norm = header.norm;
    if payload_len != params.n_params() * 8 {
        return Err(bad(&format!(
            "payload holds {} bytes but the architecture needs {}",
            payload_len,
            params.n_params() * 8
        )));
    }
    let mut offset = 0usize;
    for layer in &mut params.layers {
        for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
            let bytes: [u8; 8] = payload[offset..offset + 8].try_into().unwrap();
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    Ok((params, header.meta))
}

/// Guards a loaded checkpoint against a run configured for a different
/// architecture (shape, propagation mode, or node capacity).
pub fn ensure_architecture(loaded: &Architecture, expected: &Architecture) -> Result<()> {
    if loaded != expected {
        return Err(Error::config(format!(
            "checkpoint architecture mismatch: checkpoint has {loaded:?}, run expects {expected:?}"
        )));
    }
    Ok(())
}

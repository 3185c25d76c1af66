//! Model assembly: named parameter storage, initialization, and the
//! end-to-end forward pass (tokenizer -> global-cross transformer -> matcher).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gct::{self, AttentionVars, FfnVars, GctBlockVars, LnVars};
use crate::geometry::{knn_rows, PointCloud};
use crate::matcher::{self, MatcherVars};
use crate::matrix::{Matrix, Scalar};
use crate::rng::Rng;
use crate::tape::{Graph, VarId};
use crate::tokenizer::{
    self, BnVars, DgcnnVars, EdgeConvLayerVars, LinearVars, LocalPtVars, MlpBackboneVars,
    Phase, PointNetVars,
};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Running statistics update: `running = momentum * running + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Tokenization backbone choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    EdgeConv,
    PointNet,
    Mlp,
}

impl Backbone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backbone::EdgeConv => "edgeconv",
            Backbone::PointNet => "pointnet",
            Backbone::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edgeconv" => Ok(Backbone::EdgeConv),
            "pointnet" => Ok(Backbone::PointNet),
            "mlp" => Ok(Backbone::Mlp),
            other => Err(Error::invalid_argument(format!(
                "unknown backbone '{other}' (expected edgeconv|pointnet|mlp)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Desk-scale defaults; the full-scale
/// configuration (8192 points, d=128, 10 layers) remains reachable by
/// overriding fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature width d of the token/feature matrices.
    pub dim: usize,
    /// kNN neighborhood size for tokenization.
    pub k: usize,
    /// Number of global-cross transformer blocks (0 = pass-through).
    pub gct_layers: usize,
    pub backbone: Backbone,
    /// Apply the local point transformer after the backbone.
    pub local_transformer: bool,
    /// Hidden widths of the backbone before the final projection to `dim`.
    pub backbone_widths: Vec<usize>,
    /// Recompute kNN graphs in feature space between edge-conv layers.
    pub dynamic_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            k: 8,
            gct_layers: 4,
            backbone: Backbone::EdgeConv,
            local_transformer: true,
            backbone_widths: vec![32, 64],
            dynamic_graph: true,
        }
    }
}

impl ModelConfig {
    /// Canonical key=value line used for config hashing and echoing.
    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.backbone_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "backbone={} backbone_widths={} dim={} dynamic_graph={} gct_layers={} k={} local_transformer={}",
            self.backbone.as_str(),
            widths.join(","),
            self.dim,
            self.dynamic_graph,
            self.gct_layers,
            self.k,
            self.local_transformer
        )
    }

    pub fn hash(&self) -> u64 {
        crate::checksum::fnv1a64(self.canonical().as_bytes())
    }
}

/// All learnable tensors plus non-trainable buffers (batch-norm running
/// statistics), addressable by path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    params: BTreeMap<String, Matrix<S>>,
    buffers: BTreeMap<String, Matrix<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, path: impl Into<String>, value: Matrix<S>) {
        let path = path.into();
        let prev = self.params.insert(path.clone(), value);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Matrix<S>) {
        let path = path.into();
        let prev = self.buffers.insert(path.clone(), value);
        assert!(prev.is_none(), "duplicate buffer path {path}");
    }

    pub fn param(&self, path: &str) -> Option<&Matrix<S>> {
        self.params.get(path)
    }

    pub fn param_mut(&mut self, path: &str) -> Option<&mut Matrix<S>> {
        self.params.get_mut(path)
    }

    pub fn buffer(&self, path: &str) -> Option<&Matrix<S>> {
        self.buffers.get(path)
    }

    pub fn buffer_mut(&mut self, path: &str) -> Option<&mut Matrix<S>> {
        self.buffers.get_mut(path)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Matrix<S>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<S>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Matrix<S>)> {
        self.buffers.iter()
    }

    pub fn n_tensors(&self) -> usize {
        self.params.len() + self.buffers.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|m| m.all_finite())
            && self.buffers.values().all(|m| m.all_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Paths to tape handles for one forward pass. Parameters become
/// differentiable leaves, buffers constant leaves.
pub struct Binding {
    vars: BTreeMap<String, VarId>,
}

impl Binding {
    pub fn new<S: Scalar>(g: &mut Graph<S>, set: &ParamSet<S>) -> Binding {
        let mut vars = BTreeMap::new();
        for (path, value) in &set.params {
            vars.insert(path.clone(), g.var(value.clone()));
        }
        for (path, value) in &set.buffers {
            vars.insert(path.clone(), g.constant(value.clone()));
        }
        Binding { vars }
    }

    pub fn var(&self, path: &str) -> VarId {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("unbound parameter path {path}"))
    }

    pub fn get(&self, path: &str) -> Option<VarId> {
        self.vars.get(path).copied()
    }
}

fn init_linear<S: Scalar>(set: &mut ParamSet<S>, rng: &mut Rng, prefix: &str, out: usize, inp: usize) {
    // Fan-in scaled uniform init for weights and biases.
    let limit = 1.0 / (inp as f64).sqrt();
    let w = Matrix::from_fn(out, inp, |_, _| S::from_f64(rng.uniform(-limit, limit)));
    let b = Matrix::from_fn(1, out, |_, _| S::from_f64(rng.uniform(-limit, limit)));
    set.insert_param(format!("{prefix}/w"), w);
    set.insert_param(format!("{prefix}/b"), b);
}

fn init_norm<S: Scalar>(set: &mut ParamSet<S>, prefix: &str, width: usize) {
    set.insert_param(format!("{prefix}/gamma"), Matrix::from_fn(1, width, |_, _| S::one()));
    set.insert_param(format!("{prefix}/beta"), Matrix::zeros(1, width));
}

fn init_bn<S: Scalar>(set: &mut ParamSet<S>, prefix: &str, width: usize) {
    init_norm(set, prefix, width);
    set.insert_buffer(format!("{prefix}/mean"), Matrix::zeros(1, width));
    set.insert_buffer(format!("{prefix}/var"), Matrix::from_fn(1, width, |_, _| S::one()));
}

/// Backbone layer widths including the final projection to `dim`.
fn backbone_plan(cfg: &ModelConfig) -> Vec<usize> {
    let mut widths = cfg.backbone_widths.clone();
    widths.push(cfg.dim);
    widths
}

/// Freshly initialized parameters for a configuration. Tensor creation order
/// is fixed, so a given seed always produces the same values.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamSet<S> {
    let mut rng = Rng::new(seed);
    let mut set = ParamSet::new();
    match cfg.backbone {
        Backbone::EdgeConv => {
            let mut c_in = 3;
            for (i, &c_out) in backbone_plan(cfg).iter().enumerate() {
                let prefix = format!("tokenizer/edgeconv/{i}");
                init_linear(&mut set, &mut rng, &format!("{prefix}/linear"), c_out, 2 * c_in);
                init_bn(&mut set, &format!("{prefix}/bn"), c_out);
                c_in = c_out;
            }
        }
        Backbone::PointNet => {
            let mut c_in = 3;
            let mut last = 3;
            for (i, &c_out) in cfg.backbone_widths.iter().enumerate() {
                init_linear(&mut set, &mut rng, &format!("tokenizer/pointnet/{i}"), c_out, c_in);
                c_in = c_out;
                last = c_out;
            }
            init_linear(&mut set, &mut rng, "tokenizer/pointnet/fuse", cfg.dim, 2 * last);
        }
        Backbone::Mlp => {
            let mut c_in = 3;
            for (i, &c_out) in backbone_plan(cfg).iter().enumerate() {
                init_linear(&mut set, &mut rng, &format!("tokenizer/mlp/{i}"), c_out, c_in);
                c_in = c_out;
            }
        }
    }
    if cfg.local_transformer {
        let d = cfg.dim;
        for name in ["query", "key", "value"] {
            init_linear(&mut set, &mut rng, &format!("tokenizer/local_pt/{name}"), d, d);
        }
        init_linear(&mut set, &mut rng, "tokenizer/local_pt/pos/0", d, 3);
        init_linear(&mut set, &mut rng, "tokenizer/local_pt/pos/1", d, d);
        init_linear(&mut set, &mut rng, "tokenizer/local_pt/attn/0", d, d);
        init_linear(&mut set, &mut rng, "tokenizer/local_pt/attn/1", d, d);
        init_linear(&mut set, &mut rng, "tokenizer/local_pt/out", d, d);
    }
    let d = cfg.dim;
    for i in 0..cfg.gct_layers {
        for sub in ["self", "cross"] {
            for name in ["query", "key", "value", "out"] {
                init_linear(&mut set, &mut rng, &format!("gct/{i}/{sub}/{name}"), d, d);
            }
            init_norm(&mut set, &format!("gct/{i}/{sub}/ln"), d);
        }
        init_linear(&mut set, &mut rng, &format!("gct/{i}/ffn/0"), 4 * d, d);
        init_linear(&mut set, &mut rng, &format!("gct/{i}/ffn/1"), d, 4 * d);
        init_norm(&mut set, &format!("gct/{i}/ffn/ln"), d);
    }
    init_linear(&mut set, &mut rng, "matcher/query", d, d);
    init_linear(&mut set, &mut rng, "matcher/key", d, d);
    set
}

fn linear_vars(b: &Binding, prefix: &str) -> LinearVars {
    LinearVars {
        w: b.var(&format!("{prefix}/w")),
        b: b.var(&format!("{prefix}/b")),
    }
}

fn ln_vars(b: &Binding, prefix: &str) -> LnVars {
    LnVars {
        gamma: b.var(&format!("{prefix}/gamma")),
        beta: b.var(&format!("{prefix}/beta")),
    }
}

fn bn_vars(b: &Binding, prefix: &str) -> BnVars {
    BnVars {
        gamma: b.var(&format!("{prefix}/gamma")),
        beta: b.var(&format!("{prefix}/beta")),
        running_mean: b.var(&format!("{prefix}/mean")),
        running_var: b.var(&format!("{prefix}/var")),
    }
}

fn attn_vars(b: &Binding, prefix: &str) -> AttentionVars {
    AttentionVars {
        query: linear_vars(b, &format!("{prefix}/query")),
        key: linear_vars(b, &format!("{prefix}/key")),
        value: linear_vars(b, &format!("{prefix}/value")),
        out: linear_vars(b, &format!("{prefix}/out")),
        ln: ln_vars(b, &format!("{prefix}/ln")),
    }
}

fn local_pt_vars(b: &Binding) -> LocalPtVars {
    LocalPtVars {
        query: linear_vars(b, "tokenizer/local_pt/query"),
        key: linear_vars(b, "tokenizer/local_pt/key"),
        value: linear_vars(b, "tokenizer/local_pt/value"),
        pos: [
            linear_vars(b, "tokenizer/local_pt/pos/0"),
            linear_vars(b, "tokenizer/local_pt/pos/1"),
        ],
        attn: [
            linear_vars(b, "tokenizer/local_pt/attn/0"),
            linear_vars(b, "tokenizer/local_pt/attn/1"),
        ],
        out: linear_vars(b, "tokenizer/local_pt/out"),
    }
}

/// One forward pass's interesting nodes. `bn_updates` pairs each train-mode
/// batch-norm node with the buffer prefix whose running statistics it feeds.
pub struct ForwardPass {
    pub f1: VarId,
    pub f2: VarId,
    pub m_cross: VarId,
    pub m_self: VarId,
    pub v_inter: VarId,
    pub v_final: VarId,
    pub bn_updates: Vec<(String, VarId)>,
}

fn tokenize<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    cfg: &ModelConfig,
    points: &Matrix<S>,
    phase: Phase,
    bn_updates: &mut Vec<(String, VarId)>,
) -> Result<VarId> {
    let points_var = g.constant(points.clone());
    let needs_graph = cfg.backbone == Backbone::EdgeConv || cfg.local_transformer;
    let coord_graph = if needs_graph {
        Some(knn_rows(points, cfg.k)?)
    } else {
        None
    };
    let features = match cfg.backbone {
        Backbone::EdgeConv => {
            let layers: Vec<EdgeConvLayerVars> = (0..backbone_plan(cfg).len())
                .map(|i| EdgeConvLayerVars {
                    linear: linear_vars(binding, &format!("tokenizer/edgeconv/{i}/linear")),
                    bn: Some(bn_vars(binding, &format!("tokenizer/edgeconv/{i}/bn"))),
                })
                .collect();
            let vars = DgcnnVars { layers };
            let out = tokenizer::dgcnn(
                g,
                points_var,
                coord_graph.as_ref().unwrap(),
                &vars,
                phase,
                cfg.dynamic_graph,
                BN_EPS,
            )?;
            for (i, node) in out.bn_nodes.iter().enumerate() {
                if let Some(node) = node {
                    bn_updates.push((format!("tokenizer/edgeconv/{i}/bn"), *node));
                }
            }
            out.features
        }
        Backbone::PointNet => {
            let vars = PointNetVars {
                layers: (0..cfg.backbone_widths.len())
                    .map(|i| linear_vars(binding, &format!("tokenizer/pointnet/{i}")))
                    .collect(),
                fuse: linear_vars(binding, "tokenizer/pointnet/fuse"),
            };
            tokenizer::pointnet_backbone(g, points_var, &vars)?.features
        }
        Backbone::Mlp => {
            let vars = MlpBackboneVars {
                layers: (0..backbone_plan(cfg).len())
                    .map(|i| linear_vars(binding, &format!("tokenizer/mlp/{i}")))
                    .collect(),
            };
            tokenizer::mlp_backbone(g, points_var, &vars)?.features
        }
    };
    if cfg.local_transformer {
        let vars = local_pt_vars(binding);
        tokenizer::local_point_transformer(g, features, points, coord_graph.as_ref().unwrap(), &vars)
    } else {
        Ok(features)
    }
}

/// Full pipeline on a pair of coordinate matrices (`N1 x 3`, `N2 x 3`).
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    binding: &Binding,
    cfg: &ModelConfig,
    p1: &Matrix<S>,
    p2: &Matrix<S>,
    phase: Phase,
) -> Result<ForwardPass> {
    for (name, p) in [("source", p1), ("target", p2)] {
        if p.cols() != 3 || p.rows() == 0 {
            return Err(Error::invalid_argument(format!(
                "{name} cloud must be N x 3 with N >= 1"
            )));
        }
        if !p.all_finite() {
            return Err(Error::invalid_input(format!("non-finite {name} coordinates")));
        }
    }
    let mut bn_updates = Vec::new();
    let f1 = tokenize(g, binding, cfg, p1, phase, &mut bn_updates)?;
    let f2 = tokenize(g, binding, cfg, p2, phase, &mut bn_updates)?;
    let blocks: Vec<GctBlockVars> = (0..cfg.gct_layers)
        .map(|i| GctBlockVars {
            self_attn: attn_vars(binding, &format!("gct/{i}/self")),
            cross_attn: attn_vars(binding, &format!("gct/{i}/cross")),
            ffn: FfnVars {
                lin: [
                    linear_vars(binding, &format!("gct/{i}/ffn/0")),
                    linear_vars(binding, &format!("gct/{i}/ffn/1")),
                ],
                ln: ln_vars(binding, &format!("gct/{i}/ffn/ln")),
            },
        })
        .collect();
    let (f1, f2) = gct::gct_stack(g, f1, f2, &blocks, LN_EPS)?;
    let m_cross = matcher::cross_similarity(g, f1, f2)?;
    let m_vars = MatcherVars {
        query: linear_vars(binding, "matcher/query"),
        key: linear_vars(binding, "matcher/key"),
    };
    let m_self = matcher::self_similarity(g, f1, &m_vars)?;
    let p1v = g.constant(p1.clone());
    let p2v = g.constant(p2.clone());
    let v_inter = matcher::match_flow(g, m_cross, p1v, p2v)?;
    let v_final = matcher::smooth_flow(g, m_self, v_inter)?;
    Ok(ForwardPass {
        f1,
        f2,
        m_cross,
        m_self,
        v_inter,
        v_final,
        bn_updates,
    })
}

/// Inference on a scene: returns the predicted per-point flow for the source
/// cloud (evaluation phase, running batch-norm statistics).
pub fn predict(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<Matrix<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let binding = Binding::new(&mut g, params);
    let pass = forward(
        &mut g,
        &binding,
        cfg,
        source.points(),
        target.points(),
        Phase::Eval,
    )?;
    Ok(g.value(pass.v_final).clone())
}

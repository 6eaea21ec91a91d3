//! The hybrid kriging network.
//!
//! Flow is handled inductively (nodes may have no flow input at all) while
//! speed is available at every node. A forward pass runs:
//!
//! 1. a gated static encoder producing one embedding per node,
//! 2. a gated time encoder shared by all nodes,
//! 3. a per-timestep self-attention over nodes (no adjacency),
//! 4. a bidirectional diffusion GCN whose layers are FiLM-modulated by the
//!    static embedding,
//! 5. a learned two-way softmax fusion of the attention and GCN branches,
//! 6. a GRU over time for each node,
//! 7. a linear fusion of the refined, attention and fused features, a scalar
//!    readout, and a per-node affine calibration `y = gamma_v * y_base + beta_v`.

pub mod checkpoint;
pub mod fused;
pub mod layers;
pub mod params;

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{Array2, Array3, ArrayBase, Data, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::TIME_FEATURES;
use crate::error::{Error, Result};
use crate::netgraph::{adjacency_row_normalize, AdjacencyMatrix, Direction};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use layers::{
    const_var, selu, sigmoid, softmax_last, softplus, softplus_inverse, BatchNorm, BatchStats,
    DropoutCtx, Gru, LayerNorm, Linear, RunningStats,
};
pub use params::{Param, ParamGroup, ParamStore};

/// Number of dynamic input channels (speed, flow).
pub const DYN_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub transformer_layers: usize,
    pub gcn_layers: usize,
    pub diffusion_steps: usize,
    pub dropout_rate: f64,
    pub gru_hidden: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            attention_heads: 4,
            transformer_layers: 1,
            gcn_layers: 2,
            diffusion_steps: 2,
            dropout_rate: 0.1,
            gru_hidden: 64,
            time_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_dim", self.hidden_dim),
            ("attention_heads", self.attention_heads),
            ("transformer_layers", self.transformer_layers),
            ("gcn_layers", self.gcn_layers),
            ("diffusion_steps", self.diffusion_steps),
            ("gru_hidden", self.gru_hidden),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Param(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Powers of the row-normalized transition matrices in both directions.
#[derive(Clone)]
pub struct GraphOperators {
    pub n: usize,
    pub outgoing: Vec<Tensor>,
    pub incoming: Vec<Tensor>,
}

impl GraphOperators {
    pub fn new(a: &AdjacencyMatrix, steps: usize, dtype: DType, device: &Device) -> Result<Self> {
        let build = |dir: Direction| -> Result<Vec<Tensor>> {
            let p = adjacency_row_normalize(a, dir).w;
            let mut power = p.clone();
            let mut out = Vec::with_capacity(steps);
            for k in 0..steps {
                if k > 0 {
                    power = power.dot(&p);
                }
                out.push(array_to_tensor(&power, dtype, device)?);
            }
            Ok(out)
        };
        Ok(Self {
            n: a.n,
            outgoing: build(Direction::Outgoing)?,
            incoming: build(Direction::Incoming)?,
        })
    }
}

/// Tensors consumed by one forward pass.
pub struct ModelInputs<'a> {
    /// `(B, N, T, 2)` normalized speed and flow.
    pub dynamic: Tensor,
    /// `(B, T, 4)` calendar features.
    pub time: Tensor,
    /// `(N, F)` static features.
    pub static_x: Tensor,
    pub graph: &'a GraphOperators,
}

pub enum Mode<'a> {
    /// Dropout active (driven by the given rng) and batch statistics in batch norm.
    Train(&'a mut ChaCha8Rng),
    Eval,
}

pub struct ForwardOutput {
    /// `(B, N, T)` calibrated prediction in normalized flow units.
    pub y: Tensor,
    pub y_base: Tensor,
    /// `(N,)` calibration scale and shift.
    pub node_gamma: Tensor,
    pub node_beta: Tensor,
    pub gate_l1: Tensor,
    /// Batch-norm statistics seen in train mode, one entry per batch-norm layer.
    pub bn_stats: Vec<BatchStats>,
    /// `(B, N, T, 2)` dynamic fusion weights.
    pub fusion_weights: Tensor,
    /// Per transformer layer `(B*T, heads, N, N)` attention weights.
    pub attention: Vec<Tensor>,
    /// Per GCN layer FiLM `(gamma, beta)`, each `(N, D)`.
    pub film: Vec<(Tensor, Tensor)>,
    pub static_embedding: Tensor,
}

#[derive(Clone)]
struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone)]
struct GcnLayer {
    /// One map per diffusion term (self, outgoing powers, incoming powers) on
    /// the dynamic or previous-layer features; the self term carries the bias.
    dynamic: Vec<Linear>,
    /// First layer only: the blocks of the same maps acting on the static embedding.
    static_part: Vec<Linear>,
    film_gamma: Linear,
    film_beta: Linear,
}

#[derive(Clone)]
pub struct HintModel {
    config: ModelConfig,
    n_static: usize,
    store: ParamStore,
    running: Vec<RunningStats>,
    feature_gate: Var,
    static_l1: Linear,
    static_bn1: BatchNorm,
    static_l2: Linear,
    static_bn2: BatchNorm,
    time_l1: Linear,
    time_l2: Linear,
    time_gate: Linear,
    dyn_proj: Linear,
    time_proj: Linear,
    static_proj: Linear,
    transformer: Vec<TransformerLayer>,
    gcn: Vec<GcnLayer>,
    fusion1: Linear,
    fusion2: Linear,
    gru: Gru,
    multi_branch: Linear,
    readout: Linear,
    node_gamma: Linear,
    node_beta: Linear,
}

impl HintModel {
    pub fn new(config: ModelConfig, n_static: usize, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_static == 0 {
            return Err(Error::Param("the static feature matrix has no columns".into()));
        }
        let device = Device::Cpu;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let dt = config.time_dim;
        let h = config.gru_hidden;
        let k = config.diffusion_steps;
        use ParamGroup as G;

        let feature_gate = store.register(
            "static.feature_gate".into(),
            G::StaticEncoder,
            const_var(0.0, &[n_static], dtype, &device)?,
        );
        let static_l1 = Linear::new(&mut store, &mut rng, "static.l1", G::StaticEncoder, n_static, d)?;
        let static_bn1 = BatchNorm::new(&mut store, "static.bn1", G::StaticEncoder, d)?;
        let static_l2 = Linear::new(&mut store, &mut rng, "static.l2", G::StaticEncoder, d, d)?;
        let static_bn2 = BatchNorm::new(&mut store, "static.bn2", G::StaticEncoder, d)?;

        let time_l1 = Linear::new(&mut store, &mut rng, "time.l1", G::TimeEncoder, TIME_FEATURES, dt)?;
        let time_l2 = Linear::new(&mut store, &mut rng, "time.l2", G::TimeEncoder, dt, dt)?;
        let time_gate = Linear::new(&mut store, &mut rng, "time.gate", G::TimeEncoder, dt, dt)?;

        let dyn_proj = Linear::new(&mut store, &mut rng, "input.dynamic", G::InputProjection, DYN_CHANNELS, d)?;
        let time_proj = Linear::without_bias(&mut store, &mut rng, "input.time", G::InputProjection, dt, d)?;
        let static_proj = Linear::new(&mut store, &mut rng, "input.static", G::InputProjection, d, d)?;

        let mut transformer = Vec::new();
        for l in 0..config.transformer_layers {
            let p = format!("transformer.{l}");
            transformer.push(TransformerLayer {
                q: Linear::new(&mut store, &mut rng, &format!("{p}.q"), G::Transformer, d, d)?,
                k: Linear::new(&mut store, &mut rng, &format!("{p}.k"), G::Transformer, d, d)?,
                v: Linear::new(&mut store, &mut rng, &format!("{p}.v"), G::Transformer, d, d)?,
                o: Linear::new(&mut store, &mut rng, &format!("{p}.o"), G::Transformer, d, d)?,
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), G::Transformer, d)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), G::Transformer, d)?,
                ff1: Linear::new(&mut store, &mut rng, &format!("{p}.ff1"), G::Transformer, d, 2 * d)?,
                ff2: Linear::new(&mut store, &mut rng, &format!("{p}.ff2"), G::Transformer, 2 * d, d)?,
            });
        }

        let mut gcn = Vec::new();
        for l in 0..config.gcn_layers {
            let terms = gcn_term_names(k);
            let mut dynamic = Vec::new();
            let mut static_part = Vec::new();
            for (i, term) in terms.iter().enumerate() {
                let name = format!("gcn.{l}.{term}");
                dynamic.push(if i == 0 {
                    Linear::new(&mut store, &mut rng, &name, G::Gcn, d, d)?
                } else {
                    Linear::without_bias(&mut store, &mut rng, &name, G::Gcn, d, d)?
                });
                if l == 0 {
                    let name = format!("gcn.{l}.{term}.static");
                    static_part.push(Linear::without_bias(&mut store, &mut rng, &name, G::Gcn, d, d)?);
                }
            }
            gcn.push(GcnLayer {
                dynamic,
                static_part,
                film_gamma: Linear::constant(&mut store, &format!("film.{l}.gamma"), G::Film, d, d, 0.0, 1.0)?,
                film_beta: Linear::constant(&mut store, &format!("film.{l}.beta"), G::Film, d, d, 0.0, 0.0)?,
            });
        }

        let fusion1 = Linear::new(&mut store, &mut rng, "fusion.l1", G::Fusion, 2 * d, d)?;
        let fusion2 = Linear::new(&mut store, &mut rng, "fusion.l2", G::Fusion, d, 2)?;
        let gru = Gru::new(&mut store, &mut rng, "gru", d, h)?;
        let multi_branch = Linear::new(&mut store, &mut rng, "multi_branch", G::MultiBranch, h + 2 * d, d)?;
        let readout = Linear::new(&mut store, &mut rng, "readout", G::Readout, d, 1)?;
        let node_gamma = Linear::constant(
            &mut store,
            "node_scaling.gamma",
            G::NodeScaling,
            d,
            1,
            0.0,
            softplus_inverse(1.0),
        )?;
        let node_beta = Linear::constant(&mut store, "node_scaling.beta", G::NodeScaling, d, 1, 0.0, 0.0)?;

        Ok(Self {
            config,
            n_static,
            store,
            running: vec![RunningStats::new(d), RunningStats::new(d)],
            feature_gate,
            static_l1,
            static_bn1,
            static_l2,
            static_bn2,
            time_l1,
            time_l2,
            time_gate,
            dyn_proj,
            time_proj,
            static_proj,
            transformer,
            gcn,
            fusion1,
            fusion2,
            gru,
            multi_branch,
            readout,
            node_gamma,
            node_beta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_static(&self) -> usize {
        self.n_static
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.running.len()
            || stats
                .iter()
                .any(|s| s.mean.len() != self.config.hidden_dim || s.var.len() != self.config.hidden_dim)
        {
            return Err(Error::Compat("batch-norm statistics do not match the model".into()));
        }
        self.running = stats;
        Ok(())
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Independent copy whose parameters do not alias this model's.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut copy = Self::new(self.config.clone(), self.n_static, self.dtype(), 0)?;
        copy.copy_params_from(self)?;
        Ok(copy)
    }

    pub fn copy_params_from(&mut self, other: &HintModel) -> Result<()> {
        for (dst, src) in self.store.params().iter().zip(other.store.params()) {
            if dst.name != src.name || dst.var.dims() != src.var.dims() {
                return Err(Error::Compat(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.var.set(&src.var.as_tensor().copy()?)?;
        }
        self.running = other.running.clone();
        Ok(())
    }

    /// True when every parameter value is finite.
    pub fn params_finite(&self) -> Result<bool> {
        for p in self.store.params() {
            let v = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn static_tensor(&self, x: &Array2<f64>) -> Result<Tensor> {
        if x.ncols() != self.n_static {
            return Err(Error::Compat(format!(
                "static features have {} columns, the model expects {}",
                x.ncols(),
                self.n_static
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("static features contain non-finite values".into()));
        }
        array_to_tensor(x, self.dtype(), self.device())
    }

    /// Static encoder: feature gate, then two (linear, SELU, batch norm) blocks.
    pub fn static_encoder_forward(
        &self,
        x_static: &Tensor,
        train: bool,
    ) -> Result<(Tensor, Tensor, Vec<BatchStats>)> {
        let (_, f) = x_static.dims2()?;
        if f != self.n_static {
            return Err(Error::Shape(format!(
                "static features have {f} columns, expected {}",
                self.n_static
            )));
        }
        let gate = sigmoid(self.feature_gate.as_tensor())?;
        let gate_l1 = gate.abs()?.sum_all()?;
        let x = x_static.broadcast_mul(&gate)?;
        let mut stats = Vec::new();
        let mut h = x;
        for (i, (lin, bn)) in [(&self.static_l1, &self.static_bn1), (&self.static_l2, &self.static_bn2)]
            .into_iter()
            .enumerate()
        {
            let a = selu(&lin.forward(&h)?)?;
            h = if train {
                let (y, s) = bn.forward_train(&a)?;
                stats.push(s);
                y
            } else {
                bn.forward_eval(&a, &self.running[i])?
            };
        }
        Ok((h, gate_l1, stats))
    }

    /// Time encoder `(.., 4) -> (.., time_dim)`: two ReLU layers with dropout, then a sigmoid gate.
    pub fn time_encoder_forward(&self, time: &Tensor, drop: &mut DropoutCtx) -> Result<Tensor> {
        if time.dims().last() != Some(&TIME_FEATURES) {
            return Err(Error::Shape(format!(
                "time features must have {TIME_FEATURES} columns, got {:?}",
                time.dims()
            )));
        }
        let h = self.time_l1.forward(time)?.relu()?;
        let h = drop.apply(&h)?;
        let h = self.time_l2.forward(&h)?.relu()?;
        let g = sigmoid(&self.time_gate.forward(&h)?)?;
        Ok((h * g)?)
    }

    /// Projection of `(dynamic ∥ time embedding)` to `(B, N, T, D)`.
    pub fn dynamic_projection(&self, dynamic: &Tensor, time_emb: &Tensor) -> Result<Tensor> {
        let (b, _, t, c) = dynamic.dims4()?;
        if c != DYN_CHANNELS {
            return Err(Error::Shape(format!("expected {DYN_CHANNELS} dynamic channels, got {c}")));
        }
        let (tb, tt, _) = time_emb.dims3()?;
        if tb != b || tt != t {
            return Err(Error::Shape("time embedding does not match the batch".into()));
        }
        let x = self.dyn_proj.forward(dynamic)?;
        let tp = self.time_proj.forward(time_emb)?.unsqueeze(1)?;
        Ok(x.broadcast_add(&tp)?)
    }

    /// Per-timestep self-attention over nodes; returns `(B, N, T, D)` and attention weights.
    pub fn spatial_transformer_forward(
        &self,
        dyn_proj: &Tensor,
        static_emb: &Tensor,
        drop: &mut DropoutCtx,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, n, t, d) = dyn_proj.dims4()?;
        if n == 0 {
            return Err(Error::Shape("the transformer needs at least one node".into()));
        }
        let s = self.static_proj.forward(static_emb)?.reshape((1, n, 1, d))?;
        let tokens = dyn_proj.broadcast_add(&s)?;
        let mut x = tokens.transpose(1, 2)?.contiguous()?.reshape((b * t, n, d))?;
        let mut weights = Vec::new();
        for layer in &self.transformer {
            let (y, w) = self.transformer_layer(layer, &x, drop)?;
            x = y;
            weights.push(w);
        }
        let out = x.reshape((b, t, n, d))?.transpose(1, 2)?.contiguous()?;
        Ok((out, weights))
    }

    fn transformer_layer(
        &self,
        layer: &TransformerLayer,
        x: &Tensor,
        drop: &mut DropoutCtx,
    ) -> Result<(Tensor, Tensor)> {
        let (bt, n, d) = x.dims3()?;
        let heads = self.config.attention_heads;
        let dh = d / heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((bt, n, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(layer.q.forward(x)?)?;
        let k = split(layer.k.forward(x)?)?;
        let v = split(layer.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bt, n, d))?;
        let a = drop.apply(&layer.o.forward(&ctx)?)?;
        let x1 = layer.ln1.forward(&(x + a)?)?;
        let f = layer.ff2.forward(&layer.ff1.forward(&x1)?.relu()?)?;
        let f = drop.apply(&f)?;
        let x2 = layer.ln2.forward(&(x1 + f)?)?;
        Ok((x2, attn))
    }

    /// Diffusion GCN with FiLM after every layer.
    ///
    /// The first layer acts on the concatenation `(static ∥ dynamic)`; its
    /// weights are stored as separate static and dynamic blocks so the static
    /// half is transformed once per node rather than once per (batch, time).
    /// `dynamic` is `(B, N, T, D)`; the result has the same shape.
    pub fn film_gcn_forward(
        &self,
        static_emb: &Tensor,
        dynamic: &Tensor,
        graph: &GraphOperators,
        drop: &mut DropoutCtx,
    ) -> Result<(Tensor, Vec<(Tensor, Tensor)>)> {
        let (_, n, _, _) = dynamic.dims4()?;
        if graph.n != n || static_emb.dims()[0] != n {
            return Err(Error::Shape(format!(
                "adjacency has {} nodes, features have {n}",
                graph.n
            )));
        }
        let operators: Vec<Option<&Tensor>> = std::iter::once(None)
            .chain(graph.outgoing.iter().chain(&graph.incoming).map(Some))
            .collect();
        let diffuse = |p: Option<&Tensor>, x: Tensor| -> Result<Tensor> {
            match p {
                None => Ok(x),
                Some(p) => {
                    let dims = x.dims().to_vec();
                    let flat = x.reshape((n, x.elem_count() / n.max(1)))?;
                    Ok(p.matmul(&flat)?.reshape(dims)?)
                }
            }
        };
        // node-major layout so each diffusion step is one (N, N) x (N, B*T*D) product
        let mut h = dynamic.transpose(0, 1)?.contiguous()?;
        let mut films = Vec::new();
        for layer in &self.gcn {
            let mut acc: Option<Tensor> = None;
            for (term, p) in layer.dynamic.iter().zip(&operators) {
                let x = diffuse(*p, term.forward(&h)?)?;
                acc = Some(match acc {
                    None => x,
                    Some(a) => (a + x)?,
                });
            }
            let mut pre = acc.expect("at least the self term");
            if !layer.static_part.is_empty() {
                let mut sacc: Option<Tensor> = None;
                for (term, p) in layer.static_part.iter().zip(&operators) {
                    let x = diffuse(*p, term.forward(static_emb)?)?;
                    sacc = Some(match sacc {
                        None => x,
                        Some(a) => (a + x)?,
                    });
                }
                let sd = sacc.expect("static terms");
                let d = sd.dims()[1];
                pre = pre.broadcast_add(&sd.reshape((n, 1, 1, d))?)?;
            }
            let a = selu(&pre)?;
            let d = a.dims()[3];
            let gamma = layer.film_gamma.forward(static_emb)?;
            let beta = layer.film_beta.forward(static_emb)?;
            let modulated = a
                .broadcast_mul(&gamma.reshape((n, 1, 1, d))?)?
                .broadcast_add(&beta.reshape((n, 1, 1, d))?)?;
            h = drop.apply(&modulated)?;
            films.push((gamma, beta));
        }
        Ok((h.transpose(0, 1)?.contiguous()?, films))
    }

    /// Softmax-weighted blend of two branches; returns the blend and `(B, N, T, 2)` weights.
    pub fn dynamic_fusion(&self, h_trans: &Tensor, h_gcn: &Tensor) -> Result<(Tensor, Tensor)> {
        if h_trans.dims() != h_gcn.dims() {
            return Err(Error::Shape(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                h_trans.dims(),
                h_gcn.dims()
            )));
        }
        let z = Tensor::cat(&[h_trans, h_gcn], D::Minus1)?;
        let logits = self.fusion2.forward(&self.fusion1.forward(&z)?.relu()?)?;
        let w = softmax_last(&logits)?;
        let w1 = w.narrow(D::Minus1, 0, 1)?;
        let w2 = w.narrow(D::Minus1, 1, 1)?;
        let fused = (h_trans.broadcast_mul(&w1)? + h_gcn.broadcast_mul(&w2)?)?;
        Ok((fused, w))
    }

    /// GRU along time for every node, from a zero state.
    pub fn temporal_refine(&self, fused: &Tensor) -> Result<Tensor> {
        let (b, n, t, d) = fused.dims4()?;
        if t == 0 {
            return Err(Error::Shape("window length must be at least 1".into()));
        }
        let out = self.gru.forward(&fused.reshape((b * n, t, d))?)?;
        Ok(out.reshape((b, n, t, self.config.gru_hidden))?)
    }

    /// Multi-branch fusion, scalar readout and per-node calibration.
    /// Returns `(y, y_base, gamma, beta)`.
    pub fn readout_and_calibrate(
        &self,
        refined: &Tensor,
        h_trans: &Tensor,
        fused: &Tensor,
        static_emb: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let z = Tensor::cat(&[refined, h_trans, fused], D::Minus1)?;
        let y_base = self
            .readout
            .forward(&self.multi_branch.forward(&z)?)?
            .squeeze(D::Minus1)?;
        let (gamma, beta) = self.node_calibration(static_emb)?;
        let n = gamma.dims()[0];
        let y = y_base
            .broadcast_mul(&gamma.reshape((1, n, 1))?)?
            .broadcast_add(&beta.reshape((1, n, 1))?)?;
        Ok((y, y_base, gamma, beta))
    }

    /// Per-node `(gamma, beta)`, each of shape `(N,)`; gamma is strictly positive.
    pub fn node_calibration(&self, static_emb: &Tensor) -> Result<(Tensor, Tensor)> {
        let gamma = softplus(&self.node_gamma.forward(static_emb)?)?.squeeze(D::Minus1)?;
        let beta = self.node_beta.forward(static_emb)?.squeeze(D::Minus1)?;
        Ok((gamma, beta))
    }

    /// Full forward pass.
    pub fn forward(&self, inputs: &ModelInputs, mode: Mode) -> Result<ForwardOutput> {
        let (b, n, t, _) = inputs.dynamic.dims4()?;
        let (sn, _) = inputs.static_x.dims2()?;
        if sn != n {
            return Err(Error::Shape(format!("static features have {sn} rows, batch has {n} nodes")));
        }
        let tdims = inputs.time.dims3()?;
        if tdims.0 != b || tdims.1 != t {
            return Err(Error::Shape("time features do not match the batch".into()));
        }
        let train = matches!(mode, Mode::Train(_));
        let mut drop = DropoutCtx {
            rate: self.config.dropout_rate,
            rng: match mode {
                Mode::Train(rng) => Some(rng),
                Mode::Eval => None,
            },
        };
        let (static_emb, gate_l1, bn_stats) = self.static_encoder_forward(&inputs.static_x, train)?;
        let time_emb = self.time_encoder_forward(&inputs.time, &mut drop)?;
        let dyn_proj = self.dynamic_projection(&inputs.dynamic, &time_emb)?;
        let (h_trans, attention) = self.spatial_transformer_forward(&dyn_proj, &static_emb, &mut drop)?;
        let (h_gcn, film) = self.film_gcn_forward(&static_emb, &dyn_proj, inputs.graph, &mut drop)?;
        let (fused, fusion_weights) = self.dynamic_fusion(&h_trans, &h_gcn)?;
        let refined = self.temporal_refine(&fused)?;
        let (y, y_base, node_gamma, node_beta) =
            self.readout_and_calibrate(&refined, &h_trans, &fused, &static_emb)?;
        Ok(ForwardOutput {
            y,
            y_base,
            node_gamma,
            node_beta,
            gate_l1,
            bn_stats,
            fusion_weights,
            attention,
            film,
            static_embedding: static_emb,
        })
    }
}

/// Names of the diffusion terms: the self term, then outgoing and incoming powers.
fn gcn_term_names(steps: usize) -> Vec<String> {
    let mut names = vec!["self".to_string()];
    names.extend((1..=steps).map(|k| format!("out{k}")));
    names.extend((1..=steps).map(|k| format!("in{k}")));
    names
}

pub fn array_to_tensor<S, Dm>(a: &ArrayBase<S, Dm>, dtype: DType, device: &Device) -> Result<Tensor>
where
    S: Data<Elem = f64>,
    Dm: Dimension,
{
    let values: Vec<f64> = a.iter().copied().collect();
    layers::tensor_from_f64(values, a.shape(), dtype, device)
}

pub fn tensor_to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let (a, b, c) = t.dims3()?;
    Array3::from_shape_vec((a, b, c), tensor_to_vec(t)?)
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn tensor_to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

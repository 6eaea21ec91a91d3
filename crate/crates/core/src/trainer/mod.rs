//! Mixed inductive-transductive training.
//!
//! Every epoch the training nodes are split into a visible set, whose flow is
//! shown with Poisson corruption, and a reconstruction set, whose flow is
//! hidden. Reconstruction nodes are drawn preferentially among nodes with a
//! high validation sMAPE. The loss blends masked MAE on both sets, moving from
//! visible-only supervision to reconstruction during warm-up. Hold-out nodes
//! never show flow in any phase; speed is always shown at every node.

pub mod loss;
pub mod plan;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{
    covering_starts, window, window_at, Channel, HoldoutSet, Normalizer, SensorSeries,
    WindowBatch, SPEED,
};
use crate::error::{Error, Result};
use crate::model::{
    array_to_tensor, tensor_to_array3, tensor_to_scalar, CheckpointMeta, GraphOperators,
    HintModel, Mode, ModelConfig, ModelInputs,
};
use crate::netgraph::AdjacencyMatrix;
use crate::staticfeat::StaticFeatureMatrix;

pub use loss::{blend, blend_weights, combined_loss, masked_mae, smape_difficulty, LossParts};
pub use plan::{
    build_masks, corrupt_rate, inject_poisson_noise, mask_flow, training_input, mine_reconstruction_set, mining_probabilities,
    noise_decay, plan_epoch, sample_visibility, warmup_alpha, EpochMasks, EpochPlan,
};

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    tensor_to_scalar(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Param(format!("unknown precision {other:?} (use f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub r_min: f64,
    pub r_max: f64,
    /// Mining temperature.
    pub tau: f64,
    pub e_warm: usize,
    pub e_noise: usize,
    /// Noise scale.
    pub sigma: f64,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// sMAPE denominator guard.
    pub epsilon: f64,
    pub gate_l1_weight: f64,
    pub window_length: usize,
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r_min: 0.5,
            r_max: 0.9,
            tau: 0.5,
            e_warm: 10,
            e_noise: 30,
            sigma: 1.0,
            learning_rate: 1e-3,
            lr_floor: 1e-5,
            clip_norm: 1.0,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            epsilon: 1e-8,
            gate_l1_weight: 1e-4,
            window_length: 96,
            batch_size: 4,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.r_min) || !unit(self.r_max) {
            return bad(format!(
                "r_min and r_max must lie in (0, 1), got {} and {}",
                self.r_min, self.r_max
            ));
        }
        if self.r_min > self.r_max {
            return bad(format!("r_min {} exceeds r_max {}", self.r_min, self.r_max));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.e_warm == 0 || self.e_noise == 0 {
            return bad("e_warm and e_noise must be at least 1".into());
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.learning_rate {
            return bad(format!(
                "need 0 <= lr_floor <= learning_rate with learning_rate > 0, got {} and {}",
                self.lr_floor, self.learning_rate
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gate_l1_weight >= 0.0) {
            return bad(format!("gate_l1_weight must be >= 0, got {}", self.gate_l1_weight));
        }
        if self.window_length == 0 || self.batch_size == 0 {
            return bad("window_length and batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Cosine decay from `lr` to `floor` over `period` steps, constant afterwards.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, period: usize) -> f64 {
    let progress = (step.min(period) as f64) / (period.max(1) as f64);
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Where a batch passed to [`TrainHooks::on_batch`] comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Validation,
    Difficulty,
    Inference,
}

/// Observation points inside training and inference.
pub trait TrainHooks {
    /// Called with every batch right before it is fed to the model.
    fn on_batch(&mut self, _stage: Stage, _clean: &WindowBatch, _input: &Array4<f64>) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Checks that the speed channel of every model input equals the clean speed channel.
#[derive(Debug, Default)]
pub struct SpeedContractMonitor {
    pub batches: usize,
    pub violations: Vec<String>,
}

impl SpeedContractMonitor {
    pub fn check(&mut self, stage: Stage, clean: &WindowBatch, input: &Array4<f64>) {
        self.batches += 1;
        if clean.x.dim() != input.dim() {
            self.violations
                .push(format!("{stage:?} batch {}: shape changed", self.batches));
            return;
        }
        let a = clean.x.index_axis(Axis(3), SPEED);
        let b = input.index_axis(Axis(3), SPEED);
        let changed = a
            .iter()
            .zip(b.iter())
            .filter(|(x, y)| x.to_bits() != y.to_bits())
            .count();
        if changed > 0 {
            self.violations.push(format!(
                "{stage:?} batch {}: {changed} speed entries differ from the clean input",
                self.batches
            ));
        }
    }
}

impl TrainHooks for SpeedContractMonitor {
    fn on_batch(&mut self, stage: Stage, clean: &WindowBatch, input: &Array4<f64>) {
        self.check(stage, clean, input);
    }
}

/// Fixed model-side inputs: static features and graph operators.
pub struct Scene {
    pub static_x: Tensor,
    pub graph: GraphOperators,
}

impl Scene {
    pub fn new(model: &HintModel, features: &StaticFeatureMatrix, adjacency: &AdjacencyMatrix) -> Result<Self> {
        if adjacency.n != features.n() {
            return Err(Error::Input(format!(
                "adjacency has {} nodes but the static features have {}",
                adjacency.n,
                features.n()
            )));
        }
        Ok(Self {
            static_x: model.static_tensor(&features.x)?,
            graph: GraphOperators::new(
                adjacency,
                model.config().diffusion_steps,
                model.dtype(),
                model.device(),
            )?,
        })
    }

    fn inputs(&self, model: &HintModel, dynamic: &Array4<f64>, time: &Array3<f64>) -> Result<ModelInputs<'_>> {
        Ok(ModelInputs {
            dynamic: array_to_tensor(dynamic, model.dtype(), model.device())?,
            time: array_to_tensor(time, model.dtype(), model.device())?,
            static_x: self.static_x.clone(),
            graph: &self.graph,
        })
    }
}

/// Eval-mode normalized flow predictions `(N, T)` over a whole series, with
/// the flow input zeroed on `masked_nodes`. Windows cover every time step;
/// where two windows overlap the earlier one wins.
#[allow(clippy::too_many_arguments)]
pub fn predict_series(
    model: &HintModel,
    scene: &Scene,
    series: &SensorSeries,
    normalizer: &Normalizer,
    masked_nodes: &[usize],
    window_length: usize,
    batch_size: usize,
    stage: Stage,
    hooks: &mut dyn TrainHooks,
) -> Result<Array2<f64>> {
    let starts = covering_starts(series.t(), window_length)?;
    let batches = window_at(series, normalizer, window_length, &starts, batch_size)?;
    let mut out = Array2::<f64>::zeros((series.n(), series.t()));
    let mut filled = vec![false; series.t()];
    for batch in &batches {
        let input = plan::mask_flow(&batch.x, masked_nodes);
        hooks.on_batch(stage, batch, &input);
        let inputs = scene.inputs(model, &input, &batch.time)?;
        let y = tensor_to_array3(&model.forward(&inputs, Mode::Eval)?.y)?;
        for (bi, &st) in batch.window_starts.iter().enumerate() {
            for ti in 0..window_length {
                let t = st + ti;
                if !filled[t] {
                    out.column_mut(t).assign(&y.slice(ndarray::s![bi, .., ti]));
                }
            }
            for f in &mut filled[st..st + window_length] {
                *f = true;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("model produced non-finite predictions".into()));
    }
    Ok(out)
}

/// Physical flow from a normalized prediction; flows are never negative.
pub fn denormalize_flow(normalizer: &Normalizer, value: f64) -> f64 {
    normalizer.denormalize(value, Channel::Flow).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Masked MAE on hold-out nodes in normalized units.
    pub loss: f64,
    /// The same error in physical flow units.
    pub mae: f64,
}

/// Hold-out error with the flow of hold-out nodes hidden.
pub fn validate(
    model: &HintModel,
    scene: &Scene,
    series: &SensorSeries,
    normalizer: &Normalizer,
    holdout: &HoldoutSet,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<Validation> {
    let pred = predict_series(
        model,
        scene,
        series,
        normalizer,
        &holdout.indices,
        cfg.window_length,
        cfg.batch_size,
        Stage::Validation,
        hooks,
    )?;
    let (mut sum_n, mut sum_p, mut count) = (0.0, 0.0, 0usize);
    for &v in &holdout.indices {
        for t in 0..series.t() {
            if series.flow_missing[[v, t]] {
                continue;
            }
            let y = series.flow[[v, t]];
            sum_n += (pred[[v, t]] - normalizer.normalize(y, Channel::Flow)).abs();
            sum_p += (denormalize_flow(normalizer, pred[[v, t]]) - y).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask("no observed hold-out flow in the validation segment".into()));
    }
    Ok(Validation {
        loss: sum_n / count as f64,
        mae: sum_p / count as f64,
    })
}

/// Fresh sMAPE per training node (in `holdout.training_nodes()` order).
///
/// Training nodes are split into two alternating halves; each half is hidden
/// in turn (together with the hold-out set) so every score comes from a
/// prediction made without that node's flow. `None` marks nodes with no
/// observed validation flow.
pub fn compute_difficulties(
    model: &HintModel,
    scene: &Scene,
    series: &SensorSeries,
    normalizer: &Normalizer,
    holdout: &HoldoutSet,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<Option<f64>>> {
    if series.t() == 0 {
        return Err(Error::Input("empty validation segment".into()));
    }
    let train_nodes = holdout.training_nodes();
    let mut out = vec![None; train_nodes.len()];
    for parity in 0..2 {
        let positions: Vec<usize> = (parity..train_nodes.len()).step_by(2).collect();
        if positions.is_empty() {
            continue;
        }
        let mut masked: Vec<usize> = holdout.indices.clone();
        masked.extend(positions.iter().map(|&p| train_nodes[p]));
        let pred = predict_series(
            model,
            scene,
            series,
            normalizer,
            &masked,
            cfg.window_length,
            cfg.batch_size,
            Stage::Difficulty,
            hooks,
        )?;
        for &p in &positions {
            let v = train_nodes[p];
            let pairs = (0..series.t())
                .filter(|&t| !series.flow_missing[[v, t]])
                .map(|t| (denormalize_flow(normalizer, pred[[v, t]]), series.flow[[v, t]]));
            out[p] = smape_difficulty(pairs, cfg.epsilon);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub visibility_ratio: f64,
    pub n_visible: usize,
    pub n_reconstruction: usize,
    pub alpha: f64,
    pub delta: f64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_loss_visible: Option<f64>,
    pub train_loss_reconstruction: Option<f64>,
    pub gate_l1: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub mean_difficulty: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub train_start: String,
    pub train_steps: usize,
    pub validation_steps: usize,
    pub train_hash: String,
    pub validation_hash: String,
}

/// Text record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub seed: u64,
    pub config_hash: String,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub schema_hash: String,
    pub columns: Vec<String>,
    pub node_ids: Vec<String>,
    pub holdout: Vec<String>,
    pub normalizer: Normalizer,
    pub split: SplitInfo,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: String,
    pub final_difficulties: Vec<f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl TrainManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn checkpoint_meta(&self, holdout: &HoldoutSet) -> CheckpointMeta {
        CheckpointMeta {
            schema_hash: self.schema_hash.clone(),
            columns: self.columns.clone(),
            normalizer: self.normalizer.clone(),
            node_ids: self.node_ids.clone(),
            holdout: holdout.clone(),
            window_length: self.train.window_length,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            epoch: self.best_epoch,
            extra: self.notes.clone(),
        }
    }
}

/// Short stable hash of the training and model configuration.
pub fn config_hash(train: &TrainConfig, model: &ModelConfig) -> String {
    let json = serde_json::to_string(&(train, model)).expect("configs serialize");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

fn series_hash(s: &SensorSeries) -> String {
    let mut h = Sha256::new();
    for id in &s.node_ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    h.update(crate::dataio::format_timestamp(&s.start).as_bytes());
    for (arr, miss) in [(&s.speed, &s.speed_missing), (&s.flow, &s.flow_missing)] {
        for (v, m) in arr.iter().zip(miss.iter()) {
            let v = if *m { f64::NAN } else { *v };
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Data a training run consumes.
pub struct TrainInputs<'a> {
    pub train: &'a SensorSeries,
    pub validation: &'a SensorSeries,
    pub static_features: &'a StaticFeatureMatrix,
    pub adjacency: &'a AdjacencyMatrix,
    pub holdout: &'a HoldoutSet,
    pub normalizer: &'a Normalizer,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: HintModel,
    pub manifest: TrainManifest,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(
    grads: &mut candle_core::backprop::GradStore,
    vars: &[candle_core::Var],
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), g.affine(scale, 0.0)?);
            }
        }
    }
    Ok(norm)
}

fn row_mask(rows: &Array2<bool>, observed: &Array3<bool>) -> (Array3<f64>, f64) {
    let (b, n, t) = observed.dim();
    let mut count = 0.0;
    let m = Array3::from_shape_fn((b, n, t), |(bi, i, ti)| {
        if rows[[i, ti]] && observed[[bi, i, ti]] {
            count += 1.0;
            1.0
        } else {
            0.0
        }
    });
    (m, count)
}

pub fn train(
    inputs: &TrainInputs,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let holdout = inputs.holdout;
    let n = inputs.train.n();
    if holdout.n_nodes != n || inputs.validation.n() != n || inputs.static_features.n() != n {
        return Err(Error::Input("series, features and hold-out set disagree on the node count".into()));
    }
    if inputs.train.node_ids != inputs.static_features.node_ids {
        return Err(Error::Input("static feature rows are not aligned with the series nodes".into()));
    }
    if holdout.is_empty() {
        return Err(Error::Input("the hold-out set is empty".into()));
    }
    let train_nodes = holdout.training_nodes();
    if train_nodes.is_empty() {
        return Err(Error::Input("no training nodes outside the hold-out set".into()));
    }
    let t_w = cfg.window_length;
    let normalizer = inputs.normalizer;

    let mut model = HintModel::new(model_cfg.clone(), inputs.static_features.f(), cfg.precision.dtype(), cfg.seed)?;
    let scene = Scene::new(&model, inputs.static_features, inputs.adjacency)?;
    let windows = window(inputs.train, normalizer, t_w, t_w, 1)?;
    let batches_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let period = cfg.max_epochs * batches_per_epoch;

    let vars = model.params().vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut plan_rng = rng_stream(cfg.seed, 1);
    let mut noise_rng = rng_stream(cfg.seed, 2);
    let mut dropout_rng = rng_stream(cfg.seed, 3);
    let mut shuffle_rng = rng_stream(cfg.seed, 4);

    let initial = validate(&model, &scene, inputs.validation, normalizer, holdout, cfg, hooks)?;
    let mut best = model.deep_clone()?;
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut difficulties = vec![0.0; train_nodes.len()];
    let mut records = Vec::new();
    let mut stop_reason = "max_epochs".to_string();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let plan = plan_epoch(epoch, cfg, holdout, &difficulties, &mut plan_rng)?;
        let masks = plan.masks(holdout, t_w)?;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut vis_sum, mut rec_sum, mut gate) = (0.0, 0.0, 0.0, 0.0);
        let (mut vis_batches, mut rec_batches) = (0usize, 0usize);
        let mut lr = cfg.learning_rate;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<&WindowBatch> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = WindowBatch::concat(&parts)?;
            let input = plan::training_input(
                &batch.x,
                &batch.observed,
                &plan,
                holdout,
                cfg,
                normalizer,
                &mut noise_rng,
            )?;
            hooks.on_batch(Stage::Train, &batch, &input);
            let (m_vis, c_vis) = row_mask(&masks.visible, &batch.observed);
            let (m_rec, c_rec) = row_mask(&masks.reconstruction, &batch.observed);
            if c_vis == 0.0 && c_rec == 0.0 {
                continue;
            }
            let (dtype, dev) = (model.dtype(), model.device().clone());
            let model_inputs = scene.inputs(&model, &input, &batch.time)?;
            let out = model.forward(&model_inputs, Mode::Train(&mut dropout_rng))?;
            let target = array_to_tensor(&batch.y, dtype, &dev)?;
            let m_vis = array_to_tensor(&m_vis, dtype, &dev)?;
            let m_rec = array_to_tensor(&m_rec, dtype, &dev)?;
            let parts = combined_loss(
                &out.y,
                &target,
                (&m_vis, c_vis),
                (&m_rec, c_rec),
                plan.alpha,
                &out.gate_l1,
                cfg.gate_l1_weight,
            )?;
            let total = scalar(&parts.total)?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {total} at epoch {epoch}, batch {bi}"
                )));
            }
            let mut grads = parts.total.backward()?;
            clip_gradients(&mut grads, &vars, cfg.clip_norm)?;
            lr = cosine_lr(cfg.learning_rate, cfg.lr_floor, step, period);
            opt.set_learning_rate(lr);
            opt.step(&grads)?;
            step += 1;
            model.update_running_stats(&out.bn_stats);
            loss_sum += total;
            gate += parts.gate_l1;
            if let Some(v) = parts.visible {
                vis_sum += v;
                vis_batches += 1;
            }
            if let Some(r) = parts.reconstruction {
                rec_sum += r;
                rec_batches += 1;
            }
        }
        if !model.params_finite()? {
            return Err(Error::Numeric(format!(
                "training diverged: non-finite parameters after epoch {epoch}"
            )));
        }
        let n_steps = (vis_batches.max(rec_batches)).max(1) as f64;
        let val = validate(&model, &scene, inputs.validation, normalizer, holdout, cfg, hooks)?;
        let fresh = compute_difficulties(&model, &scene, inputs.validation, normalizer, holdout, cfg, hooks)?;
        for (d, f) in difficulties.iter_mut().zip(&fresh) {
            if let Some(f) = f {
                *d = 0.5 * *d + 0.5 * f;
            }
        }
        let improved = val.loss < best_loss;
        let record = EpochRecord {
            epoch,
            visibility_ratio: plan.visibility_ratio,
            n_visible: plan.visible.len(),
            n_reconstruction: plan.reconstruction.len(),
            alpha: plan.alpha,
            delta: plan.delta,
            learning_rate: lr,
            train_loss: loss_sum / n_steps,
            train_loss_visible: (vis_batches > 0).then(|| vis_sum / vis_batches as f64),
            train_loss_reconstruction: (rec_batches > 0).then(|| rec_sum / rec_batches as f64),
            gate_l1: gate / n_steps,
            val_loss: val.loss,
            val_mae: val.mae,
            mean_difficulty: difficulties.iter().sum::<f64>() / difficulties.len() as f64,
            improved,
        };
        hooks.on_epoch(&record);
        records.push(record);
        if improved {
            best_loss = val.loss;
            best_epoch = epoch;
            best.copy_params_from(&model)?;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stop_reason = "patience".to_string();
                break;
            }
        }
    }

    let manifest = TrainManifest {
        seed: cfg.seed,
        config_hash: config_hash(cfg, model_cfg),
        train: cfg.clone(),
        model: model_cfg.clone(),
        schema_hash: inputs.static_features.schema_hash(),
        columns: inputs.static_features.schema.iter().map(|c| c.name.clone()).collect(),
        node_ids: inputs.train.node_ids.clone(),
        holdout: holdout.indices.iter().map(|&i| inputs.train.node_ids[i].clone()).collect(),
        normalizer: normalizer.clone(),
        split: SplitInfo {
            train_start: crate::dataio::format_timestamp(&inputs.train.start),
            train_steps: inputs.train.t(),
            validation_steps: inputs.validation.t(),
            train_hash: series_hash(inputs.train),
            validation_hash: series_hash(inputs.validation),
        },
        initial_val_loss: initial.loss,
        epochs: records,
        best_epoch,
        best_val_loss: best_loss,
        stop_reason,
        final_difficulties: difficulties,
        notes: BTreeMap::new(),
    };
    Ok(TrainOutcome {
        model: best,
        manifest,
    })
}

/// Denormalized flow estimates `(targets, T)` with the flow input hidden on the targets.
pub fn impute(
    model: &HintModel,
    meta: &CheckpointMeta,
    series: &SensorSeries,
    static_features: &StaticFeatureMatrix,
    adjacency: &AdjacencyMatrix,
    targets: &[usize],
    batch_size: usize,
    hooks: &mut dyn TrainHooks,
) -> Result<Array2<f64>> {
    meta.check_schema(&static_features.schema_hash())?;
    if static_features.node_ids != series.node_ids {
        return Err(Error::Input("static feature rows are not aligned with the series nodes".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&v| v >= series.n()) {
        return Err(Error::Input(format!("target node {bad} out of range")));
    }
    if targets.is_empty() {
        return Ok(Array2::zeros((0, series.t())));
    }
    let scene = Scene::new(model, static_features, adjacency)?;
    let pred = predict_series(
        model,
        &scene,
        series,
        &meta.normalizer,
        targets,
        meta.window_length.min(series.t()),
        batch_size,
        Stage::Inference,
        hooks,
    )?;
    Ok(Array2::from_shape_fn((targets.len(), series.t()), |(i, t)| {
        denormalize_flow(&meta.normalizer, pred[[targets[i], t]])
    }))
}

#[cfg(test)]
mod tests;

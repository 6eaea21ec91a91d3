//! Per-epoch planning: visibility ratio, hard-node mining, masks and noise.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataio::{Channel, HoldoutSet, Normalizer, FLOW};
use crate::error::{Error, Result};

use super::TrainConfig;

/// Draws the epoch's visibility ratio uniformly from `[r_min, r_max]`.
pub fn sample_visibility(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(cfg.r_min <= cfg.r_max) {
        return Err(Error::Param(format!(
            "r_min {} exceeds r_max {}",
            cfg.r_min, cfg.r_max
        )));
    }
    if cfg.r_min == cfg.r_max {
        return Ok(cfg.r_min);
    }
    Ok(rng.random_range(cfg.r_min..=cfg.r_max))
}

/// `min(e / E_warm, 1)`.
pub fn warmup_alpha(epoch: usize, e_warm: usize) -> Result<f64> {
    if e_warm == 0 {
        return Err(Error::Param("E_warm must be at least 1".into()));
    }
    Ok((epoch as f64 / e_warm as f64).min(1.0))
}

/// `max(0, 1 - e / E_noise)`.
pub fn noise_decay(epoch: usize, e_noise: usize) -> Result<f64> {
    if e_noise == 0 {
        return Err(Error::Param("E_noise must be at least 1".into()));
    }
    Ok((1.0 - epoch as f64 / e_noise as f64).max(0.0))
}

/// First-draw probabilities `exp(d_v / tau) / sum_u exp(d_u / tau)`.
pub fn mining_probabilities(difficulties: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if difficulties.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("difficulties must be finite".into()));
    }
    let max = difficulties.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = difficulties.iter().map(|d| ((d - max) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws `size` distinct positions sequentially, each with probability
/// proportional to `exp(d_v / tau)` among the positions not yet drawn.
pub fn mine_reconstruction_set(
    difficulties: &[f64],
    tau: f64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = difficulties.len();
    if size > n {
        return Err(Error::Param(format!(
            "cannot draw {size} nodes from {n} training nodes"
        )));
    }
    let mut weights = mining_probabilities(difficulties, tau)?;
    let mut chosen = Vec::with_capacity(size);
    for _ in 0..size {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = pick.expect("a remaining candidate");
        chosen.push(i);
        weights[i] = 0.0;
    }
    Ok(chosen)
}

/// Binary `N x T_w` masks of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMasks {
    pub visible: Array2<bool>,
    pub reconstruction: Array2<bool>,
    pub keep: Array2<bool>,
}

/// Row masks for a partition of all nodes into visible, reconstruction and hold-out sets.
pub fn build_masks(
    visible: &[usize],
    reconstruction: &[usize],
    holdout: &HoldoutSet,
    n: usize,
    t_w: usize,
) -> Result<EpochMasks> {
    let mut owner = vec![0u8; n];
    let groups: [(&[usize], u8, &str); 3] = [
        (visible, 1, "visible"),
        (reconstruction, 2, "reconstruction"),
        (&holdout.indices, 3, "hold-out"),
    ];
    for (set, tag, name) in groups {
        for &v in set {
            if v >= n {
                return Err(Error::Input(format!("{name} node {v} out of range 0..{n}")));
            }
            if owner[v] != 0 {
                return Err(Error::Input(format!("node {v} is assigned to more than one set")));
            }
            owner[v] = tag;
        }
    }
    if let Some(v) = owner.iter().position(|&o| o == 0) {
        return Err(Error::Input(format!("node {v} is in no set")));
    }
    let rows = |tag: u8| Array2::from_shape_fn((n, t_w), |(i, _)| owner[i] == tag);
    let keep = Array2::from_shape_fn((n, t_w), |(i, _)| owner[i] != 3);
    Ok(EpochMasks {
        visible: rows(1),
        reconstruction: rows(2),
        keep,
    })
}

/// Everything fixed for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub visibility_ratio: f64,
    /// Node indices whose flow is shown (with noise).
    pub visible: Vec<usize>,
    /// Node indices whose flow is hidden and reconstructed.
    pub reconstruction: Vec<usize>,
    pub alpha: f64,
    pub delta: f64,
}

impl EpochPlan {
    pub fn masks(&self, holdout: &HoldoutSet, t_w: usize) -> Result<EpochMasks> {
        build_masks(&self.visible, &self.reconstruction, holdout, holdout.n_nodes, t_w)
    }
}

/// Builds the plan for epoch `epoch` from the current difficulties of the training nodes.
pub fn plan_epoch(
    epoch: usize,
    cfg: &TrainConfig,
    holdout: &HoldoutSet,
    difficulties: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<EpochPlan> {
    let train_nodes = holdout.training_nodes();
    if train_nodes.len() != difficulties.len() {
        return Err(Error::Shape(format!(
            "{} difficulties for {} training nodes",
            difficulties.len(),
            train_nodes.len()
        )));
    }
    let r = sample_visibility(cfg, rng)?;
    let n_train = train_nodes.len();
    let n_visible = ((r * n_train as f64) + 1e-9).floor() as usize;
    let picks = mine_reconstruction_set(difficulties, cfg.tau, n_train - n_visible, rng)?;
    let mut in_rec = vec![false; n_train];
    for &p in &picks {
        in_rec[p] = true;
    }
    let mut reconstruction: Vec<usize> = picks.iter().map(|&p| train_nodes[p]).collect();
    reconstruction.sort_unstable();
    let visible = train_nodes
        .iter()
        .zip(&in_rec)
        .filter(|(_, r)| !**r)
        .map(|(&v, _)| v)
        .collect();
    Ok(EpochPlan {
        epoch,
        visibility_ratio: r,
        visible,
        reconstruction,
        alpha: warmup_alpha(epoch, cfg.e_warm)?,
        delta: noise_decay(epoch, cfg.e_noise)?,
    })
}

/// Poisson corruption of the normalized flow channel on the visible nodes.
///
/// For every observed entry of a visible node: `lambda = denorm(x)`,
/// `eta = Poisson(max(lambda, 0)) - lambda`, and the input becomes
/// `norm(max(lambda + sigma * delta * eta, 0))`. Missing entries and all other
/// nodes are left untouched.
pub fn inject_poisson_noise(
    flow: &mut Array3<f64>,
    observed: &Array3<bool>,
    visible: &[usize],
    sigma: f64,
    delta: f64,
    normalizer: &Normalizer,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if !(sigma >= 0.0) || !(0.0..=1.0).contains(&delta) {
        return Err(Error::Param(format!(
            "noise needs sigma >= 0 and delta in [0, 1], got {sigma}, {delta}"
        )));
    }
    if sigma == 0.0 || delta == 0.0 {
        return Ok(());
    }
    let scale = sigma * delta;
    let (b, _, t) = flow.dim();
    for bi in 0..b {
        for &v in visible {
            for ti in 0..t {
                if !observed[[bi, v, ti]] {
                    continue;
                }
                let lambda = normalizer.denormalize(flow[[bi, v, ti]], Channel::Flow);
                let noisy = corrupt_rate(lambda, scale, rng)?;
                flow[[bi, v, ti]] = normalizer.normalize(noisy, Channel::Flow);
            }
        }
    }
    Ok(())
}

/// One corrupted rate `max(lambda + scale * (Poisson(lambda+) - lambda), 0)`.
pub fn corrupt_rate(lambda: f64, scale: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !lambda.is_finite() {
        return Err(Error::Numeric(format!("non-finite Poisson rate {lambda}")));
    }
    let positive = lambda.max(0.0);
    let draw = if positive > 0.0 {
        Poisson::new(positive)
            .map_err(|e| Error::Numeric(format!("Poisson rate {positive}: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    Ok((lambda + scale * (draw - lambda)).max(0.0))
}

/// Model input for one training batch: flow zeroed on reconstruction and
/// hold-out nodes, noise on visible nodes, speed left untouched.
pub fn training_input(
    clean: &Array4<f64>,
    observed: &Array3<bool>,
    plan: &EpochPlan,
    holdout: &HoldoutSet,
    cfg: &TrainConfig,
    normalizer: &Normalizer,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    let mut x = clean.clone();
    let mut flow = x.index_axis(Axis(3), FLOW).to_owned();
    for &v in plan.reconstruction.iter().chain(&holdout.indices) {
        flow.index_axis_mut(Axis(1), v).fill(0.0);
    }
    inject_poisson_noise(
        &mut flow,
        observed,
        &plan.visible,
        cfg.sigma,
        plan.delta,
        normalizer,
        rng,
    )?;
    x.index_axis_mut(Axis(3), FLOW).assign(&flow);
    Ok(x)
}

/// Copy of `clean` with the flow channel zeroed on the given nodes.
pub fn mask_flow(clean: &Array4<f64>, nodes: &[usize]) -> Array4<f64> {
    let mut x = clean.clone();
    for &v in nodes {
        x.index_axis_mut(Axis(1), v)
            .index_axis_mut(Axis(2), FLOW)
            .fill(0.0);
    }
    x
}

//! End-to-end plumbing: raw tables in, prepared splits, HINT and baseline
//! estimates on the hold-out nodes of the test segment, and metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    chronological_split, fit_normalizer, select_holdout, HoldoutSet, Normalizer, SensorSeries,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, knn_impute, mean_impute, MetricsReport};
use crate::model::{CheckpointMeta, HintModel, ModelConfig};
use crate::netgraph::{build_adjacency, AdjacencyMatrix, DistanceMatrix, SensorNode};
use crate::staticfeat::{
    align_rows, drop_simulation_columns, encode_attributes, RawSegmentAttributes,
    SimulationProfile, StaticFeatureMatrix,
};
use crate::synth::SynthDataset;
use crate::trainer::{self, NoHooks, TrainConfig, TrainHooks, TrainInputs, TrainOutcome};

/// Manifest and checkpoint note holding the JSON [`StudyConfig`].
pub const STUDY_NOTE: &str = "study";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Neighbours kept per adjacency row.
    pub k: usize,
    pub kernel_sigma: Option<f64>,
    pub holdout_ratio: f64,
    pub split: (f64, f64, f64),
    /// Seed of the hold-out draw.
    pub seed: u64,
    pub with_simulation: bool,
    /// Flows below this are left out of MAPE.
    pub mape_floor: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            k: 5,
            kernel_sigma: None,
            holdout_ratio: 0.2,
            split: (0.6, 0.2, 0.2),
            seed: 0,
            with_simulation: true,
            mape_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Knn { k: usize },
    Mean,
}

impl Baseline {
    pub fn label(&self) -> String {
        match self {
            Baseline::Knn { k } => format!("knn_k{k}"),
            Baseline::Mean => "mean".to_string(),
        }
    }
}

/// A prepared dataset with its graph, features, splits and hold-out set.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: StudyConfig,
    pub distances: DistanceMatrix,
    pub adjacency: AdjacencyMatrix,
    pub features: StaticFeatureMatrix,
    pub train: SensorSeries,
    pub validation: SensorSeries,
    pub test: SensorSeries,
    pub holdout: HoldoutSet,
    pub normalizer: Normalizer,
}

impl Study {
    /// `nodes` and `distances` must follow the node order of `series`.
    pub fn from_parts(
        nodes: &[SensorNode],
        distances: &DistanceMatrix,
        attributes: &[RawSegmentAttributes],
        simulation: Option<&[SimulationProfile]>,
        series: &SensorSeries,
        config: &StudyConfig,
    ) -> Result<Self> {
        series.validate()?;
        let ids: Vec<&str> = nodes.iter().map(|n| n.id.as_str()).collect();
        if ids != series.node_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Input("node table and series disagree on node order".into()));
        }
        if distances.n() != nodes.len() {
            return Err(Error::Input(format!(
                "distance matrix has {} nodes, node table {}",
                distances.n(),
                nodes.len()
            )));
        }
        let adjacency = build_adjacency(distances, config.k, config.kernel_sigma)?;
        let mut features = align_rows(&encode_attributes(attributes, simulation)?, &series.node_ids)?;
        if !config.with_simulation && features.has_simulation() {
            features = drop_simulation_columns(&features)?;
        }
        let holdout = select_holdout(series.n(), config.holdout_ratio, config.seed)?;
        let (train, validation, test) = chronological_split(series, config.split)?;
        let normalizer = fit_normalizer(&train, &holdout)?;
        Ok(Self {
            config: config.clone(),
            distances: distances.clone(),
            adjacency,
            features,
            train,
            validation,
            test,
            holdout,
            normalizer,
        })
    }

    /// The study configuration recorded by [`Study::train`].
    pub fn config_from_notes(notes: &std::collections::BTreeMap<String, String>) -> Result<StudyConfig> {
        let text = notes
            .get(STUDY_NOTE)
            .ok_or_else(|| Error::Compat("artifact does not record its data preparation".into()))?;
        serde_json::from_str(text).map_err(|e| Error::Compat(format!("unreadable study note: {e}")))
    }

    pub fn from_synth(ds: &SynthDataset, config: &StudyConfig) -> Result<Self> {
        Self::from_parts(
            &ds.network.nodes,
            &ds.network.distances,
            &ds.network.attributes,
            Some(&ds.traffic.simulation),
            &ds.traffic.series,
            config,
        )
    }

    pub fn train_inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            train: &self.train,
            validation: &self.validation,
            static_features: &self.features,
            adjacency: &self.adjacency,
            holdout: &self.holdout,
            normalizer: &self.normalizer,
        }
    }

    pub fn train(
        &self,
        model: &ModelConfig,
        cfg: &TrainConfig,
        hooks: &mut dyn TrainHooks,
    ) -> Result<TrainOutcome> {
        let mut out = trainer::train(&self.train_inputs(), model, cfg, hooks)?;
        out.manifest
            .notes
            .insert("simulation".into(), self.features.has_simulation().to_string());
        let study = serde_json::to_string(&self.config).expect("study config serializes");
        out.manifest.notes.insert(STUDY_NOTE.into(), study);
        Ok(out)
    }

    pub fn holdout_ids(&self) -> Vec<String> {
        self.holdout
            .indices
            .iter()
            .map(|&i| self.test.node_ids[i].clone())
            .collect()
    }

    /// HINT estimates `(|H|, T_test)` on the test segment.
    pub fn hint_predictions(&self, model: &HintModel, meta: &CheckpointMeta, batch_size: usize) -> Result<Array2<f64>> {
        trainer::impute(
            model,
            meta,
            &self.test,
            &self.features,
            &self.adjacency,
            &self.holdout.indices,
            batch_size,
            &mut NoHooks,
        )
    }

    /// Baseline estimates `(|H|, T_test)` from the training nodes of the test segment.
    pub fn baseline_predictions(&self, method: Baseline) -> Result<Array2<f64>> {
        let observed = self.test.flow_missing.mapv(|m| !m);
        let visible = self.holdout.training_nodes();
        match method {
            Baseline::Knn { k } => knn_impute(
                self.test.flow.view(),
                observed.view(),
                &self.distances,
                &visible,
                &self.holdout.indices,
                k,
            ),
            Baseline::Mean => mean_impute(
                self.test.flow.view(),
                observed.view(),
                &visible,
                &self.holdout.indices,
            ),
        }
    }

    /// Observed test flow on the hold-out nodes and its observation mask.
    pub fn holdout_target(&self) -> (Array2<f64>, Array2<bool>) {
        let rows = &self.holdout.indices;
        let t = self.test.t();
        let target = Array2::from_shape_fn((rows.len(), t), |(i, j)| self.test.flow[[rows[i], j]]);
        let mask = Array2::from_shape_fn((rows.len(), t), |(i, j)| !self.test.flow_missing[[rows[i], j]]);
        (target, mask)
    }

    /// Metrics of hold-out estimates against the observed test flow.
    pub fn evaluate(&self, pred: &Array2<f64>, label: &str) -> Result<MetricsReport> {
        let (target, mask) = self.holdout_target();
        if pred.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "expected {:?} hold-out estimates, got {:?}",
                target.dim(),
                pred.dim()
            )));
        }
        Ok(compute_metrics(pred.view(), target.view(), mask.view(), self.config.mape_floor, &self.holdout_ids())?
            .with_label(label))
    }
}

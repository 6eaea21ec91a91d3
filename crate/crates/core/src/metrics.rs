//! Error metrics on physical flow values, speed–flow correlation and the
//! simple imputation baselines.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::SensorSeries;
use crate::error::{Error, Result};
use crate::netgraph::{csv_error, DistanceMatrix};

pub const DEFAULT_MAPE_FLOOR: f64 = 1e-8;
pub const SMAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: String,
    pub mae: f64,
    pub smape: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is at or below the floor.
    pub mape: Option<f64>,
    /// Fraction of masked points left out of MAPE for having |y| <= floor.
    pub mape_excluded_fraction: f64,
    /// Percent on the 0–200 scale.
    pub smape: f64,
    pub n_points: usize,
    pub per_node: Vec<NodeMetrics>,
}

/// Metrics over the masked entries of N×T arrays. `node_ids` labels rows.
pub fn compute_metrics(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    mape_floor: f64,
    node_ids: &[String],
) -> Result<MetricsReport> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "pred {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    if node_ids.len() != pred.nrows() {
        return Err(Error::Shape(format!(
            "{} node ids for {} rows",
            node_ids.len(),
            pred.nrows()
        )));
    }
    let (mut abs, mut sq, mut ape, mut sape) = (0.0, 0.0, 0.0, 0.0);
    let (mut count, mut mape_count) = (0usize, 0usize);
    let mut per_node = Vec::new();
    for (i, id) in node_ids.iter().enumerate() {
        let (mut node_abs, mut node_sape, mut node_count) = (0.0, 0.0, 0usize);
        for t in 0..pred.ncols() {
            if !mask[[i, t]] {
                continue;
            }
            let (p, y) = (pred[[i, t]], target[[i, t]]);
            let e = p - y;
            let s = 2.0 * e.abs() / (p.abs() + y.abs() + SMAPE_EPS);
            abs += e.abs();
            sq += e * e;
            sape += s;
            count += 1;
            if y.abs() > mape_floor {
                ape += e.abs() / y.abs();
                mape_count += 1;
            }
            node_abs += e.abs();
            node_sape += s;
            node_count += 1;
        }
        if node_count > 0 {
            per_node.push(NodeMetrics {
                node: id.clone(),
                mae: node_abs / node_count as f64,
                smape: 100.0 * node_sape / node_count as f64,
                n_points: node_count,
            });
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask("no masked points to evaluate".into()));
    }
    let n = count as f64;
    Ok(MetricsReport {
        label: String::new(),
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (mape_count > 0).then(|| 100.0 * ape / mape_count as f64),
        mape_excluded_fraction: (count - mape_count) as f64 / n,
        smape: 100.0 * sape / n,
        n_points: count,
        per_node,
    })
}

impl MetricsReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn mape_cell(&self) -> String {
        self.mape.map_or_else(|| "undefined".to_string(), |m| format!("{m:.4}"))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("label", self.label.clone()),
            ("MAE", format!("{:.4}", self.mae)),
            ("RMSE", format!("{:.4}", self.rmse)),
            ("MAPE (%)", self.mape_cell()),
            ("MAPE excluded", format!("{:.4}", self.mape_excluded_fraction)),
            ("SMAPE (%)", format!("{:.4}", self.smape)),
            ("points", self.n_points.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<14} {v:>14}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["label", "mae", "rmse", "mape", "mape_excluded_fraction", "smape", "n_points"])
            .map_err(|e| csv_error(path, e))?;
        w.write_record([
            self.label.clone(),
            self.mae.to_string(),
            self.rmse.to_string(),
            self.mape.map_or_else(|| "undefined".into(), |m| m.to_string()),
            self.mape_excluded_fraction.to_string(),
            self.smape.to_string(),
            self.n_points.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_per_node_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for n in &self.per_node {
            w.serialize(n).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes `node_id,target,prediction` rows for every masked point.
pub fn write_scatter_csv(
    path: &Path,
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    mask: ArrayView2<bool>,
    node_ids: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["node_id", "target", "prediction"])
        .map_err(|e| csv_error(path, e))?;
    for (i, id) in node_ids.iter().enumerate() {
        for t in 0..pred.ncols() {
            if mask[[i, t]] {
                w.write_record([id.clone(), target[[i, t]].to_string(), pred[[i, t]].to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-node Pearson r between speed and flow over co-observed steps.
pub fn pearson_speed_flow(series: &SensorSeries) -> Vec<Option<f64>> {
    (0..series.n())
        .map(|i| {
            let (mut s, mut f) = (Vec::new(), Vec::new());
            for t in 0..series.t() {
                if !series.speed_missing[[i, t]] && !series.flow_missing[[i, t]] {
                    s.push(series.speed[[i, t]]);
                    f.push(series.flow[[i, t]]);
                }
            }
            pearson(&s, &f)
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 0 {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    })
}

/// Mean of the `k` nearest visible nodes (by driving distance from the
/// target) at every time step. Returns `targets.len() × T`.
///
/// `observed` marks usable flow entries; a step where none of the chosen
/// neighbours is observed repeats the previous estimate (0 at the start).
pub fn knn_impute(
    flow: ArrayView2<f64>,
    observed: ArrayView2<bool>,
    dist: &DistanceMatrix,
    visible: &[usize],
    targets: &[usize],
    k: usize,
) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::Param("k must be >= 1".into()));
    }
    let t_len = flow.ncols();
    let mut out = Array2::zeros((targets.len(), t_len));
    for (r, &target) in targets.iter().enumerate() {
        let mut near: Vec<(f64, usize)> = visible
            .iter()
            .filter(|&&v| v != target)
            .filter_map(|&v| dist.get(target, v).map(|d| (d, v)))
            .collect();
        if near.is_empty() {
            return Err(Error::Input(format!(
                "target node {target} has no reachable visible node"
            )));
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        let mut prev = 0.0;
        for t in 0..t_len {
            let (sum, cnt) = near
                .iter()
                .filter(|(_, v)| observed[[*v, t]])
                .fold((0.0, 0usize), |(s, c), (_, v)| (s + flow[[*v, t]], c + 1));
            let est = if cnt > 0 { sum / cnt as f64 } else { prev };
            out[[r, t]] = est;
            prev = est;
        }
    }
    Ok(out)
}

/// Network mean of the visible flows per time step, broadcast to every target.
pub fn mean_impute(
    flow: ArrayView2<f64>,
    observed: ArrayView2<bool>,
    visible: &[usize],
    targets: &[usize],
) -> Result<Array2<f64>> {
    let t_len = flow.ncols();
    let mut means = Vec::with_capacity(t_len);
    let mut prev: Option<f64> = None;
    for t in 0..t_len {
        let (sum, cnt) = visible
            .iter()
            .filter(|&&v| observed[[v, t]])
            .fold((0.0, 0usize), |(s, c), &v| (s + flow[[v, t]], c + 1));
        let m = if cnt > 0 {
            sum / cnt as f64
        } else {
            prev.ok_or_else(|| Error::Input(format!("no visible flow at or before step {t}")))?
        };
        means.push(m);
        prev = Some(m);
    }
    Ok(Array2::from_shape_fn((targets.len(), t_len), |(_, t)| means[t]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn perfect_prediction_is_zero_error() {
        let y = array![[1.0, 2.0], [3.0, 4.0]];
        let m = Array2::from_elem((2, 2), true);
        let r = compute_metrics(y.view(), y.view(), m.view(), DEFAULT_MAPE_FLOOR, &ids(2)).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape, r.smape), (0.0, 0.0, Some(0.0), 0.0));
    }

    #[test]
    fn hand_computed_metrics() {
        let p = array![[2.0, 4.0]];
        let y = array![[1.0, 3.0]];
        let m = Array2::from_elem((1, 2), true);
        let r = compute_metrics(p.view(), y.view(), m.view(), DEFAULT_MAPE_FLOOR, &ids(1)).unwrap();
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!((r.rmse - 1.0).abs() < 1e-12);
        assert!((r.mape.unwrap() - 100.0 * (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-9);

        let r = compute_metrics(
            array![[3.0]].view(),
            array![[1.0]].view(),
            array![[true]].view(),
            DEFAULT_MAPE_FLOOR,
            &ids(1),
        )
        .unwrap();
        assert!((r.smape - 100.0).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_and_zero_targets() {
        let z = Array2::<f64>::zeros((1, 3));
        let none = Array2::from_elem((1, 3), false);
        assert!(matches!(
            compute_metrics(z.view(), z.view(), none.view(), 1e-8, &ids(1)),
            Err(Error::EmptyMask(_))
        ));
        let all = Array2::from_elem((1, 3), true);
        let p = array![[1.0, 2.0, 3.0]];
        let r = compute_metrics(p.view(), z.view(), all.view(), 1e-8, &ids(1)).unwrap();
        assert_eq!(r.mape, None);
        assert_eq!(r.mape_excluded_fraction, 1.0);
        assert!((r.mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let mut s = crate::dataio::tests::toy_series(2, 50);
        for t in 0..50 {
            s.speed[[0, t]] = (t as f64 * 0.37).sin() * 10.0 + 70.0;
            s.flow[[0, t]] = -2.0 * s.speed[[0, t]] + 700.0;
            s.flow[[1, t]] = 42.0;
        }
        let r = pearson_speed_flow(&s);
        assert!((r[0].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r[1], None);
    }

    #[test]
    fn knn_examples() {
        let d = DistanceMatrix::from_rows(&[
            vec![0.0, 10.0, 20.0, 30.0],
            vec![10.0, 0.0, 10.0, 20.0],
            vec![20.0, 10.0, 0.0, 10.0],
            vec![30.0, 20.0, 10.0, 0.0],
        ])
        .unwrap();
        let flow = array![[0.0], [250.0], [100.0], [200.0]];
        let obs = Array2::from_elem((4, 1), true);
        let one = knn_impute(flow.view(), obs.view(), &d, &[1, 2, 3], &[0], 1).unwrap();
        assert_eq!(one[[0, 0]], 250.0);
        let two = knn_impute(flow.view(), obs.view(), &d, &[2, 3], &[0], 2).unwrap();
        assert_eq!(two[[0, 0]], 150.0);
        let many = knn_impute(flow.view(), obs.view(), &d, &[1, 2, 3], &[0], 10).unwrap();
        assert!((many[[0, 0]] - 550.0 / 3.0).abs() < 1e-12);

        let isolated = DistanceMatrix::unreachable(4);
        let err = knn_impute(flow.view(), obs.view(), &isolated, &[1], &[0], 1).unwrap_err();
        assert!(err.to_string().contains("node 0"));
    }

    #[test]
    fn mean_impute_examples() {
        let flow = array![[0.0, 1.0], [100.0, 3.0], [7.0, 7.0]];
        let mut obs = Array2::from_elem((3, 2), true);
        let out = mean_impute(flow.view(), obs.view(), &[0, 1], &[2]).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![50.0, 2.0]);
        let single = mean_impute(flow.view(), obs.view(), &[1], &[0, 2]).unwrap();
        assert_eq!(single.row(0), single.row(1));
        assert_eq!(single.row(0).to_vec(), vec![100.0, 3.0]);
        obs[[0, 1]] = false;
        obs[[1, 1]] = false;
        let carried = mean_impute(flow.view(), obs.view(), &[0, 1], &[2]).unwrap();
        assert_eq!(carried[[0, 1]], 50.0);
        obs[[0, 0]] = false;
        obs[[1, 0]] = false;
        assert!(mean_impute(flow.view(), obs.view(), &[0, 1], &[2]).is_err());
    }

    /// Brute force nearest-neighbour copy for small graphs.
    fn brute_nearest(d: &DistanceMatrix, node: usize, nodes: &[usize]) -> usize {
        let mut best = None::<(f64, usize)>;
        for &v in nodes {
            if v == node {
                continue;
            }
            if let Some(dv) = d.get(node, v) {
                if best.map_or(true, |(bd, bv)| dv < bd || (dv == bd && v < bv)) {
                    best = Some((dv, v));
                }
            }
        }
        best.unwrap().1
    }

    proptest! {
        #[test]
        fn metric_invariants(
            vals in proptest::collection::vec((-50.0f64..500.0, 0.0f64..500.0, any::<bool>()), 1..40),
            outside in -1e4f64..1e4,
        ) {
            let n = vals.len();
            let p = Array2::from_shape_fn((1, n), |(_, j)| vals[j].0);
            let y = Array2::from_shape_fn((1, n), |(_, j)| vals[j].1);
            let mut m = Array2::from_shape_fn((1, n), |(_, j)| vals[j].2);
            m[[0, 0]] = true;
            let r = compute_metrics(p.view(), y.view(), m.view(), 1e-8, &ids(1)).unwrap();
            prop_assert!(r.rmse >= r.mae - 1e-12);
            prop_assert!((0.0..=200.0).contains(&r.smape));
            let swapped = compute_metrics(y.view(), p.view(), m.view(), 1e-8, &ids(1)).unwrap();
            prop_assert!((swapped.smape - r.smape).abs() < 1e-9);

            let mut p2 = p.clone();
            for j in 0..n {
                if !m[[0, j]] {
                    p2[[0, j]] = outside;
                }
            }
            let r2 = compute_metrics(p2.view(), y.view(), m.view(), 1e-8, &ids(1)).unwrap();
            prop_assert_eq!(r2, r);
        }

        #[test]
        fn knn_k1_copies_nearest_neighbour(
            n in 2usize..7,
            raw in proptest::collection::vec(1.0f64..1000.0, 36),
            flows in proptest::collection::vec(0.0f64..900.0, 6),
        ) {
            let mut d = DistanceMatrix::unreachable(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d.set(i, j, raw[i * 6 + j]).unwrap();
                    }
                }
            }
            let nodes: Vec<usize> = (0..n).collect();
            let flow = Array2::from_shape_fn((n, 1), |(i, _)| flows[i]);
            let obs = Array2::from_elem((n, 1), true);
            let out = knn_impute(flow.view(), obs.view(), &d, &nodes, &nodes, 1).unwrap();
            for &i in &nodes {
                prop_assert_eq!(out[[i, 0]], flows[brute_nearest(&d, i, &nodes)]);
            }
        }
    }
}

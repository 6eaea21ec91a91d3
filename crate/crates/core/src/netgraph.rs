//! Sensor graph construction.
//!
//! Driving distances between sensors are ingested from a routing engine's
//! output and sparsified into a Gaussian-kernel adjacency that keeps the `k`
//! closest reachable neighbours of every node. Distances may be asymmetric and
//! the adjacency keeps that direction.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorNode {
    pub id: String,
    #[serde(rename = "lat")]
    pub latitude: f64,
    #[serde(rename = "lon")]
    pub longitude: f64,
    pub road_class: String,
}

impl SensorNode {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::Input(format!(
                "node {}: latitude {} outside [-90, 90]",
                self.id, self.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Input(format!(
                "node {}: longitude {} outside [-180, 180]",
                self.id, self.longitude
            )));
        }
        Ok(())
    }
}

/// Validates a node list: coordinates in range, ids unique.
pub fn validate_nodes(nodes: &[SensorNode]) -> Result<()> {
    let mut seen = HashMap::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        node.validate()?;
        if let Some(prev) = seen.insert(node.id.as_str(), i) {
            return Err(Error::Input(format!(
                "duplicate node id {:?} at rows {} and {}",
                node.id,
                prev + 1,
                i + 1
            )));
        }
    }
    Ok(())
}

/// Directed driving distances in meters. `None` marks an unreachable pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<Option<f64>>,
}

impl DistanceMatrix {
    /// All pairs unreachable except the zero diagonal.
    pub fn unreachable(n: usize) -> Self {
        let mut d = vec![None; n * n];
        for i in 0..n {
            d[i * n + i] = Some(0.0);
        }
        Self { n, d }
    }

    /// Builds a matrix from dense rows; non-finite entries become unreachable.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::unreachable(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "distance row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                if v.is_finite() {
                    m.set(i, j, v)?;
                }
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, from: usize, to: usize) -> Option<f64> {
        self.d[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, meters: f64) -> Result<()> {
        if !meters.is_finite() || meters < 0.0 {
            return Err(Error::Input(format!(
                "distance {from}->{to} must be finite and >= 0, got {meters}"
            )));
        }
        if from == to && meters != 0.0 {
            return Err(Error::Input(format!(
                "self distance of node {from} must be 0, got {meters}"
            )));
        }
        self.d[from * self.n + to] = Some(meters);
        Ok(())
    }

    pub fn set_unreachable(&mut self, from: usize, to: usize) {
        if from != to {
            self.d[from * self.n + to] = None;
        }
    }

    /// Finite off-diagonal distances in row-major order.
    pub fn finite_off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).flat_map(move |i| {
            (0..self.n).filter(move |&j| j != i).filter_map(move |j| self.get(i, j))
        })
    }

    /// Applies a node permutation: entry (i, j) of the result is (perm[i], perm[j]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::unreachable(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.d[i * self.n + j] = self.get(perm[i], perm[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub w: Array2<f64>,
    pub k: usize,
}

impl AdjacencyMatrix {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            n,
            w: Array2::zeros((n, n)),
            k,
        }
    }

    pub fn row_nonzeros(&self, i: usize) -> usize {
        self.w.row(i).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn edge_count(&self) -> usize {
        self.w.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w = Array2::from_shape_fn((self.n, self.n), |(i, j)| self.w[[perm[i], perm[j]]]);
        Self {
            n: self.n,
            w,
            k: self.k,
        }
    }
}

/// Population standard deviation of the finite off-diagonal distances.
pub fn default_kernel_sigma(dist: &DistanceMatrix) -> Option<f64> {
    let vals: Vec<f64> = dist.finite_off_diagonal().collect();
    if vals.is_empty() {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Some(var.sqrt())
}

/// Keeps the `k` closest reachable neighbours of each row and weights them
/// with `exp(-(d / sigma)^2)`. Ties at the cut go to the lower node index.
pub fn build_adjacency(
    dist: &DistanceMatrix,
    k: usize,
    kernel_sigma: Option<f64>,
) -> Result<AdjacencyMatrix> {
    if k == 0 {
        return Err(Error::Param("k must be >= 1".into()));
    }
    let n = dist.n();
    if n <= 1 {
        return Ok(AdjacencyMatrix::zeros(n, k));
    }
    if dist.finite_off_diagonal().next().is_none() {
        return Err(Error::DegenerateGraph(format!(
            "all {} off-diagonal pairs are unreachable",
            n * (n - 1)
        )));
    }
    let sigma = match kernel_sigma {
        Some(s) => s,
        None => default_kernel_sigma(dist).unwrap_or(0.0),
    };
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Param(format!(
            "kernel sigma must be positive, got {sigma}; all finite distances are equal, \
             pass an explicit kernel sigma (e.g. the typical sensor spacing in meters)"
        )));
    }

    let mut w = Array2::zeros((n, n));
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend(
            (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| dist.get(i, j).map(|d| (d, j))),
        );
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in candidates.iter().take(k) {
            w[[i, j]] = (-(d / sigma).powi(2)).exp();
        }
    }
    Ok(AdjacencyMatrix { n, w, k })
}

/// Row-normalizes the outgoing (rows of `w`) or incoming (rows of `wᵀ`)
/// transition structure. Zero rows stay zero.
pub fn adjacency_row_normalize(a: &AdjacencyMatrix, direction: Direction) -> AdjacencyMatrix {
    let mut w = match direction {
        Direction::Outgoing => a.w.clone(),
        Direction::Incoming => a.w.t().to_owned(),
    };
    for mut row in w.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    let k = match direction {
        Direction::Outgoing => a.k,
        Direction::Incoming => (0..a.n)
            .map(|i| w.row(i).iter().filter(|&&v| v != 0.0).count())
            .max()
            .unwrap_or(0)
            .max(a.k),
    };
    AdjacencyMatrix { n: a.n, w, k }
}

#[derive(Debug, Deserialize)]
struct DistanceRecord {
    from_id: String,
    to_id: String,
    meters: f64,
}

#[derive(Debug, Serialize)]
struct AdjacencyRecord<'a> {
    from_id: &'a str,
    to_id: &'a str,
    weight: f64,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match line {
        Some(line) => Error::parse(path, format!("line {line}: {e}")),
        None => Error::parse(path, e.to_string()),
    }
}

pub fn read_nodes_csv(path: &Path) -> Result<Vec<SensorNode>> {
    let mut rdr = csv_reader(path)?;
    let mut nodes = Vec::new();
    for rec in rdr.deserialize::<SensorNode>() {
        nodes.push(rec.map_err(|e| csv_error(path, e))?);
    }
    if nodes.is_empty() {
        return Err(Error::parse(path, "no nodes"));
    }
    validate_nodes(&nodes)?;
    Ok(nodes)
}

pub fn write_nodes_csv(path: &Path, nodes: &[SensorNode]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for node in nodes {
        wtr.serialize(node).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads `from_id,to_id,meters`; pairs not listed are unreachable.
pub fn read_distance_csv(path: &Path, nodes: &[SensorNode]) -> Result<DistanceMatrix> {
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut dist = DistanceMatrix::unreachable(nodes.len());
    let mut rdr = csv_reader(path)?;
    for rec in rdr.deserialize::<DistanceRecord>() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::parse(path, format!("unknown node id {id:?}")))
        };
        let (i, j) = (lookup(&rec.from_id)?, lookup(&rec.to_id)?);
        dist.set(i, j, rec.meters)
            .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    Ok(dist)
}

pub fn write_distance_csv(path: &Path, nodes: &[SensorNode], dist: &DistanceMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["from_id", "to_id", "meters"])
        .map_err(|e| csv_error(path, e))?;
    for i in 0..dist.n() {
        for j in 0..dist.n() {
            if i == j {
                continue;
            }
            if let Some(d) = dist.get(i, j) {
                wtr.write_record([nodes[i].id.as_str(), nodes[j].id.as_str(), &d.to_string()])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Writes every nonzero weight as `from_id,to_id,weight`.
pub fn write_adjacency_csv(path: &Path, nodes: &[SensorNode], a: &AdjacencyMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for i in 0..a.n {
        for j in 0..a.n {
            let weight = a.w[[i, j]];
            if weight != 0.0 {
                wtr.serialize(AdjacencyRecord {
                    from_id: &nodes[i].id,
                    to_id: &nodes[j].id,
                    weight,
                })
                .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_adjacency_csv(path: &Path, nodes: &[SensorNode], k: usize) -> Result<AdjacencyMatrix> {
    #[derive(Deserialize)]
    struct Rec {
        from_id: String,
        to_id: String,
        weight: f64,
    }
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id.as_str(), i))
        .collect();
    let mut a = AdjacencyMatrix::zeros(nodes.len(), k);
    let mut rdr = csv_reader(path)?;
    for rec in rdr.deserialize::<Rec>() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let (Some(&i), Some(&j)) = (index.get(rec.from_id.as_str()), index.get(rec.to_id.as_str()))
        else {
            return Err(Error::parse(
                path,
                format!("unknown node in edge {} -> {}", rec.from_id, rec.to_id),
            ));
        };
        if !(0.0..=1.0).contains(&rec.weight) || i == j {
            return Err(Error::parse(
                path,
                format!("invalid edge {} -> {} weight {}", rec.from_id, rec.to_id, rec.weight),
            ));
        }
        a.w[[i, j]] = rec.weight;
    }
    Ok(a)
}

/// Content hash of the inputs that determine an adjacency.
pub fn adjacency_cache_key(
    nodes: &[SensorNode],
    dist: &DistanceMatrix,
    k: usize,
    kernel_sigma: Option<f64>,
) -> String {
    let mut h = Sha256::new();
    for node in nodes {
        h.update(node.id.as_bytes());
        h.update([0u8]);
    }
    for i in 0..dist.n() {
        for j in 0..dist.n() {
            match dist.get(i, j) {
                Some(d) => {
                    h.update([1u8]);
                    h.update(d.to_le_bytes());
                }
                None => h.update([0u8]),
            }
        }
    }
    h.update((k as u64).to_le_bytes());
    h.update(kernel_sigma.unwrap_or(-1.0).to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

const CACHE_MAGIC: &[u8; 8] = b"HINTADJ1";

/// Binary cache: magic, n (u64), k (u64), then n*n little-endian f64 weights.
pub fn write_adjacency_cache(path: &Path, a: &AdjacencyMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + a.n * a.n * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(a.n as u64).to_le_bytes());
    buf.extend_from_slice(&(a.k as u64).to_le_bytes());
    for v in a.w.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_adjacency_cache(path: &Path) -> Result<AdjacencyMatrix> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 24 || &buf[..8] != CACHE_MAGIC {
        return Err(Error::Compat(format!("{}: not an adjacency cache", path.display())));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    if buf.len() != 24 + n * n * 8 {
        return Err(Error::Compat(format!("{}: truncated adjacency cache", path.display())));
    }
    let vals = buf[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let w = Array2::from_shape_vec((n, n), vals).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(AdjacencyMatrix { n, w, k })
}

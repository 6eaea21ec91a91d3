//! Static per-sensor features: map attributes and simulated hourly flows
//! encoded into one normalized matrix.
//!
//! Continuous attributes are min-max scaled over all sensors, booleans become
//! 0/1, categorical attributes become one-hot groups with a separate
//! `<group>_unknown` indicator. Simulation profiles add 24 hourly columns and
//! a `sim_missing` indicator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netgraph::csv_error;

const EARTH_RADIUS_M: f64 = 6_371_008.8;
pub const SIM_HOURS: usize = 24;

/// Great-circle distance in meters between two `(lat, lon)` points in degrees.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Polyline length over endpoint chord length.
pub fn compute_curvature(geometry: &[(f64, f64)]) -> Result<f64> {
    if geometry.len() < 2 {
        return Err(Error::Input(format!(
            "curvature needs at least 2 points, got {}",
            geometry.len()
        )));
    }
    let length: f64 = geometry.windows(2).map(|w| haversine_m(w[0], w[1])).sum();
    let chord = haversine_m(geometry[0], geometry[geometry.len() - 1]);
    if chord <= 0.0 {
        return Err(Error::Input(
            "undefined chord: geometry starts and ends at the same point".into(),
        ));
    }
    Ok(length / chord)
}

/// Intersections (degree >= 3) per km² of the enclosing hull.
pub fn compute_intersection_density(intersection_count_deg3: f64, hull_area_km2: f64) -> Result<f64> {
    if !(hull_area_km2 > 0.0) {
        return Err(Error::Input(format!(
            "hull area must be positive, got {hull_area_km2}"
        )));
    }
    Ok(intersection_count_deg3 / hull_area_km2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSegmentAttributes {
    pub node_id: String,
    pub lanes: f64,
    /// km/h
    pub maxspeed: f64,
    /// meters
    pub length: f64,
    pub oneway: bool,
    pub bridge: bool,
    pub tunnel: bool,
    pub highway_type: String,
    pub land_use: String,
    /// `(lat, lon)` vertices in degrees.
    pub geometry: Vec<(f64, f64)>,
    pub traffic_signal_count: f64,
    pub intersection_count_deg3: f64,
    /// km²
    pub hull_area: f64,
    pub betweenness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationProfile {
    pub node_id: String,
    /// Vehicles per hour for hours 0..24.
    pub hourly_flow: Vec<f64>,
}

impl SimulationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.hourly_flow.len() != SIM_HOURS {
            return Err(Error::Input(format!(
                "simulation profile {} has {} hours, expected 24",
                self.node_id,
                self.hourly_flow.len()
            )));
        }
        if let Some(h) = self.hourly_flow.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!(
                "simulation profile {} hour {h}: flow must be finite and >= 0",
                self.node_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Onehot { group: String },
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnSource {
    Map,
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    pub source: ColumnSource,
    /// Raw minimum used for min-max scaling (normalized columns only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatureMatrix {
    pub node_ids: Vec<String>,
    pub x: Array2<f64>,
    pub schema: Vec<ColumnSpec>,
}

impl StaticFeatureMatrix {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn f(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema.len() != self.x.ncols() {
            return Err(Error::Shape(format!(
                "schema lists {} columns but matrix has {}",
                self.schema.len(),
                self.x.ncols()
            )));
        }
        if self.node_ids.len() != self.x.nrows() {
            return Err(Error::Shape(format!(
                "{} node ids for {} rows",
                self.node_ids.len(),
                self.x.nrows()
            )));
        }
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (c, spec) in self.schema.iter().enumerate() {
            let col = self.x.column(c);
            let ok = match &spec.kind {
                ColumnKind::Binary => col.iter().all(|&v| v == 0.0 || v == 1.0),
                ColumnKind::Onehot { group } => {
                    groups.entry(group).or_default().push(c);
                    col.iter().all(|&v| v == 0.0 || v == 1.0)
                }
                ColumnKind::Normalized => col.iter().all(|&v| (0.0..=1.0).contains(&v)),
            };
            if !ok {
                return Err(Error::Input(format!(
                    "column {} violates its {:?} range",
                    spec.name, spec.kind
                )));
            }
        }
        for (group, cols) in groups {
            for r in 0..self.n() {
                let s: f64 = cols.iter().map(|&c| self.x[[r, c]]).sum();
                if s > 1.0 {
                    return Err(Error::Input(format!(
                        "row {r}: one-hot group {group} has {s} hot entries"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable hash of the column names and kinds, used to pair checkpoints with data.
    pub fn schema_hash(&self) -> String {
        let mut h = Sha256::new();
        for spec in &self.schema {
            h.update(spec.name.as_bytes());
            h.update([0u8]);
            h.update(format!("{:?}", spec.kind).as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn has_simulation(&self) -> bool {
        self.schema.iter().any(|c| c.source == ColumnSource::Simulation)
    }
}

fn is_unknown_category(v: &str) -> bool {
    let v = v.trim();
    v.is_empty() || v.eq_ignore_ascii_case("unknown") || v.eq_ignore_ascii_case("na")
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

struct Builder {
    columns: Vec<(ColumnSpec, Vec<f64>)>,
}

impl Builder {
    fn normalized(&mut self, name: &str, source: ColumnSource, raw: Vec<Option<f64>>) {
        let (lo, hi) = min_max(raw.iter().flatten().copied());
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
        let vals = raw.iter().map(|v| v.map_or(0.0, |v| scale(v, lo, hi))).collect();
        self.columns.push((
            ColumnSpec {
                name: name.to_string(),
                kind: ColumnKind::Normalized,
                source,
                min: Some(lo),
                max: Some(hi),
            },
            vals,
        ));
    }

    fn binary(&mut self, name: &str, source: ColumnSource, vals: Vec<bool>) {
        self.columns.push((
            ColumnSpec {
                name: name.to_string(),
                kind: ColumnKind::Binary,
                source,
                min: None,
                max: None,
            },
            vals.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        ));
    }

    fn categorical(&mut self, group: &str, values: Vec<&str>) {
        let vocab: BTreeSet<&str> = values
            .iter()
            .copied()
            .filter(|v| !is_unknown_category(v))
            .map(str::trim)
            .collect();
        for cat in &vocab {
            self.columns.push((
                ColumnSpec {
                    name: format!("{group}={cat}"),
                    kind: ColumnKind::Onehot {
                        group: group.to_string(),
                    },
                    source: ColumnSource::Map,
                    min: None,
                    max: None,
                },
                values
                    .iter()
                    .map(|v| if v.trim() == *cat { 1.0 } else { 0.0 })
                    .collect(),
            ));
        }
        let unknown = values.iter().map(|v| is_unknown_category(v)).collect();
        self.binary(&format!("{group}_unknown"), ColumnSource::Map, unknown);
    }
}

fn check_finite(row: usize, column: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Input(format!(
            "row {row} column {column}: non-finite value {v}"
        )))
    }
}

/// Encodes raw attributes (and optional simulation profiles) into the
/// normalized static feature matrix, one row per input row.
pub fn encode_attributes(
    rows: &[RawSegmentAttributes],
    sim: Option<&[SimulationProfile]>,
) -> Result<StaticFeatureMatrix> {
    if rows.is_empty() {
        return Err(Error::Input("no attribute rows".into()));
    }
    let mut lanes = Vec::with_capacity(rows.len());
    let mut maxspeed = Vec::with_capacity(rows.len());
    let mut length = Vec::with_capacity(rows.len());
    let mut curvature = Vec::with_capacity(rows.len());
    let mut density = Vec::with_capacity(rows.len());
    let mut betweenness = Vec::with_capacity(rows.len());
    let mut signals = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        lanes.push(Some(check_finite(r, "lanes", row.lanes)?));
        maxspeed.push(Some(check_finite(r, "maxspeed", row.maxspeed)?));
        length.push(Some(check_finite(r, "length", row.length)?));
        for &(lat, lon) in &row.geometry {
            check_finite(r, "geometry", lat)?;
            check_finite(r, "geometry", lon)?;
        }
        let c = compute_curvature(&row.geometry)
            .map_err(|e| Error::Input(format!("row {r} column curvature: {e}")))?;
        curvature.push(Some(c));
        check_finite(r, "intersection_count_deg3", row.intersection_count_deg3)?;
        check_finite(r, "hull_area", row.hull_area)?;
        let d = compute_intersection_density(row.intersection_count_deg3, row.hull_area)
            .map_err(|e| Error::Input(format!("row {r} column intersection_density: {e}")))?;
        density.push(Some(d));
        betweenness.push(Some(check_finite(r, "betweenness", row.betweenness)?));
        signals.push(Some(check_finite(
            r,
            "traffic_signal_count",
            row.traffic_signal_count,
        )?));
    }

    let mut b = Builder { columns: Vec::new() };
    let map = ColumnSource::Map;
    b.normalized("lanes", map, lanes);
    b.normalized("maxspeed", map, maxspeed);
    b.normalized("length", map, length);
    b.normalized("curvature", map, curvature);
    b.normalized("intersection_density", map, density);
    b.normalized("betweenness", map, betweenness);
    b.normalized("traffic_signal_count", map, signals);
    b.binary("oneway", map, rows.iter().map(|r| r.oneway).collect());
    b.binary("bridge", map, rows.iter().map(|r| r.bridge).collect());
    b.binary("tunnel", map, rows.iter().map(|r| r.tunnel).collect());
    b.categorical(
        "highway_type",
        rows.iter().map(|r| r.highway_type.as_str()).collect(),
    );
    b.categorical("land_use", rows.iter().map(|r| r.land_use.as_str()).collect());

    if let Some(profiles) = sim {
        let mut by_id: HashMap<&str, &SimulationProfile> = HashMap::new();
        for p in profiles {
            p.validate()?;
            by_id.insert(p.node_id.as_str(), p);
        }
        let matched: Vec<Option<&SimulationProfile>> = rows
            .iter()
            .map(|r| by_id.get(r.node_id.as_str()).copied())
            .collect();
        for h in 0..SIM_HOURS {
            let raw = matched.iter().map(|p| p.map(|p| p.hourly_flow[h])).collect();
            b.normalized(&format!("sim_flow_h{h:02}"), ColumnSource::Simulation, raw);
        }
        b.binary(
            "sim_missing",
            ColumnSource::Simulation,
            matched.iter().map(Option::is_none).collect(),
        );
    }

    let n = rows.len();
    let f = b.columns.len();
    let mut x = Array2::zeros((n, f));
    let mut schema = Vec::with_capacity(f);
    for (c, (spec, vals)) in b.columns.into_iter().enumerate() {
        for (r, v) in vals.into_iter().enumerate() {
            x[[r, c]] = v;
        }
        schema.push(spec);
    }
    let out = StaticFeatureMatrix {
        node_ids: rows.iter().map(|r| r.node_id.clone()).collect(),
        x,
        schema,
    };
    out.validate()?;
    Ok(out)
}

/// Removes the simulation columns (the 24 hourly flows and `sim_missing`).
pub fn drop_simulation_columns(x: &StaticFeatureMatrix) -> Result<StaticFeatureMatrix> {
    if x.schema.len() != x.x.ncols() {
        return Err(Error::Shape(format!(
            "schema lists {} columns but matrix has {}",
            x.schema.len(),
            x.x.ncols()
        )));
    }
    let keep: Vec<usize> = x
        .schema
        .iter()
        .enumerate()
        .filter(|(_, c)| c.source != ColumnSource::Simulation)
        .map(|(i, _)| i)
        .collect();
    Ok(StaticFeatureMatrix {
        node_ids: x.node_ids.clone(),
        x: x.x.select(ndarray::Axis(1), &keep),
        schema: keep.iter().map(|&i| x.schema[i].clone()).collect(),
    })
}

/// Reorders rows to follow `node_ids`.
pub fn align_rows(x: &StaticFeatureMatrix, node_ids: &[String]) -> Result<StaticFeatureMatrix> {
    let index: HashMap<&str, usize> = x
        .node_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let rows = node_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Input(format!("no static features for node {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StaticFeatureMatrix {
        node_ids: node_ids.to_vec(),
        x: x.x.select(ndarray::Axis(0), &rows),
        schema: x.schema.clone(),
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "t" => Some(true),
        "false" | "0" | "no" | "f" | "" => Some(false),
        _ => None,
    }
}

fn parse_geometry(s: &str) -> Option<Vec<(f64, f64)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let mut it = p.split_whitespace();
            let lat = it.next()?.parse().ok()?;
            let lon = it.next()?.parse().ok()?;
            it.next().is_none().then_some((lat, lon))
        })
        .collect()
}

fn format_geometry(g: &[(f64, f64)]) -> String {
    g.iter()
        .map(|(lat, lon)| format!("{lat} {lon}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub const ATTRIBUTE_COLUMNS: [&str; 14] = [
    "node_id",
    "lanes",
    "maxspeed",
    "length",
    "oneway",
    "bridge",
    "tunnel",
    "highway_type",
    "land_use",
    "geometry",
    "traffic_signal_count",
    "intersection_count_deg3",
    "hull_area",
    "betweenness",
];

/// Reads the header-driven attribute table. Geometry is `lat lon;lat lon;...`.
pub fn read_attributes_csv(path: &Path) -> Result<Vec<RawSegmentAttributes>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path, format!("missing column {name:?}")))
    };
    let idx: Vec<usize> = ATTRIBUTE_COLUMNS
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            let s = field(i);
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse::<f64>().map_err(|_| {
                Error::parse(
                    path,
                    format!("line {line}: column {}: not a number: {s:?}", ATTRIBUTE_COLUMNS[i]),
                )
            })
        };
        let boolean = |i: usize| -> Result<bool> {
            parse_bool(field(i)).ok_or_else(|| {
                Error::parse(
                    path,
                    format!("line {line}: column {}: not a boolean", ATTRIBUTE_COLUMNS[i]),
                )
            })
        };
        let geometry = parse_geometry(field(9)).ok_or_else(|| {
            Error::parse(path, format!("line {line}: column geometry: malformed"))
        })?;
        rows.push(RawSegmentAttributes {
            node_id: field(0).to_string(),
            lanes: num(1)?,
            maxspeed: num(2)?,
            length: num(3)?,
            oneway: boolean(4)?,
            bridge: boolean(5)?,
            tunnel: boolean(6)?,
            highway_type: field(7).to_string(),
            land_use: field(8).to_string(),
            geometry,
            traffic_signal_count: num(10)?,
            intersection_count_deg3: num(11)?,
            hull_area: num(12)?,
            betweenness: num(13)?,
        });
    }
    Ok(rows)
}

pub fn write_attributes_csv(path: &Path, rows: &[RawSegmentAttributes]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(ATTRIBUTE_COLUMNS)
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        wtr.write_record([
            r.node_id.clone(),
            r.lanes.to_string(),
            r.maxspeed.to_string(),
            r.length.to_string(),
            r.oneway.to_string(),
            r.bridge.to_string(),
            r.tunnel.to_string(),
            r.highway_type.clone(),
            r.land_use.clone(),
            format_geometry(&r.geometry),
            r.traffic_signal_count.to_string(),
            r.intersection_count_deg3.to_string(),
            r.hull_area.to_string(),
            r.betweenness.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads `node_id,hour,flow` rows into one profile per node (first-seen order).
pub fn read_simulation_csv(path: &Path) -> Result<Vec<SimulationProfile>> {
    #[derive(Deserialize)]
    struct Rec {
        node_id: String,
        hour: usize,
        flow: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut table: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    for rec in rdr.deserialize::<Rec>() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.hour >= SIM_HOURS {
            return Err(Error::parse(
                path,
                format!("node {}: hour {} outside 0..24", rec.node_id, rec.hour),
            ));
        }
        let slot = table.entry(rec.node_id.clone()).or_insert_with(|| {
            order.push(rec.node_id.clone());
            vec![None; SIM_HOURS]
        });
        slot[rec.hour] = Some(rec.flow);
    }
    order
        .into_iter()
        .map(|id| {
            let hours = &table[&id];
            let hourly_flow = hours
                .iter()
                .enumerate()
                .map(|(h, v)| {
                    v.ok_or_else(|| Error::parse(path, format!("node {id}: hour {h} missing")))
                })
                .collect::<Result<Vec<_>>>()?;
            let p = SimulationProfile {
                node_id: id,
                hourly_flow,
            };
            p.validate().map_err(|e| Error::parse(path, e.to_string()))?;
            Ok(p)
        })
        .collect()
}

pub fn write_simulation_csv(path: &Path, profiles: &[SimulationProfile]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    wtr.write_record(["node_id", "hour", "flow"])
        .map_err(|e| csv_error(path, e))?;
    for p in profiles {
        for (h, v) in p.hourly_flow.iter().enumerate() {
            wtr.write_record([p.node_id.as_str(), &h.to_string(), &v.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Writes `node_id,<columns...>` plus a JSON schema sidecar at `schema_path`.
pub fn write_feature_matrix(
    path: &Path,
    schema_path: &Path,
    x: &StaticFeatureMatrix,
) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["node_id".to_string()];
    header.extend(x.schema.iter().map(|c| c.name.clone()));
    wtr.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (r, id) in x.node_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(x.x.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    let json = serde_json::to_string_pretty(&x.schema)
        .map_err(|e| Error::parse(schema_path, e.to_string()))?;
    fs::write(schema_path, json).map_err(|e| Error::io(schema_path, e))
}

pub fn read_feature_matrix(path: &Path, schema_path: &Path) -> Result<StaticFeatureMatrix> {
    let text = fs::read_to_string(schema_path).map_err(|e| Error::io(schema_path, e))?;
    let schema: Vec<ColumnSpec> =
        serde_json::from_str(&text).map_err(|e| Error::parse(schema_path, e.to_string()))?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != schema.len() + 1
        || headers.iter().skip(1).zip(&schema).any(|(h, c)| h != c.name)
    {
        return Err(Error::Compat(format!(
            "{}: columns do not match schema {}",
            path.display(),
            schema_path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        ids.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            vals.push(
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("not a number: {v:?}")))?,
            );
        }
    }
    let x = Array2::from_shape_vec((ids.len(), schema.len()), vals)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let m = StaticFeatureMatrix {
        node_ids: ids,
        x,
        schema,
    };
    m.validate()?;
    Ok(m)
}

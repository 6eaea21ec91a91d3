//! Synthetic motorway corridors with heterophilous traffic.
//!
//! Every node follows one network-wide double-peaked daily demand curve, but
//! ramps carry only a fraction of the mainline volume. Speed responds weakly
//! to flow, and a noisy hourly "simulation" of the true rates is emitted as
//! the static simulation feature.

use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_series_csv, SensorSeries};
use crate::error::{Error, Result};
use crate::netgraph::{write_distance_csv, write_nodes_csv, DistanceMatrix, SensorNode};
use crate::staticfeat::{
    write_attributes_csv, write_simulation_csv, RawSegmentAttributes, SimulationProfile, SIM_HOURS,
};

pub const MAINLINE: &str = "motorway";
pub const RAMP: &str = "motorway_link";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_mainline: usize,
    pub n_ramp: usize,
    pub days: usize,
    pub interval_minutes: u32,
    /// Ramp volume relative to the mainline.
    pub ramp_scale: f64,
    /// Mainline free-flow speed, km/h. Ramps run at 60% of it.
    pub free_flow_speed: f64,
    /// Mainline capacity in vehicles per interval.
    pub capacity_rate: f64,
    /// Strength of the speed drop with flow, in [0, 1].
    pub coupling: f64,
    /// Multiplicative noise amplitude on the simulated hourly flows, in [0, 1).
    pub sim_noise: f64,
    /// Mean mainline flow per 15 minutes.
    pub mean_flow: f64,
    /// Standard deviation of the additive speed noise, km/h.
    pub speed_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_mainline: 16,
            n_ramp: 8,
            days: 28,
            interval_minutes: 15,
            ramp_scale: 0.2,
            free_flow_speed: 100.0,
            capacity_rate: 1000.0,
            coupling: 0.45,
            sim_noise: 0.2,
            mean_flow: 468.0,
            speed_noise: 25.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mainline < 1 || self.days < 1 || self.interval_minutes < 1 {
            return Err(Error::Param("counts must be >= 1".into()));
        }
        if 1440 % self.interval_minutes != 0 {
            return Err(Error::Param(format!(
                "interval {} does not divide a day",
                self.interval_minutes
            )));
        }
        if !(self.ramp_scale > 0.0 && self.ramp_scale <= 1.0) {
            return Err(Error::Param("ramp_scale must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Param("coupling must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.sim_noise) {
            return Err(Error::Param("sim_noise must be in [0, 1)".into()));
        }
        if !(self.free_flow_speed > 5.0 && self.capacity_rate > 0.0 && self.mean_flow > 0.0) {
            return Err(Error::Param(
                "free-flow speed, capacity and mean flow must be positive".into(),
            ));
        }
        if !(self.speed_noise >= 0.0) {
            return Err(Error::Param("speed_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthNetwork {
    pub nodes: Vec<SensorNode>,
    pub distances: DistanceMatrix,
    pub attributes: Vec<RawSegmentAttributes>,
    /// Mainline node each ramp hangs off; `None` for mainline nodes.
    pub junction: Vec<Option<usize>>,
}

impl SynthNetwork {
    pub fn is_ramp(&self, i: usize) -> bool {
        self.junction[i].is_some()
    }
}

const BASE_LAT: f64 = 51.2;
const BASE_LON: f64 = 4.4;
const METERS_PER_DEG_LAT: f64 = 111_195.0;

fn to_latlon(east_m: f64, north_m: f64) -> (f64, f64) {
    let lat = BASE_LAT + north_m / METERS_PER_DEG_LAT;
    let lon = BASE_LON + east_m / (METERS_PER_DEG_LAT * BASE_LAT.to_radians().cos());
    (lat, lon)
}

/// A linear mainline with ramps attached at evenly spread junctions.
pub fn generate_network(cfg: &SynthConfig) -> Result<SynthNetwork> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_mainline + cfg.n_ramp;

    let mut position = vec![0.0f64; cfg.n_mainline];
    for i in 1..cfg.n_mainline {
        position[i] = position[i - 1] + rng.random_range(800.0..1400.0);
    }
    let junctions: Vec<usize> = (0..cfg.n_ramp)
        .map(|j| (((j as f64 + 0.5) * cfg.n_mainline as f64 / cfg.n_ramp as f64) as usize)
            .min(cfg.n_mainline - 1))
        .collect();
    let ramp_len: Vec<f64> = (0..cfg.n_ramp).map(|_| rng.random_range(150.0..350.0)).collect();

    // path-sum distance along the corridor; symmetric
    let offset = |i: usize| -> (usize, f64) {
        if i < cfg.n_mainline {
            (i, 0.0)
        } else {
            let r = i - cfg.n_mainline;
            (junctions[r], ramp_len[r])
        }
    };
    let mut distances = DistanceMatrix::unreachable(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ji, li) = offset(i);
            let (jj, lj) = offset(j);
            distances.set(i, j, li + lj + (position[ji] - position[jj]).abs())?;
        }
    }

    let land_uses = ["industrial", "residential", "commercial", "farmland"];
    let mut nodes = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    let mut junction = Vec::with_capacity(n);
    for i in 0..n {
        let ramp = i >= cfg.n_mainline;
        let id = if ramp {
            format!("R{:03}", i - cfg.n_mainline)
        } else {
            format!("M{i:03}")
        };
        let (geometry, length, center) = if ramp {
            let r = i - cfg.n_mainline;
            let x0 = position[junctions[r]];
            // circular arc leaving the mainline; bend sets the curvature
            let bend = rng.random_range(0.6..2.2f64);
            let radius = ramp_len[r] / bend;
            let side = if r % 2 == 0 { 1.0 } else { -1.0 };
            let pts: Vec<(f64, f64)> = (0..=16)
                .map(|k| {
                    let a = bend * k as f64 / 16.0;
                    to_latlon(x0 + radius * a.sin(), side * radius * (1.0 - a.cos()))
                })
                .collect();
            let mid = pts[8];
            (pts, ramp_len[r], mid)
        } else {
            let seg = if i + 1 < cfg.n_mainline {
                position[i + 1] - position[i]
            } else {
                1000.0
            };
            let wiggle = rng.random_range(0.0..0.04) * seg;
            let pts = vec![
                to_latlon(position[i], 0.0),
                to_latlon(position[i] + seg / 2.0, wiggle),
                to_latlon(position[i] + seg, 0.0),
            ];
            (pts, seg, to_latlon(position[i], 0.0))
        };
        nodes.push(SensorNode {
            id: id.clone(),
            latitude: center.0,
            longitude: center.1,
            road_class: if ramp { RAMP } else { MAINLINE }.to_string(),
        });
        attributes.push(RawSegmentAttributes {
            node_id: id,
            lanes: if ramp { 1.0 } else { 3.0 },
            maxspeed: if ramp { 50.0 } else { 120.0 },
            length,
            oneway: true,
            bridge: rng.random_bool(0.1),
            tunnel: rng.random_bool(0.05),
            highway_type: if ramp { RAMP } else { MAINLINE }.to_string(),
            land_use: land_uses[rng.random_range(0..land_uses.len())].to_string(),
            geometry,
            traffic_signal_count: if ramp {
                rng.random_range(0..3) as f64
            } else {
                0.0
            },
            intersection_count_deg3: if ramp {
                rng.random_range(2..7) as f64
            } else {
                rng.random_range(0..4) as f64
            },
            hull_area: rng.random_range(0.6..0.8),
            betweenness: if ramp {
                rng.random_range(0.02..0.15)
            } else {
                rng.random_range(0.3..0.6)
            },
        });
        junction.push(ramp.then(|| junctions[i - cfg.n_mainline]));
    }
    Ok(SynthNetwork {
        nodes,
        distances,
        attributes,
        junction,
    })
}

fn raw_daily_shape(hour: f64) -> f64 {
    let bump = |c: f64, w: f64| (-(hour - c).powi(2) / (2.0 * w * w)).exp();
    0.3 + 1.1 * bump(8.0, 1.3) + 1.0 * bump(17.0, 1.6) + 0.35 * bump(12.5, 2.5)
}

/// Network-wide demand per step of one day, with mean 1.
pub fn daily_profile(interval_minutes: u32) -> Vec<f64> {
    let steps = (1440 / interval_minutes) as usize;
    let raw: Vec<f64> = (0..steps)
        .map(|s| {
            // sample at the middle of the interval
            let hour = (s as f64 + 0.5) * interval_minutes as f64 / 60.0;
            raw_daily_shape(hour)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / steps as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

pub fn start_time() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2022, 1, 3)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTraffic {
    pub series: SensorSeries,
    pub simulation: Vec<SimulationProfile>,
    /// Per-node demand multiplier (nominal scale times jitter).
    pub node_scale: Vec<f64>,
    /// N×T true Poisson rates.
    pub rates: Array2<f64>,
}

pub fn generate_traffic(cfg: &SynthConfig, net: &SynthNetwork) -> Result<SynthTraffic> {
    cfg.validate()?;
    let n = net.nodes.len();
    let steps_day = cfg.steps_per_day();
    let t_len = steps_day * cfg.days;
    let profile = daily_profile(cfg.interval_minutes);
    let mean_per_step = cfg.mean_flow * cfg.interval_minutes as f64 / 15.0;
    let capacity = cfg.capacity_rate * cfg.interval_minutes as f64 / 15.0;
    let start = start_time();

    let mut speed = Array2::zeros((n, t_len));
    let mut flow = Array2::zeros((n, t_len));
    let mut rates = Array2::zeros((n, t_len));
    let mut node_scale = Vec::with_capacity(n);
    let mut simulation = Vec::with_capacity(n);
    let noise = Normal::new(0.0, cfg.speed_noise.max(1e-12)).expect("finite std");

    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7aff_1c00_0000);
        rng.set_stream(i as u64 + 1);
        let nominal = if net.is_ramp(i) { cfg.ramp_scale } else { 1.0 };
        let scale = nominal * (1.0 + 0.1 * rng.random_range(-1.0..1.0));
        let v_free = if net.is_ramp(i) {
            0.6 * cfg.free_flow_speed
        } else {
            cfg.free_flow_speed
        } * (1.0 + 0.05 * rng.random_range(-1.0..1.0));
        let node_capacity = capacity * nominal;
        node_scale.push(scale);

        for t in 0..t_len {
            let lambda = scale * mean_per_step * profile[t % steps_day];
            rates[[i, t]] = lambda;
            flow[[i, t]] = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng)
            } else {
                0.0
            };
            let load = (lambda / node_capacity).min(1.0);
            let v = v_free * (1.0 - cfg.coupling * load * load)
                + if cfg.speed_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            speed[[i, t]] = v.clamp(5.0 + 1e-6, v_free);
        }

        let per_hour = 60.0 / cfg.interval_minutes as f64;
        let mut hourly = vec![0.0; SIM_HOURS];
        let mut counts = vec![0usize; SIM_HOURS];
        for s in 0..steps_day {
            let hour = (start + chrono::Duration::minutes(s as i64 * cfg.interval_minutes as i64))
                .hour() as usize;
            hourly[hour] += rates[[i, s]];
            counts[hour] += 1;
        }
        let hourly_flow = hourly
            .iter()
            .zip(&counts)
            .map(|(sum, &c)| {
                let rate = sum / c as f64 * per_hour;
                let u: f64 = if cfg.sim_noise > 0.0 {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                };
                rate * (1.0 + cfg.sim_noise * u)
            })
            .collect();
        simulation.push(SimulationProfile {
            node_id: net.nodes[i].id.clone(),
            hourly_flow,
        });
    }

    let series = SensorSeries {
        node_ids: net.nodes.iter().map(|n| n.id.clone()).collect(),
        start,
        interval_minutes: cfg.interval_minutes,
        speed,
        speed_missing: Array2::from_elem((n, t_len), false),
        flow,
        flow_missing: Array2::from_elem((n, t_len), false),
    };
    Ok(SynthTraffic {
        series,
        simulation,
        node_scale,
        rates,
    })
}

/// Everything needed to run the offline pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub network: SynthNetwork,
    pub traffic: SynthTraffic,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    let network = generate_network(cfg)?;
    let traffic = generate_traffic(cfg, &network)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        network,
        traffic,
    })
}

pub const NODES_FILE: &str = "nodes.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const SIMULATION_FILE: &str = "simulation.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

impl SynthDataset {
    /// Writes the node, distance, attribute, simulation and series CSVs.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_nodes_csv(&dir.join(NODES_FILE), &self.network.nodes)?;
        write_distance_csv(
            &dir.join(DISTANCES_FILE),
            &self.network.nodes,
            &self.network.distances,
        )?;
        write_attributes_csv(&dir.join(ATTRIBUTES_FILE), &self.network.attributes)?;
        write_simulation_csv(&dir.join(SIMULATION_FILE), &self.traffic.simulation)?;
        write_series_csv(&dir.join(SERIES_FILE), &self.traffic.series)?;
        let cfg_path = dir.join(SYNTH_CONFIG_FILE);
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::parse(&cfg_path, e.to_string()))?;
        fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{median, pearson, pearson_speed_flow};
    use crate::netgraph::build_adjacency;

    fn small(days: usize) -> SynthConfig {
        SynthConfig {
            n_mainline: 6,
            n_ramp: 3,
            days,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn smallest_corridor() {
        let cfg = SynthConfig {
            n_mainline: 2,
            n_ramp: 0,
            ..small(1)
        };
        let net = generate_network(&cfg).unwrap();
        assert_eq!(net.nodes.len(), 2);
        let d01 = net.distances.get(0, 1).unwrap();
        assert_eq!(Some(d01), net.distances.get(1, 0));
        assert!(d01 >= 800.0 && d01 < 1400.0);
    }

    #[test]
    fn ramps_are_top1_neighbours_of_their_junction() {
        let cfg = SynthConfig::default();
        let net = generate_network(&cfg).unwrap();
        let a = build_adjacency(&net.distances, 1, None).unwrap();
        for i in 0..net.nodes.len() {
            if let Some(j) = net.junction[i] {
                assert!(a.w[[i, j]] > 0.0, "ramp {i} not attached to {j}");
            }
        }
        assert_eq!(net.attributes[0].highway_type, MAINLINE);
        assert_eq!(net.attributes[cfg.n_mainline].highway_type, RAMP);
        assert_eq!(net.attributes[0].lanes, 3.0);
        assert_eq!(net.attributes[cfg.n_mainline].maxspeed, 50.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(2)).unwrap();
        let b = generate(&small(2)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 8, ..small(2) }).unwrap();
        assert_ne!(a.traffic.series.flow, c.traffic.series.flow);
    }

    #[test]
    fn values_are_physical() {
        let cfg = small(2);
        let d = generate(&cfg).unwrap();
        let s = &d.traffic.series;
        assert!(s.flow.iter().all(|&f| f >= 0.0 && f.fract() == 0.0));
        assert!(s.speed.iter().all(|&v| v > 0.0 && v <= cfg.free_flow_speed * 1.05));
    }

    #[test]
    fn uncoupled_speed_is_uncorrelated_with_flow() {
        let cfg = SynthConfig {
            coupling: 0.0,
            ..small(28)
        };
        let d = generate(&cfg).unwrap();
        for r in pearson_speed_flow(&d.traffic.series) {
            assert!(r.unwrap().abs() < 0.05, "{r:?}");
        }
    }

    #[test]
    fn ramp_to_mainline_volume_ratio() {
        let cfg = SynthConfig::default();
        let d = generate(&cfg).unwrap();
        let s = &d.traffic.series;
        let mean_of = |ramp: bool| {
            let rows: Vec<usize> = (0..s.n()).filter(|&i| d.network.is_ramp(i) == ramp).collect();
            rows.iter().map(|&i| s.flow.row(i).mean().unwrap()).sum::<f64>() / rows.len() as f64
        };
        let ratio = mean_of(true) / mean_of(false);
        assert!((ratio - 0.2).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn calibration_targets() {
        let cfg = SynthConfig::default();
        let d = generate(&cfg).unwrap();
        let s = &d.traffic.series;
        let mainline: Vec<usize> = (0..cfg.n_mainline).collect();
        let flow = mainline.iter().map(|&i| s.flow.row(i).mean().unwrap()).sum::<f64>()
            / mainline.len() as f64;
        let speed = mainline.iter().map(|&i| s.speed.row(i).mean().unwrap()).sum::<f64>()
            / mainline.len() as f64;
        assert!((flow / 468.0 - 1.0).abs() < 0.05, "mean flow {flow}");
        assert!((speed - 81.0).abs() < 4.0, "mean speed {speed}");

        let mut r: Vec<f64> = pearson_speed_flow(s).into_iter().flatten().collect();
        let med = median(&mut r).unwrap();
        assert!((-0.6..=-0.2).contains(&med), "median r {med}");
    }

    #[test]
    fn trend_homophily_with_scale_heterophily() {
        let d = generate(&SynthConfig::default()).unwrap();
        let s = &d.traffic.series;
        let steps_day = d.config.steps_per_day();
        let per_hour = steps_day / 24;
        let hourly = |i: usize| -> Vec<f64> {
            (0..24)
                .map(|h| {
                    let mut sum = 0.0;
                    for day in 0..d.config.days {
                        for k in 0..per_hour {
                            sum += s.flow[[i, day * steps_day + h * per_hour + k]];
                        }
                    }
                    sum
                })
                .collect()
        };
        let profiles: Vec<Vec<f64>> = (0..s.n()).map(hourly).collect();
        for i in 0..s.n() {
            for j in 0..i {
                assert!(pearson(&profiles[i], &profiles[j]).unwrap() > 0.9);
            }
        }
    }

    #[test]
    fn noiseless_simulation_equals_hourly_rates() {
        let cfg = SynthConfig {
            sim_noise: 0.0,
            ..small(1)
        };
        let d = generate(&cfg).unwrap();
        let per_hour = cfg.steps_per_day() / 24;
        for (i, p) in d.traffic.simulation.iter().enumerate() {
            for h in 0..24 {
                let exact: f64 = (0..per_hour).map(|k| d.traffic.rates[[i, h * per_hour + k]]).sum();
                assert!((p.hourly_flow[h] - exact).abs() < 1e-9 * exact.max(1.0));
            }
        }
    }

    #[test]
    fn writes_pipeline_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&small(1)).unwrap();
        d.write_to_dir(dir.path()).unwrap();
        let nodes = crate::netgraph::read_nodes_csv(&dir.path().join(NODES_FILE)).unwrap();
        assert_eq!(nodes, d.network.nodes);
        let dist = crate::netgraph::read_distance_csv(&dir.path().join(DISTANCES_FILE), &nodes).unwrap();
        assert_eq!(dist, d.network.distances);
        let series =
            crate::dataio::read_series_csv(&dir.path().join(SERIES_FILE), Some(&d.traffic.series.node_ids))
                .unwrap();
        assert_eq!(series, d.traffic.series);
    }
}

//! Generate a synthetic motorway corridor and look at its traffic.
//!
//!     cargo run --release --example synthetic_corridor -- [days] [seed]

use hint::metrics::{median, pearson_speed_flow};
use hint::synth::{generate, SynthConfig};

fn main() -> hint::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let days = args.next().map_or(7, |s| s.parse().expect("days"));
    let seed = args.next().map_or(7, |s| s.parse().expect("seed"));
    let cfg = SynthConfig { days, seed, ..Default::default() };
    let ds = generate(&cfg)?;
    let series = &ds.traffic.series;
    println!("{} nodes, {} steps of {} min from {}", series.n(), series.t(), series.interval_minutes, series.start);

    let mean_flow = |rows: &mut dyn Iterator<Item = usize>| {
        let rows: Vec<usize> = rows.collect();
        rows.iter().map(|&i| series.flow.row(i).mean().unwrap()).sum::<f64>() / rows.len() as f64
    };
    let mainline = mean_flow(&mut (0..series.n()).filter(|&i| !ds.network.is_ramp(i)));
    let ramps = mean_flow(&mut (0..series.n()).filter(|&i| ds.network.is_ramp(i)));
    println!("mean flow per interval: mainline {mainline:.1}, ramps {ramps:.1} (ratio {:.3})", ramps / mainline);

    let mut r: Vec<f64> = pearson_speed_flow(series).into_iter().flatten().collect();
    println!("median speed-flow Pearson r: {:.3}", median(&mut r).unwrap_or(f64::NAN));

    let mainline_speed = (0..series.n())
        .filter(|&i| !ds.network.is_ramp(i))
        .map(|i| series.speed.row(i).mean().unwrap())
        .sum::<f64>()
        / cfg.n_mainline as f64;
    println!("mean mainline speed: {mainline_speed:.1} km/h");

    let out = std::env::temp_dir().join("hint_synthetic_corridor");
    ds.write_to_dir(&out)?;
    println!("tables written to {}", out.display());
    Ok(())
}

//! Encode segment attributes and simulated hourly flows into the static feature matrix.
//!
//!     cargo run --release --example static_features

use hint::staticfeat::{drop_simulation_columns, encode_attributes, ColumnSource};
use hint::synth::{generate, SynthConfig};

fn main() -> hint::error::Result<()> {
    let ds = generate(&SynthConfig { n_mainline: 4, n_ramp: 2, days: 2, ..Default::default() })?;
    let x = encode_attributes(&ds.network.attributes, Some(&ds.traffic.simulation))?;
    println!("{} nodes x {} columns, schema hash {}", x.n(), x.f(), x.schema_hash());
    for (j, col) in x.schema.iter().enumerate().filter(|(_, c)| c.source == ColumnSource::Map) {
        let values: Vec<String> = x.x.column(j).iter().map(|v| format!("{v:.2}")).collect();
        println!("  {:<28} {:?}  {}", col.name, col.kind, values.join(" "));
    }
    let sim = x.schema.iter().filter(|c| c.source == ColumnSource::Simulation).count();
    println!("  ... plus {sim} simulation columns");

    let without = drop_simulation_columns(&x)?;
    println!("without simulation: {} columns, schema hash {}", without.f(), without.schema_hash());
    Ok(())
}

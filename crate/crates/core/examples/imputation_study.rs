//! The full desk-scale study: 16 mainline and 8 ramp sensors over 28 days,
//! 20% of sensors held out, trained with and without the simulation feature.
//! Takes a few minutes per run on one core.
//!
//!     cargo run --release --example imputation_study -- [seed]

use std::time::Instant;

use hint::model::ModelConfig;
use hint::study::{Baseline, Study, StudyConfig};
use hint::synth::{generate, SynthConfig};
use hint::trainer::{NoHooks, TrainConfig};

fn main() -> hint::error::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let ds = generate(&SynthConfig::default())?;
    for with_simulation in [true, false] {
        let study = Study::from_synth(&ds, &StudyConfig { seed, with_simulation, ..Default::default() })?;
        if with_simulation {
            for m in [Baseline::Knn { k: 3 }, Baseline::Mean] {
                let r = study.evaluate(&study.baseline_predictions(m)?, &m.label())?;
                println!("{:<16} MAE {:>7.2}  SMAPE {:>6.2}%", r.label, r.mae, r.smape);
            }
        }
        let start = Instant::now();
        let cfg = TrainConfig { seed, ..Default::default() };
        let out = study.train(&ModelConfig::default(), &cfg, &mut NoHooks)?;
        let meta = out.manifest.checkpoint_meta(&study.holdout);
        let label = if with_simulation { "hint" } else { "hint_no_sim" };
        let r = study.evaluate(&study.hint_predictions(&out.model, &meta, cfg.batch_size)?, label)?;
        println!(
            "{:<16} MAE {:>7.2}  SMAPE {:>6.2}%  ({} epochs, best {}, {:.0}s)",
            r.label,
            r.mae,
            r.smape,
            out.manifest.epochs.len(),
            out.manifest.best_epoch,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

//! Save a trained model, load it back and impute flow on unseen sensors.
//!
//!     cargo run --release --example checkpoint_impute

use hint::model::{load_checkpoint, save_checkpoint, ModelConfig};
use hint::study::{Study, StudyConfig};
use hint::synth::{generate, SynthConfig};
use hint::trainer::{impute, NoHooks, Precision, TrainConfig};

fn main() -> hint::error::Result<()> {
    let ds = generate(&SynthConfig { n_mainline: 5, n_ramp: 2, days: 4, ..Default::default() })?;
    let study = Study::from_synth(&ds, &StudyConfig { holdout_ratio: 0.3, ..Default::default() })?;
    let cfg = TrainConfig { max_epochs: 3, window_length: 48, ..Default::default() };
    let out = study.train(&ModelConfig { hidden_dim: 16, gru_hidden: 16, ..Default::default() }, &cfg, &mut NoHooks)?;

    let path = std::env::temp_dir().join("hint_example.ckpt");
    save_checkpoint(&path, &out.model, &out.manifest.checkpoint_meta(&study.holdout))?;
    let (model, meta) = load_checkpoint(&path, Precision::F32.dtype())?;
    println!("loaded {} (epoch {}, config {})", path.display(), meta.epoch, meta.config_hash);

    let est = impute(&model, &meta, &study.test, &study.features, &study.adjacency, &meta.holdout.indices, 4, &mut NoHooks)?;
    for (row, &v) in meta.holdout.indices.iter().enumerate() {
        let shown: Vec<String> = (0..6).map(|t| format!("{:.0}/{:.0}", est[[row, t]], study.test.flow[[v, t]])).collect();
        println!("  {:>5} estimate/observed: {}", meta.node_ids[v], shown.join("  "));
    }
    Ok(())
}

//! Train on a small corridor and compare with the kNN and network-mean baselines.
//!
//!     cargo run --release --example train_and_compare -- [epochs]

use hint::model::ModelConfig;
use hint::study::{Baseline, Study, StudyConfig};
use hint::synth::{generate, SynthConfig};
use hint::trainer::{EpochRecord, TrainConfig, TrainHooks};

struct Log;

impl TrainHooks for Log {
    fn on_epoch(&mut self, r: &EpochRecord) {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  hold-out MAE {:>7.2}  |S| {} |R| {}",
            r.epoch, r.train_loss, r.val_loss, r.val_mae, r.n_visible, r.n_reconstruction
        );
    }
}

fn main() -> hint::error::Result<()> {
    let epochs = std::env::args().nth(1).map_or(15, |s| s.parse().expect("epochs"));
    let ds = generate(&SynthConfig { n_mainline: 8, n_ramp: 4, days: 10, ..Default::default() })?;
    let study = Study::from_synth(&ds, &StudyConfig::default())?;
    let model = ModelConfig { hidden_dim: 32, gru_hidden: 32, ..Default::default() };
    let cfg = TrainConfig { max_epochs: epochs, ..Default::default() };
    let out = study.train(&model, &cfg, &mut Log)?;

    let meta = out.manifest.checkpoint_meta(&study.holdout);
    let hint = study.evaluate(&study.hint_predictions(&out.model, &meta, cfg.batch_size)?, "hint")?;
    let knn = study.evaluate(&study.baseline_predictions(Baseline::Knn { k: 3 })?, "knn_k3")?;
    let mean = study.evaluate(&study.baseline_predictions(Baseline::Mean)?, "mean")?;
    println!("\ntest segment, hold-out nodes {:?}", study.holdout_ids());
    for r in [&hint, &knn, &mean] {
        println!("  {:<7} MAE {:>7.2}  RMSE {:>7.2}  SMAPE {:>6.2}%", r.label, r.mae, r.rmse, r.smape);
    }
    Ok(())
}

//! One epoch of the mixed training strategy: visibility ratio, hard-node
//! mining, masks and the Poisson corruption of visible inputs.
//!
//!     cargo run --release --example epoch_plan

use hint::dataio::{select_holdout, Channel, ChannelStats, Normalizer};
use hint::trainer::{inject_poisson_noise, mining_probabilities, plan_epoch, TrainConfig};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hint::error::Result<()> {
    let cfg = TrainConfig::default();
    let holdout = select_holdout(12, 0.2, 0)?;
    println!("hold-out nodes {:?}, training nodes {:?}", holdout.indices, holdout.training_nodes());

    let difficulties = [0.9, 0.1, 0.1, 0.1, 0.5, 0.1, 0.1, 0.1, 0.1, 0.3];
    let p = mining_probabilities(&difficulties, cfg.tau)?;
    let shown: Vec<String> = p.iter().map(|x| format!("{x:.3}")).collect();
    println!("first-draw probabilities at tau {}: {}", cfg.tau, shown.join(" "));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for epoch in [0, 5, 10, 30] {
        let plan = plan_epoch(epoch, &cfg, &holdout, &difficulties, &mut rng)?;
        println!(
            "epoch {epoch:>2}: r {:.2}  visible {:?}  reconstruct {:?}  alpha {:.2}  delta {:.2}",
            plan.visibility_ratio, plan.visible, plan.reconstruction, plan.alpha, plan.delta
        );
    }

    let norm = Normalizer {
        speed: ChannelStats { mean: 80.0, std: 15.0 },
        flow: ChannelStats { mean: 400.0, std: 150.0 },
        fit_source: "example".into(),
    };
    let clean = Array3::from_elem((1, 1, 8), norm.normalize(400.0, Channel::Flow));
    let mut noisy = clean.clone();
    inject_poisson_noise(&mut noisy, &Array3::from_elem((1, 1, 8), true), &[0], cfg.sigma, 1.0, &norm, &mut rng)?;
    let shown: Vec<String> = noisy.iter().map(|&x| format!("{:.0}", norm.denormalize(x, Channel::Flow))).collect();
    println!("flow 400 as seen by the model in the first epoch: {}", shown.join(" "));
    Ok(())
}

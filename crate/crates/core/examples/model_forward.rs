//! Build a model and inspect one forward pass: shapes, attention, branch
//! fusion weights and the node calibration.
//!
//!     cargo run --release --example model_forward

use candle_core::DType;
use hint::dataio::{window, FLOW};
use hint::model::{tensor_to_vec, GraphOperators, HintModel, Mode, ModelConfig, ModelInputs, ParamGroup, array_to_tensor};
use hint::study::{Study, StudyConfig};
use hint::synth::{generate, SynthConfig};

fn main() -> hint::error::Result<()> {
    let ds = generate(&SynthConfig { n_mainline: 6, n_ramp: 3, days: 3, ..Default::default() })?;
    let study = Study::from_synth(&ds, &StudyConfig::default())?;
    let model = HintModel::new(ModelConfig::default(), study.features.f(), DType::F32, 0)?;
    println!("{} parameters", model.params().num_scalars());
    for g in ParamGroup::ALL {
        let n: usize = model.params().in_group(g).map(|p| p.var.elem_count()).sum();
        println!("  {:<16} {n}", g.name());
    }

    let batch = &window(&study.train, &study.normalizer, 96, 96, 2)?[0];
    let mut x = batch.x.clone();
    for &v in &study.holdout.indices {
        x.index_axis_mut(ndarray::Axis(1), v).index_axis_mut(ndarray::Axis(2), FLOW).fill(0.0);
    }
    let graph = GraphOperators::new(&study.adjacency, model.config().diffusion_steps, model.dtype(), model.device())?;
    let inputs = ModelInputs {
        dynamic: array_to_tensor(&x, model.dtype(), model.device())?,
        time: array_to_tensor(&batch.time, model.dtype(), model.device())?,
        static_x: model.static_tensor(&study.features.x)?,
        graph: &graph,
    };
    let out = model.forward(&inputs, Mode::Eval)?;
    println!("prediction {:?}, attention {:?}", out.y.dims(), out.attention[0].dims());

    let w = tensor_to_vec(&out.fusion_weights)?;
    let transformer_share = w.iter().step_by(2).sum::<f64>() / (w.len() / 2) as f64;
    println!("mean fusion weight on the transformer branch: {transformer_share:.3}");
    let gamma = tensor_to_vec(&out.node_gamma)?;
    println!("node calibration scale at init: {:?}", &gamma[..3]);
    let gap = tensor_to_vec(&(&out.y - &out.y_base)?)?.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max |y - y_base| at init: {gap:.1e}");
    Ok(())
}

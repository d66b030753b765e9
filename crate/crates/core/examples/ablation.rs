//! Adversarial distractors copy steps the question already covers. This
//! compares Obj-1 against Obj-2 and constrained pooling against the
//! unconstrained row maximum on that data.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use latent_align::alignment::PoolingMode;
use latent_align::data::Split;
use latent_align::model::{Model, ModelSettings};
use latent_align::objectives::{ObjectiveConfig, ObjectiveKind};
use latent_align::synth::{generate_synthetic, DistractorMode, SynthConfig};
use latent_align::training::{evaluate, train, SgdConfig, TrainOptions, TrainState};

fn main() -> latent_align::Result<()> {
    let data = SynthConfig {
        distractor_mode: DistractorMode::Adversarial,
        ..SynthConfig::default()
    };
    let train_set = generate_synthetic(&SynthConfig {
        num_examples: 300,
        seed: 30,
        ..data.clone()
    })?;
    let test_set = generate_synthetic(&SynthConfig {
        split: Split::Test,
        num_examples: 200,
        seed: 31,
        ..data
    })?;

    for (kind, pooling) in [
        (ObjectiveKind::Obj1, PoolingMode::Constrained),
        (ObjectiveKind::Obj2, PoolingMode::Constrained),
        (ObjectiveKind::Obj1, PoolingMode::RowMax),
    ] {
        let options = TrainOptions {
            objective: ObjectiveConfig { kind, margin: 0.1 },
            sgd: SgdConfig::default(),
            pooling,
        };
        let mut model = Model::for_dataset(ModelSettings::default(), &train_set, 2)?;
        let mut state = TrainState::new(model.params(), 2);
        train(&mut model, &train_set, &options, &mut state)?;
        let report = evaluate(&model, &test_set, pooling)?;
        println!("{kind} with {pooling:<11} pooling: {}", report.summary());
    }
    Ok(())
}

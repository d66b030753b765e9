//! Trains the text-only model on easy synthetic data with the two-phase
//! momentum schedule, then checkpoints, reloads and resumes.
//!
//! ```text
//! cargo run --release --example train
//! ```

use latent_align::alignment::PoolingMode;
use latent_align::checkpoint::{load_checkpoint, save_checkpoint};
use latent_align::data::Split;
use latent_align::model::{Model, ModelSettings};
use latent_align::objectives::ObjectiveConfig;
use latent_align::synth::{generate_synthetic, SynthConfig};
use latent_align::training::{evaluate, train, train_epochs, SgdConfig, TrainOptions, TrainState};

fn main() -> latent_align::Result<()> {
    let data = SynthConfig::default();
    let train_set = generate_synthetic(&SynthConfig {
        num_examples: 500,
        seed: 10,
        ..data.clone()
    })?;
    let test_set = generate_synthetic(&SynthConfig {
        split: Split::Test,
        num_examples: 200,
        seed: 11,
        ..data
    })?;

    // wider than the defaults; at 32 the easy task stalls around 0.6
    let settings = ModelSettings {
        embed_dim: 64,
        hidden_dim: 64,
        question_hidden_dim: 64,
        ..ModelSettings::default()
    };
    let options = TrainOptions {
        objective: ObjectiveConfig::default(),
        sgd: SgdConfig::default(),
        pooling: PoolingMode::Constrained,
    };
    let mut model = Model::for_dataset(settings.clone(), &train_set, 0)?;
    println!("{} parameters", model.params().num_values());
    println!(
        "before training: {}",
        evaluate(&model, &test_set, options.pooling)?.summary()
    );

    let mut state = TrainState::new(model.params(), 0);
    for record in train(&mut model, &train_set, &options, &mut state)? {
        if record.epoch % 5 == 4 {
            println!(
                "epoch {:>2}  lr {:<4}  mean loss {:.4}",
                record.epoch, record.lr, record.mean_loss
            );
        }
    }
    let report = evaluate(&model, &test_set, options.pooling)?;
    println!("after training:  {}", report.summary());

    let path = std::env::temp_dir().join("latent-align-train-example.ckpt");
    save_checkpoint(&path, &model, Some(&state), None)?;
    let restored = load_checkpoint(&path)?;
    let again = evaluate(&restored.model, &test_set, options.pooling)?;
    println!("reloaded from {}: identical report {}", path.display(), again == report);

    // Stopping after 10 epochs and resuming from the checkpoint gives the
    // same model as training straight through.
    let mut first = Model::for_dataset(settings, &train_set, 0)?;
    let mut first_state = TrainState::new(first.params(), 0);
    train_epochs(&mut first, &train_set, &options, &mut first_state, 10)?;
    save_checkpoint(&path, &first, Some(&first_state), None)?;
    let resumed = load_checkpoint(&path)?;
    let (mut second, mut second_state) = (resumed.model, resumed.state.expect("state was saved"));
    train(&mut second, &train_set, &options, &mut second_state)?;
    println!("resumed run matches: {}", second.params() == model.params());
    Ok(())
}

//! Steps whose text is blanked out and whose identity lives only in
//! their image features. The text-only model cannot beat chance; the
//! fusion modes can, given enough examples. All three read the
//! generator's token table as frozen embeddings.
//!
//! ```text
//! cargo run --release --example multimodal
//! ```

use latent_align::alignment::PoolingMode;
use latent_align::crossmodal::FusionMode;
use latent_align::data::Split;
use latent_align::model::{EmbeddingSource, Model, ModelSettings};
use latent_align::objectives::ObjectiveConfig;
use latent_align::synth::{generate_synthetic, SynthConfig};
use latent_align::training::{evaluate, train, SgdConfig, TrainOptions, TrainState};

fn main() -> latent_align::Result<()> {
    let data = SynthConfig {
        with_images: true,
        text_signal: false,
        emit_token_vectors: true,
        ..SynthConfig::default()
    };
    let train_set = generate_synthetic(&SynthConfig {
        num_examples: 1500,
        seed: 20,
        ..data.clone()
    })?;
    let test_set = generate_synthetic(&SynthConfig {
        split: Split::Test,
        num_examples: 200,
        seed: 21,
        ..data
    })?;
    let data_dim = train_set.feature_dim.expect("generated with images");
    let step = &train_set.examples[0].steps[0];
    println!(
        "a step: tokens {:?}, {} images of dimension {}",
        step.tokens,
        step.images().len(),
        step.images()[0].len()
    );

    let options = TrainOptions {
        objective: ObjectiveConfig::default(),
        // a quarter of the default rates keeps the attention block stable
        sgd: SgdConfig {
            lr_first_half: 0.1,
            lr_second_half: 0.02,
            ..SgdConfig::default()
        },
        pooling: PoolingMode::Constrained,
    };
    for fusion in [FusionMode::None, FusionMode::Concat, FusionMode::Lxmert] {
        let settings = ModelSettings {
            fusion,
            embed_dim: data_dim,
            embedding_source: EmbeddingSource::Dataset,
            ..ModelSettings::default()
        };
        let mut model = Model::for_dataset(settings, &train_set, 1)?;
        let mut state = TrainState::new(model.params(), 1);
        train(&mut model, &train_set, &options, &mut state)?;
        let report = evaluate(&model, &test_set, options.pooling)?;
        println!("fusion {fusion:<6} {}", report.summary());
    }
    Ok(())
}

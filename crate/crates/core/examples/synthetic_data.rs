//! Generates easy and adversarial cloze data, looks at one example,
//! round-trips it through a file and scores the question-only baseline.
//!
//! ```text
//! cargo run --example synthetic_data
//! ```

use latent_align::data::{load_dataset, validate_example, ClozeExample};
use latent_align::synth::{generate_synthetic, DistractorMode, SynthConfig};
use latent_align::training::hasty_baseline;

fn describe(ex: &ClozeExample) {
    println!("example {}", ex.id);
    for (j, step) in ex.steps.iter().enumerate() {
        println!("  step {j}: {:?}", step.tokens);
    }
    for item in &ex.question_items {
        println!("  question item at position {}: {:?}", item.position, item.tokens);
    }
    println!("  placeholder at position {}", ex.placeholder_position);
    for (c, cand) in ex.candidates.iter().enumerate() {
        let mark = if c == ex.answer { "  <- answer" } else { "" };
        println!("  candidate {c}: {cand:?}{mark}");
    }
}

fn main() -> latent_align::Result<()> {
    let easy = generate_synthetic(&SynthConfig {
        num_examples: 400,
        seed: 1,
        ..SynthConfig::default()
    })?;
    describe(&easy.examples[0]);

    let adversarial = generate_synthetic(&SynthConfig {
        num_examples: 400,
        seed: 1,
        distractor_mode: DistractorMode::Adversarial,
        ..SynthConfig::default()
    })?;
    println!();
    describe(&adversarial.examples[0]);

    let dir = std::env::temp_dir().join("latent-align-example");
    std::fs::create_dir_all(&dir).map_err(|e| latent_align::Error::InvalidArgument(e.to_string()))?;
    let path = dir.join("easy.json");
    easy.save(&path)?;
    let back = load_dataset(&path)?;
    println!(
        "\nwrote and reloaded {} ({} examples, identical: {})",
        path.display(),
        back.len(),
        back == easy
    );

    // Hand-made damage is reported field by field.
    let mut broken = easy.examples[0].clone();
    broken.candidates.push(vec![1]);
    broken.question_items[1].position = broken.question_items[0].position;
    for violation in validate_example(&broken, easy.vocab_size) {
        println!("violation: {violation}");
    }

    // Easy distractors share nothing with the question, so the
    // question-only baseline is stuck at chance there.
    println!(
        "\nquestion-overlap baseline, easy:        {}",
        hasty_baseline(&easy).summary()
    );
    println!(
        "question-overlap baseline, adversarial: {}",
        hasty_baseline(&adversarial).summary()
    );
    Ok(())
}

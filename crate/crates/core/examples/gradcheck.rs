//! Finite-difference checks: first on a two-line function, then through
//! the whole model for every fusion mode and objective.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use latent_align::cli::check_model_gradients;
use latent_align::config::RunConfig;
use latent_align::crossmodal::FusionMode;
use latent_align::gradcheck::grad_check;
use latent_align::objectives::ObjectiveKind;
use latent_align::Tensor;

fn main() -> latent_align::Result<()> {
    // f(w, x) = sum(tanh(w x)) for a 2x3 matrix w and a 3x1 column x
    let mut params = vec![
        Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?,
        Tensor::matrix(3, 1, vec![1.0, -0.5, 0.25])?,
    ];
    let report = grad_check(
        |g, v| {
            let wx = g.matmul(v[0], v[1])?;
            let t = g.tanh(wx)?;
            g.sum(t)
        },
        &mut params,
        1e-5,
    )?;
    println!(
        "tanh(w x): {} entries, max relative error {:.1e}",
        report.entries_checked, report.max_relative_error
    );

    for fusion in [FusionMode::None, FusionMode::Concat, FusionMode::Lxmert] {
        for kind in [ObjectiveKind::Obj1, ObjectiveKind::Obj2] {
            let mut config = RunConfig::default();
            config.model.fusion = fusion;
            config.objective.kind = kind;
            let check = check_model_gradients(&config, false)?;
            for (seed, why) in &check.skipped {
                println!("  seed {seed} skipped: {why}");
            }
            println!(
                "model, fusion {fusion:<6} {kind}: {:>4} entries, max relative error {:.1e}",
                check.report.entries_checked, check.report.max_relative_error
            );
        }
    }
    Ok(())
}

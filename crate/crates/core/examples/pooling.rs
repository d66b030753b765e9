//! Constrained max-pooling, its row-wise ablation and the exhaustive
//! optimum on two small similarity matrices.
//!
//! ```text
//! cargo run --example pooling
//! ```

use latent_align::alignment::{constrained_max_pool, optimal_assignment, row_max_pool, SimilarityMatrix};
use latent_align::objectives::predict;

fn show(title: &str, s: &SimilarityMatrix) -> latent_align::Result<()> {
    println!("== {title}");
    for c in 0..4 {
        let row: Vec<String> = s.row(c).iter().map(|v| format!("{v:5.2}")).collect();
        println!("  candidate {c}: {}", row.join(" "));
    }

    let greedy = constrained_max_pool(s)?;
    println!(
        "  constrained: steps {:?}, scores {:?}, picked in order {:?}",
        greedy.assignments, greedy.selected, greedy.pick_order
    );
    println!("    predicted answer {}", predict(&greedy).predicted);

    let free = row_max_pool(s)?;
    println!(
        "  row max:     steps {:?}, scores {:?}",
        free.assignments, free.selected
    );
    println!("    predicted answer {}", predict(&free).predicted);

    let (best, total) = optimal_assignment(s)?;
    let greedy_total: f64 = greedy.selected.iter().sum();
    println!("  optimum:     steps {best:?}, total {total:.2} (greedy total {greedy_total:.2})");
    Ok(())
}

fn main() -> latent_align::Result<()> {
    // Candidate 1 would like step 0 as well, but candidate 0 claims it
    // first and 1 has to settle for its second choice.
    let crowded = SimilarityMatrix::from_rows(&[
        [0.9, 0.2, 0.1, 0.0],
        [0.8, 0.7, 0.3, 0.1],
        [0.5, 0.6, 0.4, 0.2],
        [0.3, 0.2, 0.1, 0.05],
    ])?;
    show("one popular step", &crowded)?;

    // Greedy takes 0.9 and leaves candidate 1 with 0.1; giving 0.8 and
    // 0.85 to candidates 0 and 1 would be better overall.
    let trap = SimilarityMatrix::from_rows(&[
        [0.9, 0.8, 0.1, 0.1],
        [0.85, 0.1, 0.1, 0.1],
        [0.1, 0.1, 0.7, 0.1],
        [0.1, 0.1, 0.1, 0.6],
    ])?;
    show("greedy is not optimal", &trap)?;

    let ties = SimilarityMatrix::from_rows(&[[0.5; 5]; 4])?;
    show("all ties (lowest candidate, then lowest step)", &ties)
}

//! The two training objectives on hand-checkable matrices, with the
//! gradient each one sends back into the similarity matrix.
//!
//! ```text
//! cargo run --example objectives
//! ```

use latent_align::alignment::{constrained_max_pool, SimilarityMatrix};
use latent_align::objectives::{loss_obj1, loss_obj2};
use latent_align::Graph;

fn report(name: &str, s: &SimilarityMatrix, answer: usize, wrong: Option<usize>) -> latent_align::Result<()> {
    let align = constrained_max_pool(s)?;
    let mut g = Graph::new();
    let scores = g.param(s.tensor().clone());
    let loss = match wrong {
        Some(r) => loss_obj1(&mut g, scores, s, &align, answer, r, 0.1)?,
        None => loss_obj2(&mut g, scores, s, &align, answer, 0.1)?,
    };
    g.backward(loss)?;
    println!("{name}: loss {:.4}", g.value(loss).item());
    println!(
        "  aligned steps {:?}, pooled scores {:?}",
        align.assignments, align.selected
    );
    let grad = g.grad(scores).expect("scores are a parameter");
    for (c, row) in grad.chunks(s.num_steps()).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.1}")).collect();
        println!("  dL/dS[{c}] {}", cells.join(" "));
    }
    Ok(())
}

fn main() -> latent_align::Result<()> {
    let settled = SimilarityMatrix::from_rows(&[
        [0.9, 0.2, 0.1, 0.0],
        [0.8, 0.7, 0.3, 0.1],
        [0.5, 0.6, 0.4, 0.2],
        [0.3, 0.2, 0.1, 0.05],
    ])?;
    let displaced = SimilarityMatrix::from_rows(&[
        [0.5, 0.2, 0.1, 0.0],
        [0.8, 0.7, 0.3, 0.1],
        [0.45, 0.6, 0.4, 0.2],
        [0.3, 0.2, 0.1, 0.05],
    ])?;

    // Obj-1 compares the answer with one sampled wrong candidate and with
    // every other candidate's score on the answer's own step.
    report("obj1, answer 0 already wins", &settled, 0, Some(1))?;
    report("obj1, answer 0 pushed to a poor step", &displaced, 0, Some(1))?;

    // Obj-2 pulls the answer towards 1 and every other pooled score
    // below the margin.
    report("obj2, answer 0", &settled, 0, None)
}

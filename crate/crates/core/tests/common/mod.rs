#![allow(dead_code)]

use latent_align::alignment::SimilarityMatrix;

/// One greedy step as traced by hand: the chosen (candidate, step) pair
/// and its score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceStep {
    pub candidate: usize,
    pub step: usize,
    pub score: f64,
}

/// Straightforward re-derivation of constrained max-pooling: scan every
/// free (candidate, step) cell row by row, keep the first strict
/// maximum, retire that row and column, repeat four times.
pub fn greedy_trace_oracle(s: &SimilarityMatrix) -> Vec<TraceStep> {
    let n = s.num_steps();
    let mut row_used = [false; 4];
    let mut col_used = vec![false; n];
    let mut trace = Vec::new();
    for _ in 0..4 {
        let mut best: Option<TraceStep> = None;
        for c in 0..4 {
            if row_used[c] {
                continue;
            }
            for j in 0..n {
                if col_used[j] {
                    continue;
                }
                let v = s.get(c, j);
                if best.map_or(true, |b| v > b.score) {
                    best = Some(TraceStep {
                        candidate: c,
                        step: j,
                        score: v,
                    });
                }
            }
        }
        let b = best.expect("4 <= N leaves a free cell");
        row_used[b.candidate] = true;
        col_used[b.step] = true;
        trace.push(b);
    }
    trace
}

/// `(assignments, m, pick_order)` read off an oracle trace.
pub fn oracle_alignment(s: &SimilarityMatrix) -> ([usize; 4], [f64; 4], [usize; 4]) {
    let trace = greedy_trace_oracle(s);
    let mut assignments = [0; 4];
    let mut m = [0.0; 4];
    let mut order = [0; 4];
    for (k, t) in trace.iter().enumerate() {
        assignments[t.candidate] = t.step;
        m[t.candidate] = t.score;
        order[k] = t.candidate;
    }
    (assignments, m, order)
}

/// Best total over all injective maps by brute force.
pub fn brute_force_optimum(s: &SimilarityMatrix) -> f64 {
    fn go(s: &SimilarityMatrix, c: usize, used: &mut Vec<bool>) -> f64 {
        if c == 4 {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(s.get(c, j) + go(s, c + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(s, 0, &mut vec![false; s.num_steps()])
}

/// Two-sided 95% normal-approximation interval for a binomial rate.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

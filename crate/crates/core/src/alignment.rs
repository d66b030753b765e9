//! Candidate-to-step similarity and disjoint alignment.
//!
//! The similarity matrix has one row per candidate answer and one column
//! per procedure step. [`constrained_max_pool`] repeatedly takes the
//! largest remaining entry and deletes its row and column, so every
//! candidate ends up on a different step. [`row_max_pool`] is the
//! unconstrained variant that simply takes each row's maximum.
//!
//! Ties are broken by lowest row index, then lowest column index.

use serde::{Deserialize, Serialize};

use crate::encoders::MlpParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Session;
use crate::tensor::Tensor;

pub const NUM_CANDIDATES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Constrained,
    RowMax,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constrained" => Ok(PoolingMode::Constrained),
            "row_max" => Ok(PoolingMode::RowMax),
            other => Err(Error::InvalidArgument(format!(
                "unknown pooling mode `{other}` (expected constrained or row_max)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            PoolingMode::Constrained => "constrained",
            PoolingMode::RowMax => "row_max",
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two plain vectors.
pub fn cosine_values(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::operand("cosine", "zero-norm input"));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Differentiable cosine similarity of two vector nodes, as a `[1]` node.
pub fn cosine(g: &mut Graph, u: Var, v: Var) -> Result<Var> {
    cosine_values(g.value(u).data(), g.value(v).data())?;
    let uv = g.dot(u, v)?;
    let uu = g.dot(u, u)?;
    let vv = g.dot(v, v)?;
    let nu = g.sqrt(uu)?;
    let nv = g.sqrt(vv)?;
    let denom = g.mul(nu, nv)?;
    g.div(uv, denom)
}

/// Pairwise cosine similarity between the rows of `left` (`R x d`) and the
/// rows of `right` (`N x d`), as an `R x N` node.
pub fn cosine_matrix(g: &mut Graph, left: Var, right: Var) -> Result<Var> {
    let (lr, ld) = g
        .value(left)
        .dims2()
        .ok_or_else(|| Error::operand("cosine", "left operand must be a matrix"))?;
    let (rr, rd) = g
        .value(right)
        .dims2()
        .ok_or_else(|| Error::operand("cosine", "right operand must be a matrix"))?;
    if ld != rd {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            lhs: vec![lr, ld],
            rhs: vec![rr, rd],
        });
    }
    for (side, v, rows) in [("candidate", left, lr), ("step", right, rr)] {
        for r in 0..rows {
            if norm(g.value(v).row(r)) == 0.0 {
                return Err(Error::operand(
                    "cosine",
                    format!("{side} representation {r} has zero norm"),
                ));
            }
        }
    }
    let right_t = g.transpose(right)?;
    let dots = g.matmul(left, right_t)?;
    let ones = g.constant(Tensor::filled([ld, 1], 1.0));
    let row_norms = |g: &mut Graph, m: Var| -> Result<Var> {
        let sq = g.mul(m, m)?;
        let sums = g.matmul(sq, ones)?;
        g.sqrt(sums)
    };
    let ln = row_norms(g, left)?;
    let rn = row_norms(g, right)?;
    let rn_t = g.transpose(rn)?;
    let denom = g.matmul(ln, rn_t)?;
    g.div(dots, denom)
}

/// Candidate-by-step cosine scores (values only; the graph keeps the
/// differentiable copy).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor) -> Result<Self> {
        match scores.dims2() {
            Some((NUM_CANDIDATES, n)) if n >= 1 => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "similarity matrix must be {NUM_CANDIDATES} x N with N >= 1, got {:?}",
                    scores.shape()
                )))
            }
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite("similarity matrix entry".into()));
        }
        Ok(SimilarityMatrix {
            scores: scores.with_requires_grad(false),
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        SimilarityMatrix::new(Tensor::from_rows(rows)?)
    }

    pub fn num_steps(&self) -> usize {
        self.scores.dims2().unwrap().1
    }

    pub fn get(&self, candidate: usize, step: usize) -> f64 {
        self.scores.at(candidate, step)
    }

    pub fn row(&self, candidate: usize) -> &[f64] {
        self.scores.row(candidate)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }
}

/// `S[i][j] = cosine(candidate_i, projection(step_j ++ question))`.
///
/// Returns the differentiable matrix node and its values.
pub fn build_similarity_matrix(
    s: &mut Session,
    candidate_reps: &[Var],
    step_reps: &[Var],
    question_rep: Var,
    projection: &MlpParams,
) -> Result<(Var, SimilarityMatrix)> {
    if candidate_reps.len() != NUM_CANDIDATES {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_CANDIDATES} candidate representations, got {}",
            candidate_reps.len()
        )));
    }
    if step_reps.is_empty() {
        return Err(Error::InvalidArgument("no step representations".into()));
    }
    let conditioned = step_reps
        .iter()
        .map(|&step| s.graph.concat(&[step, question_rep]))
        .collect::<Result<Vec<_>>>()?;
    let steps = s.graph.concat_rows(&conditioned)?;
    let projected = projection.project(s, steps)?;
    let candidates = s.graph.concat_rows(candidate_reps)?;
    let scores = cosine_matrix(s.graph, candidates, projected)?;
    let matrix = SimilarityMatrix::new(s.graph.value(scores).clone())?;
    Ok((scores, matrix))
}

/// Per-candidate step choice and selected score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Step index chosen for each candidate.
    pub assignments: [usize; NUM_CANDIDATES],
    /// `selected[c] == S[c][assignments[c]]`
    pub selected: [f64; NUM_CANDIDATES],
    /// Candidates in the order they were fixed.
    pub pick_order: [usize; NUM_CANDIDATES],
    /// Smallest gap between a chosen entry and the best competitor at the
    /// moment it was chosen. Zero means an exact tie decided the result.
    pub decision_margin: f64,
}

impl AlignmentResult {
    pub fn is_disjoint(&self) -> bool {
        let a = &self.assignments;
        (0..NUM_CANDIDATES).all(|i| (i + 1..NUM_CANDIDATES).all(|j| a[i] != a[j]))
    }

    /// Checks that this result reads its scores out of `s`.
    pub fn check_against(&self, s: &SimilarityMatrix) -> Result<()> {
        for c in 0..NUM_CANDIDATES {
            let step = self.assignments[c];
            if step >= s.num_steps() || s.get(c, step) != self.selected[c] {
                return Err(Error::InvalidArgument(format!(
                    "alignment does not match similarity matrix at candidate {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Greedy disjoint alignment: four rounds of "take the global maximum of
/// the remaining rows and columns, then delete its row and column".
pub fn constrained_max_pool(s: &SimilarityMatrix) -> Result<AlignmentResult> {
    let n = s.num_steps();
    if n < NUM_CANDIDATES {
        return Err(Error::InvalidArgument(format!(
            "constrained pooling needs at least {NUM_CANDIDATES} steps, got N = {n}"
        )));
    }
    let mut row_free = [true; NUM_CANDIDATES];
    let mut col_free = vec![true; n];
    let mut assignments = [0; NUM_CANDIDATES];
    let mut selected = [0.0; NUM_CANDIDATES];
    let mut pick_order = [0; NUM_CANDIDATES];
    let mut margin = f64::INFINITY;

    for pick in pick_order.iter_mut() {
        let mut best: Option<(usize, usize, f64)> = None;
        let mut runner_up = f64::NEG_INFINITY;
        for (r, _) in row_free.iter().enumerate().filter(|(_, &free)| free) {
            for (c, _) in col_free.iter().enumerate().filter(|(_, &free)| free) {
                let v = s.get(r, c);
                match best {
                    Some((_, _, b)) if v <= b => runner_up = runner_up.max(v),
                    Some((_, _, b)) => {
                        runner_up = runner_up.max(b);
                        best = Some((r, c, v));
                    }
                    None => best = Some((r, c, v)),
                }
            }
        }
        let (r, c, v) = best.expect("free rows and columns remain");
        margin = margin.min(v - runner_up);
        row_free[r] = false;
        col_free[c] = false;
        assignments[r] = c;
        selected[r] = v;
        *pick = r;
    }

    Ok(AlignmentResult {
        assignments,
        selected,
        pick_order,
        decision_margin: margin,
    })
}

/// Each candidate takes its own row maximum; steps may repeat.
/// `pick_order` lists candidates by descending score.
pub fn row_max_pool(s: &SimilarityMatrix) -> Result<AlignmentResult> {
    let mut assignments = [0; NUM_CANDIDATES];
    let mut selected = [0.0; NUM_CANDIDATES];
    let mut margin = f64::INFINITY;
    for c in 0..NUM_CANDIDATES {
        let row = s.row(c);
        let (mut best, mut runner_up) = (0, f64::NEG_INFINITY);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                runner_up = runner_up.max(row[best]);
                best = j;
            } else {
                runner_up = runner_up.max(v);
            }
        }
        assignments[c] = best;
        selected[c] = row[best];
        margin = margin.min(row[best] - runner_up);
    }
    Ok(AlignmentResult {
        assignments,
        selected,
        pick_order: rank_descending(&selected),
        decision_margin: margin,
    })
}

pub fn pool(s: &SimilarityMatrix, mode: PoolingMode) -> Result<AlignmentResult> {
    match mode {
        PoolingMode::Constrained => constrained_max_pool(s),
        PoolingMode::RowMax => row_max_pool(s),
    }
}

/// Indices sorted by descending value; equal values keep index order.
pub(crate) fn rank_descending(values: &[f64; NUM_CANDIDATES]) -> [usize; NUM_CANDIDATES] {
    let mut order = [0, 1, 2, 3];
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Largest-total injective assignment by exhaustive search. Diagnostics
/// only; the greedy pooling is what the model trains through.
pub fn optimal_assignment(s: &SimilarityMatrix) -> Result<([usize; NUM_CANDIDATES], f64)> {
    let n = s.num_steps();
    if n < NUM_CANDIDATES {
        return Err(Error::InvalidArgument(format!(
            "assignment needs at least {NUM_CANDIDATES} steps, got N = {n}"
        )));
    }
    if n > 16 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive assignment is limited to N <= 16, got N = {n}"
        )));
    }
    let mut best = ([0; NUM_CANDIDATES], f64::NEG_INFINITY);
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            for c in (0..n).filter(|&c| c != a && c != b) {
                for d in (0..n).filter(|&d| d != a && d != b && d != c) {
                    let total = s.get(0, a) + s.get(1, b) + s.get(2, c) + s.get(3, d);
                    if total > best.1 {
                        best = ([a, b, c, d], total);
                    }
                }
            }
        }
    }
    Ok(best)
}

//! Hinge objectives on the similarity matrix and the answer readout.
//!
//! Both losses read scores at the step indices fixed by pooling; the
//! indices themselves carry no gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{rank_descending, AlignmentResult, SimilarityMatrix, NUM_CANDIDATES};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Margin between the answer and one sampled wrong candidate, plus
    /// margins against every other candidate on the answer's step.
    #[default]
    Obj1,
    /// Pull the answer's score to 1 and push the other selected scores
    /// under the threshold.
    Obj2,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            ObjectiveKind::Obj1 => "obj1",
            ObjectiveKind::Obj2 => "obj2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Hinge margin for obj1 and score threshold for obj2.
    pub margin: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Obj1,
            margin: 0.1,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "objective.margin must be > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

fn check_inputs(g: &Graph, scores: Var, s: &SimilarityMatrix, align: &AlignmentResult) -> Result<()> {
    if g.value(scores).shape() != s.tensor().shape() || g.value(scores).data() != s.tensor().data() {
        return Err(Error::InvalidArgument(
            "score node does not hold the given similarity matrix".into(),
        ));
    }
    align.check_against(s)
}

fn check_candidate(name: &str, c: usize) -> Result<()> {
    if c >= NUM_CANDIDATES {
        return Err(Error::InvalidArgument(format!(
            "{name} index {c} out of range [0, {NUM_CANDIDATES})"
        )));
    }
    Ok(())
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let stacked = g.concat(terms)?;
    g.sum(stacked)
}

/// `max(0, S[r,i_r] - S[a,i_a] + m) + Σ_{c≠a} max(0, S[c,i_a] - S[a,i_a] + m)`
///
/// The second sum reads raw entries of the answer's column, not the
/// pooled scores.
pub fn loss_obj1(
    g: &mut Graph,
    scores: Var,
    s: &SimilarityMatrix,
    align: &AlignmentResult,
    answer: usize,
    wrong: usize,
    margin: f64,
) -> Result<Var> {
    check_candidate("answer", answer)?;
    check_candidate("wrong candidate", wrong)?;
    if wrong == answer {
        return Err(Error::InvalidArgument(format!(
            "wrong candidate must differ from the answer ({answer})"
        )));
    }
    check_inputs(g, scores, s, align)?;

    let answer_step = align.assignments[answer];
    let s_answer = g.entry(scores, answer, answer_step)?;
    let s_wrong = g.entry(scores, wrong, align.assignments[wrong])?;

    let mut terms = Vec::with_capacity(NUM_CANDIDATES);
    let diff = g.sub(s_wrong, s_answer)?;
    let shifted = g.add_scalar(diff, margin)?;
    terms.push(g.relu(shifted)?);
    for c in (0..NUM_CANDIDATES).filter(|&c| c != answer) {
        let s_c = g.entry(scores, c, answer_step)?;
        let diff = g.sub(s_c, s_answer)?;
        let shifted = g.add_scalar(diff, margin)?;
        terms.push(g.relu(shifted)?);
    }
    sum_all(g, &terms)
}

/// `(1 - S[a,i_a]) + Σ_{c≠a} max(0, S[c,i_c] - m)`
pub fn loss_obj2(
    g: &mut Graph,
    scores: Var,
    s: &SimilarityMatrix,
    align: &AlignmentResult,
    answer: usize,
    margin: f64,
) -> Result<Var> {
    check_candidate("answer", answer)?;
    check_inputs(g, scores, s, align)?;

    let s_answer = g.entry(scores, answer, align.assignments[answer])?;
    let neg = g.scalar_mul(s_answer, -1.0)?;
    let mut terms = vec![g.add_scalar(neg, 1.0)?];
    for c in (0..NUM_CANDIDATES).filter(|&c| c != answer) {
        let s_c = g.entry(scores, c, align.assignments[c])?;
        let shifted = g.add_scalar(s_c, -margin)?;
        terms.push(g.relu(shifted)?);
    }
    sum_all(g, &terms)
}

/// Uniform draw from the three candidates other than `answer`.
pub fn sample_wrong_candidate<R: Rng + ?Sized>(answer: usize, rng: &mut R) -> usize {
    let k = rng.random_range(0..NUM_CANDIDATES - 1);
    if k >= answer {
        k + 1
    } else {
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: usize,
    /// Candidates by descending selected score, ties to the lower index.
    pub ranking: [usize; NUM_CANDIDATES],
}

/// Reads the answer off the pooled scores: the candidate whose aligned
/// step scores highest.
pub fn predict(align: &AlignmentResult) -> Prediction {
    let ranking = rank_descending(&align.selected);
    Prediction {
        predicted: ranking[0],
        ranking,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::constrained_max_pool;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[[f64; 4]]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows).unwrap()
    }

    fn first() -> SimilarityMatrix {
        matrix(&[
            [0.9, 0.2, 0.1, 0.0],
            [0.8, 0.7, 0.3, 0.1],
            [0.5, 0.6, 0.4, 0.2],
            [0.3, 0.2, 0.1, 0.05],
        ])
    }

    fn third() -> SimilarityMatrix {
        matrix(&[
            [0.5, 0.2, 0.1, 0.0],
            [0.8, 0.7, 0.3, 0.1],
            [0.45, 0.6, 0.4, 0.2],
            [0.3, 0.2, 0.1, 0.05],
        ])
    }

    fn obj1(s: &SimilarityMatrix, a: usize, r: usize) -> (f64, Vec<f64>) {
        let align = constrained_max_pool(s).unwrap();
        let mut g = Graph::new();
        let v = g.param(s.tensor().clone());
        let l = loss_obj1(&mut g, v, s, &align, a, r, 0.1).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item(), g.grad(v).unwrap().to_vec())
    }

    fn obj2(s: &SimilarityMatrix, a: usize) -> (f64, Vec<f64>) {
        let align = constrained_max_pool(s).unwrap();
        let mut g = Graph::new();
        let v = g.param(s.tensor().clone());
        let l = loss_obj2(&mut g, v, s, &align, a, 0.1).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item(), g.grad(v).unwrap().to_vec())
    }

    #[test]
    fn obj1_first_example_is_zero() {
        let (loss, _) = obj1(&first(), 0, 1);
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn obj1_third_example() {
        let s = third();
        let align = constrained_max_pool(&s).unwrap();
        assert_eq!(align.assignments, [2, 0, 1, 3]);
        assert_eq!(align.selected, [0.1, 0.8, 0.6, 0.05]);
        let (loss, grad) = obj1(&s, 0, 1);
        assert!((loss - 1.6).abs() < 1e-12, "{loss}");
        // entries outside row 0 / column 2 / S[1,0] carry no gradient
        for r in 0..4 {
            for c in 0..4 {
                let referenced = (r == 0 && c == 2) || c == 2 || (r == 1 && c == 0);
                if !referenced {
                    assert_eq!(grad[r * 4 + c], 0.0, "({r},{c})");
                }
            }
        }
        // S[0,2] appears in all four active hinges
        assert_eq!(grad[2], -4.0);
    }

    #[test]
    fn obj1_rejects_r_equal_a() {
        let s = first();
        let align = constrained_max_pool(&s).unwrap();
        let mut g = Graph::new();
        let v = g.param(s.tensor().clone());
        assert!(loss_obj1(&mut g, v, &s, &align, 2, 2, 0.1).is_err());
    }

    #[test]
    fn mismatched_alignment_is_rejected() {
        let s = first();
        let mut align = constrained_max_pool(&s).unwrap();
        align.selected[3] += 0.5;
        let mut g = Graph::new();
        let v = g.param(s.tensor().clone());
        assert!(loss_obj1(&mut g, v, &s, &align, 0, 1, 0.1).is_err());
        assert!(loss_obj2(&mut g, v, &s, &align, 0, 0.1).is_err());
        let other = g.param(third().tensor().clone());
        let align = constrained_max_pool(&s).unwrap();
        assert!(loss_obj2(&mut g, other, &s, &align, 0, 0.1).is_err());
    }

    #[test]
    fn obj1_boundary_behaviour() {
        // answer 0 at step 0 beats its column and r's selected score by exactly 0.1 + a bit
        let clear = matrix(&[
            [0.9, 0.0, 0.0, 0.0],
            [0.7, 0.75, 0.0, 0.0],
            [0.7, 0.0, 0.6, 0.0],
            [0.7, 0.0, 0.0, 0.5],
        ]);
        assert_eq!(obj1(&clear, 0, 1).0, 0.0);
        let violated = matrix(&[
            [0.9, 0.0, 0.0, 0.0],
            [0.7, 0.85, 0.0, 0.0],
            [0.7, 0.0, 0.6, 0.0],
            [0.7, 0.0, 0.0, 0.5],
        ]);
        let (loss, _) = obj1(&violated, 0, 1);
        assert!((loss - 0.05).abs() < 1e-12);
        let column_violated = matrix(&[
            [0.9, 0.0, 0.0, 0.0],
            [0.85, 0.1, 0.0, 0.0],
            [0.7, 0.0, 0.6, 0.0],
            [0.7, 0.0, 0.0, 0.5],
        ]);
        let (loss, _) = obj1(&column_violated, 0, 2);
        assert!((loss - 0.05).abs() < 1e-12);
    }

    #[test]
    fn obj2_examples() {
        let (loss, grad) = obj2(&first(), 0);
        assert!((loss - 1.0).abs() < 1e-12, "{loss}");
        // referenced: diagonal (the greedy picks); S[3,3] below threshold
        let expected_nonzero = [(0, 0, -1.0), (1, 1, 1.0), (2, 2, 1.0)];
        for r in 0..4 {
            for c in 0..4 {
                let want = expected_nonzero
                    .iter()
                    .find(|(rr, cc, _)| *rr == r && *cc == c)
                    .map_or(0.0, |t| t.2);
                assert_eq!(grad[r * 4 + c], want, "({r},{c})");
            }
        }

        let perfect = SimilarityMatrix::new(Tensor::identity(4)).unwrap();
        let mut scaled = perfect.tensor().clone();
        for c in 1..4 {
            scaled.data_mut()[c * 4 + c] = 0.1;
        }
        let perfect = SimilarityMatrix::new(scaled).unwrap();
        assert_eq!(obj2(&perfect, 0).0, 0.0);

        let flat = SimilarityMatrix::new(Tensor::filled([4, 4], 0.1)).unwrap();
        assert!((obj2(&flat, 2).0 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn wrong_candidate_sampling_is_uniform_and_excludes_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let r = sample_wrong_candidate(0, &mut rng);
            counts[r] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let f = c as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        for a in 0..4 {
            for _ in 0..200 {
                assert_ne!(sample_wrong_candidate(a, &mut rng), a);
            }
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_wrong_candidate(1, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn prediction_examples() {
        let with = |selected: [f64; 4]| AlignmentResult {
            assignments: [0, 1, 2, 3],
            selected,
            pick_order: [0, 1, 2, 3],
            decision_margin: 0.0,
        };
        let p = predict(&with([0.9, 0.7, 0.4, 0.05]));
        assert_eq!((p.predicted, p.ranking), (0, [0, 1, 2, 3]));
        let p = predict(&with([0.1, 0.8, 0.6, 0.05]));
        assert_eq!((p.predicted, p.ranking), (1, [1, 2, 0, 3]));
        let p = predict(&with([0.3; 4]));
        assert_eq!((p.predicted, p.ranking), (0, [0, 1, 2, 3]));
    }
}

//! Seeded generator of solvable procedural cloze datasets.
//!
//! Every step of a generated recipe owns a private set of signature
//! tokens. Four steps are chosen as the cloze slots (in recipe order);
//! three of them become question items and the gold candidate is a
//! subset of the step in the placeholder slot. Token id 0 is reserved as
//! filler and never used as a signature token.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::NUM_CANDIDATES;
use crate::data::{ClozeExample, Dataset, QuestionItem, Split, Step, MIN_STEPS};
use crate::encoders::MAX_POSITIONS;
use crate::error::{Error, Result};

pub const FILLER_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorMode {
    /// Wrong candidates use tokens that appear in no step.
    #[default]
    Easy,
    /// Wrong candidates are subsets of steps already covered by the
    /// question, so they do match a step, just an occupied one.
    Adversarial,
}

impl std::str::FromStr for DistractorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(DistractorMode::Easy),
            "adversarial" => Ok(DistractorMode::Adversarial),
            other => Err(Error::InvalidArgument(format!("unknown distractor mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub split: Split,
    pub num_examples: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub vocab_size: usize,
    pub tokens_per_step: usize,
    /// Tokens per question item and per candidate.
    pub subset_size: usize,
    pub distractor_mode: DistractorMode,
    pub with_images: bool,
    pub images_per_step: usize,
    pub feature_dim: usize,
    /// Standard deviation of the noise added to each image feature
    /// coordinate. Token vectors have coordinates of scale `1/sqrt(feature_dim)`.
    pub image_noise: f64,
    /// When false, step text is replaced by filler tokens and the steps
    /// can only be told apart through their images.
    pub text_signal: bool,
    /// Seeds the token-to-feature table. Keep it equal across splits so
    /// that train and test images share one visual vocabulary.
    pub feature_seed: u64,
    /// Also store that table as the dataset's `token_vectors`, so a model
    /// reading its embeddings from the dataset sees tokens in the space
    /// the images were built in.
    pub emit_token_vectors: bool,
    /// Not part of the file form: run configurations supply their single
    /// top-level seed here.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            split: Split::Train,
            num_examples: 100,
            min_steps: 4,
            max_steps: 6,
            vocab_size: 40,
            tokens_per_step: 3,
            subset_size: 3,
            distractor_mode: DistractorMode::Easy,
            with_images: false,
            images_per_step: 2,
            feature_dim: 64,
            image_noise: 0.1,
            text_signal: true,
            feature_seed: 0,
            emit_token_vectors: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.min_steps < MIN_STEPS {
            return fail(format!(
                "min_steps must be at least {MIN_STEPS} for disjoint alignment, got {}",
                self.min_steps
            ));
        }
        if self.max_steps < self.min_steps {
            return fail(format!(
                "max_steps ({}) is below min_steps ({})",
                self.max_steps, self.min_steps
            ));
        }
        if self.tokens_per_step == 0 || self.subset_size == 0 || self.subset_size > self.tokens_per_step {
            return fail(format!(
                "need 1 <= subset_size ({}) <= tokens_per_step ({})",
                self.subset_size, self.tokens_per_step
            ));
        }
        let needed = 1 + self.max_steps * self.tokens_per_step + (NUM_CANDIDATES - 1) * self.subset_size;
        if self.vocab_size < needed {
            return fail(format!(
                "vocab_size {} too small, these settings need at least {needed}",
                self.vocab_size
            ));
        }
        if self.with_images && (self.images_per_step == 0 || self.feature_dim == 0) {
            return fail("images_per_step and feature_dim must be positive when with_images is set".into());
        }
        if self.emit_token_vectors && self.feature_dim == 0 {
            return fail("feature_dim must be positive when emit_token_vectors is set".into());
        }
        if !self.text_signal && !self.with_images {
            return fail("text_signal = false leaves no signal without images".into());
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return fail(format!("image_noise must be finite and >= 0, got {}", self.image_noise));
        }
        Ok(())
    }
}

/// Fixed random feature vector for every token id, with coordinates of
/// variance `1 / feature_dim` so that each vector has roughly unit norm.
pub fn visual_vocabulary(vocab_size: usize, feature_dim: usize, feature_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
    let scale = 1.0 / (feature_dim as f64).sqrt();
    (0..vocab_size)
        .map(|_| {
            (0..feature_dim)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect()
}

/// `size` tokens of `tokens`, kept in their original order.
fn subset<R: Rng>(tokens: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    let mut picks = index::sample(rng, tokens.len(), size).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| tokens[i]).collect()
}

fn image_features<R: Rng>(
    signature: &[usize],
    visual: &[Vec<f64>],
    config: &SynthConfig,
    noise: &Normal<f64>,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..config.images_per_step)
        .map(|_| {
            let mut f = vec![0.0; config.feature_dim];
            for &t in signature {
                f.iter_mut().zip(&visual[t]).for_each(|(a, b)| *a += b);
            }
            f.iter_mut().for_each(|v| *v += noise.sample(rng));
            f
        })
        .collect()
}

fn generate_example<R: Rng>(
    id: String,
    config: &SynthConfig,
    visual: Option<&[Vec<f64>]>,
    noise: &Normal<f64>,
    rng: &mut R,
) -> ClozeExample {
    let n_steps = rng.random_range(config.min_steps..=config.max_steps);
    let t = config.tokens_per_step;

    let mut pool: Vec<usize> = (1..config.vocab_size).collect();
    pool.shuffle(rng);
    let signatures: Vec<Vec<usize>> = pool[..n_steps * t].chunks(t).map(<[usize]>::to_vec).collect();
    let unused = &pool[n_steps * t..];

    let steps = signatures
        .iter()
        .map(|sig| Step {
            tokens: if config.text_signal {
                sig.clone()
            } else {
                vec![FILLER_TOKEN; t]
            },
            image_features: visual.map(|v| image_features(sig, v, config, noise, rng)),
        })
        .collect();

    let mut slots = index::sample(rng, n_steps, MAX_POSITIONS).into_vec();
    slots.sort_unstable();
    let placeholder = rng.random_range(0..MAX_POSITIONS);

    let asked: Vec<usize> = (0..MAX_POSITIONS).filter(|&p| p != placeholder).collect();
    let question_items = asked
        .iter()
        .map(|&p| QuestionItem {
            tokens: subset(&signatures[slots[p]], config.subset_size, rng),
            position: p,
        })
        .collect();

    let gold = subset(&signatures[slots[placeholder]], config.subset_size, rng);
    let wrong: Vec<Vec<usize>> = match config.distractor_mode {
        DistractorMode::Easy => {
            let picks = subset(unused, (NUM_CANDIDATES - 1) * config.subset_size, rng);
            picks.chunks(config.subset_size).map(<[usize]>::to_vec).collect()
        }
        DistractorMode::Adversarial => (0..NUM_CANDIDATES - 1)
            .map(|_| {
                let p = asked[rng.random_range(0..asked.len())];
                subset(&signatures[slots[p]], config.subset_size, rng)
            })
            .collect(),
    };

    let answer = rng.random_range(0..NUM_CANDIDATES);
    let mut candidates = wrong;
    candidates.insert(answer, gold);

    ClozeExample {
        id,
        steps,
        question_items,
        placeholder_position: placeholder,
        candidates,
        answer,
    }
}

/// Builds a dataset as a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let table = (config.with_images || config.emit_token_vectors)
        .then(|| visual_vocabulary(config.vocab_size, config.feature_dim, config.feature_seed));
    let visual = table.as_deref().filter(|_| config.with_images);
    let noise = Normal::new(0.0, config.image_noise).map_err(|e| Error::Config(format!("image_noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let examples = (0..config.num_examples)
        .map(|i| {
            let id = format!("{}-{i:05}", config.split);
            generate_example(id, config, visual, &noise, &mut rng)
        })
        .collect();
    Ok(Dataset {
        split: config.split,
        vocab_size: config.vocab_size,
        feature_dim: config.with_images.then_some(config.feature_dim),
        examples,
        token_vectors: table.filter(|_| config.emit_token_vectors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn config(mode: DistractorMode) -> SynthConfig {
        SynthConfig {
            num_examples: 100,
            min_steps: 4,
            max_steps: 8,
            distractor_mode: mode,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    fn overlap(a: &[usize], b: &[usize]) -> usize {
        let b: HashSet<_> = b.iter().collect();
        a.iter().filter(|t| b.contains(t)).count()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&config(DistractorMode::Easy)).unwrap();
        let b = generate_synthetic(&config(DistractorMode::Easy)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let mut other = config(DistractorMode::Easy);
        other.seed = 8;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn generated_data_is_valid() {
        for mode in [DistractorMode::Easy, DistractorMode::Adversarial] {
            let mut c = config(mode);
            c.with_images = true;
            c.feature_dim = 8;
            let ds = generate_synthetic(&c).unwrap();
            ds.validate().unwrap();
            assert_eq!(ds.len(), 100);
            assert_eq!(ds.feature_dim, Some(8));
        }
    }

    #[test]
    fn easy_gold_matches_one_step_and_wrong_match_none() {
        let ds = generate_synthetic(&config(DistractorMode::Easy)).unwrap();
        for ex in &ds.examples {
            for (c, cand) in ex.candidates.iter().enumerate() {
                let hits = ex.steps.iter().filter(|s| overlap(cand, &s.tokens) > 0).count();
                assert_eq!(hits, usize::from(c == ex.answer), "{}", ex.id);
            }
        }
    }

    #[test]
    fn adversarial_wrong_candidates_hit_questioned_steps() {
        let ds = generate_synthetic(&config(DistractorMode::Adversarial)).unwrap();
        for ex in &ds.examples {
            let questioned: Vec<usize> = ex
                .steps
                .iter()
                .enumerate()
                .filter(|(_, s)| ex.question_items.iter().any(|q| overlap(&q.tokens, &s.tokens) > 0))
                .map(|(i, _)| i)
                .collect();
            assert_eq!(questioned.len(), 3);
            for (c, cand) in ex.candidates.iter().enumerate() {
                if c == ex.answer {
                    assert!(questioned.iter().all(|&i| overlap(cand, &ex.steps[i].tokens) == 0));
                } else {
                    assert!(questioned.iter().any(|&i| overlap(cand, &ex.steps[i].tokens) > 0));
                }
            }
        }
    }

    #[test]
    fn question_positions_follow_step_order() {
        let ds = generate_synthetic(&config(DistractorMode::Easy)).unwrap();
        for ex in &ds.examples {
            let step_of = |tokens: &[usize]| ex.steps.iter().position(|s| overlap(tokens, &s.tokens) > 0).unwrap();
            let mut slots: Vec<(usize, usize)> = ex
                .question_items
                .iter()
                .map(|q| (q.position, step_of(&q.tokens)))
                .collect();
            slots.push((ex.placeholder_position, step_of(&ex.candidates[ex.answer])));
            slots.sort_unstable();
            assert!(slots.windows(2).all(|w| w[0].1 < w[1].1), "{}", ex.id);
        }
    }

    #[test]
    fn overlap_oracle_solves_easy_mode() {
        let ds = generate_synthetic(&config(DistractorMode::Easy)).unwrap();
        for ex in &ds.examples {
            let best = (0..NUM_CANDIDATES)
                .max_by_key(|&c| ex.steps.iter().map(|s| overlap(&ex.candidates[c], &s.tokens)).max())
                .unwrap();
            assert_eq!(best, ex.answer);
        }
    }

    #[test]
    fn image_only_signal_hides_text() {
        let c = SynthConfig {
            with_images: true,
            text_signal: false,
            feature_dim: 16,
            image_noise: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&c).unwrap();
        let visual = visual_vocabulary(c.vocab_size, 16, c.feature_seed);
        for ex in &ds.examples {
            assert!(ex.steps.iter().all(|s| s.tokens.iter().all(|&t| t == FILLER_TOKEN)));
            // noise-free features are exact token sums, so the gold's
            // step contains its tokens' vectors
            let gold = &ex.candidates[ex.answer];
            let hit = ex.steps.iter().filter(|s| {
                let f = &s.images()[0];
                let g: Vec<f64> = (0..16).map(|j| gold.iter().map(|&t| visual[t][j]).sum()).collect();
                let dot: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
                dot > 0.5 * g.iter().map(|v| v * v).sum::<f64>()
            });
            assert!(hit.count() >= 1);
        }
    }

    #[test]
    fn emitted_token_vectors_are_the_visual_vocabulary() {
        let c = SynthConfig {
            with_images: true,
            emit_token_vectors: true,
            num_examples: 3,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&c).unwrap();
        let table = ds.token_vectors.as_ref().unwrap();
        assert_eq!(table, &visual_vocabulary(c.vocab_size, c.feature_dim, c.feature_seed));
        assert!(ds.validate().is_ok());
        let mean_sq_norm = table.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / table.len() as f64;
        assert!((mean_sq_norm - 1.0).abs() < 0.1, "{mean_sq_norm}");

        let plain = generate_synthetic(&SynthConfig {
            emit_token_vectors: false,
            ..c
        })
        .unwrap();
        assert!(plain.token_vectors.is_none());
        assert_eq!(plain.examples, ds.examples);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = SynthConfig::default();
        c.min_steps = 3;
        let err = generate_synthetic(&c).unwrap_err().to_string();
        assert!(err.contains("min_steps"), "{err}");

        let mut c = SynthConfig::default();
        c.vocab_size = 20;
        assert!(generate_synthetic(&c).is_err());

        let mut c = SynthConfig::default();
        c.subset_size = 9;
        assert!(generate_synthetic(&c).is_err());

        let mut c = SynthConfig::default();
        c.text_signal = false;
        assert!(generate_synthetic(&c).is_err());
    }
}

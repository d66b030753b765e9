//! The full scoring model: encoders, similarity matrix, pooling and loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{build_similarity_matrix, pool, AlignmentResult, PoolingMode, SimilarityMatrix};
use crate::crossmodal::{
    encode_step_concat, encode_step_lxmert, image_sequence, CrossAttnParams, FusionMode, ImageEncoder,
};
use crate::data::{ClozeExample, Dataset, Step};
use crate::encoders::{
    encode_instruction, encode_positioned_text, encode_question, EmbeddingTable, LstmParams, MlpParams, PositionedText,
    MAX_POSITIONS,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objectives::{loss_obj1, loss_obj2, predict, ObjectiveConfig, ObjectiveKind, Prediction};
use crate::params::{ParamSet, Session};
use crate::tensor::Tensor;

/// Where token embeddings come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// A table initialized like the other weights and trained with them.
    #[default]
    Trainable,
    /// The dataset's `token_vectors`, kept fixed.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    /// Hidden size of the step, question-item and candidate LSTMs.
    pub hidden_dim: usize,
    pub question_hidden_dim: usize,
    /// Hidden (tanh) layer sizes of the step projection. Empty means a
    /// single affine map, which generalizes best on the synthetic task.
    pub mlp_hidden: Vec<usize>,
    /// Candidates reuse the question-item LSTM instead of their own.
    pub share_candidate_encoder: bool,
    pub fusion: FusionMode,
    pub image_hidden_dim: usize,
    pub attention_dim: usize,
    /// Weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    pub embedding_source: EmbeddingSource,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            embed_dim: 32,
            hidden_dim: 32,
            question_hidden_dim: 32,
            mlp_hidden: Vec::new(),
            share_candidate_encoder: true,
            fusion: FusionMode::None,
            image_hidden_dim: 32,
            attention_dim: 32,
            init_scale: 0.1,
            embedding_source: EmbeddingSource::Trainable,
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Result<()> {
        let mut dims = vec![
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("question_hidden_dim", self.question_hidden_dim),
        ];
        if self.fusion != FusionMode::None {
            dims.push(("image_hidden_dim", self.image_hidden_dim));
        }
        if self.fusion == FusionMode::Lxmert {
            dims.push(("attention_dim", self.attention_dim));
        }
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("model.mlp_hidden sizes must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "model.init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Width of a step representation.
    pub fn step_dim(&self) -> usize {
        match self.fusion {
            FusionMode::None => self.hidden_dim,
            FusionMode::Concat | FusionMode::Lxmert => self.hidden_dim + self.image_hidden_dim,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub settings: ModelSettings,
    pub vocab_size: usize,
    pub feature_dim: Option<usize>,
}

/// Output of one forward pass on an example.
#[derive(Clone, Debug)]
pub struct Forward {
    pub scores: Var,
    pub matrix: SimilarityMatrix,
    pub alignment: AlignmentResult,
}

/// Inference result for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub matrix: SimilarityMatrix,
    pub alignment: AlignmentResult,
    pub prediction: Prediction,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    table: EmbeddingTable,
    instruction: LstmParams,
    item: LstmParams,
    candidate: Option<LstmParams>,
    question: LstmParams,
    projection: MlpParams,
    image: Option<ImageEncoder>,
    cross: Option<CrossAttnParams>,
}

impl Model {
    /// Fresh weights drawn from `seed`. `token_vectors` is required for
    /// [`EmbeddingSource::Dataset`] and ignored otherwise.
    pub fn new(spec: ModelSpec, token_vectors: Option<&[Vec<f64>]>, seed: u64) -> Result<Self> {
        spec.settings.validate()?;
        let st = &spec.settings;
        if st.fusion != FusionMode::None && spec.feature_dim.is_none() {
            return Err(Error::Config(format!(
                "fusion `{}` needs image features but the data declares no feature_dim",
                st.fusion
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = st.init_scale;
        let mut params = ParamSet::new();

        let table = match st.embedding_source {
            EmbeddingSource::Trainable => {
                EmbeddingTable::new(&mut params, "embedding", spec.vocab_size, st.embed_dim, scale, &mut rng)
            }
            EmbeddingSource::Dataset => {
                let rows = token_vectors.ok_or_else(|| {
                    Error::Config("embedding_source = dataset but the data has no token_vectors".into())
                })?;
                let table = EmbeddingTable::frozen(&mut params, "embedding", rows)?;
                if table.vocab_size != spec.vocab_size || table.dim != st.embed_dim {
                    return Err(Error::Config(format!(
                        "token_vectors are {}x{}, model expects {}x{}",
                        table.vocab_size, table.dim, spec.vocab_size, st.embed_dim
                    )));
                }
                table
            }
        };

        let text_in = st.embed_dim;
        let item_in = st.embed_dim + MAX_POSITIONS;
        let instruction = LstmParams::new(&mut params, "instruction", text_in, st.hidden_dim, scale, &mut rng);
        let item = LstmParams::new(&mut params, "item", item_in, st.hidden_dim, scale, &mut rng);
        let candidate = (!st.share_candidate_encoder)
            .then(|| LstmParams::new(&mut params, "candidate", item_in, st.hidden_dim, scale, &mut rng));
        let question = LstmParams::new(
            &mut params,
            "question",
            st.hidden_dim,
            st.question_hidden_dim,
            scale,
            &mut rng,
        );

        let (image, cross) = match (st.fusion, spec.feature_dim) {
            (FusionMode::None, _) | (_, None) => (None, None),
            (fusion, Some(fd)) => {
                let image = ImageEncoder::new(&mut params, "image", fd, st.image_hidden_dim, scale, &mut rng);
                let cross = (fusion == FusionMode::Lxmert).then(|| {
                    CrossAttnParams::new(&mut params, "cross", text_in, fd, st.attention_dim, scale, &mut rng)
                });
                (Some(image), cross)
            }
        };

        let mut sizes = vec![st.step_dim() + st.question_hidden_dim];
        sizes.extend(&st.mlp_hidden);
        sizes.push(st.hidden_dim);
        let projection = MlpParams::new(&mut params, "projection", &sizes, scale, &mut rng)?;

        Ok(Model {
            spec,
            params,
            table,
            instruction,
            item,
            candidate,
            question,
            projection,
            image,
            cross,
        })
    }

    /// Model sized for `data`, with `settings` and weights from `seed`.
    pub fn for_dataset(settings: ModelSettings, data: &Dataset, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            settings,
            vocab_size: data.vocab_size,
            feature_dim: data.feature_dim,
        };
        Model::new(spec, data.token_vectors.as_deref(), seed)
    }

    /// Same layout with all-zero weights (frozen embeddings included).
    pub fn skeleton(spec: ModelSpec) -> Result<Self> {
        let zeros = vec![vec![0.0; spec.settings.embed_dim]; spec.vocab_size];
        let mut model = Model::new(spec, Some(&zeros), 0)?;
        model.params.fill(0.0);
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn settings(&self) -> &ModelSettings {
        &self.spec.settings
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Rejects data this model cannot read.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.vocab_size > self.spec.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "dataset vocab_size {} exceeds the model's {}",
                data.vocab_size, self.spec.vocab_size
            )));
        }
        if self.image.is_some() && data.has_images() && data.feature_dim != self.spec.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "dataset feature_dim {:?} does not match the model's {:?}",
                data.feature_dim, self.spec.feature_dim
            )));
        }
        Ok(())
    }

    fn encode_step(&self, s: &mut Session, step: &Step) -> Result<Var> {
        match (&self.image, &self.cross) {
            (None, _) => encode_instruction(s, &step.tokens, &self.table, &self.instruction),
            (Some(image), None) => {
                let seq = image_sequence(s.graph, step.images())?;
                encode_step_concat(s, &step.tokens, seq, &self.table, &self.instruction, image)
            }
            (Some(image), Some(cross)) => {
                let seq = image_sequence(s.graph, step.images())?;
                encode_step_lxmert(s, &step.tokens, seq, &self.table, cross, &self.instruction, image)
            }
        }
    }

    /// Builds `S` for `ex` on the session's graph and pools it.
    pub fn forward(&self, s: &mut Session, ex: &ClozeExample, pooling: PoolingMode) -> Result<Forward> {
        let items: Vec<PositionedText> = ex
            .question_items
            .iter()
            .map(|q| PositionedText {
                tokens: &q.tokens,
                position: q.position,
            })
            .collect();
        let question = encode_question(
            s,
            &items,
            ex.placeholder_position,
            &self.table,
            &self.item,
            &self.question,
        )?;
        let cand_lstm = self.candidate.as_ref().unwrap_or(&self.item);
        let candidates = ex
            .candidates
            .iter()
            .map(|c| encode_positioned_text(s, c, ex.placeholder_position, &self.table, cand_lstm))
            .collect::<Result<Vec<_>>>()?;
        let steps = ex
            .steps
            .iter()
            .map(|step| self.encode_step(s, step))
            .collect::<Result<Vec<_>>>()?;
        let (scores, matrix) = build_similarity_matrix(s, &candidates, &steps, question, &self.projection)?;
        let alignment = pool(&matrix, pooling)?;
        Ok(Forward {
            scores,
            matrix,
            alignment,
        })
    }

    /// Objective value for a finished forward pass. `wrong` is only read
    /// by obj1.
    pub fn loss(
        &self,
        g: &mut Graph,
        fwd: &Forward,
        answer: usize,
        objective: &ObjectiveConfig,
        wrong: usize,
    ) -> Result<Var> {
        match objective.kind {
            ObjectiveKind::Obj1 => loss_obj1(
                g,
                fwd.scores,
                &fwd.matrix,
                &fwd.alignment,
                answer,
                wrong,
                objective.margin,
            ),
            ObjectiveKind::Obj2 => loss_obj2(g, fwd.scores, &fwd.matrix, &fwd.alignment, answer, objective.margin),
        }
    }

    /// Forward pass on a private graph, then prediction.
    pub fn infer(&self, ex: &ClozeExample, pooling: PoolingMode) -> Result<Inference> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let fwd = self.forward(&mut Session::new(&mut g, &vars), ex, pooling)?;
        let prediction = predict(&fwd.alignment);
        Ok(Inference {
            matrix: fwd.matrix,
            alignment: fwd.alignment,
            prediction,
        })
    }

    /// Parameter tensors in registration order, for gradient checking.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.ids().map(|id| self.params.get(id).clone()).collect()
    }
}

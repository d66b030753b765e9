//! Trainable text encoders: embedding lookup, one-hot positions, an LSTM
//! whose final hidden state summarises a sequence, and a tanh MLP.
//!
//! All encoders record onto a [`Session`] so their outputs take part in
//! the backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{ParamId, ParamSet, Session};
use crate::tensor::Tensor;

/// Three question items plus the placeholder.
pub const MAX_POSITIONS: usize = 4;

/// One-hot vector of length `max_positions` with a 1 at `position`.
pub fn one_hot_position(position: usize, max_positions: usize) -> Result<Tensor> {
    if position >= max_positions {
        return Err(Error::InvalidArgument(format!(
            "position {position} out of range [0, {max_positions})"
        )));
    }
    let mut v = vec![0.0; max_positions];
    v[position] = 1.0;
    Ok(Tensor::vector(v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        vocab_size: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weights = params.add_uniform(name, [vocab_size, dim], scale, rng);
        EmbeddingTable {
            vocab_size,
            dim,
            weights,
        }
    }

    /// Wraps externally supplied per-token vectors as a frozen table.
    pub fn frozen(params: &mut ParamSet, name: &str, vectors: &[Vec<f64>]) -> Result<Self> {
        let table = Tensor::from_rows(vectors)?;
        let (vocab_size, dim) = table.dims2().unwrap();
        let weights = params.add(name, table, false);
        Ok(EmbeddingTable {
            vocab_size,
            dim,
            weights,
        })
    }

    /// `ids.len() x dim` matrix whose row `t` is table row `ids[t]`.
    pub fn embed(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty token sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = s.var(self.weights);
        let rows = ids
            .iter()
            .map(|&id| s.graph.slice_row(table, id))
            .collect::<Result<Vec<_>>>()?;
        s.graph.concat_rows(&rows)
    }
}

/// Free-function form of [`EmbeddingTable::embed`].
pub fn embed_tokens(s: &mut Session, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
    table.embed(s, ids)
}

/// LSTM cell weights with the four gates packed along the columns in
/// the order input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `input_dim x 4·hidden_dim`
    pub w_input: ParamId,
    /// `hidden_dim x 4·hidden_dim`
    pub w_hidden: ParamId,
    /// `1 x 4·hidden_dim`
    pub bias: ParamId,
}

impl LstmParams {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let gates = 4 * hidden_dim;
        LstmParams {
            input_dim,
            hidden_dim,
            w_input: params.add_uniform(format!("{prefix}.w_input"), [input_dim, gates], scale, rng),
            w_hidden: params.add_uniform(format!("{prefix}.w_hidden"), [hidden_dim, gates], scale, rng),
            bias: params.add_uniform(format!("{prefix}.bias"), [1, gates], scale, rng),
        }
    }

    /// Runs the recurrence over the rows of `sequence` (`len x input_dim`)
    /// from zero hidden and cell state; returns `h_T` as a vector.
    pub fn encode(&self, s: &mut Session, sequence: Var) -> Result<Var> {
        let (len, width) =
            s.graph.value(sequence).dims2().ok_or_else(|| {
                Error::operand("lstm", format!("expects a matrix, got {:?}", s.graph.shape(sequence)))
            })?;
        if len == 0 {
            return Err(Error::operand("lstm", "empty sequence"));
        }
        if width != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "lstm",
                lhs: vec![len, width],
                rhs: vec![self.input_dim, 4 * self.hidden_dim],
            });
        }
        let h_dim = self.hidden_dim;
        let (w_in, w_h, bias) = (s.var(self.w_input), s.var(self.w_hidden), s.var(self.bias));
        let g = &mut *s.graph;

        // Input projections for every step in one product.
        let projected = g.matmul(sequence, w_in)?;
        let mut state: Option<(Var, Var)> = None;
        for t in 0..len {
            let x_t = g.slice_row(projected, t)?;
            let x_t = g.reshape(x_t, [1, 4 * h_dim])?;
            let mut z = g.add(x_t, bias)?;
            if let Some((h, _)) = state {
                let rec = g.matmul(h, w_h)?;
                z = g.add(z, rec)?;
            }
            let i_gate = g.slice_cols(z, 0, h_dim)?;
            let i_gate = g.sigmoid(i_gate)?;
            let f_gate = g.slice_cols(z, h_dim, 2 * h_dim)?;
            let f_gate = g.sigmoid(f_gate)?;
            let cand = g.slice_cols(z, 2 * h_dim, 3 * h_dim)?;
            let cand = g.tanh(cand)?;
            let o_gate = g.slice_cols(z, 3 * h_dim, 4 * h_dim)?;
            let o_gate = g.sigmoid(o_gate)?;

            let mut c = g.mul(i_gate, cand)?;
            if let Some((_, c_prev)) = state {
                let kept = g.mul(f_gate, c_prev)?;
                c = g.add(kept, c)?;
            }
            let c_act = g.tanh(c)?;
            let h = g.mul(o_gate, c_act)?;
            state = Some((h, c));
        }
        let (h, _) = state.expect("len > 0");
        g.reshape(h, [h_dim])
    }
}

pub fn lstm_encode(s: &mut Session, params: &LstmParams, sequence: Var) -> Result<Var> {
    params.encode(s, sequence)
}

/// Affine layers with tanh between them; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    /// `(weight in x out, bias 1 x out)` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl MlpParams {
    pub fn new<R: Rng>(params: &mut ParamSet, prefix: &str, sizes: &[usize], scale: f64, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least input and output sizes, got {sizes:?}"
            )));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    params.add_uniform(format!("{prefix}.{i}.weight"), [w[0], w[1]], scale, rng),
                    params.add_uniform(format!("{prefix}.{i}.bias"), [1, w[1]], scale, rng),
                )
            })
            .collect();
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Projects a vector, or each row of a matrix.
    pub fn project(&self, s: &mut Session, input: Var) -> Result<Var> {
        let shape = s.graph.shape(input).to_vec();
        let (rows, width, was_vector) = match shape[..] {
            [n] => (1, n, true),
            [r, c] => (r, c, false),
            _ => return Err(Error::operand("mlp", format!("unsupported input shape {shape:?}"))),
        };
        if width != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: shape,
                rhs: vec![self.input_dim(), self.sizes[1]],
            });
        }
        let mut x = if was_vector {
            s.graph.reshape(input, [1, width])?
        } else {
            input
        };
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (s.var(w), s.var(b));
            let xw = s.graph.matmul(x, w)?;
            let bias = if rows == 1 {
                b
            } else {
                s.graph.concat_rows(&vec![b; rows])?
            };
            x = s.graph.add(xw, bias)?;
            if i < last {
                x = s.graph.tanh(x)?;
            }
        }
        if was_vector {
            s.graph.reshape(x, [self.output_dim()])
        } else {
            Ok(x)
        }
    }
}

pub fn mlp_project(s: &mut Session, params: &MlpParams, input: Var) -> Result<Var> {
    params.project(s, input)
}

/// Token embeddings followed by the instruction LSTM.
pub fn encode_instruction(s: &mut Session, tokens: &[usize], table: &EmbeddingTable, lstm: &LstmParams) -> Result<Var> {
    let seq = table.embed(s, tokens)?;
    lstm.encode(s, seq)
}

/// Like [`encode_instruction`], but every token row is extended with the
/// one-hot code of `position` before the recurrence.
pub fn encode_positioned_text(
    s: &mut Session,
    tokens: &[usize],
    position: usize,
    table: &EmbeddingTable,
    lstm: &LstmParams,
) -> Result<Var> {
    let max_positions = lstm
        .input_dim
        .checked_sub(table.dim)
        .filter(|&m| m > 0)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "positioned encoder input {} must exceed embedding dim {}",
                lstm.input_dim, table.dim
            ))
        })?;
    let code = one_hot_position(position, max_positions)?;
    let seq = table.embed(s, tokens)?;
    let codes = Tensor::from_rows(&vec![code.data().to_vec(); tokens.len()])?;
    let codes = s.graph.constant(codes);
    let seq = s.graph.concat(&[seq, codes])?;
    lstm.encode(s, seq)
}

/// A positioned piece of question text.
#[derive(Clone, Copy, Debug)]
pub struct PositionedText<'a> {
    pub tokens: &'a [usize],
    pub position: usize,
}

/// Encodes each item with [`encode_positioned_text`], then runs
/// `question_lstm` over the item vectors in the order given.
pub fn encode_question(
    s: &mut Session,
    items: &[PositionedText<'_>],
    placeholder_position: usize,
    table: &EmbeddingTable,
    item_lstm: &LstmParams,
    question_lstm: &LstmParams,
) -> Result<Var> {
    if items.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "a question has 3 items, got {}",
            items.len()
        )));
    }
    let mut seen = vec![placeholder_position];
    for item in items {
        if seen.contains(&item.position) {
            return Err(Error::InvalidArgument(format!(
                "duplicate position {} among question items and placeholder",
                item.position
            )));
        }
        seen.push(item.position);
    }
    let reps = items
        .iter()
        .map(|item| encode_positioned_text(s, item.tokens, item.position, table, item_lstm))
        .collect::<Result<Vec<_>>>()?;
    let seq = s.graph.concat_rows(&reps)?;
    question_lstm.encode(s, seq)
}

//! Step encoders that also see precomputed image feature vectors.
//!
//! Two fusion variants:
//!
//! * concat: the image sequence goes through its own LSTM and the final
//!   state is appended to the text representation;
//! * cross-attention: token embeddings and image features first exchange
//!   information through one bidirectional, single-head attention block
//!   with residual connections and row-wise normalization, then each
//!   updated sequence is encoded by its LSTM and the two final states are
//!   concatenated.
//!
//! Steps without images use a learned placeholder vector in place of the
//! image representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingTable, LstmParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    None,
    Concat,
    Lxmert,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "concat" => Ok(FusionMode::Concat),
            "lxmert" => Ok(FusionMode::Lxmert),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode `{other}` (expected none, concat or lxmert)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            FusionMode::None => "none",
            FusionMode::Concat => "concat",
            FusionMode::Lxmert => "lxmert",
        })
    }
}

/// Image LSTM plus the placeholder used when a step has no images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub lstm: LstmParams,
    pub no_image: ParamId,
}

impl ImageEncoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        feature_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        ImageEncoder {
            lstm: LstmParams::new(params, &format!("{prefix}.lstm"), feature_dim, hidden_dim, scale, rng),
            no_image: params.add_uniform(format!("{prefix}.no_image"), [hidden_dim], scale, rng),
        }
    }

    /// Final LSTM state over `images`, or the placeholder for `None`.
    pub fn encode(&self, s: &mut Session, images: Option<Var>) -> Result<Var> {
        match images {
            Some(seq) => self.lstm.encode(s, seq),
            None => Ok(s.var(self.no_image)),
        }
    }
}

/// Stacks feature vectors as a constant `K x feature_dim` node; `None`
/// when there are no images.
pub fn image_sequence(g: &mut Graph, features: &[Vec<f64>]) -> Result<Option<Var>> {
    if features.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.constant(Tensor::from_rows(features)?)))
}

/// Projections for one text→image and one image→text attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams {
    pub text_dim: usize,
    pub image_dim: usize,
    pub attention_dim: usize,
    /// text queries attending over image keys/values
    pub text_query: ParamId,
    pub image_key: ParamId,
    pub image_value: ParamId,
    pub text_out: ParamId,
    /// image queries attending over text keys/values
    pub image_query: ParamId,
    pub text_key: ParamId,
    pub text_value: ParamId,
    pub image_out: ParamId,
}

impl CrossAttnParams {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        text_dim: usize,
        image_dim: usize,
        attention_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let a = attention_dim;
        let mut w = |name: &str, rows: usize, cols: usize| {
            params.add_uniform(format!("{prefix}.{name}"), [rows, cols], scale, rng)
        };
        CrossAttnParams {
            text_dim,
            image_dim,
            attention_dim,
            text_query: w("text_query", text_dim, a),
            image_key: w("image_key", image_dim, a),
            image_value: w("image_value", image_dim, a),
            text_out: w("text_out", a, text_dim),
            image_query: w("image_query", image_dim, a),
            text_key: w("text_key", text_dim, a),
            text_value: w("text_value", text_dim, a),
            image_out: w("image_out", a, image_dim),
        }
    }
}

/// Updated sequences plus the attention maps that produced them.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub text: Var,
    pub image: Var,
    /// `T x K`, rows sum to 1.
    pub text_to_image: Var,
    /// `K x T`, rows sum to 1.
    pub image_to_text: Var,
}

fn attend(g: &mut Graph, queries: Var, keys: Var, values: Var, scale: f64) -> Result<(Var, Var)> {
    let keys_t = g.transpose(keys)?;
    let logits = g.matmul(queries, keys_t)?;
    let logits = g.scalar_mul(logits, scale)?;
    let weights = g.softmax_rows(logits)?;
    let attended = g.matmul(weights, values)?;
    Ok((weights, attended))
}

/// Normalizes every row of an `R x d` matrix to zero mean and unit
/// variance. There is no learned gain or bias; the LSTM that reads the
/// result has its own input weights.
fn layer_norm_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let cols = match g.shape(x) {
        &[_, c] => c,
        other => {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    let average = g.constant(Tensor::filled([cols, 1], 1.0 / cols as f64));
    let spread = g.constant(Tensor::filled([1, cols], 1.0));
    let mean = g.matmul(x, average)?;
    let mean = g.matmul(mean, spread)?;
    let centered = g.sub(x, mean)?;
    let squared = g.mul(centered, centered)?;
    let var = g.matmul(squared, average)?;
    let var = g.add_scalar(var, LAYER_NORM_EPS)?;
    let std = g.sqrt(var)?;
    let std = g.matmul(std, spread)?;
    g.div(centered, std)
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// One exchange in both directions, each computed from the original
/// inputs: `x' = LayerNorm(x + softmax(Q Kᵀ/√a) V W_out)`.
pub fn cross_attention_block(s: &mut Session, text: Var, image: Var, p: &CrossAttnParams) -> Result<CrossAttention> {
    let t_shape = s.graph.shape(text).to_vec();
    let i_shape = s.graph.shape(image).to_vec();
    match (&t_shape[..], &i_shape[..]) {
        (&[t, dt], &[k, di]) if t >= 1 && k >= 1 && dt == p.text_dim && di == p.image_dim => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: t_shape,
                rhs: i_shape,
            })
        }
    }
    let scale = 1.0 / (p.attention_dim as f64).sqrt();
    let [tq, ik, iv, to, iq, tk, tv, io] = [
        p.text_query,
        p.image_key,
        p.image_value,
        p.text_out,
        p.image_query,
        p.text_key,
        p.text_value,
        p.image_out,
    ]
    .map(|id| s.var(id));
    let g = &mut *s.graph;

    let text_q = g.matmul(text, tq)?;
    let image_k = g.matmul(image, ik)?;
    let image_v = g.matmul(image, iv)?;
    let (text_to_image, attended) = attend(g, text_q, image_k, image_v, scale)?;
    let delta = g.matmul(attended, to)?;
    let new_text = g.add(text, delta)?;
    let new_text = layer_norm_rows(g, new_text)?;

    let image_q = g.matmul(image, iq)?;
    let text_k = g.matmul(text, tk)?;
    let text_v = g.matmul(text, tv)?;
    let (image_to_text, attended) = attend(g, image_q, text_k, text_v, scale)?;
    let delta = g.matmul(attended, io)?;
    let new_image = g.add(image, delta)?;
    let new_image = layer_norm_rows(g, new_image)?;

    Ok(CrossAttention {
        text: new_text,
        image: new_image,
        text_to_image,
        image_to_text,
    })
}

/// Text LSTM state concatenated with the image LSTM state.
pub fn encode_step_concat(
    s: &mut Session,
    tokens: &[usize],
    images: Option<Var>,
    table: &EmbeddingTable,
    text_lstm: &LstmParams,
    image: &ImageEncoder,
) -> Result<Var> {
    let embedded = table.embed(s, tokens)?;
    let text_rep = text_lstm.encode(s, embedded)?;
    let image_rep = image.encode(s, images)?;
    s.graph.concat(&[text_rep, image_rep])
}

/// Cross-attention between token embeddings and image features, then the
/// two LSTMs, then concatenation. Without images the text path runs
/// unchanged and the image side is the placeholder.
pub fn encode_step_lxmert(
    s: &mut Session,
    tokens: &[usize],
    images: Option<Var>,
    table: &EmbeddingTable,
    cross: &CrossAttnParams,
    text_lstm: &LstmParams,
    image: &ImageEncoder,
) -> Result<Var> {
    let embedded = table.embed(s, tokens)?;
    let (text_seq, image_seq) = match images {
        Some(features) => {
            let out = cross_attention_block(s, embedded, features, cross)?;
            (out.text, Some(out.image))
        }
        None => (embedded, None),
    };
    let text_rep = text_lstm.encode(s, text_seq)?;
    let image_rep = image.encode(s, image_seq)?;
    s.graph.concat(&[text_rep, image_rep])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        params: ParamSet,
        table: EmbeddingTable,
        text_lstm: LstmParams,
        image: ImageEncoder,
        cross: CrossAttnParams,
    }

    fn fixture(seed: u64, scale: f64, text_hidden: usize, image_hidden: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let table = EmbeddingTable::new(&mut params, "emb", 12, 5, scale, &mut rng);
        let text_lstm = LstmParams::new(&mut params, "text", 5, text_hidden, scale, &mut rng);
        let image = ImageEncoder::new(&mut params, "image", 6, image_hidden, scale, &mut rng);
        let cross = CrossAttnParams::new(&mut params, "cross", 5, 6, 4, scale, &mut rng);
        Fixture {
            params,
            table,
            text_lstm,
            image,
            cross,
        }
    }

    fn features(seed: u64, k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn zero_group(p: &mut ParamSet, ids: &[ParamId]) {
        for &id in ids {
            p.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn cross_ids(c: &CrossAttnParams) -> Vec<ParamId> {
        vec![
            c.text_query,
            c.image_key,
            c.image_value,
            c.text_out,
            c.image_query,
            c.text_key,
            c.text_value,
            c.image_out,
        ]
    }

    fn eval_step(f: &Fixture, lxmert: bool, tokens: &[usize], imgs: &[Vec<f64>]) -> Vec<f64> {
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let seq = image_sequence(s.graph, imgs).unwrap();
        let out = if lxmert {
            encode_step_lxmert(&mut s, tokens, seq, &f.table, &f.cross, &f.text_lstm, &f.image).unwrap()
        } else {
            encode_step_concat(&mut s, tokens, seq, &f.table, &f.text_lstm, &f.image).unwrap()
        };
        g.value(out).data().to_vec()
    }

    #[test]
    fn concat_shape_and_zero_image_lstm() {
        let mut f = fixture(1, 0.3, 32, 32);
        let out = eval_step(&f, false, &[1, 2, 3], &features(2, 2));
        assert_eq!(out.len(), 64);

        let lstm = f.image.lstm.clone();
        zero_group(&mut f.params, &[lstm.w_input, lstm.w_hidden, lstm.bias]);
        let out = eval_step(&f, false, &[1, 2, 3], &features(2, 2));
        assert!(out[32..].iter().all(|&v| v == 0.0));
        assert!(out[..32].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn concat_depends_on_images() {
        let f = fixture(3, 0.3, 4, 4);
        let a = eval_step(&f, false, &[1, 2], &features(10, 2));
        let b = eval_step(&f, false, &[1, 2], &features(11, 2));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
        assert_eq!(a[..4], b[..4]);
    }

    #[test]
    fn missing_images_use_placeholder() {
        let f = fixture(4, 0.3, 4, 3);
        let out = eval_step(&f, false, &[1], &[]);
        assert_eq!(&out[4..], f.params.get(f.image.no_image).data());
        let out = eval_step(&f, true, &[1], &[]);
        assert_eq!(&out[4..], f.params.get(f.image.no_image).data());
    }

    #[test]
    fn zero_attention_only_normalizes() {
        let mut f = fixture(5, 0.3, 4, 4);
        let ids = cross_ids(&f.cross);
        zero_group(&mut f.params, &ids);
        let text = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![-1.0, 0.0, 1.0, 2.0, 3.0]]).unwrap();
        let imgs = Tensor::from_rows(&features(6, 3)).unwrap();
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let t = s.graph.constant(text.clone());
        let i = s.graph.constant(imgs.clone());
        let out = cross_attention_block(&mut s, t, i, &f.cross).unwrap();
        let normalized = |t: &Tensor| -> Vec<f64> {
            let cols = t.shape()[1];
            t.data()
                .chunks(cols)
                .flat_map(|row| {
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    row.iter()
                        .map(move |v| (v - mean) / (var + 1e-5).sqrt())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        for (got, want) in [(out.text, normalized(&text)), (out.image, normalized(&imgs))] {
            let got = g.value(got).data();
            assert!(
                got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12),
                "{got:?} vs {want:?}"
            );
        }
        // uniform attention over three keys
        assert!(g
            .value(out.text_to_image)
            .data()
            .iter()
            .all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_image_gets_full_weight() {
        let f = fixture(7, 0.5, 4, 4);
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let t = s.graph.constant(Tensor::filled([5, 5], 0.2));
        let i = s.graph.constant(Tensor::from_rows(&features(8, 1)).unwrap());
        let out = cross_attention_block(&mut s, t, i, &f.cross).unwrap();
        assert_eq!(g.shape(out.text_to_image), &[5, 1]);
        assert!(g.value(out.text_to_image).data().iter().all(|&w| w == 1.0));
        assert_eq!(g.shape(out.text), &[5, 5]);
        assert_eq!(g.shape(out.image), &[1, 6]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let f = fixture(9, 1.0, 4, 4);
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let t = s
            .graph
            .constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.8, 1.0, -1.0]; 5]).unwrap());
        let i = s.graph.constant(Tensor::from_rows(&features(12, 3)).unwrap());
        let out = cross_attention_block(&mut s, t, i, &f.cross).unwrap();
        assert_eq!(g.shape(out.text), &[5, 5]);
        assert_eq!(g.shape(out.image), &[3, 6]);
        for w in [out.text_to_image, out.image_to_text] {
            let (rows, _) = g.value(w).dims2().unwrap();
            for r in 0..rows {
                let total: f64 = g.value(w).row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let f = fixture(13, 0.3, 4, 4);
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let t = s.graph.constant(Tensor::zeros([2, 5]));
        let wrong = s.graph.constant(Tensor::zeros([2, 7]));
        assert!(cross_attention_block(&mut s, t, wrong, &f.cross).is_err());
    }

    #[test]
    fn text_loss_reaches_image_features() {
        let f = fixture(14, 0.5, 3, 3);
        let mut g = Graph::new();
        let vars = f.params.bind(&mut g);
        let mut s = Session::new(&mut g, &vars);
        let imgs = s.graph.param(Tensor::from_rows(&features(15, 2)).unwrap());
        let out = encode_step_lxmert(&mut s, &[2, 3], Some(imgs), &f.table, &f.cross, &f.text_lstm, &f.image).unwrap();
        // only the text half of the representation feeds the loss
        let text_rep = s.graph.reshape(out, [1, 6]).unwrap();
        let text_rep = s.graph.slice_cols(text_rep, 0, 3).unwrap();
        let loss = s.graph.sum(text_rep).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(imgs).unwrap().iter().any(|&v| v.abs() > 1e-8));
    }

    #[test]
    fn fusion_encoders_pass_grad_check() {
        let f = fixture(16, 0.5, 3, 3);
        let imgs = Tensor::from_rows(&features(17, 2)).unwrap();
        for lxmert in [false, true] {
            let mut tensors: Vec<Tensor> = f.params.ids().map(|id| f.params.get(id).clone()).collect();
            tensors.push(imgs.clone());
            let n = tensors.len() - 1;
            let r = grad_check(
                |g, v| {
                    let mut s = Session::new(g, &v[..n]);
                    let out = if lxmert {
                        encode_step_lxmert(
                            &mut s,
                            &[1, 2, 1],
                            Some(v[n]),
                            &f.table,
                            &f.cross,
                            &f.text_lstm,
                            &f.image,
                        )?
                    } else {
                        encode_step_concat(&mut s, &[1, 2, 1], Some(v[n]), &f.table, &f.text_lstm, &f.image)?
                    };
                    let w = s.graph.constant(Tensor::vector(vec![1.0, -0.5, 2.0, 0.7, -1.2, 0.4]));
                    let t = s.graph.tanh(out)?;
                    s.graph.dot(t, w)
                },
                &mut tensors,
                1e-6,
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-4, "lxmert={lxmert}: {r:?}");
        }
    }
}

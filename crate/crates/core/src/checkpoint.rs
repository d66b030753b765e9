//! Plain-text checkpoints.
//!
//! ```text
//! latent-align-checkpoint 1
//! model {"settings":{...},"vocab_size":40,"feature_dim":null}
//! config {...}                      (optional run configuration echo)
//! state {"epoch":3,"running_loss":...,"seed":0,"history":[...]}   (optional)
//! params 14
//! param embedding 40x32 trainable
//! <40*32 values separated by spaces>
//! param instruction.w_input 32x128 trainable
//! ...
//! velocity embedding 1280           (one per parameter when state is present)
//! <values>
//! end
//! ```
//!
//! Numbers are written in Rust's shortest round-trip form, so loading
//! gives back bit-identical values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::training::{EpochRecord, TrainState};

const MAGIC: &str = "latent-align-checkpoint 1";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    running_loss: f64,
    seed: u64,
    history: Vec<EpochRecord>,
}

/// A model plus whatever else the file carried.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
    pub config: Option<serde_json::Value>,
}

fn push_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:?}").expect("writing to a String");
    }
    out.push('\n');
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Serializes a checkpoint to text.
pub fn checkpoint_to_string(
    model: &Model,
    state: Option<&TrainState>,
    config: Option<&serde_json::Value>,
) -> Result<String> {
    let params = model.params();
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    writeln!(out, "model {}", serde_json::to_string(model.spec())?).expect("writing to a String");
    if let Some(config) = config {
        writeln!(out, "config {}", serde_json::to_string(config)?).expect("writing to a String");
    }
    if let Some(state) = state {
        let header = StateHeader {
            epoch: state.epoch,
            running_loss: state.running_loss,
            seed: state.seed,
            history: state.history.clone(),
        };
        writeln!(out, "state {}", serde_json::to_string(&header)?).expect("writing to a String");
    }
    writeln!(out, "params {}", params.len()).expect("writing to a String");
    for id in params.ids() {
        let t = params.get(id);
        let flag = if params.is_trainable(id) { "trainable" } else { "frozen" };
        writeln!(out, "param {} {} {flag}", params.name(id), shape_text(t.shape())).expect("writing to a String");
        push_values(&mut out, t.data());
    }
    if let Some(state) = state {
        if state.velocity.len() != params.len() {
            return Err(Error::Checkpoint("velocity buffers do not match the parameters".into()));
        }
        for (id, v) in params.ids().zip(&state.velocity) {
            writeln!(out, "velocity {} {}", params.name(id), v.len()).expect("writing to a String");
            push_values(&mut out, v);
        }
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    state: Option<&TrainState>,
    config: Option<&serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let text = checkpoint_to_string(model, state, config)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, expecting: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, text)) => {
                self.line = i + 1;
                Ok(text)
            }
            None => Err(Error::Checkpoint(format!(
                "unexpected end of file, expected {expecting}"
            ))),
        }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line))
    }

    fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        let text = self.next("a line of values")?;
        let values = text
            .split_ascii_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.fail(format!("bad number: {e}")))?;
        if values.len() != count {
            return Err(self.fail(format!("expected {count} values, found {}", values.len())));
        }
        Ok(values)
    }
}

/// Parses checkpoint text produced by [`checkpoint_to_string`].
pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next("header")? != MAGIC {
        return Err(lines.fail(format!("not a checkpoint (expected `{MAGIC}`)")));
    }
    let spec_line = lines.next("model line")?;
    let spec: ModelSpec = match spec_line.strip_prefix("model ") {
        Some(json) => serde_json::from_str(json).map_err(|e| lines.fail(e))?,
        None => return Err(lines.fail("expected `model {...}`")),
    };
    let mut model = Model::skeleton(spec).map_err(|e| lines.fail(e))?;

    let mut config = None;
    let mut header = None;
    let count = loop {
        let line = lines.next("params line")?;
        if let Some(json) = line.strip_prefix("config ") {
            config = Some(serde_json::from_str(json).map_err(|e| lines.fail(e))?);
        } else if let Some(json) = line.strip_prefix("state ") {
            header = Some(serde_json::from_str::<StateHeader>(json).map_err(|e| lines.fail(e))?);
        } else if let Some(n) = line.strip_prefix("params ") {
            break n.trim().parse::<usize>().map_err(|e| lines.fail(e))?;
        } else {
            return Err(lines.fail(format!("unexpected line `{line}`")));
        }
    };

    let ids: Vec<_> = model.params().ids().collect();
    if count != ids.len() {
        return Err(lines.fail(format!(
            "file has {count} parameters, the declared model has {}",
            ids.len()
        )));
    }
    for &id in &ids {
        let line = lines.next("param line")?;
        let parts: Vec<&str> = line.split(' ').collect();
        let expected_name = model.params().name(id).to_string();
        let expected_shape = shape_text(model.params().get(id).shape());
        match parts[..] {
            ["param", name, shape, _] if name == expected_name => {
                if shape != expected_shape {
                    return Err(lines.fail(format!(
                        "parameter `{name}` declared as {shape}, the model needs {expected_shape}"
                    )));
                }
            }
            _ => return Err(lines.fail(format!("expected `param {expected_name} ...`, got `{line}`"))),
        }
        let n = model.params().get(id).len();
        let values = lines.values(n)?;
        model.params_mut().get_mut(id).data_mut().copy_from_slice(&values);
    }

    let state = match header {
        None => None,
        Some(h) => {
            let mut velocity = Vec::with_capacity(ids.len());
            for &id in &ids {
                let line = lines.next("velocity line")?;
                let n = model.params().get(id).len();
                let expected = format!("velocity {} {n}", model.params().name(id));
                if line != expected {
                    return Err(lines.fail(format!("expected `{expected}`, got `{line}`")));
                }
                velocity.push(lines.values(n)?);
            }
            Some(TrainState {
                velocity,
                epoch: h.epoch,
                running_loss: h.running_loss,
                seed: h.seed,
                history: h.history,
            })
        }
    };
    if lines.next("end")? != "end" {
        return Err(lines.fail("expected `end`"));
    }
    Ok(Checkpoint { model, state, config })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text).map_err(|e| e.context(path.display().to_string()))
}

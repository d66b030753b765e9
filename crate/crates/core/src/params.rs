use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Handle to one tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named model weights, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a trainable tensor drawn uniformly from `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        if scale > 0.0 {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Overwrites every tensor with `value`.
    pub fn fill(&mut self, value: f64) {
        for e in &mut self.entries {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor.data_mut().copy_from_slice(theirs.tensor.data());
        }
        Ok(())
    }

    /// Adds every parameter to `graph` as a leaf; frozen ones do not track gradients.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| graph.leaf(e.tensor.clone().with_requires_grad(e.trainable)))
            .collect()
    }

    /// Gradients of bound parameters after [`Graph::backward`]; `None` for frozen ones.
    pub fn collect_grads(&self, graph: &Graph, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
        vars.iter()
            .zip(&self.entries)
            .map(|(&v, e)| {
                if e.trainable {
                    graph.grad(v).map(<[f64]>::to_vec)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// A graph together with the leaves bound for a [`ParamSet`].
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    vars: &'a [Var],
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, vars: &'a [Var]) -> Self {
        Session { graph, vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let id = p.add_uniform("w", [10, 10], 0.1, &mut rng);
        assert!(p.get(id).data().iter().all(|v| v.abs() <= 0.1));
        assert!(p.get(id).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_params_yield_no_grad() {
        let mut p = ParamSet::new();
        let a = p.add("a", Tensor::vector(vec![1.0, 2.0]), true);
        let b = p.add("b", Tensor::vector(vec![3.0, 4.0]), false);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let s = Session::new(&mut g, &vars);
        let (va, vb) = (s.var(a), s.var(b));
        let d = g.dot(va, vb).unwrap();
        g.backward(d).unwrap();
        let grads = p.collect_grads(&g, &vars);
        assert_eq!(grads[0].as_deref(), Some(&[3.0, 4.0][..]));
        assert!(grads[1].is_none());
    }
}

//! Named parameter storage and the small dense layers every module uses.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Ordered name -> tensor map. Insertion order is the serialization and
/// optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Puts every tensor on `tape`; names for which `frozen` is true become
    /// constants.
    pub fn bind_with(&self, tape: &mut Tape, frozen: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if frozen(k) { tape.constant(t) } else { tape.param(t) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| false)
    }

    /// Same as [`ParamSet::bind`] but nothing receives gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }
}

/// Parameters of a [`ParamSet`] as tape variables.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Replaces one binding, e.g. to route a probe variable through the model.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient tensors keyed like the parameter set.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let shape = tape.shape(v).to_vec();
                let g = grads.get_or_zeros(v, tape.value(v).len());
                (k.clone(), Tensor::new(shape, g).expect("gradient matches parameter shape"))
            })
            .collect()
    }
}

/// `y = x W + b` on row-major batches `[n, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn init<R: Rng>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
        let std = (1.0 / fan_in as f64).sqrt();
        params.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        if bias {
            params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    pub fn bind(b: &Bound, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: b.var(&format!("{name}.w"))?,
            bias: b.var(&format!("{name}.b")).ok(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn init<R: Rng>(params: &mut ParamSet, name: &str, dims: [usize; 3], rng: &mut R) {
        Linear::init(params, &format!("{name}.0"), dims[0], dims[1], true, rng);
        Linear::init(params, &format!("{name}.1"), dims[1], dims[2], true, rng);
    }

    pub fn bind(b: &Bound, name: &str) -> Result<Self> {
        Ok(Mlp2 {
            first: Linear::bind(b, &format!("{name}.0"))?,
            second: Linear::bind(b, &format!("{name}.1"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, h)
    }
}

/// Plain-Rust evaluation of `relu(x W1 + b1) W2 + b2` for one input row;
/// used as an independent reference in tests.
pub fn mlp2_reference(params: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let dense = |layer: &str, input: &[f64]| -> Vec<f64> {
        let w = params.get(&format!("{name}.{layer}.w")).expect("weight");
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let b = params.get(&format!("{name}.{layer}.b"));
        (0..n_out)
            .map(|o| {
                let mut acc = 0.0;
                for i in 0..n_in {
                    acc += input[i] * w.data()[i * n_out + o];
                }
                acc + b.map_or(0.0, |b| b.data()[o])
            })
            .collect()
    };
    let h: Vec<f64> = dense("0", x).into_iter().map(|v| v.max(0.0)).collect();
    dense("1", &h)
}

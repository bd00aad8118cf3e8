//! Named parameter storage and the small layers shared by the model stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::{NormMode, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with `new`, which must have identical names and shapes.
    pub fn assign(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::Format(
                "parameter names do not match the model layout".into(),
            ));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn zero_matching(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            if n.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Tape variables for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Rebinds from explicit variables, e.g. when a gradient checker owns the leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming normal for LeakyReLU stacks: `std = gain / sqrt(fan_in)`.
    pub fn kaiming(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let gain = (2.0 / (1.0 + DEFAULT_LEAKY_SLOPE * DEFAULT_LEAKY_SLOPE)).sqrt();
        self.normal(fan_in, fan_out, gain / (fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect(),
        )
    }
}

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.kaiming(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

/// Bias-free square projection, as used by the attention layers.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
}

impl Projection {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), init.normal(fan_in, fan_out, std)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.matmul(x, p.var(self.weight))
    }
}

/// Learnable gain and bias for layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        crate::diff::normalize(
            tape,
            x,
            NormMode::Layer {
                gain: p.var(self.gain),
                bias: p.var(self.bias),
            },
            NORM_EPS,
        )
    }
}

/// Linear map, instance normalization, LeakyReLU.
#[derive(Clone, Debug)]
pub struct LinearNormAct {
    pub linear: Linear,
}

impl LinearNormAct {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            linear: Linear::new(store, init, name, fan_in, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.linear.forward(tape, p, x)?;
        let y = crate::diff::normalize(tape, y, NormMode::Instance, NORM_EPS)?;
        Ok(tape.leaky_relu(y, DEFAULT_LEAKY_SLOPE))
    }
}

/// Row-major leaf from a list of fixed-width rows.
pub fn leaf_from_rows<const W: usize>(tape: &mut Tape, rows: &[[f64; W]]) -> Var {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    tape.leaf(Tensor::matrix(rows.len(), W, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_binds_in_order() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let lin = Linear::new(&mut store, &mut init, "a", 3, 2);
        assert_eq!(store.names(), &["a.weight".to_string(), "a.bias".to_string()]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::full(4, 3, 1.0));
        let y = lin.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).dims(), (4, 2));
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(9).kaiming(8, 8);
        let b = Init::new(9).kaiming(8, 8);
        assert_eq!(a, b);
        assert_ne!(a, Init::new(10).kaiming(8, 8));
    }

    #[test]
    fn assign_checks_layout() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2));
        let names = store.names().to_vec();
        assert!(store.assign(&names, vec![Tensor::zeros(2, 3)]).is_err());
        assert!(store.assign(&["v".into()], vec![Tensor::zeros(2, 2)]).is_err());
        store.assign(&names, vec![Tensor::full(2, 2, 1.0)]).unwrap();
        assert_eq!(store.by_name("w").unwrap().item(), 1.0);
    }
}

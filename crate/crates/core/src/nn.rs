//! Dense layers and the named parameter registry shared by every sub-network.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{Gradients, ParamKey, Tape, Tensor, Var};

static NEXT_REGISTRY_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Linear => Ok(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

/// Ordered map from dotted parameter names to tensors.
///
/// Insertion order is the iteration order, which is also the order used by
/// checkpoints and optimizer state.
#[derive(Debug)]
pub struct ParamRegistry {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamRegistry {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_REGISTRY_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self {
            id: NEXT_REGISTRY_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamKey> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamKey {
            registry: self.id,
            index: self.tensors.len() - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Identity checked against every [`ParamKey`]; a clone gets a new one.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            registry: self.id,
            index,
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor {
        assert_eq!(key.registry, self.id, "parameter key from another registry");
        &self.tensors[key.index]
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor {
        assert_eq!(key.registry, self.id, "parameter key from another registry");
        &mut self.tensors[key.index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Names whose first dotted component equals `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.names
            .iter()
            .map(String::as_str)
            .filter(move |n| n.split('.').next() == Some(prefix))
    }

    /// Records the parameter on `tape` (once per tape).
    pub fn load(&self, tape: &mut Tape, key: ParamKey) -> Result<Var> {
        if key.registry != self.id {
            return Err(Error::contract("parameter key from another registry"));
        }
        tape.param(key, &self.tensors[key.index])
    }

    /// Freezes or unfreezes every parameter under a sub-network prefix.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.iter_mut() {
            if name.split('.').next() == Some(prefix) {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Adds gradients of this registry's parameters from a reverse pass.
    /// Trainable parameters that were recorded on the tape but received no
    /// gradient get an explicit zero. Returns how many tensors were touched.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<usize> {
        let mut touched = 0;
        for (key, g) in grads.params() {
            if key.registry != self.id {
                continue;
            }
            let t = &mut self.tensors[key.index];
            if !t.requires_grad() {
                continue;
            }
            match g {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?
                }
            }
            touched += 1;
        }
        Ok(touched)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-dependent digest of parameter names, shapes and values.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::seed::fnv1a64(&[]);
        for (name, t) in self.iter() {
            for b in name
                .bytes()
                .chain(t.shape().iter().flat_map(|d| (*d as u64).to_le_bytes()))
                .chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()))
            {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Checksum restricted to parameters under the given prefixes.
    pub fn checksum_of(&self, prefixes: &[&str]) -> u64 {
        let mut sub = ParamRegistry::new();
        for (name, t) in self.iter() {
            if prefixes.contains(&name.split('.').next().unwrap_or("")) {
                sub.names.push(name.to_string());
                sub.tensors.push(t.clone());
            }
        }
        sub.checksum()
    }
}

/// Fully connected layer `activation(x · W + b)` whose tensors live in a
/// [`ParamRegistry`].
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamKey,
    pub bias: ParamKey,
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

impl DenseLayer {
    /// The same layer addressing the same slots of another registry.
    pub fn rebind(&self, registry: &ParamRegistry) -> Self {
        Self {
            weight: ParamKey { registry: registry.id(), ..self.weight },
            bias: ParamKey { registry: registry.id(), ..self.bias },
            ..self.clone()
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn init(
        registry: &mut ParamRegistry,
        name: &str,
        in_width: usize,
        out_width: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::contract(format!(
                "layer `{name}` needs positive widths, got {in_width}x{out_width}"
            )));
        }
        let bound = (6.0 / (in_width + out_width) as f64).sqrt();
        let w = (0..in_width * out_width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = registry.insert(
            format!("{name}.weight"),
            Tensor::matrix(in_width, out_width, w)?,
        )?;
        let bias = registry.insert(format!("{name}.bias"), Tensor::zeros(&[out_width])?)?;
        Ok(Self {
            weight,
            bias,
            in_width,
            out_width,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamRegistry, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_width {
            return Err(Error::dim(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.in_width, shape
            )));
        }
        let w = params.load(tape, self.weight)?;
        let b = params.load(tape, self.bias)?;
        let xw = tape.matmul(x, w)?;
        let z = tape.add_bias(xw, b)?;
        self.activation.apply(tape, z)
    }
}

/// Consecutive dense layers with the given output widths, all using
/// `hidden` except the last which uses `last`.
pub fn init_stack(
    registry: &mut ParamRegistry,
    prefix: &str,
    in_width: usize,
    widths: &[usize],
    hidden: Activation,
    last: Activation,
    rng: &mut Rng,
) -> Result<Vec<DenseLayer>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut prev = in_width;
    for (i, &w) in widths.iter().enumerate() {
        let act = if i + 1 == widths.len() { last } else { hidden };
        layers.push(DenseLayer::init(registry, &format!("{prefix}.l{i}"), prev, w, act, rng)?);
        prev = w;
    }
    Ok(layers)
}

pub fn forward_stack(
    layers: &[DenseLayer],
    tape: &mut Tape,
    params: &ParamRegistry,
    mut x: Var,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, params, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = ParamRegistry::new();
        let mut r2 = ParamRegistry::new();
        let l1 = DenseLayer::init(&mut r1, "x.l0", 4, 2, Activation::Relu, &mut seed::rng(7, "t")).unwrap();
        DenseLayer::init(&mut r2, "x.l0", 4, 2, Activation::Relu, &mut seed::rng(7, "t")).unwrap();
        assert_eq!(r1.checksum(), r2.checksum());
        assert!(r1.tensor(l1.bias).data().iter().all(|&b| b == 0.0));
        // sqrt(6 / (4 + 2)) = 1
        assert!(r1.tensor(l1.weight).data().iter().all(|w| w.abs() <= 1.0));
    }

    #[test]
    fn zero_width_is_rejected() {
        let mut r = ParamRegistry::new();
        let err = DenseLayer::init(&mut r, "x", 0, 2, Activation::Relu, &mut seed::rng(1, "t"));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut r = ParamRegistry::new();
        r.insert("a.w", Tensor::scalar(1.0)).unwrap();
        assert!(r.insert("a.w", Tensor::scalar(2.0)).is_err());
    }

    fn layer_with(r: &mut ParamRegistry, w: Vec<f64>, i: usize, o: usize, act: Activation) -> DenseLayer {
        let mut l = DenseLayer::init(r, "t.l0", i, o, act, &mut seed::rng(1, "t")).unwrap();
        r.tensor_mut(l.weight).data_mut().copy_from_slice(&w);
        l.activation = act;
        l
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut r = ParamRegistry::new();
        let l = layer_with(&mut r, vec![1.0, 0.0, 0.0, 1.0], 2, 2, Activation::Linear);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 5.0]).unwrap()).unwrap();
        let y = l.forward(&mut tape, &r, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let mut r = ParamRegistry::new();
        let l = layer_with(&mut r, vec![0.0; 6], 3, 2, Activation::Sigmoid);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = l.forward(&mut tape, &r, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_matches_hand_oracle() {
        let mut r = ParamRegistry::new();
        let l = DenseLayer::init(&mut r, "t.l0", 3, 4, Activation::Tanh, &mut seed::rng(3, "t")).unwrap();
        r.tensor_mut(l.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let x = vec![0.5, -1.5, 2.0, 1.0, 0.0, -0.25];
        let mut tape = Tape::new();
        let xv = tape.constant(&Tensor::matrix(2, 3, x.clone()).unwrap()).unwrap();
        let y = l.forward(&mut tape, &r, xv).unwrap();

        let w = r.tensor(l.weight).data();
        let b = r.tensor(l.bias).data();
        for row in 0..2 {
            for j in 0..4 {
                let mut z = b[j];
                for i in 0..3 {
                    z += x[row * 3 + i] * w[i * 4 + j];
                }
                let got = tape.value(y).data()[row * 4 + j];
                assert!((got - z.tanh()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut r = ParamRegistry::new();
        let l = DenseLayer::init(&mut r, "t.l0", 3, 4, Activation::Relu, &mut seed::rng(3, "t")).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(l.forward(&mut tape, &r, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn every_parameter_is_touched_by_backward() {
        let mut r = ParamRegistry::new();
        let layers = init_stack(
            &mut r,
            "m",
            3,
            &[5, 4, 1],
            Activation::Tanh,
            Activation::Sigmoid,
            &mut seed::rng(9, "t"),
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let y = forward_stack(&layers, &mut tape, &r, x).unwrap();
        let loss = tape.mean(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(r.accumulate(&grads).unwrap(), r.len());
        assert!(r.iter().all(|(_, t)| t.grad().is_some()));
    }

    #[test]
    fn prefixes_partition_names() {
        let mut r = ParamRegistry::new();
        init_stack(&mut r, "ue", 2, &[3], Activation::Relu, Activation::Tanh, &mut seed::rng(1, "a")).unwrap();
        init_stack(&mut r, "ud", 3, &[2], Activation::Relu, Activation::Sigmoid, &mut seed::rng(1, "b")).unwrap();
        assert_eq!(r.names_with_prefix("ue").count(), 2);
        assert_eq!(r.names_with_prefix("ud").count(), 2);
        assert_eq!(r.names_with_prefix("u").count(), 0);
    }
}

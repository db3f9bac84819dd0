//! Layer building blocks shared by the three players.

pub mod embed;
pub mod mask;
pub mod spade;
pub mod spectral;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::rgt1::Container;
use crate::tensor::{Scalar, Shape, Tensor};

/// Named parameter tensors in insertion order. Insertion order is the
/// serialization order and the optimizer iteration order, so it must be
/// deterministic — build params in a fixed sequence.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    pub params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::domain(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::dim(format!(
                        "parameter `{name}`: shape {:?} incompatible with stored {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
                Ok(())
            }
            None => Err(Error::domain(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the little-endian payloads in insertion order; the
    /// freeze invariant compares these across training.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            let mut bytes = Vec::new();
            T::write_le(t.data(), &mut bytes);
            h.update(&bytes);
        }
        format!("{:x}", h.finalize())
    }

    /// Convolution weight init, N(0, std).
    pub fn init_conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        std: f64,
        rng: &mut impl Rng,
    ) {
        self.insert(name, Tensor::randn([c_out, c_in, k, k], std, rng));
    }

    /// He-scaled convolution init for relu stacks.
    pub fn init_conv_he(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut impl Rng,
    ) {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.init_conv(name, c_out, c_in, k, std, rng);
    }

    pub fn init_zeros(&mut self, name: &str, shape: impl Into<Shape>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn append_to(&self, c: &mut Container) {
        for (name, t) in &self.params {
            c.push(name, t);
        }
    }

    /// Read back every currently known parameter from a container, verifying
    /// shapes. Entries in the container that are not known parameters are
    /// ignored (they may be optimizer or spectral state).
    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        for (name, raw) in &c.entries {
            if let Some(slot) = self.params.get_mut(name) {
                if raw.shape() != slot.shape() {
                    return Err(Error::format(format!(
                        "checkpoint entry `{name}` has shape {:?}, expected {:?}",
                        raw.shape(),
                        slot.shape()
                    )));
                }
                *slot = raw.to_tensor();
            }
        }
        Ok(())
    }
}

/// Parameters bound into a graph as leaves for one forward/backward pass.
pub struct Bound {
    nodes: IndexMap<String, Node>,
    trainable: bool,
}

impl Bound {
    /// Wrap pre-existing graph nodes as a parameter binding; used by the
    /// gradient-check harnesses to route their leaves through layer code.
    pub fn from_nodes(nodes: IndexMap<String, Node>, trainable: bool) -> Bound {
        Bound { nodes, trainable }
    }

    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Bound {
        let mut nodes = IndexMap::new();
        for (name, t) in &store.params {
            nodes.insert(name.clone(), g.leaf(t.clone(), trainable));
        }
        Bound { nodes, trainable }
    }

    pub fn node(&self, name: &str) -> Result<Node> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::domain(format!("unbound parameter `{name}`")))
    }

    /// Collect (name, grad) pairs for the optimizer. Parameters that never
    /// received gradient are skipped.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<(String, Tensor<T>)> {
        if !self.trainable {
            return Vec::new();
        }
        self.nodes
            .iter()
            .filter_map(|(name, &n)| g.grad(n).map(|t| (name.clone(), t)))
            .collect()
    }
}

/// Everything a layer forward needs: the tape, parameter values, their bound
/// nodes, spectral state and whether this pass refreshes power-iteration
/// estimates (true only while the owning player is being optimized).
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    pub bank: &'a mut spectral::SpectralBank<T>,
    pub sn_update: bool,
}

/// Per-sample, per-channel normalization: (h - mean) / max(sqrt(var), 1e-5),
/// statistics over the spatial axes only. The sigma floor handles degenerate
/// constant channels.
pub fn instance_normalize<T: Scalar>(g: &mut Graph<T>, h: Node) -> Result<Node> {
    let mu = g.mean_axes(h, &[2, 3])?;
    let centered = g.sub(h, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axes(sq, &[2, 3])?;
    // max(sqrt(var), 1e-5) == sqrt(max(var, 1e-10))
    let var_floored = g.clamp_min(var, 1e-10)?;
    let sigma = g.sqrt_pos(var_floored)?;
    let inv = g.recip_pos(sigma)?;
    g.mul(centered, inv)
}

/// Convolution + bias with parameters looked up from a bound store.
pub fn conv_layer<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    x: Node,
    stride: usize,
    pad: usize,
) -> Result<Node> {
    let w = b.node(&format!("{prefix}.weight"))?;
    let bias = b.node(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, Some(bias), stride, pad)
}

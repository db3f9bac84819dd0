//! Global-class conditioning: embedding lookup + linear projection reshaped
//! to a base-resolution feature map, concatenated with the transformed mask
//! inside the generator's first block.

use rand::Rng;

use crate::error::Result;
use crate::graph::Node;
use crate::nn::{Ctx, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct ClassEmbeddingSpec {
    pub n_classes: usize,
    pub embed_dim: usize,
    pub out_channels: usize,
    pub base: usize,
}

impl ClassEmbeddingSpec {
    pub fn out_elems(&self) -> usize {
        self.out_channels * self.base * self.base
    }
}

pub fn init_embedding<T: crate::tensor::Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: &ClassEmbeddingSpec,
    rng: &mut impl Rng,
) {
    store.insert(
        &format!("{prefix}.table"),
        crate::tensor::Tensor::randn([spec.n_classes, spec.embed_dim], 0.1, rng),
    );
    let std = (1.0 / spec.embed_dim as f64).sqrt();
    store.insert(
        &format!("{prefix}.proj.weight"),
        crate::tensor::Tensor::randn([spec.embed_dim, spec.out_elems()], std, rng),
    );
    store.init_zeros(&format!("{prefix}.proj.bias"), [spec.out_elems()]);
}

/// Lookup + projection: ids -> [N, out_channels, base, base]. Pure in
/// (table, projection, id); invalid ids fail with a domain error.
pub fn embed_class<T: crate::tensor::Scalar>(
    ctx: &mut Ctx<'_, T>,
    prefix: &str,
    ids: &[usize],
    spec: &ClassEmbeddingSpec,
) -> Result<Node> {
    let table = ctx.bound.node(&format!("{prefix}.table"))?;
    let w = ctx.bound.node(&format!("{prefix}.proj.weight"))?;
    let b = ctx.bound.node(&format!("{prefix}.proj.bias"))?;
    let e = ctx.g.embedding(table, ids)?;
    let y = ctx.g.matmul(e, w)?;
    let y = ctx.g.add(y, b)?;
    ctx.g
        .reshape(y, [ids.len(), spec.out_channels, spec.base, spec.base])
}

//! Spectral weight normalization by power iteration.
//!
//! A conv weight [O,I,kh,kw] is viewed as the matrix W [O, I*kh*kw]. One
//! power-iteration step per training update refines a persisted left singular
//! vector estimate `u`; the layer then uses W / sigma_hat with
//! sigma_hat = u^T W v. On the tape u and v are constants, so the gradient of
//! the normalized weight follows the usual spectral-norm convention.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Node;

use crate::rgt1::Container;
use crate::tensor::{Scalar, Tensor};

/// Persisted `u` estimates, one per spectrally normalized weight.
#[derive(Clone, Default)]
pub struct SpectralBank<T> {
    pub u: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> SpectralBank<T> {
    pub fn new() -> SpectralBank<T> {
        SpectralBank { u: IndexMap::new() }
    }

    /// Register a weight. `u` starts as a random unit vector.
    pub fn register(&mut self, name: &str, rows: usize, rng: &mut impl Rng) {
        let mut u = Tensor::<T>::randn([rows], 1.0, rng);
        normalize(u.data_mut());
        self.u.insert(name.to_string(), u);
    }

    pub fn append_to(&self, c: &mut Container) {
        for (name, u) in &self.u {
            c.push(&format!("{name}.sn_u"), u);
        }
    }

    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        for (name, slot) in self.u.iter_mut() {
            let key = format!("{name}.sn_u");
            if let Ok(raw) = c.entry(&key) {
                if raw.shape() != slot.shape() {
                    return Err(Error::format(format!(
                        "spectral state `{key}` has shape {:?}, expected {:?}",
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

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| (x * x).to_f64()).sum::<f64>().sqrt();
    if norm > 0.0 {
        let inv = T::from_f64(1.0 / norm);
        for x in v.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Run `n_iter` power-iteration updates of `u` on W [rows, cols], then return
/// (sigma_hat, v). With `n_iter = 0` the stored `u` is used as-is and only
/// `v = normalize(W^T u)` is computed, which keeps evaluation pure.
///
/// A zero (or numerically dead) matrix reports sigma_hat = 0 and leaves `u`
/// untouched; callers skip normalization in that case.
pub fn power_iteration<T: Scalar>(
    w: &[T],
    rows: usize,
    cols: usize,
    u: &mut [T],
    n_iter: usize,
) -> (f64, Vec<T>) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(u.len(), rows);
    let mut v = vec![T::zero(); cols];
    let wt_u = |u: &[T], v: &mut [T]| {
        for x in v.iter_mut() {
            *x = T::zero();
        }
        for r in 0..rows {
            let ur = u[r];
            let row = &w[r * cols..][..cols];
            for (vx, &wx) in v.iter_mut().zip(row) {
                *vx = *vx + ur * wx;
            }
        }
    };
    let w_v = |v: &[T], u: &mut [T]| {
        for (r, ux) in u.iter_mut().enumerate() {
            let row = &w[r * cols..][..cols];
            let mut acc = T::zero();
            for (&wx, &vx) in row.iter().zip(v) {
                acc = acc + wx * vx;
            }
            *ux = acc;
        }
    };
    let norm_of = |x: &[T]| x.iter().map(|&v| (v * v).to_f64()).sum::<f64>().sqrt();

    for _ in 0..n_iter {
        wt_u(u, &mut v);
        if norm_of(&v) == 0.0 {
            return (0.0, v);
        }
        normalize(&mut v);
        w_v(&v, u);
        if norm_of(u) == 0.0 {
            return (0.0, v);
        }
        normalize(u);
    }
    // v consistent with the final u
    wt_u(u, &mut v);
    let sigma = norm_of(&v); // ||W^T u|| == u^T W v after normalizing v
    if sigma == 0.0 {
        return (0.0, v);
    }
    normalize(&mut v);
    (sigma, v)
}

/// Build the spectrally normalized weight node: w / sigma_hat with
/// sigma_hat = u^T W v built on-tape from constant u, v. When the context is
/// in `sn_update` mode, one power-iteration step refreshes the persisted `u`
/// first.
pub fn apply<T: Scalar>(ctx: &mut crate::nn::Ctx<'_, T>, weight_name: &str) -> Result<Node> {
    let w_node = ctx.bound.node(weight_name)?;
    let weight_value = ctx.store.get(weight_name)?;
    let dims = weight_value.shape().dims();
    let rows = dims[0];
    let cols: usize = dims[1..].iter().product();
    let u_t = ctx
        .bank
        .u
        .get_mut(weight_name)
        .ok_or_else(|| Error::domain(format!("no spectral state for `{weight_name}`")))?;
    let n_iter = if ctx.sn_update { 1 } else { 0 };
    let (sigma, v) = power_iteration(weight_value.data(), rows, cols, u_t.data_mut(), n_iter);
    if sigma == 0.0 {
        // degenerate weight; pass through unchanged
        return Ok(w_node);
    }
    let u_const = ctx.g.constant(u_t.reshaped([1, rows])?);
    let v_const = ctx.g.constant(Tensor::new([cols, 1], v)?);
    let w_flat = ctx.g.reshape(w_node, [rows, cols])?;
    let uw = ctx.g.matmul(u_const, w_flat)?;
    let sigma_node = ctx.g.matmul(uw, v_const)?; // [1,1]
    let sigma_scalar = ctx.g.reshape(sigma_node, [1])?;
    let inv_sigma = ctx.g.recip_pos(sigma_scalar)?;
    ctx.g.mul(w_node, inv_sigma)
}

/// Spectrally normalized convolution on `{prefix}.weight` (+ `.bias` when
/// present in the store).
pub fn sn_conv<T: Scalar>(
    ctx: &mut crate::nn::Ctx<'_, T>,
    prefix: &str,
    x: Node,
    stride: usize,
    pad: usize,
) -> Result<Node> {
    let w_bar = apply(ctx, &format!("{prefix}.weight"))?;
    let bias = match ctx.bound.node(&format!("{prefix}.bias")) {
        Ok(b) => Some(b),
        Err(_) => None,
    };
    ctx.g.conv2d(x, w_bar, bias, stride, pad)
}

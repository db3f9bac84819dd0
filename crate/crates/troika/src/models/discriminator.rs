//! Multiscale patch discriminator.
//!
//! Two sub-discriminators share the same channel-concatenated input (mask,
//! image, segmentor features); the second sees it average-pooled once
//! (window 2, stride 2). Each sub-discriminator is three spectrally
//! normalized 4x4 convs with leaky_relu(0.2) between: two stride-2 stages,
//! then a stride-1 projection to a 1-channel patch map. Post-activation
//! feature maps are returned for the feature-matching loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::nn::spade::GAN_INIT_STD;
use crate::nn::spectral::{self, SpectralBank};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::rgt1::Container;
use crate::tensor::Scalar;

pub const N_SCALES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    /// Channels of the concatenated input: (L+1) + modalities + feature maps.
    pub in_channels: usize,
    /// Widths after the first and second conv.
    pub width1: usize,
    pub width2: usize,
}

impl DiscriminatorSpec {
    pub fn new(mask_ch: usize, modalities: usize, feature_ch: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            in_channels: mask_ch + modalities + feature_ch,
            width1: 32,
            width2: 64,
        }
    }

    /// Patch-map side length after the three convs of one sub-discriminator
    /// (kernel 4, pad 1; strides 2, 2, 1), straight from the conv output
    /// formula.
    pub fn patch_side(input_side: usize) -> usize {
        let c = |s: usize, stride: usize| (s + 2 - 4) / stride + 1;
        c(c(c(input_side, 2), 2), 1)
    }

    fn to_header(&self, c: &mut Container) {
        c.set("disc.in_channels", self.in_channels);
        c.set("disc.width1", self.width1);
        c.set("disc.width2", self.width2);
    }

    fn from_header(c: &Container) -> Result<DiscriminatorSpec> {
        Ok(DiscriminatorSpec {
            in_channels: c.get_parsed("disc.in_channels")?,
            width1: c.get_parsed("disc.width1")?,
            width2: c.get_parsed("disc.width2")?,
        })
    }
}

/// Patch maps plus per-scale post-activation features.
pub struct DiscOutput {
    pub patch_maps: Vec<Node>,
    pub features: Vec<Vec<Node>>,
}

#[derive(Clone)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore<T>,
    pub bank: SpectralBank<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Discriminator<T>> {
        if spec.in_channels == 0 {
            return Err(Error::domain("discriminator needs at least one input channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bank = SpectralBank::new();
        for s in 0..N_SCALES {
            let chans = [
                (spec.in_channels, spec.width1),
                (spec.width1, spec.width2),
                (spec.width2, 1),
            ];
            for (j, &(ci, co)) in chans.iter().enumerate() {
                let prefix = format!("disc.scale{s}.conv{}", j + 1);
                params.init_conv(&format!("{prefix}.weight"), co, ci, 4, GAN_INIT_STD, &mut rng);
                params.init_zeros(&format!("{prefix}.bias"), [co]);
                bank.register(&format!("{prefix}.weight"), co, &mut rng);
            }
        }
        Ok(Discriminator { spec, params, bank })
    }

    /// `mask`, `image`, `features` must share the full spatial resolution.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        mask: Node,
        image: Node,
        features: Node,
        trainable: bool,
        sn_update: bool,
    ) -> Result<(DiscOutput, Bound)> {
        let bound = Bound::bind(g, &self.params, trainable);
        let out = self.forward_bound(g, &bound, mask, image, features, sn_update)?;
        Ok((out, bound))
    }

    /// Forward against an existing binding, so real and fake passes of one
    /// step share leaves and their gradients accumulate. Only one of the two
    /// passes per step should set `sn_update`.
    pub fn forward_bound(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        mask: Node,
        image: Node,
        features: Node,
        sn_update: bool,
    ) -> Result<DiscOutput> {
        let (mh, ih, fh) = (g.shape(mask).nchw()?, g.shape(image).nchw()?, g.shape(features).nchw()?);
        if mh.2 != ih.2 || mh.3 != ih.3 || mh.2 != fh.2 || mh.3 != fh.3 {
            return Err(Error::dim(format!(
                "discriminator inputs disagree spatially: mask {:?}, image {:?}, features {:?}",
                g.shape(mask),
                g.shape(image),
                g.shape(features)
            )));
        }
        let stacked = g.concat_c(&[mask, image, features])?;
        if g.shape(stacked)[1] != self.spec.in_channels {
            return Err(Error::dim(format!(
                "discriminator got {} input channels, spec says {}",
                g.shape(stacked)[1],
                self.spec.in_channels
            )));
        }
        let mut ctx = Ctx {
            g,
            store: &self.params,
            bound,
            bank: &mut self.bank,
            sn_update,
        };
        let mut patch_maps = Vec::new();
        let mut features_out = Vec::new();
        let mut x = stacked;
        for s in 0..N_SCALES {
            if s > 0 {
                x = ctx.g.avg_pool2d(x, 2, 2)?;
            }
            let a1 = spectral::sn_conv(&mut ctx, &format!("disc.scale{s}.conv1"), x, 2, 1)?;
            let a1 = ctx.g.leaky_relu(a1, 0.2)?;
            let a2 = spectral::sn_conv(&mut ctx, &format!("disc.scale{s}.conv2"), a1, 2, 1)?;
            let a2 = ctx.g.leaky_relu(a2, 0.2)?;
            let patch = spectral::sn_conv(&mut ctx, &format!("disc.scale{s}.conv3"), a2, 1, 1)?;
            patch_maps.push(patch);
            features_out.push(vec![a1, a2]);
        }
        Ok(DiscOutput {
            patch_maps,
            features: features_out,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set(super::KIND_KEY, "discriminator");
        self.spec.to_header(&mut c);
        self.params.append_to(&mut c);
        self.bank.append_to(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Discriminator<T>> {
        let spec = DiscriminatorSpec::from_header(c)?;
        let mut model = Discriminator::new(spec, 0)?;
        model.params.load_from(c)?;
        model.bank.load_from(c)?;
        Ok(model)
    }
}

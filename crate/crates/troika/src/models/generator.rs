//! Mask- and class-conditioned generator.
//!
//! The input mask is downsampled to the base resolution, convolved to the
//! base channel width, concatenated with the projected class embedding, and
//! pushed through a chain of SPADE residual blocks. Every block except the
//! first and last is followed by a nearest 2x upsample, so a spec with U
//! upsamples has U + 2 blocks and the output lands back at full resolution.
//! The head is leaky_relu -> 3x3 conv -> tanh, so outputs live in [-1, 1].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::nn::embed::{embed_class, init_embedding, ClassEmbeddingSpec};
use crate::nn::mask::{LabelMap, MaskPyramid};
use crate::nn::spade::{self, GAN_INIT_STD};
use crate::nn::spectral::SpectralBank;
use crate::nn::{Bound, Ctx, ParamStore};
use crate::rgt1::Container;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorSpec {
    /// Output size S: a power of two, at least 32.
    pub image_size: usize,
    /// Upsampling stages U; the block count is U + 2.
    pub n_upsamples: usize,
    /// Output image channels (imaging modalities).
    pub n_modalities: usize,
    /// Semantic labels L; masks carry L + 1 channels one-hot.
    pub n_labels: usize,
    /// Global classes K for the conditioning embedding.
    pub n_classes: usize,
    /// Channel width at the base resolution.
    pub base_channels: usize,
    /// Lower bound of the channel schedule.
    pub min_channels: usize,
    /// Embedding width.
    pub embed_dim: usize,
    /// Hidden width of the mask convs inside each SPADE layer.
    pub spade_hidden: usize,
}

impl GeneratorSpec {
    /// Desk-scale defaults.
    pub fn desk() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 64,
            n_upsamples: 3,
            n_modalities: 2,
            n_labels: 2,
            n_classes: 3,
            base_channels: 128,
            min_channels: 32,
            embed_dim: 64,
            spade_hidden: spade::SPADE_HIDDEN,
        }
    }

    /// The original full-scale configuration: 256x256 output from an 8x8
    /// base, 7 blocks, 5 upsamples, 1024 base channels.
    pub fn full_scale() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 256,
            n_upsamples: 5,
            n_modalities: 4,
            n_labels: 4,
            n_classes: 10,
            base_channels: 1024,
            min_channels: 64,
            embed_dim: 64,
            spade_hidden: spade::SPADE_HIDDEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 32 {
            return Err(Error::domain(format!(
                "image_size must be a power of two >= 32, got {}",
                self.image_size
            )));
        }
        if self.image_size >> self.n_upsamples < 2 {
            return Err(Error::domain(format!(
                "{} upsamples leave no room below image size {}",
                self.n_upsamples, self.image_size
            )));
        }
        if self.n_classes == 0 || self.n_modalities == 0 || self.base_channels == 0 {
            return Err(Error::domain("zero-sized generator dimension"));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n_upsamples + 2
    }

    pub fn base_resolution(&self) -> usize {
        self.image_size >> self.n_upsamples
    }

    /// Channel schedule: block i outputs max(min_channels, base >> i).
    pub fn channels(&self, block: usize) -> usize {
        (self.base_channels >> block).max(self.min_channels)
    }

    /// Input resolution of each block; the first two blocks share the base
    /// resolution because upsampling only starts after the second block.
    pub fn block_resolutions(&self) -> Vec<usize> {
        (0..self.n_blocks())
            .map(|i| self.base_resolution() << i.saturating_sub(1))
            .collect()
    }

    pub fn mask_channels(&self) -> usize {
        self.n_labels + 1
    }

    fn embedding_spec(&self) -> ClassEmbeddingSpec {
        ClassEmbeddingSpec {
            n_classes: self.n_classes,
            embed_dim: self.embed_dim,
            out_channels: self.base_channels,
            base: self.base_resolution(),
        }
    }

    fn to_header(&self, c: &mut Container) {
        c.set("gen.image_size", self.image_size);
        c.set("gen.n_upsamples", self.n_upsamples);
        c.set("gen.n_modalities", self.n_modalities);
        c.set("gen.n_labels", self.n_labels);
        c.set("gen.n_classes", self.n_classes);
        c.set("gen.base_channels", self.base_channels);
        c.set("gen.min_channels", self.min_channels);
        c.set("gen.embed_dim", self.embed_dim);
        c.set("gen.spade_hidden", self.spade_hidden);
    }

    fn from_header(c: &Container) -> Result<GeneratorSpec> {
        Ok(GeneratorSpec {
            image_size: c.get_parsed("gen.image_size")?,
            n_upsamples: c.get_parsed("gen.n_upsamples")?,
            n_modalities: c.get_parsed("gen.n_modalities")?,
            n_labels: c.get_parsed("gen.n_labels")?,
            n_classes: c.get_parsed("gen.n_classes")?,
            base_channels: c.get_parsed("gen.base_channels")?,
            min_channels: c.get_parsed("gen.min_channels")?,
            embed_dim: c.get_parsed("gen.embed_dim")?,
            spade_hidden: c.get_parsed("gen.spade_hidden")?,
        })
    }
}

#[derive(Clone)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<T>,
    pub bank: SpectralBank<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Generator<T>> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bank = SpectralBank::new();
        let c0 = spec.base_channels;
        params.init_conv("generator.stem.weight", c0, spec.mask_channels(), 3, GAN_INIT_STD, &mut rng);
        params.init_zeros("generator.stem.bias", [c0]);
        init_embedding(&mut params, "generator.embed", &spec.embedding_spec(), &mut rng);
        for i in 0..spec.n_blocks() {
            let c_in = if i == 0 { 2 * c0 } else { spec.channels(i - 1) };
            let c_out = spec.channels(i);
            spade::init_resblock(
                &mut params,
                &mut bank,
                &format!("generator.block{i}"),
                c_in,
                c_out,
                spec.mask_channels(),
                spec.spade_hidden,
                &mut rng,
            );
        }
        let c_last = spec.channels(spec.n_blocks() - 1);
        params.init_conv("generator.head.weight", spec.n_modalities, c_last, 3, GAN_INIT_STD, &mut rng);
        params.init_zeros("generator.head.bias", [spec.n_modalities]);
        Ok(Generator { spec, params, bank })
    }

    /// Forward a batch of masks + class ids. Returns the image node (in
    /// [-1, 1]) and the parameter binding for gradient collection.
    ///
    /// `trainable` binds parameters with gradients; `sn_update` runs one
    /// power-iteration refresh per spectral weight and should only be set on
    /// the generator's own optimization step. With both flags false the call
    /// is pure and bit-deterministic.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        masks: &[&LabelMap],
        class_ids: &[usize],
        trainable: bool,
        sn_update: bool,
    ) -> Result<(Node, Bound)> {
        if masks.len() != class_ids.len() {
            return Err(Error::dim(format!(
                "{} masks vs {} class ids",
                masks.len(),
                class_ids.len()
            )));
        }
        for m in masks {
            if m.size != self.spec.image_size {
                return Err(Error::dim(format!(
                    "mask size {} != generator image size {}",
                    m.size, self.spec.image_size
                )));
            }
        }
        for &c in class_ids {
            if c >= self.spec.n_classes {
                return Err(Error::domain(format!(
                    "class id {c} out of range for {} classes",
                    self.spec.n_classes
                )));
            }
        }
        let resolutions = self.spec.block_resolutions();
        let mut unique = resolutions.clone();
        unique.dedup();
        let pyramid = MaskPyramid::<T>::build(masks, self.spec.n_labels, &unique)?;

        let bound = Bound::bind(g, &self.params, trainable);
        let mut ctx = Ctx {
            g,
            store: &self.params,
            bound: &bound,
            bank: &mut self.bank,
            sn_update,
        };
        let base = self.spec.base_resolution();
        let m0 = pyramid.node_at(ctx.g, base)?;
        let stem_w = ctx.bound.node("generator.stem.weight")?;
        let stem_b = ctx.bound.node("generator.stem.bias")?;
        let mut x = ctx.g.conv2d(m0, stem_w, Some(stem_b), 1, 1)?;
        let e = embed_class(&mut ctx, "generator.embed", class_ids, &self.spec.embedding_spec())?;
        x = ctx.g.concat_c(&[x, e])?;

        let n = self.spec.n_blocks();
        for i in 0..n {
            let mask_i = pyramid.node_at(ctx.g, resolutions[i])?;
            x = spade::resblock(&mut ctx, &format!("generator.block{i}"), x, mask_i)?;
            if i >= 1 && i <= n - 2 {
                x = ctx.g.upsample_nearest2x(x)?;
            }
        }
        x = ctx.g.leaky_relu(x, 0.2)?;
        let head_w = ctx.bound.node("generator.head.weight")?;
        let head_b = ctx.bound.node("generator.head.bias")?;
        x = ctx.g.conv2d(x, head_w, Some(head_b), 1, 1)?;
        let out = ctx.g.tanh(x)?;
        Ok((out, bound))
    }

    /// Pure inference for one mask/class pair, returning the image tensor.
    pub fn synthesize(&mut self, mask: &LabelMap, class_id: usize) -> Result<crate::tensor::Tensor<T>> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, &[mask], &[class_id], false, false)?;
        let v = g.value(out).clone();
        v.reshaped([
            self.spec.n_modalities,
            self.spec.image_size,
            self.spec.image_size,
        ])
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set(super::KIND_KEY, "generator");
        self.spec.to_header(&mut c);
        self.params.append_to(&mut c);
        self.bank.append_to(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Generator<T>> {
        let spec = GeneratorSpec::from_header(c)?;
        let mut model = Generator::new(spec, 0)?;
        model.params.load_from(c)?;
        model.bank.load_from(c)?;
        Ok(model)
    }
}

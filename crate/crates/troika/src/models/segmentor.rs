//! U-Net segmentor: residual conv encoder, five-stage decoder with skip
//! connections, logits at input resolution.
//!
//! The encoder stem halves resolution, an average pool halves it again, and
//! every stage after the first downsamples once more; a spec with N stages
//! needs N + 1 decoder blocks (conv + relu + nearest upsample each) to get
//! back to full resolution. The default four-stage preset therefore has the
//! five decoder blocks of the full-scale design; `deep()` mirrors the
//! 34-layer residual encoder layout ([3,4,6,3] blocks per stage).
//!
//! Blocks normalize with per-sample instance statistics, matching the rest
//! of the crate's batch-free convention. Third-player feature maps are the
//! post-softmax class probabilities by default; the last decoder activation
//! is selectable instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Node};
use crate::nn::mask::LabelMap;
use crate::nn::spectral::SpectralBank;
use crate::nn::{conv_layer, instance_normalize, Bound, Ctx, ParamStore};
use crate::rgt1::Container;
use crate::tensor::{Scalar, Tensor};

/// What the frozen segmentor hands to the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureKind {
    /// Post-softmax probability maps, L+1 channels.
    #[default]
    Probability,
    /// Post-activation output of the last decoder block.
    Decoder,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Result<FeatureKind> {
        match s {
            "probability" => Ok(FeatureKind::Probability),
            "decoder" => Ok(FeatureKind::Decoder),
            other => Err(Error::domain(format!(
                "unknown feature kind `{other}` (try `probability` or `decoder`)"
            ))),
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Probability => write!(f, "probability"),
            FeatureKind::Decoder => write!(f, "decoder"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentorSpec {
    pub in_channels: usize,
    pub n_labels: usize,
    pub base_channels: usize,
    /// Residual blocks per encoder stage; the stage count sets the depth of
    /// the whole network.
    pub stage_depths: Vec<usize>,
    pub feature_kind: FeatureKind,
}

impl SegmentorSpec {
    pub fn desk() -> SegmentorSpec {
        SegmentorSpec {
            in_channels: 2,
            n_labels: 2,
            base_channels: 16,
            stage_depths: vec![1, 1, 1, 1],
            feature_kind: FeatureKind::Probability,
        }
    }

    /// Deep preset with the 34-layer residual encoder stage layout.
    pub fn deep() -> SegmentorSpec {
        SegmentorSpec {
            base_channels: 64,
            stage_depths: vec![3, 4, 6, 3],
            ..SegmentorSpec::desk()
        }
    }

    /// Two-stage preset small enough for finite-difference sweeps at S=16.
    pub fn tiny() -> SegmentorSpec {
        SegmentorSpec {
            in_channels: 1,
            n_labels: 1,
            base_channels: 4,
            stage_depths: vec![1, 1],
            feature_kind: FeatureKind::Probability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.is_empty() || self.stage_depths.len() > 5 {
            return Err(Error::domain("segmentor needs 1..=5 encoder stages"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::domain("segmentor stage depth must be >= 1"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::domain("zero-sized segmentor dimension"));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn n_decoder_blocks(&self) -> usize {
        self.n_stages() + 1
    }

    /// Total downsampling factor at the bottleneck.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.n_stages() + 1)
    }

    /// Output channels of encoder stage i (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Output channels of decoder block j (1-based).
    pub fn decoder_channels(&self, block: usize) -> usize {
        let n = self.n_stages();
        if block + 1 <= n {
            self.base_channels << (n - 1 - block)
        } else {
            self.base_channels
        }
    }

    pub fn logit_channels(&self) -> usize {
        self.n_labels + 1
    }

    pub fn feature_channels(&self) -> usize {
        match self.feature_kind {
            FeatureKind::Probability => self.logit_channels(),
            FeatureKind::Decoder => self.base_channels,
        }
    }

    fn to_header(&self, c: &mut Container) {
        c.set("seg.in_channels", self.in_channels);
        c.set("seg.n_labels", self.n_labels);
        c.set("seg.base_channels", self.base_channels);
        c.set(
            "seg.stage_depths",
            self.stage_depths
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        c.set("seg.feature_kind", self.feature_kind);
    }

    fn from_header(c: &Container) -> Result<SegmentorSpec> {
        let depths: Vec<usize> = c
            .get("seg.stage_depths")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::format("bad stage_depths")))
            .collect::<Result<_>>()?;
        Ok(SegmentorSpec {
            in_channels: c.get_parsed("seg.in_channels")?,
            n_labels: c.get_parsed("seg.n_labels")?,
            base_channels: c.get_parsed("seg.base_channels")?,
            stage_depths: depths,
            feature_kind: FeatureKind::parse(c.get("seg.feature_kind")?)?,
        })
    }
}

#[derive(Clone)]
pub struct Segmentor<T> {
    pub spec: SegmentorSpec,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Segmentor<T> {
    pub fn new(spec: SegmentorSpec, seed: u64) -> Result<Segmentor<T>> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = spec.base_channels;
        p.init_conv_he("seg.stem.weight", c, spec.in_channels, 3, &mut rng);
        p.init_zeros("seg.stem.bias", [c]);
        for i in 1..=spec.n_stages() {
            let c_in = if i == 1 { c } else { spec.stage_channels(i - 1) };
            let c_out = spec.stage_channels(i);
            for j in 0..spec.stage_depths[i - 1] {
                let (bi, bo) = if j == 0 { (c_in, c_out) } else { (c_out, c_out) };
                let prefix = format!("seg.stage{i}.block{j}");
                p.init_conv_he(&format!("{prefix}.conv1.weight"), bo, bi, 3, &mut rng);
                p.init_zeros(&format!("{prefix}.conv1.bias"), [bo]);
                p.init_conv_he(&format!("{prefix}.conv2.weight"), bo, bo, 3, &mut rng);
                p.init_zeros(&format!("{prefix}.conv2.bias"), [bo]);
                let needs_proj = bi != bo || (j == 0 && i > 1);
                if needs_proj {
                    p.init_conv_he(&format!("{prefix}.proj.weight"), bo, bi, 1, &mut rng);
                    p.init_zeros(&format!("{prefix}.proj.bias"), [bo]);
                }
            }
        }
        for j in 1..=spec.n_decoder_blocks() {
            let (c_in, c_out) = Self::decoder_io(&spec, j);
            p.init_conv_he(&format!("seg.dec{j}.conv.weight"), c_out, c_in, 3, &mut rng);
            p.init_zeros(&format!("seg.dec{j}.conv.bias"), [c_out]);
        }
        p.init_conv_he("seg.head.weight", spec.logit_channels(), c, 1, &mut rng);
        p.init_zeros("seg.head.bias", [spec.logit_channels()]);
        Ok(Segmentor { spec, params: p })
    }

    fn decoder_io(spec: &SegmentorSpec, j: usize) -> (usize, usize) {
        let n = spec.n_stages();
        let prev = if j == 1 {
            spec.stage_channels(n)
        } else {
            spec.decoder_channels(j - 1)
        };
        let skip = if j <= n - 1 {
            spec.stage_channels(n - j)
        } else if j == n {
            spec.base_channels // stem features
        } else {
            0
        };
        (prev + skip, spec.decoder_channels(j))
    }

    /// Full forward pass: logits at input resolution plus the last decoder
    /// activation (for the alternative third-player feature tap).
    pub fn forward_full(
        &self,
        g: &mut Graph<T>,
        image: Node,
        trainable: bool,
    ) -> Result<(Node, Node, Bound)> {
        let bound = Bound::bind(g, &self.params, trainable);
        let (logits, last_dec) = self.forward_bound(g, image, &bound)?;
        Ok((logits, last_dec, bound))
    }

    /// Forward against an externally created parameter binding (gradient
    /// checks route their own leaves through here).
    pub fn forward_bound(&self, g: &mut Graph<T>, image: Node, bound: &Bound) -> Result<(Node, Node)> {
        let (_, c_in, h, w) = g.shape(image).nchw()?;
        if c_in != self.spec.in_channels {
            return Err(Error::dim(format!(
                "segmentor expects {} input channels, got {c_in}",
                self.spec.in_channels
            )));
        }
        let f = self.spec.downsample_factor();
        if h % f != 0 || w % f != 0 || h / f == 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} not divisible by the downsample factor {f}"
            )));
        }
        let mut bank = SpectralBank::new(); // segmentor has no spectral layers
        let mut ctx = Ctx {
            g,
            store: &self.params,
            bound,
            bank: &mut bank,
            sn_update: false,
        };

        let stem = conv_layer(ctx.g, ctx.bound, "seg.stem", image, 2, 1)?;
        let stem = instance_normalize(ctx.g, stem)?;
        let stem = ctx.g.relu(stem)?;
        let mut x = ctx.g.avg_pool2d(stem, 2, 2)?;
        let mut stage_outs = Vec::new();
        for i in 1..=self.spec.n_stages() {
            for j in 0..self.spec.stage_depths[i - 1] {
                let stride = if j == 0 && i > 1 { 2 } else { 1 };
                x = Self::encoder_block(&mut ctx, &format!("seg.stage{i}.block{j}"), x, stride)?;
            }
            stage_outs.push(x);
        }

        let n = self.spec.n_stages();
        let mut d = x;
        for j in 1..=self.spec.n_decoder_blocks() {
            d = ctx.g.upsample_nearest2x(d)?;
            let skip = if j <= n - 1 {
                Some(stage_outs[n - j - 1])
            } else if j == n {
                Some(stem)
            } else {
                None
            };
            if let Some(s) = skip {
                d = ctx.g.concat_c(&[d, s])?;
            }
            d = conv_layer(ctx.g, ctx.bound, &format!("seg.dec{j}.conv"), d, 1, 1)?;
            d = instance_normalize(ctx.g, d)?;
            d = ctx.g.relu(d)?;
        }
        let logits = conv_layer(ctx.g, ctx.bound, "seg.head", d, 1, 0)?;
        Ok((logits, d))
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Node, trainable: bool) -> Result<(Node, Bound)> {
        let (logits, _, bound) = self.forward_full(g, image, trainable)?;
        Ok((logits, bound))
    }

    fn encoder_block(ctx: &mut Ctx<'_, T>, prefix: &str, x: Node, stride: usize) -> Result<Node> {
        let main = conv_layer(ctx.g, ctx.bound, &format!("{prefix}.conv1"), x, stride, 1)?;
        let main = instance_normalize(ctx.g, main)?;
        let main = ctx.g.relu(main)?;
        let main = conv_layer(ctx.g, ctx.bound, &format!("{prefix}.conv2"), main, 1, 1)?;
        let main = instance_normalize(ctx.g, main)?;
        let skip = if ctx.bound.node(&format!("{prefix}.proj.weight")).is_ok() {
            let s = conv_layer(ctx.g, ctx.bound, &format!("{prefix}.proj"), x, stride, 0)?;
            instance_normalize(ctx.g, s)?
        } else {
            x
        };
        let sum = ctx.g.add(main, skip)?;
        ctx.g.relu(sum)
    }

    /// Argmax label map for a single [C,S,S] image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<LabelMap> {
        let dims = image.shape().dims().to_vec();
        let (c, h, w) = match dims.as_slice() {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::dim(format!("predict wants [C,S,S], got {other:?}"))),
        };
        if h != w {
            return Err(Error::dim("predict wants square images"));
        }
        let mut g = Graph::new();
        let x = g.constant(image.reshaped([1, c, h, w])?);
        let (logits, _) = self.forward(&mut g, x, false)?;
        let v = g.value(logits);
        let ch = self.spec.logit_channels();
        let mut labels = vec![0u8; h * w];
        for pix in 0..h * w {
            let mut best = 0usize;
            let mut best_v = v.data()[pix];
            for cl in 1..ch {
                let vv = v.data()[cl * h * w + pix];
                if vv > best_v {
                    best_v = vv;
                    best = cl;
                }
            }
            labels[pix] = best as u8;
        }
        LabelMap::new(h, labels)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set(super::KIND_KEY, "segmentor");
        self.spec.to_header(&mut c);
        self.params.append_to(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Segmentor<T>> {
        let spec = SegmentorSpec::from_header(c)?;
        let mut model = Segmentor::new(spec, 0)?;
        model.params.load_from(c)?;
        Ok(model)
    }

    pub fn freeze(self) -> FrozenSegmentor<T> {
        FrozenSegmentor { model: self }
    }
}

/// A segmentor whose parameters are never bound with gradients; the third
/// player of the adversarial game.
#[derive(Clone)]
pub struct FrozenSegmentor<T> {
    model: Segmentor<T>,
}

impl<T: Scalar> FrozenSegmentor<T> {
    pub fn spec(&self) -> &SegmentorSpec {
        &self.model.spec
    }

    pub fn checksum(&self) -> String {
        self.model.params.checksum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.model.params.l2_norm()
    }

    pub fn thaw(&self) -> &Segmentor<T> {
        &self.model
    }

    /// Feature maps handed to the discriminator. Gradients flow through the
    /// activations back to `image`, never into the frozen parameters (they
    /// are bound without gradient buffers).
    pub fn features(&self, g: &mut Graph<T>, image: Node) -> Result<Node> {
        let (logits, last_dec, _) = self.model.forward_full(g, image, false)?;
        match self.model.spec.feature_kind {
            FeatureKind::Probability => g.softmax_c(logits),
            FeatureKind::Decoder => Ok(last_dec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn logits_at_input_resolution_and_labels_in_range() {
        let spec = SegmentorSpec::desk();
        let seg = Segmentor::<f32>::new(spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f32>::randn([2, 64, 64], 0.5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(img.reshaped([1, 2, 64, 64]).unwrap());
        let (logits, _) = seg.forward(&mut g, x, false).unwrap();
        assert_eq!(g.value(logits).shape().dims(), &[1, 3, 64, 64]);

        let labels = seg.predict(&img).unwrap();
        assert!(labels.labels.iter().all(|&l| l <= 2));
    }

    #[test]
    fn desk_preset_has_five_decoder_blocks() {
        let spec = SegmentorSpec::desk();
        assert_eq!(spec.n_decoder_blocks(), 5);
        assert_eq!(spec.downsample_factor(), 32);
        // the deep preset is representable
        let deep = SegmentorSpec::deep();
        assert_eq!(deep.stage_depths, vec![3, 4, 6, 3]);
        Segmentor::<f32>::new(deep, 0).unwrap();
    }

    #[test]
    fn feature_probabilities_sum_to_one() {
        let seg = Segmentor::<f32>::new(SegmentorSpec::tiny(), 3).unwrap();
        let frozen = seg.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([1, 1, 16, 16], 1.0, &mut rng));
        let f = frozen.features(&mut g, x).unwrap();
        let v = g.value(f);
        assert_eq!(v.shape().dims(), &[1, 2, 16, 16]);
        for pix in 0..256 {
            let s = v.data()[pix] + v.data()[256 + pix];
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn frozen_parameters_receive_no_gradients() {
        let seg = Segmentor::<f64>::new(SegmentorSpec::tiny(), 5).unwrap();
        let frozen = seg.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        // image requires grad: gradients must flow to it but not the params
        let img = g.leaf(Tensor::randn([1, 1, 16, 16], 1.0, &mut rng), true);
        let f = frozen.features(&mut g, img).unwrap();
        let sq = g.mul(f, f).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(img).is_some(), "image gradient must flow");
        // probe: forward again with a bound to inspect leaves
        let mut g2 = Graph::new();
        let img2 = g2.leaf(Tensor::randn([1, 1, 16, 16], 1.0, &mut rng), true);
        let (logits, bound) = frozen.thaw().forward(&mut g2, img2, false).unwrap();
        let s = g2.mean_all(logits).unwrap();
        g2.backward(s).unwrap();
        assert!(bound.grads(&g2).is_empty());
    }

    #[test]
    fn gradient_check_tiny_preset() {
        use crate::graph::gradcheck::{finite_diff_check, CheckOpts, DEFAULT_TOL};
        let seg = Segmentor::<f64>::new(SegmentorSpec::tiny(), 7).unwrap();
        let names: Vec<String> = seg.params.params.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut inputs = vec![Tensor::<f64>::randn([1, 1, 16, 16], 1.0, &mut rng)];
        for n in &names {
            inputs.push(seg.params.get(n).unwrap().clone());
        }
        let spec = seg.spec.clone();
        let rep = finite_diff_check(
            &inputs,
            CheckOpts { max_coords: 4, ..Default::default() },
            |g, nodes| {
                let mut st = ParamStore::new();
                let mut bound_nodes = indexmap::IndexMap::new();
                for (i, n) in names.iter().enumerate() {
                    st.insert(n, g.value(nodes[i + 1]).clone());
                    bound_nodes.insert(n.clone(), nodes[i + 1]);
                }
                let model = Segmentor { spec: spec.clone(), params: st };
                let bound = Bound::from_nodes(bound_nodes, true);
                let (logits, _) = model.forward_bound(g, nodes[0], &bound)?;
                let sq = g.mul(logits, logits)?;
                g.mean_all(sq)
            },
        )
        .unwrap();
        assert!(rep.passes(DEFAULT_TOL), "{rep:?}");
    }
}

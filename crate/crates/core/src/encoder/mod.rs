//! Small pre-activation residual encoder shared by both views.
//!
//! Layout: a 3x3 stem convolution, then one stack of residual blocks per
//! entry of `stack_widths`. Every stack after the first halves the spatial
//! extent in its first block. A block computes
//!
//! ```text
//! h   = relu(gn1(x))
//! out = conv2(relu(gn2(conv1(h)))) + shortcut
//! ```
//!
//! where the shortcut is `x`, or a strided 1x1 projection of `h` when the
//! width or extent changes. Representations for the contrastive loss are
//! the outputs of the last block of each tapped stack, flattened over
//! channels and positions (`D = C * H * W`).

pub mod layers;
pub mod params;

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};
use crate::loss::LayerRepresentation;
use layers::{
    conv_backward, conv_forward, group_norm_backward, group_norm_forward, relu, relu_backward, Act,
    ConvCache, ConvShape, NormCache,
};
pub use params::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stack_widths: Vec<usize>,
    pub blocks_per_stack: Vec<usize>,
    /// Stack indices whose outputs feed the contrastive loss.
    pub loss_layers: Vec<usize>,
    pub stem_stride: usize,
    /// Upper bound on group-norm groups; each layer uses the largest divisor
    /// of its width not above this.
    pub norm_groups: usize,
    /// Multiplier on the initial weights of the last convolution of every
    /// residual branch and of the stem.
    pub init_scale: f32,
    pub rng_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 12,
            stack_widths: vec![16, 32, 64, 128],
            blocks_per_stack: vec![1, 1, 1, 1],
            loss_layers: vec![2, 3],
            stem_stride: 2,
            norm_groups: 8,
            init_scale: 0.1,
            rng_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CsfError::InvalidArgument(msg));
        if self.input_channels == 0 {
            return bad("encoder needs at least one input channel".into());
        }
        if self.stack_widths.len() < 2 {
            return bad("encoder needs at least two stacks".into());
        }
        if self.stack_widths.len() != self.blocks_per_stack.len() {
            return bad(format!(
                "{} stack widths but {} block counts",
                self.stack_widths.len(),
                self.blocks_per_stack.len()
            ));
        }
        if self.stack_widths.contains(&0) || self.blocks_per_stack.contains(&0) {
            return bad("stack widths and block counts must be positive".into());
        }
        if self.loss_layers.is_empty() {
            return bad("no loss layers tapped".into());
        }
        if let Some(l) = self.loss_layers.iter().find(|&&l| l >= self.stack_widths.len()) {
            return bad(format!(
                "loss layer {l} out of range for {} stacks",
                self.stack_widths.len()
            ));
        }
        if self.stem_stride == 0 || self.norm_groups == 0 {
            return bad("stem stride and norm groups must be positive".into());
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return bad("init scale must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Spatial extent after the stem and after every stack, for an input of
    /// side `extent`.
    pub fn extents(&self, extent: usize) -> (usize, Vec<usize>) {
        let stem = (extent + 2 - 3) / self.stem_stride + 1;
        let mut cur = stem;
        let mut out = Vec::new();
        for i in 0..self.stack_widths.len() {
            if i > 0 {
                cur = (cur + 2 - 3) / 2 + 1;
            }
            out.push(cur);
        }
        (stem, out)
    }

    /// Flattened size of each tapped representation for an `h x w` input.
    pub fn tap_dims(&self, h: usize, w: usize) -> BTreeMap<usize, usize> {
        let (_, hs) = self.extents(h);
        let (_, ws) = self.extents(w);
        self.loss_layers
            .iter()
            .map(|&l| (l, self.stack_widths[l] * hs[l] * ws[l]))
            .collect()
    }
}

fn groups_for(width: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(width)).rev().find(|g| width % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
struct ConvLayer {
    shape: ConvShape,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct NormLayer {
    groups: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: NormLayer,
    conv1: ConvLayer,
    norm2: NormLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

struct BlockCache {
    norm1: NormCache,
    h1: Act,
    conv1: ConvCache,
    norm2: NormCache,
    h2: Act,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    stem: ConvCache,
    blocks: Vec<Vec<BlockCache>>,
    tap_shapes: BTreeMap<usize, (usize, usize, usize, usize)>,
    /// Fingerprint of the parameters used for this forward pass.
    pub params_fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: ParamSet,
    stem: ConvLayer,
    stacks: Vec<Vec<Block>>,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, shape: ConvShape, gain: f32) -> ConvLayer {
        let std = gain * (2.0 / shape.fan_in() as f32).sqrt();
        let weight: Vec<f32> = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..shape.out_channels * shape.fan_in())
                .map(|_| normal.sample(&mut self.rng))
                .collect()
        } else {
            vec![0.0; shape.out_channels * shape.fan_in()]
        };
        let w = self.params.push(
            format!("{name}.weight"),
            vec![shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
            weight,
        );
        let b = self.params.push(
            format!("{name}.bias"),
            vec![shape.out_channels],
            vec![0.0; shape.out_channels],
        );
        ConvLayer {
            shape,
            weight: w,
            bias: b,
        }
    }

    fn norm(&mut self, name: &str, width: usize, max_groups: usize) -> NormLayer {
        let gamma = self.params.push(format!("{name}.gamma"), vec![width], vec![1.0; width]);
        let beta = self.params.push(format!("{name}.beta"), vec![width], vec![0.0; width]);
        NormLayer {
            groups: groups_for(width, max_groups),
            gamma,
            beta,
        }
    }
}

fn conv3(in_channels: usize, out_channels: usize, stride: usize) -> ConvShape {
    ConvShape {
        in_channels,
        out_channels,
        kernel: 3,
        stride,
        pad: 1,
    }
}

impl Encoder {
    /// Builds an encoder with parameters drawn deterministically from
    /// `cfg.rng_seed`.
    pub fn build(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
        };
        let stem = b.conv(
            "stem",
            conv3(cfg.input_channels, cfg.stack_widths[0], cfg.stem_stride),
            cfg.init_scale,
        );
        let mut stacks = Vec::new();
        let mut in_width = cfg.stack_widths[0];
        for (s, (&width, &blocks)) in cfg.stack_widths.iter().zip(&cfg.blocks_per_stack).enumerate() {
            let mut stack = Vec::new();
            for k in 0..blocks {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let name = format!("stack{s}.block{k}");
                let norm1 = b.norm(&format!("{name}.norm1"), in_width, cfg.norm_groups);
                let conv1 = b.conv(&format!("{name}.conv1"), conv3(in_width, width, stride), 1.0);
                let norm2 = b.norm(&format!("{name}.norm2"), width, cfg.norm_groups);
                let conv2 = b.conv(&format!("{name}.conv2"), conv3(width, width, 1), cfg.init_scale);
                let shortcut = (stride != 1 || in_width != width).then(|| {
                    b.conv(
                        &format!("{name}.shortcut"),
                        ConvShape {
                            in_channels: in_width,
                            out_channels: width,
                            kernel: 1,
                            stride,
                            pad: 0,
                        },
                        cfg.init_scale,
                    )
                });
                stack.push(Block {
                    norm1,
                    conv1,
                    norm2,
                    conv2,
                    shortcut,
                });
                in_width = width;
            }
            stacks.push(stack);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            stem,
            stacks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match exactly.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    fn weight(&self, layer: &ConvLayer) -> ArrayView2<'_, f32> {
        let t = &self.params.tensors[layer.weight];
        ArrayView2::from_shape((layer.shape.out_channels, layer.shape.fan_in()), &t.data)
            .expect("weight layout")
    }

    fn vector(&self, index: usize) -> ArrayView1<'_, f32> {
        ArrayView1::from(&self.params.tensors[index].data)
    }

    fn check_input(&self, batch: &ArrayView4<f32>) -> Result<()> {
        let (b, c, h, w) = batch.dim();
        if c != self.cfg.input_channels {
            return Err(CsfError::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.cfg.input_channels
            )));
        }
        if b == 0 || h == 0 || w == 0 {
            return Err(CsfError::Shape(format!("empty input batch {:?}", batch.dim())));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(CsfError::NonFinite("encoder input".into()));
        }
        Ok(())
    }

    /// Runs the network, returning the tapped stack outputs, the final stack
    /// output, and the tape for [`Encoder::backward`].
    fn run(&self, batch: ArrayView4<f32>) -> Result<(BTreeMap<usize, Act>, Act, Tape)> {
        self.check_input(&batch)?;
        let (b, c, h, w) = batch.dim();
        let input = Act {
            data: batch
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, b * h * w))
                .expect("contiguous input"),
            batch: b,
            height: h,
            width: w,
        };
        let (mut x, stem_cache) = conv_forward(
            &input,
            &self.stem.shape,
            self.weight(&self.stem),
            self.vector(self.stem.bias),
        );
        let mut taps = BTreeMap::new();
        let mut tap_shapes = BTreeMap::new();
        let mut caches = Vec::new();
        for (s, stack) in self.stacks.iter().enumerate() {
            let mut stack_caches = Vec::new();
            for block in stack {
                let (out, cache) = self.block_forward(block, &x);
                stack_caches.push(cache);
                x = out;
            }
            caches.push(stack_caches);
            if self.cfg.loss_layers.contains(&s) {
                tap_shapes.insert(s, (x.channels(), x.batch, x.height, x.width));
                taps.insert(s, x.clone());
            }
        }
        Ok((
            taps,
            x,
            Tape {
                stem: stem_cache,
                blocks: caches,
                tap_shapes,
                params_fingerprint: self.params.fingerprint(),
            },
        ))
    }

    fn block_forward(&self, block: &Block, x: &Act) -> (Act, BlockCache) {
        let (a1, norm1) = group_norm_forward(
            x,
            block.norm1.groups,
            self.vector(block.norm1.gamma),
            self.vector(block.norm1.beta),
        );
        let h1 = relu(a1);
        let (c1, conv1) = conv_forward(
            &h1,
            &block.conv1.shape,
            self.weight(&block.conv1),
            self.vector(block.conv1.bias),
        );
        let (a2, norm2) = group_norm_forward(
            &c1,
            block.norm2.groups,
            self.vector(block.norm2.gamma),
            self.vector(block.norm2.beta),
        );
        let h2 = relu(a2);
        let (mut out, conv2) = conv_forward(
            &h2,
            &block.conv2.shape,
            self.weight(&block.conv2),
            self.vector(block.conv2.bias),
        );
        let shortcut = match &block.shortcut {
            Some(proj) => {
                let (sc, cache) =
                    conv_forward(&h1, &proj.shape, self.weight(proj), self.vector(proj.bias));
                out.data += &sc.data;
                Some(cache)
            }
            None => {
                out.data += &x.data;
                None
            }
        };
        (
            out,
            BlockCache {
                norm1,
                h1,
                conv1,
                norm2,
                h2,
                conv2,
                shortcut,
            },
        )
    }

    /// Flattened representations at every tapped stack, `[B, C * H * W]`.
    pub fn encode_multi_layer(&self, batch: ArrayView4<f32>) -> Result<LayerRepresentation> {
        let (taps, _, _) = self.run(batch)?;
        Ok(flatten_taps(&taps))
    }

    /// Like [`Encoder::encode_multi_layer`] but keeps the tape for a
    /// backward pass.
    pub fn encode_with_tape(&self, batch: ArrayView4<f32>) -> Result<(LayerRepresentation, Tape)> {
        let (taps, _, tape) = self.run(batch)?;
        Ok((flatten_taps(&taps), tape))
    }

    /// Global spatial mean of the last stack's feature map, `[B, C_last]`.
    pub fn pooled_representation(&self, batch: ArrayView4<f32>) -> Result<Array2<f64>> {
        let (_, last, _) = self.run(batch)?;
        Ok(global_average(&last))
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to each tapped representation.
    pub fn backward(
        &self,
        tape: Tape,
        tap_grads: &BTreeMap<usize, Array2<f64>>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        if tape.params_fingerprint != self.params.fingerprint() {
            return Err(CsfError::InvalidArgument(
                "parameters changed between forward and backward".into(),
            ));
        }
        self.params.check_layout(grads)?;
        for layer in tap_grads.keys() {
            if !tape.tap_shapes.contains_key(layer) {
                return Err(CsfError::InvalidArgument(format!(
                    "gradient given for untapped layer {layer}"
                )));
            }
        }
        let Tape {
            stem: stem_cache,
            blocks: mut caches,
            tap_shapes,
            ..
        } = tape;

        let mut dcur: Option<Act> = None;
        for s in (0..self.stacks.len()).rev() {
            if let Some(g) = tap_grads.get(&s) {
                let shape = tap_shapes[&s];
                let d = unflatten_grad(g, shape)?;
                dcur = Some(match dcur {
                    Some(mut acc) => {
                        acc.data += &d.data;
                        acc
                    }
                    None => d,
                });
            }
            let stack_caches = caches.pop().expect("one cache per stack");
            if let Some(mut d) = dcur.take() {
                for (block, cache) in self.stacks[s].iter().zip(stack_caches).rev() {
                    d = self.block_backward(block, cache, d, grads);
                }
                dcur = Some(d);
            }
        }
        if let Some(d) = dcur {
            let (_, dw, db) =
                conv_backward(&d, &stem_cache, &self.stem.shape, self.weight(&self.stem), false);
            accumulate(grads, self.stem.weight, dw.as_slice().expect("contiguous"));
            accumulate(grads, self.stem.bias, db.as_slice().expect("contiguous"));
        }
        Ok(())
    }

    fn block_backward(&self, block: &Block, cache: BlockCache, dout: Act, grads: &mut ParamSet) -> Act {
        let (dh2, dw, db) = conv_backward(
            &dout,
            &cache.conv2,
            &block.conv2.shape,
            self.weight(&block.conv2),
            true,
        );
        accumulate(grads, block.conv2.weight, dw.as_slice().expect("contiguous"));
        accumulate(grads, block.conv2.bias, db.as_slice().expect("contiguous"));
        let da2 = relu_backward(dh2.expect("requested"), &cache.h2);
        let (dc1, dg, dbeta) = group_norm_backward(&da2, &cache.norm2, self.vector(block.norm2.gamma));
        accumulate(grads, block.norm2.gamma, dg.as_slice().expect("contiguous"));
        accumulate(grads, block.norm2.beta, dbeta.as_slice().expect("contiguous"));
        let (dh1, dw, db) = conv_backward(
            &dc1,
            &cache.conv1,
            &block.conv1.shape,
            self.weight(&block.conv1),
            true,
        );
        accumulate(grads, block.conv1.weight, dw.as_slice().expect("contiguous"));
        accumulate(grads, block.conv1.bias, db.as_slice().expect("contiguous"));
        let mut dh1 = dh1.expect("requested");

        let mut dx = match (&block.shortcut, cache.shortcut) {
            (Some(proj), Some(sc_cache)) => {
                let (dsc, dw, db) = conv_backward(&dout, &sc_cache, &proj.shape, self.weight(proj), true);
                accumulate(grads, proj.weight, dw.as_slice().expect("contiguous"));
                accumulate(grads, proj.bias, db.as_slice().expect("contiguous"));
                dh1.data += &dsc.expect("requested").data;
                None
            }
            _ => Some(dout),
        };
        let da1 = relu_backward(dh1, &cache.h1);
        let (dnorm, dg, dbeta) = group_norm_backward(&da1, &cache.norm1, self.vector(block.norm1.gamma));
        accumulate(grads, block.norm1.gamma, dg.as_slice().expect("contiguous"));
        accumulate(grads, block.norm1.beta, dbeta.as_slice().expect("contiguous"));
        match dx.take() {
            Some(mut identity) => {
                identity.data += &dnorm.data;
                identity
            }
            None => dnorm,
        }
    }
}

fn accumulate(grads: &mut ParamSet, index: usize, values: &[f32]) {
    for (g, v) in grads.tensors[index].data.iter_mut().zip(values) {
        *g += v;
    }
}

fn flatten_taps(taps: &BTreeMap<usize, Act>) -> LayerRepresentation {
    LayerRepresentation {
        layers: taps.iter().map(|(&l, act)| (l, flatten(act))).collect(),
    }
}

/// `[C, B * HW]` to `[B, C * HW]`.
fn flatten(act: &Act) -> Array2<f64> {
    let (c, b, p) = (act.channels(), act.batch, act.plane());
    let mut out = Array2::<f64>::zeros((b, c * p));
    for ch in 0..c {
        let row = act.data.row(ch);
        for bi in 0..b {
            for i in 0..p {
                out[[bi, ch * p + i]] = row[bi * p + i] as f64;
            }
        }
    }
    out
}

fn unflatten_grad(g: &Array2<f64>, shape: (usize, usize, usize, usize)) -> Result<Act> {
    let (c, b, h, w) = shape;
    let p = h * w;
    if g.dim() != (b, c * p) {
        return Err(CsfError::Shape(format!(
            "representation gradient {:?} does not match tap [{b}, {}]",
            g.dim(),
            c * p
        )));
    }
    let mut data = Array2::<f32>::zeros((c, b * p));
    for ch in 0..c {
        for bi in 0..b {
            for i in 0..p {
                data[[ch, bi * p + i]] = g[[bi, ch * p + i]] as f32;
            }
        }
    }
    Ok(Act {
        data,
        batch: b,
        height: h,
        width: w,
    })
}

fn global_average(act: &Act) -> Array2<f64> {
    let (c, b, p) = (act.channels(), act.batch, act.plane());
    Array2::from_shape_fn((b, c), |(bi, ch)| {
        let row = act.data.row(ch);
        (bi * p..(bi + 1) * p).map(|i| row[i] as f64).sum::<f64>() / p as f64
    })
}

/// Stacks `[C, H, W]` arrays into a `[B, C, H, W]` batch.
pub fn stack_batch<'a>(items: impl IntoIterator<Item = ndarray::ArrayView3<'a, f32>>) -> Result<Array4<f32>> {
    let views: Vec<_> = items.into_iter().collect();
    if views.is_empty() {
        return Err(CsfError::Shape("empty batch".into()));
    }
    let expanded: Vec<_> = views.iter().map(|v| v.view().insert_axis(ndarray::Axis(0))).collect();
    ndarray::concatenate(ndarray::Axis(0), &expanded)
        .map_err(|e| CsfError::Shape(format!("cannot stack batch: {e}")))
}

/// Mean over the spatial axes of a `[B, C, H, W]` feature map.
pub fn spatial_mean(features: ArrayView4<f32>) -> Array2<f64> {
    let (b, c, h, w) = features.dim();
    Array2::from_shape_fn((b, c), |(bi, ch)| {
        features
            .slice(ndarray::s![bi, ch, .., ..])
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / (h * w) as f64
    })
}

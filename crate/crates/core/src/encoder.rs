//! Small convolutional vision encoder with a hand-written backward pass.
//!
//! Each block is a 3x3 convolution (padding 1, configurable stride) followed
//! by ReLU. The last feature map is average-pooled and projected linearly to
//! the embedding dimension. Bias terms are optional; without them the
//! encoder is positively homogeneous in its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{normalize_backward, EmbeddingBatch, ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub stride: usize,
}

/// Architecture descriptor, persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: ImageShape,
    pub blocks: Vec<ConvBlock>,
    pub embed_dim: usize,
    /// Add a bias to every convolution and to the projection.
    #[serde(default)]
    pub bias: bool,
}

impl ArchSpec {
    /// Four blocks, 64-d embedding, for 3x32x32 inputs.
    pub fn default_32() -> Self {
        Self::small(ImageShape::new(3, 32, 32), 64)
    }

    /// Four-block layout `[16/1, 32/2, 32/2, 64/2]` for any input shape.
    pub fn small(input: ImageShape, embed_dim: usize) -> Self {
        Self {
            input,
            blocks: vec![
                ConvBlock { out_channels: 16, stride: 1 },
                ConvBlock { out_channels: 32, stride: 2 },
                ConvBlock { out_channels: 32, stride: 2 },
                ConvBlock { out_channels: 64, stride: 2 },
            ],
            embed_dim,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    fn per_layer(&self) -> usize {
        if self.bias {
            2
        } else {
            1
        }
    }

    /// Parameter index of block `i`'s weight (`i == blocks.len()` is the
    /// projection).
    fn weight_index(&self, i: usize) -> usize {
        i * self.per_layer()
    }

    fn bias_index(&self, i: usize) -> Option<usize> {
        self.bias.then(|| i * 2 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(2..=6).contains(&self.blocks.len()) {
            errs.push(format!("encoder needs 2..=6 blocks, got {}", self.blocks.len()));
        }
        if !(32..=256).contains(&self.embed_dim) {
            errs.push(format!("embed_dim must be in 32..=256, got {}", self.embed_dim));
        }
        if self.input.numel() == 0 {
            errs.push("input shape has zero size".into());
        }
        if self.blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0 || b.stride > 2) {
            errs.push("blocks need out_channels > 0 and stride in {1, 2}".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `(channels, height, width)` entering each block, plus the final map.
    fn feature_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![(self.input.channels, self.input.height, self.input.width)];
        for b in &self.blocks {
            let &(_, h, w) = shapes.last().unwrap();
            shapes.push((b.out_channels, conv_out(h, b.stride), conv_out(w, b.stride)));
        }
        shapes
    }

    /// Names and shapes of all parameter tensors, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.input.channels;
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![b.out_channels, c_in, 3, 3]));
            if self.bias {
                out.push((format!("block{i}.bias"), vec![b.out_channels]));
            }
            c_in = b.out_channels;
        }
        out.push(("head.weight".into(), vec![self.embed_dim, c_in]));
        if self.bias {
            out.push(("head.bias".into(), vec![self.embed_dim]));
        }
        out
    }

    fn last_channels(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(self.input.channels)
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}

/// Named flat parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Gradients with the same layout as the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(enc: &VisionEncoder<T>) -> Self {
        Self {
            tensors: enc.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().flatten().for_each(|x| *x = *x * s);
    }

    pub fn flat(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flatten()
    }
}

/// Trainable encoder: architecture, parameters and the seed used to
/// initialize them.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder<T = f32> {
    arch: ArchSpec,
    seed: u64,
    params: Vec<Param<T>>,
}

/// Per-example activations kept for the backward pass.
pub struct Tape<T> {
    /// im2col matrix per block, `(c_in * 9) x positions`.
    cols: Vec<Vec<T>>,
    /// Post-ReLU activations per block, `c_out x positions`.
    acts: Vec<Vec<T>>,
    pooled: Vec<T>,
}

impl<T: Scalar> VisionEncoder<T> {
    /// He-normal convolutions, `1/sqrt(fan_in)` projection, zero biases.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![T::zero(); len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                    (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self { arch, seed, params })
    }

    /// Rebuild from stored tensors; names and shapes must match the layout.
    pub fn from_params(arch: ArchSpec, seed: u64, params: Vec<Param<T>>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            let len: usize = shape.iter().product();
            if &p.name != name || &p.shape != shape || p.data.len() != len {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match layout {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Self { arch, seed, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> VisionEncoder<U> {
        VisionEncoder {
            arch: self.arch.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, shape: ImageShape) -> Result<()> {
        if shape != self.arch.input {
            return Err(Error::InputSpec(format!(
                "encoder expects {}x{}x{} images, got {}x{}x{}",
                self.arch.input.channels,
                self.arch.input.height,
                self.arch.input.width,
                shape.channels,
                shape.height,
                shape.width
            )));
        }
        Ok(())
    }

    /// Forward one image (`C*H*W` values); returns the raw embedding and tape.
    pub fn forward_one(&self, image: &[T]) -> (Vec<T>, Tape<T>) {
        let shapes = self.arch.feature_shapes();
        let mut x = image.to_vec();
        let mut cols_all = Vec::with_capacity(self.arch.blocks.len());
        let mut acts = Vec::with_capacity(self.arch.blocks.len());
        for (i, b) in self.arch.blocks.iter().enumerate() {
            let (c_in, h, w) = shapes[i];
            let (c_out, ho, wo) = shapes[i + 1];
            let cols = im2col(&x, c_in, h, w, b.stride, ho, wo);
            let positions = ho * wo;
            let weight = &self.params[self.arch.weight_index(i)].data;
            let mut y = vec![T::zero(); c_out * positions];
            if let Some(b) = self.arch.bias_index(i) {
                let bias = &self.params[b].data;
                for (o, row) in y.chunks_exact_mut(positions).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[o]);
                }
            }
            T::gemm(c_out, c_in * 9, positions, T::one(), weight, false, &cols, false, T::one(), &mut y);
            y.iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
            cols_all.push(cols);
            x = y.clone();
            acts.push(y);
        }
        let (c_last, hl, wl) = *shapes.last().unwrap();
        let positions = T::from_usize(hl * wl).unwrap();
        let pooled: Vec<T> = x
            .chunks_exact(hl * wl)
            .take(c_last)
            .map(|ch| ch.iter().copied().sum::<T>() / positions)
            .collect();
        let nb = self.arch.blocks.len();
        let hw = &self.params[self.arch.weight_index(nb)].data;
        let d = self.arch.embed_dim;
        let mut emb = match self.arch.bias_index(nb) {
            Some(b) => self.params[b].data.clone(),
            None => vec![T::zero(); d],
        };
        T::gemm(d, c_last, 1, T::one(), hw, false, &pooled, false, T::one(), &mut emb);
        (
            emb,
            Tape {
                cols: cols_all,
                acts,
                pooled,
            },
        )
    }

    /// Backward one example from `dL/d(embedding)`.
    ///
    /// Returns `dL/d(image)` and, when `param_grads` is set, the parameter
    /// gradient.
    pub fn backward_one(&self, tape: &Tape<T>, grad_emb: &[T], param_grads: bool) -> (Vec<T>, Option<ParamGrads<T>>) {
        let shapes = self.arch.feature_shapes();
        let nb = self.arch.blocks.len();
        let d = self.arch.embed_dim;
        let c_last = self.arch.last_channels();
        let mut grads = param_grads.then(|| ParamGrads::zeros_like(self));

        if let Some(g) = grads.as_mut() {
            // head.weight[d, c] += grad_emb[d] * pooled[c]
            T::gemm(d, 1, c_last, T::one(), grad_emb, false, &tape.pooled, false, T::zero(), &mut g.tensors[self.arch.weight_index(nb)]);
            if let Some(b) = self.arch.bias_index(nb) {
                g.tensors[b].copy_from_slice(grad_emb);
            }
        }
        let mut grad_pooled = vec![T::zero(); c_last];
        T::gemm(c_last, d, 1, T::one(), &self.params[self.arch.weight_index(nb)].data, true, grad_emb, false, T::zero(), &mut grad_pooled);

        let (_, hl, wl) = shapes[nb];
        let inv_pos = T::one() / T::from_usize(hl * wl).unwrap();
        let mut grad_act: Vec<T> = grad_pooled
            .iter()
            .flat_map(|g| std::iter::repeat_n(*g * inv_pos, hl * wl))
            .collect();

        for i in (0..nb).rev() {
            let (c_in, h, w) = shapes[i];
            let (c_out, ho, wo) = shapes[i + 1];
            let positions = ho * wo;
            // ReLU: gradient passes where the output is positive
            for (g, a) in grad_act.iter_mut().zip(&tape.acts[i]) {
                if *a <= T::zero() {
                    *g = T::zero();
                }
            }
            if let Some(g) = grads.as_mut() {
                T::gemm(c_out, positions, c_in * 9, T::one(), &grad_act, false, &tape.cols[i], true, T::zero(), &mut g.tensors[self.arch.weight_index(i)]);
                if let Some(b) = self.arch.bias_index(i) {
                    for (o, row) in grad_act.chunks_exact(positions).enumerate() {
                        g.tensors[b][o] = row.iter().copied().sum();
                    }
                }
            }
            let mut grad_cols = vec![T::zero(); c_in * 9 * positions];
            T::gemm(c_in * 9, c_out, positions, T::one(), &self.params[self.arch.weight_index(i)].data, true, &grad_act, false, T::zero(), &mut grad_cols);
            grad_act = col2im(&grad_cols, c_in, h, w, self.arch.blocks[i].stride, ho, wo);
        }
        (grad_act, grads)
    }

    /// Encode a batch; rows are unit-normalized when `normalize` is set.
    pub fn encode(&self, images: &ImageBatch<T>, normalize: bool) -> Result<EmbeddingBatch<T>> {
        self.check_input(images.shape())?;
        let rows: Vec<Vec<T>> = images
            .images()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|img| self.forward_one(img).0)
            .collect();
        let raw = EmbeddingBatch::from_rows(&rows, false)?;
        if normalize {
            raw.normalized()
        } else {
            Ok(raw)
        }
    }

    /// Vector-Jacobian product with respect to the input images.
    ///
    /// `grad_emb` holds `dL/d(embedding)` per example (`N x D`); when
    /// `normalize` is set it is taken with respect to the unit-normalized
    /// embedding.
    pub fn input_vjp(&self, images: &ImageBatch<T>, grad_emb: &[T], normalize: bool) -> Result<Vec<T>> {
        let (input_grad, _) = self.vjp(images, grad_emb, normalize, false)?;
        Ok(input_grad)
    }

    /// Parameter gradient of `sum_i <grad_emb_i, embedding_i>`, summed over
    /// the batch in example order.
    pub fn param_vjp(&self, images: &ImageBatch<T>, grad_emb: &[T], normalize: bool) -> Result<ParamGrads<T>> {
        let (_, g) = self.vjp(images, grad_emb, normalize, true)?;
        Ok(g.expect("requested parameter gradients"))
    }

    /// Forward every example, keeping tapes for a later backward pass.
    pub fn forward_tapes(&self, images: &ImageBatch<T>) -> Result<Vec<(Vec<T>, Tape<T>)>> {
        self.check_input(images.shape())?;
        Ok(images
            .images()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|img| self.forward_one(img))
            .collect())
    }

    /// Parameter gradient from stored tapes and per-example `dL/d(embedding)`
    /// (raw embeddings), summed in example order.
    pub fn backward_tapes(&self, tapes: &[(Vec<T>, Tape<T>)], grad_emb: &[T]) -> ParamGrads<T> {
        let d = self.arch.embed_dim;
        let per: Vec<ParamGrads<T>> = tapes
            .par_iter()
            .zip(grad_emb.par_chunks_exact(d))
            .map(|((_, tape), g)| self.backward_one(tape, g, true).1.expect("requested"))
            .collect();
        let mut total = ParamGrads::zeros_like(self);
        for g in &per {
            total.add_assign(g);
        }
        total
    }

    fn vjp(&self, images: &ImageBatch<T>, grad_emb: &[T], normalize: bool, params: bool) -> Result<(Vec<T>, Option<ParamGrads<T>>)> {
        self.check_input(images.shape())?;
        let d = self.arch.embed_dim;
        if grad_emb.len() != images.len() * d {
            return Err(Error::Shape(format!(
                "embedding gradient has {} values, expected {}x{d}",
                grad_emb.len(),
                images.len()
            )));
        }
        let per: Vec<(Vec<T>, Option<ParamGrads<T>>)> = images
            .images()
            .zip(grad_emb.chunks_exact(d))
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(img, g)| {
                let (emb, tape) = self.forward_one(img);
                let g = if normalize {
                    normalize_backward(&emb, g)
                } else {
                    g.to_vec()
                };
                self.backward_one(&tape, &g, params)
            })
            .collect();
        let mut input = Vec::with_capacity(images.data().len());
        let mut total = params.then(|| ParamGrads::zeros_like(self));
        for (gi, gp) in per {
            input.extend(gi);
            if let (Some(t), Some(gp)) = (total.as_mut(), gp) {
                t.add_assign(&gp);
            }
        }
        Ok((input, total))
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let positions = ho * wo;
    let mut cols = vec![T::zero(); c * 9 * positions];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ch * 3 + ky) * 3 + kx) * positions;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ch * h * w + iy as usize * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let positions = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ((ch * 3 + ky) * 3 + kx) * positions;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ch * h * w + iy as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            let v = x[dst + ix as usize] + cols[src + ox];
                            x[dst + ix as usize] = v;
                        }
                    }
                }
            }
        }
    }
    x
}

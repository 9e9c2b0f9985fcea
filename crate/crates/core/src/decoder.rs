//! Per-pixel MLP decoder.
//!
//! The blended feature vector is concatenated with camera embeddings in the fixed
//! order `f_p ⊕ x_cam ⊕ e_p ⊕ x_rot` (disabled embeddings are left out) and passed
//! through one SiLU hidden layer of width 64. The first three outputs go through a
//! sigmoid to give RGB; the remaining `C` outputs are semantic logits, exposed as
//! softmax probabilities.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::raster::RenderOutput;
use crate::scene::sigmoid;

pub const HIDDEN_WIDTH: usize = 64;
pub const RGB_CHANNELS: usize = 3;

/// Which camera embeddings are appended to the blended feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Normalized pixel position `e_p`, 2 dims.
    pub use_pixel: bool,
    /// Camera center `x_cam`, 3 dims.
    pub use_campos: bool,
    /// Camera orientation as XYZ Euler angles `x_rot`, 3 dims.
    pub use_camrot: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            use_pixel: true,
            use_campos: true,
            use_camrot: false,
        }
    }
}

impl EmbeddingConfig {
    pub const NONE: EmbeddingConfig = EmbeddingConfig {
        use_pixel: false,
        use_campos: false,
        use_camrot: false,
    };
    pub const ALL: EmbeddingConfig = EmbeddingConfig {
        use_pixel: true,
        use_campos: true,
        use_camrot: true,
    };

    pub fn dim(&self) -> usize {
        2 * self.use_pixel as usize + 3 * self.use_campos as usize + 3 * self.use_camrot as usize
    }

    /// Bit 0 pixel, bit 1 campos, bit 2 camrot.
    pub fn flags(&self) -> u8 {
        self.use_pixel as u8 | (self.use_campos as u8) << 1 | (self.use_camrot as u8) << 2
    }

    pub fn from_flags(flags: u8) -> Option<Self> {
        if flags & !0b111 != 0 {
            return None;
        }
        Some(EmbeddingConfig {
            use_pixel: flags & 1 != 0,
            use_campos: flags & 2 != 0,
            use_camrot: flags & 4 != 0,
        })
    }

    /// Parses a comma-separated list such as `pixel,campos`. `none` or an empty string
    /// disables everything.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut cfg = EmbeddingConfig::NONE;
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match item {
                "pixel" => cfg.use_pixel = true,
                "campos" => cfg.use_campos = true,
                "camrot" => cfg.use_camrot = true,
                "none" => {}
                other => return Err(Error::InvalidInput(format!("unknown embedding `{other}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Constant replacements for the embedding inputs, applied to every pixel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campos: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camrot: Option<[f64; 3]>,
}

impl EmbeddingOverrides {
    pub fn is_empty(&self) -> bool {
        self.campos.is_none() && self.pixel.is_none() && self.camrot.is_none()
    }

    /// Fails when an override targets an embedding the config leaves out.
    pub fn check(&self, config: &EmbeddingConfig) -> Result<()> {
        let bad = [
            ("campos", self.campos.is_some() && !config.use_campos),
            ("pixel", self.pixel.is_some() && !config.use_pixel),
            ("camrot", self.camrot.is_some() && !config.use_camrot),
        ];
        match bad.iter().find(|(_, b)| *b) {
            Some((name, _)) => Err(Error::InvalidInput(format!(
                "override for `{name}` but that embedding is disabled in the decoder"
            ))),
            None => Ok(()),
        }
    }
}

/// Two-layer MLP. Weights are row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub feature_dim: usize,
    pub class_count: usize,
    pub config: EmbeddingConfig,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Decoder {
    pub fn zeros(feature_dim: usize, config: EmbeddingConfig, class_count: usize) -> Self {
        let input = feature_dim + config.dim();
        let output = RGB_CHANNELS + class_count;
        Decoder {
            feature_dim,
            class_count,
            config,
            w1: vec![0.0; HIDDEN_WIDTH * input],
            b1: vec![0.0; HIDDEN_WIDTH],
            w2: vec![0.0; output * HIDDEN_WIDTH],
            b2: vec![0.0; output],
        }
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)` per layer.
    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        config: EmbeddingConfig,
        class_count: usize,
        rng: &mut R,
    ) -> Self {
        let mut dec = Decoder::zeros(feature_dim, config, class_count);
        let k1 = 1.0 / (dec.input_dim() as f64).sqrt();
        let k2 = 1.0 / (HIDDEN_WIDTH as f64).sqrt();
        for v in dec.w1.iter_mut().chain(dec.b1.iter_mut()) {
            *v = rng.random_range(-k1..k1);
        }
        for v in dec.w2.iter_mut().chain(dec.b2.iter_mut()) {
            *v = rng.random_range(-k2..k2);
        }
        dec
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.config.dim()
    }

    pub fn output_dim(&self) -> usize {
        RGB_CHANNELS + self.class_count
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, o) = (self.input_dim(), self.output_dim());
        if self.w1.len() != HIDDEN_WIDTH * i
            || self.b1.len() != HIDDEN_WIDTH
            || self.w2.len() != o * HIDDEN_WIDTH
            || self.b2.len() != o
        {
            return Err(Error::Contract("decoder weight shapes do not match its dimensions".into()));
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for v in self.w1.iter_mut().chain(&mut self.b1).chain(&mut self.w2).chain(&mut self.b2) {
            *v = *v as f32 as f64;
        }
    }
}

/// `e_p` for pixel `(u, v)`: the pixel center mapped to `[-1, 1]²`.
pub fn pixel_embedding(u: u32, v: u32, cam: &Camera) -> Result<[f64; 2]> {
    if u >= cam.width || v >= cam.height {
        return Err(Error::Contract(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    Ok(pixel_embedding_unchecked(u, v, cam.width, cam.height))
}

#[inline]
fn pixel_embedding_unchecked(u: u32, v: u32, width: u32, height: u32) -> [f64; 2] {
    [
        2.0 * (u as f64 + 0.5) / width as f64 - 1.0,
        2.0 * (v as f64 + 0.5) / height as f64 - 1.0,
    ]
}

/// Embedding values that are constant over one image.
#[derive(Debug, Clone, Copy)]
struct ViewEmbedding {
    campos: Vector3<f64>,
    camrot: Vector3<f64>,
    pixel: Option<Vector2<f64>>,
}

impl ViewEmbedding {
    fn new(cam: &Camera, overrides: &EmbeddingOverrides) -> Self {
        ViewEmbedding {
            campos: overrides.campos.map(Vector3::from).unwrap_or_else(|| cam.camera_center()),
            camrot: overrides.camrot.map(Vector3::from).unwrap_or_else(|| cam.euler_xyz()),
            pixel: overrides.pixel.map(Vector2::from),
        }
    }

    /// Writes the embedding slots (everything after the feature) into `x`.
    #[inline]
    fn write(&self, config: &EmbeddingConfig, u: u32, v: u32, width: u32, height: u32, x: &mut [f64]) {
        let mut k = 0;
        if config.use_campos {
            x[..3].copy_from_slice(self.campos.as_slice());
            k = 3;
        }
        if config.use_pixel {
            let e = self
                .pixel
                .map(|p| [p.x, p.y])
                .unwrap_or_else(|| pixel_embedding_unchecked(u, v, width, height));
            x[k..k + 2].copy_from_slice(&e);
            k += 2;
        }
        if config.use_camrot {
            x[k..k + 3].copy_from_slice(self.camrot.as_slice());
        }
    }
}

/// Builds the MLP input for one pixel: `f_p ⊕ x_cam ⊕ e_p (⊕ x_rot)`.
pub fn assemble_input(
    f_p: &[f64],
    cam: &Camera,
    u: u32,
    v: u32,
    config: &EmbeddingConfig,
    overrides: &EmbeddingOverrides,
) -> Result<Vec<f64>> {
    overrides.check(config)?;
    pixel_embedding(u, v, cam)?;
    let mut x = vec![0.0; f_p.len() + config.dim()];
    x[..f_p.len()].copy_from_slice(f_p);
    ViewEmbedding::new(cam, overrides).write(config, u, v, cam.width, cam.height, &mut x[f_p.len()..]);
    Ok(x)
}

/// Decoder output for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpOutput {
    pub rgb: [f64; 3],
    /// Raw semantic logits (`C` entries).
    pub logits: Vec<f64>,
    /// Softmax of `logits`.
    pub probs: Vec<f64>,
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Hidden pre-activations, hidden activations and raw outputs.
struct Activations {
    pre: [f64; HIDDEN_WIDTH],
    hidden: [f64; HIDDEN_WIDTH],
    out: Vec<f64>,
}

impl Activations {
    fn new(output_dim: usize) -> Self {
        Activations {
            pre: [0.0; HIDDEN_WIDTH],
            hidden: [0.0; HIDDEN_WIDTH],
            out: vec![0.0; output_dim],
        }
    }
}

#[inline]
fn forward_into(x: &[f64], dec: &Decoder, act: &mut Activations) {
    let n_in = x.len();
    for (j, row) in dec.w1.chunks_exact(n_in).enumerate() {
        let z = dec.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        act.pre[j] = z;
        act.hidden[j] = silu(z);
    }
    for (k, row) in dec.w2.chunks_exact(HIDDEN_WIDTH).enumerate() {
        act.out[k] = dec.b2[k] + row.iter().zip(&act.hidden).map(|(w, h)| w * h).sum::<f64>();
    }
}

pub fn mlp_forward(x: &[f64], dec: &Decoder) -> Result<MlpOutput> {
    if x.len() != dec.input_dim() {
        return Err(Error::Contract(format!(
            "decoder expects {} inputs, got {}",
            dec.input_dim(),
            x.len()
        )));
    }
    let mut act = Activations::new(dec.output_dim());
    forward_into(x, dec, &mut act);
    let rgb = [sigmoid(act.out[0]), sigmoid(act.out[1]), sigmoid(act.out[2])];
    let logits = act.out[RGB_CHANNELS..].to_vec();
    let mut probs = vec![0.0; logits.len()];
    softmax_into(&logits, &mut probs);
    Ok(MlpOutput { rgb, logits, probs })
}

/// Gradients of the decoder weights, laid out like [`Decoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderGradients {
    pub fn zeros_like(dec: &Decoder) -> Self {
        DecoderGradients {
            w1: vec![0.0; dec.w1.len()],
            b1: vec![0.0; dec.b1.len()],
            w2: vec![0.0; dec.w2.len()],
            b2: vec![0.0; dec.b2.len()],
        }
    }

    pub fn add(&mut self, other: &DecoderGradients) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Full output of [`mlp_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackward {
    pub d_x: Vec<f64>,
    pub weights: DecoderGradients,
}

/// Accumulates weight gradients into `grads` and writes the input gradient into `d_x`
/// (only its first `d_x.len()` entries are computed).
#[inline]
fn backward_accumulate(
    x: &[f64],
    dec: &Decoder,
    act: &Activations,
    d_out: &[f64],
    grads: &mut DecoderGradients,
    d_x: &mut [f64],
) {
    let n_in = x.len();
    let mut d_pre = [0.0; HIDDEN_WIDTH];
    for (k, &dy) in d_out.iter().enumerate() {
        if dy == 0.0 {
            continue;
        }
        grads.b2[k] += dy;
        let row = &dec.w2[k * HIDDEN_WIDTH..(k + 1) * HIDDEN_WIDTH];
        let grow = &mut grads.w2[k * HIDDEN_WIDTH..(k + 1) * HIDDEN_WIDTH];
        for j in 0..HIDDEN_WIDTH {
            grow[j] += dy * act.hidden[j];
            d_pre[j] += dy * row[j];
        }
    }
    for j in 0..HIDDEN_WIDTH {
        d_pre[j] *= silu_grad(act.pre[j]);
    }
    d_x.iter_mut().for_each(|v| *v = 0.0);
    for (j, &dz) in d_pre.iter().enumerate() {
        if dz == 0.0 {
            continue;
        }
        grads.b1[j] += dz;
        let row = &dec.w1[j * n_in..(j + 1) * n_in];
        let grow = &mut grads.w1[j * n_in..(j + 1) * n_in];
        for (g, &xi) in grow.iter_mut().zip(x) {
            *g += dz * xi;
        }
        for (d, &w) in d_x.iter_mut().zip(row) {
            *d += dz * w;
        }
    }
}

/// Reverse-mode gradients of one decoder evaluation. `d_rgb` is the gradient with
/// respect to the sigmoid RGB outputs, `d_logits` with respect to the raw semantic logits.
pub fn mlp_backward(x: &[f64], dec: &Decoder, d_rgb: &[f64; 3], d_logits: &[f64]) -> Result<MlpBackward> {
    if x.len() != dec.input_dim() || d_logits.len() != dec.class_count {
        return Err(Error::Contract("mlp_backward dimension mismatch".into()));
    }
    let mut act = Activations::new(dec.output_dim());
    forward_into(x, dec, &mut act);
    let mut d_out = vec![0.0; dec.output_dim()];
    for c in 0..RGB_CHANNELS {
        let s = sigmoid(act.out[c]);
        d_out[c] = d_rgb[c] * s * (1.0 - s);
    }
    d_out[RGB_CHANNELS..].copy_from_slice(d_logits);
    let mut weights = DecoderGradients::zeros_like(dec);
    let mut d_x = vec![0.0; x.len()];
    backward_accumulate(x, dec, &act, &d_out, &mut weights, &mut d_x);
    Ok(MlpBackward { d_x, weights })
}

/// Decoded image for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedImage {
    pub width: u32,
    pub height: u32,
    /// Final RGB after background compositing, row-major `H × W × 3`.
    pub rgb: Vec<f64>,
    /// MLP RGB before compositing.
    pub decoded_rgb: Vec<f64>,
    /// Raw semantic logits, `H × W × C`.
    pub logits: Vec<f64>,
    /// Softmax probabilities, `H × W × C`.
    pub semantics: Vec<f64>,
    pub class_count: usize,
}

impl DecodedImage {
    /// Argmax class per pixel; empty when there is no semantic head.
    pub fn labels(&self) -> Vec<u32> {
        if self.class_count == 0 {
            return Vec::new();
        }
        self.semantics
            .chunks_exact(self.class_count)
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0 as u32
            })
            .collect()
    }
}

fn check_decode_inputs(render: &RenderOutput, cam: &Camera, dec: &Decoder, overrides: &EmbeddingOverrides) -> Result<()> {
    dec.validate()?;
    overrides.check(&dec.config)?;
    if render.feature_dim != dec.feature_dim {
        return Err(Error::Contract(format!(
            "feature map has dimension {}, decoder expects {}",
            render.feature_dim, dec.feature_dim
        )));
    }
    if render.width != cam.width || render.height != cam.height {
        return Err(Error::Contract("render size does not match camera".into()));
    }
    Ok(())
}

/// Pixels decoded together as one matrix product.
const PIXEL_CHUNK: usize = 256;

/// Decoder weights as column-major matrices for batched evaluation.
struct BatchWeights {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl BatchWeights {
    fn new(dec: &Decoder) -> Self {
        BatchWeights {
            w1: DMatrix::from_row_slice(HIDDEN_WIDTH, dec.input_dim(), &dec.w1),
            b1: DVector::from_column_slice(&dec.b1),
            w2: DMatrix::from_row_slice(dec.output_dim(), HIDDEN_WIDTH, &dec.w2),
            b2: DVector::from_column_slice(&dec.b2),
        }
    }
}

/// Activations for a chunk of pixels, one column per pixel.
struct BatchActivations {
    x: DMatrix<f64>,
    pre: DMatrix<f64>,
    sig: DMatrix<f64>,
    hidden: DMatrix<f64>,
    out: DMatrix<f64>,
}

/// Builds the input matrix for pixels `start..start + count` and runs the MLP.
fn batch_forward(
    render: &RenderOutput,
    dec: &Decoder,
    weights: &BatchWeights,
    view: &ViewEmbedding,
    start: usize,
    count: usize,
) -> BatchActivations {
    let d = dec.feature_dim;
    let (w, h) = (render.width, render.height);
    let mut x = DMatrix::zeros(dec.input_dim(), count);
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let pixel = start + j;
        let (u, v) = ((pixel % w as usize) as u32, (pixel / w as usize) as u32);
        let col = col.as_mut_slice();
        col[..d].copy_from_slice(&render.feature_map[pixel * d..(pixel + 1) * d]);
        view.write(&dec.config, u, v, w, h, &mut col[d..]);
    }
    let mut pre = &weights.w1 * &x;
    for mut col in pre.column_iter_mut() {
        col += &weights.b1;
    }
    let sig = pre.map(sigmoid);
    let hidden = pre.component_mul(&sig);
    let mut out = &weights.w2 * &hidden;
    for mut col in out.column_iter_mut() {
        col += &weights.b2;
    }
    BatchActivations {
        x,
        pre,
        sig,
        hidden,
        out,
    }
}

fn pixel_chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(PIXEL_CHUNK))
        .map(|c| (c * PIXEL_CHUNK, PIXEL_CHUNK.min(n - c * PIXEL_CHUNK)))
        .collect()
}

/// Decodes every pixel of a blended feature map and composites the background
/// through the residual transmittance.
pub fn decode_image(
    render: &RenderOutput,
    cam: &Camera,
    dec: &Decoder,
    background: &[f64; 3],
    overrides: &EmbeddingOverrides,
) -> Result<DecodedImage> {
    check_decode_inputs(render, cam, dec, overrides)?;
    let c = dec.class_count;
    let n = render.pixel_count();
    let view = ViewEmbedding::new(cam, overrides);
    let weights = BatchWeights::new(dec);

    struct Chunk {
        rgb: Vec<f64>,
        decoded: Vec<f64>,
        logits: Vec<f64>,
        probs: Vec<f64>,
    }
    let chunks: Vec<Chunk> = pixel_chunks(n)
        .into_par_iter()
        .map(|(start, count)| {
            let act = batch_forward(render, dec, &weights, &view, start, count);
            let mut chunk = Chunk {
                rgb: vec![0.0; count * 3],
                decoded: vec![0.0; count * 3],
                logits: vec![0.0; count * c],
                probs: vec![0.0; count * c],
            };
            for (j, y) in act.out.column_iter().enumerate() {
                let y = y.as_slice();
                let t = render.transmittance_map[start + j];
                for ch in 0..RGB_CHANNELS {
                    let s = sigmoid(y[ch]);
                    chunk.decoded[j * 3 + ch] = s;
                    chunk.rgb[j * 3 + ch] = s * (1.0 - t) + background[ch] * t;
                }
                if c > 0 {
                    chunk.logits[j * c..(j + 1) * c].copy_from_slice(&y[RGB_CHANNELS..]);
                    softmax_into(&y[RGB_CHANNELS..], &mut chunk.probs[j * c..(j + 1) * c]);
                }
            }
            chunk
        })
        .collect();

    let mut out = DecodedImage {
        width: render.width,
        height: render.height,
        rgb: Vec::with_capacity(n * 3),
        decoded_rgb: Vec::with_capacity(n * 3),
        logits: Vec::with_capacity(n * c),
        semantics: Vec::with_capacity(n * c),
        class_count: c,
    };
    for chunk in chunks {
        out.rgb.extend(chunk.rgb);
        out.decoded_rgb.extend(chunk.decoded);
        out.logits.extend(chunk.logits);
        out.semantics.extend(chunk.probs);
    }
    Ok(out)
}

/// Gradients flowing out of [`decode_backward`].
#[derive(Debug, Clone)]
pub struct DecodeGradients {
    pub decoder: DecoderGradients,
    /// `H × W × D`, feeds the rasterizer backward pass.
    pub feature_map: Vec<f64>,
    /// `H × W`, gradient with respect to the residual transmittance.
    pub transmittance: Vec<f64>,
}

/// Backward of [`decode_image`] given gradients on the composited RGB image and,
/// when the decoder has a semantic head, on the raw logits.
#[allow(clippy::too_many_arguments)]
pub fn decode_backward(
    render: &RenderOutput,
    cam: &Camera,
    dec: &Decoder,
    background: &[f64; 3],
    overrides: &EmbeddingOverrides,
    d_rgb: &[f64],
    d_logits: Option<&[f64]>,
) -> Result<DecodeGradients> {
    check_decode_inputs(render, cam, dec, overrides)?;
    let n = render.pixel_count();
    let c = dec.class_count;
    let d = dec.feature_dim;
    if d_rgb.len() != n * 3 {
        return Err(Error::Contract("rgb gradient has the wrong size".into()));
    }
    if let Some(dl) = d_logits {
        if dl.len() != n * c {
            return Err(Error::Contract("logit gradient has the wrong size".into()));
        }
    }
    let view = ViewEmbedding::new(cam, overrides);
    let weights = BatchWeights::new(dec);
    let w1_features = weights.w1.columns(0, d).transpose();
    let w2_t = weights.w2.transpose();

    struct Chunk {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
        d_feature: DMatrix<f64>,
        d_t: Vec<f64>,
    }
    let chunks: Vec<Chunk> = pixel_chunks(n)
        .into_par_iter()
        .map(|(start, count)| {
            let act = batch_forward(render, dec, &weights, &view, start, count);
            let mut d_out = DMatrix::zeros(dec.output_dim(), count);
            let mut d_t = vec![0.0; count];
            for (j, mut col) in d_out.column_iter_mut().enumerate() {
                let pixel = start + j;
                let g = &d_rgb[pixel * 3..pixel * 3 + 3];
                let t = render.transmittance_map[pixel];
                let y = act.out.column(j);
                for ch in 0..RGB_CHANNELS {
                    let s = sigmoid(y[ch]);
                    d_t[j] += g[ch] * (background[ch] - s);
                    col[ch] = g[ch] * (1.0 - t) * s * (1.0 - s);
                }
                if let Some(dl) = d_logits {
                    col.as_mut_slice()[RGB_CHANNELS..].copy_from_slice(&dl[pixel * c..(pixel + 1) * c]);
                }
            }
            let d_hidden = &w2_t * &d_out;
            let d_pre = d_hidden.zip_zip_map(&act.pre, &act.sig, |g, z, s| g * s * (1.0 + z * (1.0 - s)));
            Chunk {
                w1: &d_pre * act.x.transpose(),
                b1: d_pre.column_sum(),
                w2: &d_out * act.hidden.transpose(),
                b2: d_out.column_sum(),
                d_feature: &w1_features * &d_pre,
                d_t,
            }
        })
        .collect();

    let mut w1 = DMatrix::zeros(HIDDEN_WIDTH, dec.input_dim());
    let mut b1 = DVector::zeros(HIDDEN_WIDTH);
    let mut w2 = DMatrix::zeros(dec.output_dim(), HIDDEN_WIDTH);
    let mut b2 = DVector::zeros(dec.output_dim());
    let mut feature_map = Vec::with_capacity(n * d);
    let mut transmittance = Vec::with_capacity(n);
    for chunk in chunks {
        w1 += &chunk.w1;
        b1 += &chunk.b1;
        w2 += &chunk.w2;
        b2 += &chunk.b2;
        feature_map.extend_from_slice(chunk.d_feature.as_slice());
        transmittance.extend(chunk.d_t);
    }
    let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
    Ok(DecodeGradients {
        decoder: DecoderGradients {
            w1: row_major(&w1),
            b1: b1.as_slice().to_vec(),
            w2: row_major(&w2),
            b2: b2.as_slice().to_vec(),
        },
        feature_map,
        transmittance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(w: u32, h: u32) -> Camera {
        Camera::new(
            50.0,
            50.0,
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
            Matrix3::identity(),
            Vector3::new(0.5, -1.0, 2.0),
        )
        .unwrap()
    }

    #[test]
    fn embedding_dims() {
        assert_eq!(EmbeddingConfig::default().dim(), 5);
        assert_eq!(EmbeddingConfig::ALL.dim(), 8);
        assert_eq!(EmbeddingConfig::NONE.dim(), 0);
        for f in 0..8u8 {
            assert_eq!(EmbeddingConfig::from_flags(f).unwrap().flags(), f);
        }
        assert!(EmbeddingConfig::from_flags(8).is_none());
        assert_eq!(EmbeddingConfig::parse_list("pixel,campos").unwrap(), EmbeddingConfig::default());
        assert_eq!(EmbeddingConfig::parse_list("none").unwrap(), EmbeddingConfig::NONE);
        assert!(EmbeddingConfig::parse_list("pixel,depth").is_err());
    }

    #[test]
    fn pixel_embedding_closed_forms() {
        assert_eq!(pixel_embedding(0, 0, &cam(2, 2)).unwrap(), [-0.5, -0.5]);
        assert_eq!(pixel_embedding(2, 1, &cam(5, 3)).unwrap(), [0.0, 0.0]);
        let e = pixel_embedding(99, 0, &cam(100, 10)).unwrap();
        assert!((e[0] - 0.99).abs() < 1e-15);
        assert!(matches!(pixel_embedding(100, 0, &cam(100, 10)), Err(Error::Contract(_))));
        assert!(pixel_embedding(0, 10, &cam(100, 10)).is_err());
    }

    #[test]
    fn assemble_input_layout() {
        let c = cam(8, 6);
        let f: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = assemble_input(&f, &c, 3, 2, &EmbeddingConfig::default(), &EmbeddingOverrides::default()).unwrap();
        assert_eq!(x.len(), 21);
        assert_eq!(&x[..16], &f[..]);
        assert_eq!(&x[16..19], c.camera_center().as_slice());
        assert_eq!(&x[19..21], &pixel_embedding(3, 2, &c).unwrap());

        let ov = EmbeddingOverrides {
            campos: Some([0.0; 3]),
            ..Default::default()
        };
        let x = assemble_input(&f, &c, 3, 2, &EmbeddingConfig::default(), &ov).unwrap();
        assert_eq!(&x[16..19], &[0.0, 0.0, 0.0]);

        let x = assemble_input(&f, &c, 0, 0, &EmbeddingConfig::ALL, &EmbeddingOverrides::default()).unwrap();
        assert_eq!(x.len(), 24);
        assert_eq!(&x[21..24], c.euler_xyz().as_slice());

        let bad = EmbeddingOverrides {
            camrot: Some([0.0; 3]),
            ..Default::default()
        };
        assert!(matches!(
            assemble_input(&f, &c, 0, 0, &EmbeddingConfig::default(), &bad),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_decoder_outputs() {
        let dec = Decoder::zeros(16, EmbeddingConfig::default(), 0);
        let out = mlp_forward(&vec![0.3; 21], &dec).unwrap();
        assert_eq!(out.rgb, [0.5; 3]);
        assert!(out.probs.is_empty());
        let dec = Decoder::zeros(16, EmbeddingConfig::default(), 64);
        let out = mlp_forward(&vec![0.3; 21], &dec).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 1.0 / 64.0).abs() < 1e-15));
        assert!(mlp_forward(&[0.0; 20], &dec).is_err());
    }

    #[test]
    fn silu_derivative_at_zero() {
        assert_eq!(silu_grad(0.0), 0.5);
        let h = 1e-6;
        for x in [-3.0, -0.5, 0.7, 4.0] {
            let numeric = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((numeric - silu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::random(16, EmbeddingConfig::default(), 4, &mut rng);
        let x: Vec<f64> = (0..21).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = mlp_backward(&x, &dec, &[0.0; 3], &[0.0; 4]).unwrap();
        assert!(b.d_x.iter().all(|&v| v == 0.0));
        assert!(b.weights.w1.iter().chain(&b.weights.w2).all(|&v| v == 0.0));
    }

    #[test]
    fn random_init_within_fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::random(16, EmbeddingConfig::default(), 2, &mut rng);
        let k1 = 1.0 / 21f64.sqrt();
        assert!(dec.w1.iter().chain(&dec.b1).all(|v| v.abs() <= k1));
        assert!(dec.w2.iter().chain(&dec.b2).all(|v| v.abs() <= 0.125));
        assert_eq!(dec.output_dim(), 5);
        assert_eq!(Decoder::zeros(32, EmbeddingConfig::default(), 64).output_dim(), 67);
    }

    #[test]
    fn decode_uniform_map_without_embeddings_is_constant() {
        let c = cam(5, 4);
        let mut render = RenderOutput::blank(5, 4, 3);
        render.feature_map.chunks_exact_mut(3).for_each(|p| p.copy_from_slice(&[0.2, -0.4, 1.0]));
        render.transmittance_map.iter_mut().for_each(|t| *t = 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = Decoder::random(3, EmbeddingConfig::NONE, 0, &mut rng);
        let img = decode_image(&render, &c, &dec, &[0.0; 3], &EmbeddingOverrides::default()).unwrap();
        let first = &img.rgb[..3];
        assert!(img.rgb.chunks_exact(3).all(|p| p == first));
    }

    #[test]
    fn empty_render_shows_background() {
        let c = cam(4, 4);
        let render = RenderOutput::blank(4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = Decoder::random(8, EmbeddingConfig::default(), 0, &mut rng);
        let img = decode_image(&render, &c, &dec, &[0.0; 3], &EmbeddingOverrides::default()).unwrap();
        assert!(img.rgb.iter().all(|&v| v == 0.0));
        let img = decode_image(&render, &c, &dec, &[1.0, 0.5, 0.25], &EmbeddingOverrides::default()).unwrap();
        assert!(img.rgb.chunks_exact(3).all(|p| p == [1.0, 0.5, 0.25]));
    }

    #[test]
    fn decode_rejects_mismatches() {
        let c = cam(4, 4);
        let render = RenderOutput::blank(4, 4, 8);
        let dec = Decoder::zeros(16, EmbeddingConfig::default(), 0);
        assert!(decode_image(&render, &c, &dec, &[0.0; 3], &EmbeddingOverrides::default()).is_err());
        let dec = Decoder::zeros(8, EmbeddingConfig::default(), 0);
        let ov = EmbeddingOverrides {
            camrot: Some([1.0; 3]),
            ..Default::default()
        };
        assert!(matches!(
            decode_image(&render, &c, &dec, &[0.0; 3], &ov),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn labels_take_argmax() {
        let img = DecodedImage {
            width: 2,
            height: 1,
            rgb: vec![0.0; 6],
            decoded_rgb: vec![0.0; 6],
            logits: vec![0.0; 6],
            semantics: vec![0.1, 0.7, 0.2, 0.5, 0.2, 0.3],
            class_count: 3,
        };
        assert_eq!(img.labels(), vec![1, 0]);
    }

    #[test]
    fn batched_decode_matches_per_pixel_mlp() {
        // 23 x 13 spans two chunks with a ragged tail.
        let (w, h, d, classes) = (23u32, 13u32, 4usize, 3usize);
        let c = cam(w, h);
        let n = (w * h) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut render = RenderOutput::blank(w, h, d);
        render.feature_map.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        render.transmittance_map.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let dec = Decoder::random(d, EmbeddingConfig::ALL, classes, &mut rng);
        let bg = [0.1, 0.6, 0.3];
        let ov = EmbeddingOverrides::default();
        let d_rgb: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_logits: Vec<f64> = (0..n * classes).map(|_| rng.random_range(-1.0..1.0)).collect();

        let img = decode_image(&render, &c, &dec, &bg, &ov).unwrap();
        let back = decode_backward(&render, &c, &dec, &bg, &ov, &d_rgb, Some(&d_logits)).unwrap();

        let mut weights = DecoderGradients::zeros_like(&dec);
        for p in 0..n {
            let (u, v) = (p as u32 % w, p as u32 / w);
            let x = assemble_input(&render.feature_map[p * d..(p + 1) * d], &c, u, v, &dec.config, &ov).unwrap();
            let out = mlp_forward(&x, &dec).unwrap();
            let t = render.transmittance_map[p];
            for ch in 0..3 {
                let want = out.rgb[ch] * (1.0 - t) + bg[ch] * t;
                assert!((img.rgb[p * 3 + ch] - want).abs() < 1e-12);
            }
            for k in 0..classes {
                assert!((img.semantics[p * classes + k] - out.probs[k]).abs() < 1e-12);
            }
            let g = &d_rgb[p * 3..p * 3 + 3];
            let scaled = [g[0] * (1.0 - t), g[1] * (1.0 - t), g[2] * (1.0 - t)];
            let mb = mlp_backward(&x, &dec, &scaled, &d_logits[p * classes..(p + 1) * classes]).unwrap();
            for i in 0..d {
                assert!((back.feature_map[p * d + i] - mb.d_x[i]).abs() < 1e-12);
            }
            let d_t: f64 = (0..3).map(|ch| g[ch] * (bg[ch] - out.rgb[ch])).sum();
            assert!((back.transmittance[p] - d_t).abs() < 1e-12);
            weights.add(&mb.weights);
        }
        for (a, b) in [
            (&back.decoder.w1, &weights.w1),
            (&back.decoder.b1, &weights.b1),
            (&back.decoder.w2, &weights.w2),
            (&back.decoder.b2, &weights.b2),
        ] {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }
}

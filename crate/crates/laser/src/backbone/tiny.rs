//! Self-contained test backbone.
//!
//! A small convolution+attention denoiser over a `[4, 8, 8]` latent with the
//! full hook topology of a real backbone (8 decoder layers, each exposing a
//! residual feature and self-attention q/k/v). All weights are frozen draws
//! from a fixed seed, the codec is a deterministic orthonormal patch
//! projection, and the whole forward pass is bit-reproducible. Trunk gains
//! are kept small so the denoiser stays smooth in the latent argument, which
//! is what bounds the DDIM inversion round-trip error.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use tracing::warn;

use super::{
    tiny_descriptor, visit_checked, Backbone, BackboneDescriptor, HookSite, Latent, SiteCtx,
    SiteSlot, SiteVisitor, TextEmbedding,
};
use crate::attention::{attention, cross_frame_attention};
use crate::error::{Error, Result};
use crate::image_io::ImageBuf;

const WEIGHT_SEED: u64 = 0x1a5e_2024;
const TOKEN_SEED: u64 = 0x7e07_0001;

const HIDDEN: usize = 12;
const ATTN_DIM: usize = 8;
const TIME_DIM: usize = 16;

// Trunk gains. INPUT_GAIN bounds the denoiser's sensitivity to the latent
// argument, which is what keeps the DDIM inversion round trip tight; the
// text path and biases carry most of the output magnitude.
const INPUT_GAIN: f32 = 0.15;
const RES_SCALE: f32 = 0.2;
const ATTN_SCALE: f32 = 0.15;
const XATTN_SCALE: f32 = 0.25;
const OUT_SCALE: f32 = 0.2;

struct WeightGen {
    rng: ChaCha20Rng,
}

impl WeightGen {
    fn new(seed: u64) -> Self {
        WeightGen {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn sample(&mut self, std: f32) -> f32 {
        let v: f32 = StandardNormal.sample(&mut self.rng);
        v * std
    }

    fn conv(&mut self, out_c: usize, in_c: usize) -> Array4<f32> {
        let std = 1.0 / ((in_c * 9) as f32).sqrt();
        Array4::from_shape_simple_fn((out_c, in_c, 3, 3), || self.sample(std))
    }

    fn linear(&mut self, rows: usize, cols: usize) -> Array2<f32> {
        let std = 1.0 / (rows as f32).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || self.sample(std))
    }

    fn bias(&mut self, n: usize) -> Array1<f32> {
        Array1::from_shape_simple_fn(n, || self.sample(0.05))
    }
}

/// 3x3 convolution with zero padding over `[C, H, W]`.
fn conv3x3(input: &Array3<f32>, weight: &Array4<f32>, bias: &Array1<f32>) -> Array3<f32> {
    let (in_c, h, w) = input.dim();
    let out_c = weight.shape()[0];
    debug_assert_eq!(weight.shape()[1], in_c);
    let mut out = Array3::zeros((out_c, h, w));
    for o in 0..out_c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for c in 0..in_c {
                    for dy in 0..3usize {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = x as isize + dx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += weight[[o, c, dy, dx]] * input[[c, yy as usize, xx as usize]];
                        }
                    }
                }
                out[[o, y, x]] = acc;
            }
        }
    }
    out
}

/// Flatten `[C, H, W]` into token rows `[H*W, C]`.
fn to_tokens(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[y * w + xx, ch]] = x[[ch, y, xx]];
            }
        }
    }
    out
}

/// Add token rows `[H*W, C]` back onto `[C, H, W]` scaled by `scale`.
fn add_tokens(target: &mut Array3<f32>, tokens: &Array2<f32>, scale: f32) {
    let (c, h, w) = target.dim();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                target[[ch, y, xx]] += scale * tokens[[y * w + xx, ch]];
            }
        }
    }
}

struct DecoderLayer {
    conv_a: Array4<f32>,
    conv_a_bias: Array1<f32>,
    conv_b: Array4<f32>,
    conv_b_bias: Array1<f32>,
    time_proj: Array2<f32>,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    xq: Array2<f32>,
    xk: Array2<f32>,
    xv: Array2<f32>,
    xo: Array2<f32>,
}

/// Orthonormal patch basis of the codec: mean, horizontal ramp, vertical
/// ramp, red/blue contrast over a 4x4 RGB patch (48 values).
fn codec_basis() -> [Vec<f64>; 4] {
    let len = 3 * 16;
    let mut raw: [Vec<f64>; 4] = [
        vec![0.0; len],
        vec![0.0; len],
        vec![0.0; len],
        vec![0.0; len],
    ];
    for c in 0..3usize {
        for py in 0..4usize {
            for px in 0..4usize {
                let i = c * 16 + py * 4 + px;
                raw[0][i] = 1.0;
                raw[1][i] = px as f64 - 1.5;
                raw[2][i] = py as f64 - 1.5;
                raw[3][i] = match c {
                    0 => 1.0,
                    2 => -1.0,
                    _ => 0.0,
                };
            }
        }
    }
    // Gram-Schmidt; the raw patterns are already mutually orthogonal but
    // this keeps the construction safe against future edits.
    for k in 0..4 {
        for j in 0..k {
            let dot: f64 = raw[k].iter().zip(raw[j].iter()).map(|(a, b)| a * b).sum();
            let prev = raw[j].clone();
            for (v, p) in raw[k].iter_mut().zip(prev.iter()) {
                *v -= dot * p;
            }
        }
        let norm: f64 = raw[k].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in raw[k].iter_mut() {
            *v /= norm;
        }
    }
    raw
}

pub struct TinyBackbone {
    descriptor: BackboneDescriptor,
    conv_in: Array4<f32>,
    conv_in_bias: Array1<f32>,
    conv_out: Array4<f32>,
    conv_out_bias: Array1<f32>,
    layers: Vec<DecoderLayer>,
    basis: [Vec<f64>; 4],
    positional: Array2<f32>,
}

impl Default for TinyBackbone {
    fn default() -> Self {
        Self::new()
    }
}

impl TinyBackbone {
    pub fn new() -> Self {
        let descriptor = tiny_descriptor();
        let mut gen = WeightGen::new(WEIGHT_SEED);
        let conv_in = gen.conv(HIDDEN, descriptor.latent_channels);
        let conv_in_bias = gen.bias(HIDDEN);
        let mut layers = Vec::with_capacity(descriptor.num_decoder_layers);
        for _ in 0..descriptor.num_decoder_layers {
            layers.push(DecoderLayer {
                conv_a: gen.conv(HIDDEN, HIDDEN),
                conv_a_bias: gen.bias(HIDDEN),
                conv_b: gen.conv(HIDDEN, HIDDEN),
                conv_b_bias: gen.bias(HIDDEN),
                time_proj: gen.linear(TIME_DIM, HIDDEN),
                wq: gen.linear(HIDDEN, ATTN_DIM),
                wk: gen.linear(HIDDEN, ATTN_DIM),
                wv: gen.linear(HIDDEN, ATTN_DIM),
                wo: gen.linear(ATTN_DIM, HIDDEN),
                xq: gen.linear(HIDDEN, ATTN_DIM),
                xk: gen.linear(descriptor.embed_dim, ATTN_DIM),
                xv: gen.linear(descriptor.embed_dim, ATTN_DIM),
                xo: gen.linear(ATTN_DIM, HIDDEN),
            });
        }
        let conv_out = gen.conv(descriptor.latent_channels, HIDDEN);
        let conv_out_bias = gen.bias(descriptor.latent_channels);

        let mut positional = Array2::zeros((descriptor.num_tokens, descriptor.embed_dim));
        for pos in 0..descriptor.num_tokens {
            for d in 0..descriptor.embed_dim {
                let rate = 1.0 / 40f32.powf(2.0 * (d / 2) as f32 / descriptor.embed_dim as f32);
                let angle = pos as f32 * rate;
                positional[[pos, d]] = 0.3 * if d % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }

        TinyBackbone {
            descriptor,
            conv_in,
            conv_in_bias,
            conv_out,
            conv_out_bias,
            layers,
            basis: codec_basis(),
            positional,
        }
    }

    fn token_vector(&self, token: &str) -> Array1<f32> {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for b in token.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(TOKEN_SEED ^ hash);
        Array1::from_shape_simple_fn(self.descriptor.embed_dim, || {
            let v: f32 = StandardNormal.sample(&mut rng);
            0.5 * v
        })
    }

    fn time_features(&self, timestep: i64) -> Array1<f32> {
        let mut out = Array1::zeros(TIME_DIM);
        let t = timestep as f32 / self.descriptor.train_timesteps as f32;
        for d in 0..TIME_DIM {
            let rate = 30f32.powf(2.0 * (d / 2) as f32 / TIME_DIM as f32);
            let angle = t * rate;
            out[d] = if d % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        out
    }

    fn check_latent(&self, latent: &Latent, context: &str) -> Result<()> {
        let want = (
            self.descriptor.latent_channels,
            self.descriptor.latent_height,
            self.descriptor.latent_width,
        );
        if latent.values.dim() != want {
            return Err(Error::shape(
                context,
                format!("{want:?}"),
                format!("{:?}", latent.values.dim()),
            ));
        }
        if !latent.is_finite() {
            return Err(Error::numeric(format!("{context}: latent has non-finite entries")));
        }
        Ok(())
    }
}

impl Backbone for TinyBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn encode_prompt(&self, prompt: &str) -> Result<TextEmbedding> {
        let trimmed = prompt.trim();
        if trimmed.is_empty() {
            return Err(Error::config("prompt must be non-empty"));
        }
        let tokens: Vec<String> = trimmed
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_string())
            .collect();
        let capacity = self.descriptor.num_tokens;
        if tokens.len() > capacity {
            warn!(
                prompt = trimmed,
                tokens = tokens.len(),
                capacity,
                "prompt exceeds tokenizer capacity; truncating"
            );
        }
        let mut values = self.positional.clone();
        for (pos, token) in tokens.iter().take(capacity).enumerate() {
            let vec = self.token_vector(token);
            let mut row = values.row_mut(pos);
            row += &vec;
        }
        Ok(TextEmbedding {
            values,
            source_prompt: prompt.to_string(),
        })
    }

    fn null_embedding(&self) -> TextEmbedding {
        TextEmbedding {
            values: self.positional.clone(),
            source_prompt: String::new(),
        }
    }

    fn encode_image(&self, image: &ImageBuf) -> Result<Latent> {
        let f = self.descriptor.codec_downsample_factor;
        let (h, w) = (
            self.descriptor.image_height(),
            self.descriptor.image_width(),
        );
        if image.height() != h || image.width() != w {
            return Err(Error::shape(
                "encode_image",
                format!("{h}x{w} RGB (spatial dims must be multiples of {f})"),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        if !image.is_finite() {
            return Err(Error::numeric("encode_image: image has non-finite entries"));
        }
        let (lh, lw) = (self.descriptor.latent_height, self.descriptor.latent_width);
        let mut values = Array3::zeros((self.descriptor.latent_channels, lh, lw));
        for py in 0..lh {
            for px in 0..lw {
                let mut patch = [0.0f64; 48];
                for c in 0..3 {
                    for dy in 0..f {
                        for dx in 0..f {
                            patch[c * 16 + dy * 4 + dx] =
                                image.values[[c, py * f + dy, px * f + dx]] as f64 - 0.5;
                        }
                    }
                }
                for (ch, basis) in self.basis.iter().enumerate() {
                    let dot: f64 = basis.iter().zip(patch.iter()).map(|(b, p)| b * p).sum();
                    values[[ch, py, px]] = dot as f32;
                }
            }
        }
        Ok(Latent::new(values))
    }

    fn decode_latent(&self, latent: &Latent) -> Result<ImageBuf> {
        self.check_latent(latent, "decode_latent")?;
        let f = self.descriptor.codec_downsample_factor;
        let (lh, lw) = (self.descriptor.latent_height, self.descriptor.latent_width);
        let mut values = Array3::zeros((3, lh * f, lw * f));
        for py in 0..lh {
            for px in 0..lw {
                let mut patch = [0.5f64; 48];
                for (ch, basis) in self.basis.iter().enumerate() {
                    let z = latent.values[[ch, py, px]] as f64;
                    for (p, b) in patch.iter_mut().zip(basis.iter()) {
                        *p += z * b;
                    }
                }
                for c in 0..3 {
                    for dy in 0..f {
                        for dx in 0..f {
                            values[[c, py * f + dy, px * f + dx]] =
                                (patch[c * 16 + dy * 4 + dx] as f32).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ImageBuf::new(values)
    }

    fn predict_noise_batch(
        &self,
        latents: &[Latent],
        timestep: i64,
        embeddings: &[TextEmbedding],
        hooks: &mut dyn SiteVisitor,
    ) -> Result<Vec<Latent>> {
        if latents.is_empty() || latents.len() != embeddings.len() {
            return Err(Error::shape(
                "predict_noise_batch",
                "equal non-zero latent/embedding counts",
                format!("{}/{}", latents.len(), embeddings.len()),
            ));
        }
        if timestep < 0 || timestep >= self.descriptor.train_timesteps as i64 {
            return Err(Error::config(format!(
                "timestep {timestep} outside the backbone schedule [0, {})",
                self.descriptor.train_timesteps
            )));
        }
        let embed_shape = (self.descriptor.num_tokens, self.descriptor.embed_dim);
        for (i, e) in embeddings.iter().enumerate() {
            if e.values.dim() != embed_shape {
                return Err(Error::shape(
                    format!("predict_noise_batch embedding {i}"),
                    format!("{embed_shape:?}"),
                    format!("{:?}", e.values.dim()),
                ));
            }
            if !e.is_finite() {
                return Err(Error::numeric("embedding has non-finite entries"));
            }
        }
        for l in latents {
            self.check_latent(l, "predict_noise_batch")?;
        }

        let time_feat = self.time_features(timestep);
        let mut states: Vec<Array3<f32>> = latents
            .iter()
            .map(|l| conv3x3(&(&l.values * INPUT_GAIN), &self.conv_in, &self.conv_in_bias))
            .collect();

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let layer_no = layer_idx + 1;
            let time_bias = time_feat.dot(&layer.time_proj);

            // Residual block; the feature site sees the post-residual value
            // and its replacement feeds everything downstream.
            let mut features: Vec<Array3<f32>> = Vec::with_capacity(states.len());
            for (frame, h) in states.iter().enumerate() {
                let mut u = conv3x3(h, &layer.conv_a, &layer.conv_a_bias);
                for (c, ub) in time_bias.iter().enumerate() {
                    u.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v + ub).tanh());
                }
                let u = conv3x3(&u, &layer.conv_b, &layer.conv_b_bias);
                let f_val = h + &(u * RES_SCALE);
                let visited = visit_checked(
                    hooks,
                    SiteCtx {
                        site: HookSite::feature(layer_no),
                        timestep,
                        frame,
                    },
                    f_val.into_dyn(),
                )?;
                features.push(
                    visited
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("shape closure enforced"),
                );
            }

            // Self-attention projections, visited q then k then v with
            // frames ascending within each slot.
            let tokens: Vec<Array2<f32>> = features.iter().map(to_tokens).collect();
            let mut visit_proj = |slot: SiteSlot, weight: &Array2<f32>| -> Result<Vec<Array2<f32>>> {
                let mut out = Vec::with_capacity(tokens.len());
                for (frame, x) in tokens.iter().enumerate() {
                    let value = x.dot(weight);
                    let visited = visit_checked(
                        hooks,
                        SiteCtx {
                            site: HookSite::attention(layer_no, slot),
                            timestep,
                            frame,
                        },
                        value.into_dyn(),
                    )?;
                    out.push(
                        visited
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("shape closure enforced"),
                    );
                }
                Ok(out)
            };
            let qs = visit_proj(SiteSlot::Q, &layer.wq)?;
            let ks = visit_proj(SiteSlot::K, &layer.wk)?;
            let vs = visit_proj(SiteSlot::V, &layer.wv)?;

            let attn_out: Vec<Array2<f32>> = if hooks.cross_frame() {
                cross_frame_attention(&qs, &ks, &vs)?
            } else {
                qs.iter()
                    .zip(ks.iter())
                    .zip(vs.iter())
                    .map(|((q, k), v)| attention(q, k, v))
                    .collect::<Result<_>>()?
            };

            for (frame, f_val) in features.iter().enumerate() {
                let mut h = f_val.clone();
                add_tokens(&mut h, &attn_out[frame].dot(&layer.wo), ATTN_SCALE);

                // Cross-attention over the frame's own text embedding; not a
                // hookable site.
                let xq = to_tokens(&h).dot(&layer.xq);
                let xk = embeddings[frame].values.dot(&layer.xk);
                let xv = embeddings[frame].values.dot(&layer.xv);
                let xattn = attention(&xq, &xk, &xv)?;
                add_tokens(&mut h, &xattn.dot(&layer.xo), XATTN_SCALE);
                states[frame] = h;
            }
        }

        Ok(states
            .into_iter()
            .map(|h| {
                let eps = conv3x3(&h, &self.conv_out, &self.conv_out_bias) * OUT_SCALE;
                Latent::with_tag(eps, timestep)
            })
            .collect())
    }
}

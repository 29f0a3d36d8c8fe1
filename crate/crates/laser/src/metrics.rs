//! Evaluation suite: perceptual input conformity, perceptual path totals,
//! endpoint deviation, perceptual path length, and embedding-based frame and
//! text consistency scores.
//!
//! Distances run through a frozen randomly-initialized convolutional feature
//! extractor (deterministic seed, unit-normalized features), so every metric
//! is reproducible bit-for-bit. Reported numbers are therefore comparable
//! across runs of this crate, not across papers using other frozen networks.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageBuf;

const PERCEPTUAL_SEED: u64 = 0x9e7c_0001;
const EMBED_SEED: u64 = 0x9e7c_0002;
const TEXT_SEED: u64 = 0x9e7c_0003;
const EMBED_DIM: usize = 32;

/// Full metric roster for one animation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean perceptual conformity of frames to the input image, in [0, 1].
    pub pic: f64,
    /// Mean cosine similarity between each frame and its interpolated stage
    /// text embedding.
    pub clip_text: f64,
    /// Mean cosine similarity of consecutive frames' image embeddings; the
    /// headline consistency score.
    pub clip_frame: f64,
    /// Sum of consecutive-frame perceptual distances.
    pub lpips_total: f64,
    /// Max over interior frames of the distance to the nearest endpoint.
    pub lpips_max_endpoint: f64,
    /// Alpha-normalized total perceptual variation:
    /// `lpips_total * (n_frames - 1)`.
    pub ppl: f64,
    pub runtime_seconds: f64,
    pub n_frames: usize,
    /// Formula notes for the scores whose operands are convention choices.
    pub notes: Vec<String>,
}

fn metric_notes() -> Vec<String> {
    vec![
        "pic = mean(1 - perceptual_distance(frame, input)) clamped to [0, 1]".to_string(),
        "ppl = lpips_total * (n_frames - 1)".to_string(),
        "clip_frame is the table-comparable CLIP column; clip_text (frame vs interpolated \
         stage text embedding) is reported alongside because the operand pair is ambiguous"
            .to_string(),
    ]
}

struct ConvLayer {
    weight: Array4<f32>,
    bias: Array1<f32>,
}

/// Frozen random feature extractor used by the perceptual distance.
struct PerceptualNet {
    layers: Vec<ConvLayer>,
}

fn frozen_conv(rng: &mut ChaCha20Rng, out_c: usize, in_c: usize) -> ConvLayer {
    let std = 1.0 / ((in_c * 9) as f32).sqrt();
    let weight = Array4::from_shape_simple_fn((out_c, in_c, 3, 3), || {
        let v: f32 = StandardNormal.sample(rng);
        v * std
    });
    let bias = Array1::from_shape_simple_fn(out_c, || {
        let v: f32 = StandardNormal.sample(rng);
        v * 0.05
    });
    ConvLayer { weight, bias }
}

/// 3x3 conv, stride 2, zero padding, tanh.
fn conv_stride2(input: &Array3<f32>, layer: &ConvLayer) -> Array3<f32> {
    let (in_c, h, w) = input.dim();
    let out_c = layer.weight.shape()[0];
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((out_c, oh, ow));
    for o in 0..out_c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.bias[o];
                for c in 0..in_c {
                    for dy in 0..3usize {
                        let yy = (y * 2 + dy) as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = (x * 2 + dx) as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += layer.weight[[o, c, dy, dx]]
                                * input[[c, yy as usize, xx as usize]];
                        }
                    }
                }
                out[[o, y, x]] = acc.tanh();
            }
        }
    }
    out
}

impl PerceptualNet {
    fn new() -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(PERCEPTUAL_SEED);
        let widths = [(8usize, 3usize), (12, 8), (16, 12)];
        let layers = widths
            .iter()
            .map(|(out_c, in_c)| frozen_conv(&mut rng, *out_c, *in_c))
            .collect();
        PerceptualNet { layers }
    }

    fn features(&self, image: &ImageBuf) -> Vec<Array3<f32>> {
        let mut feats = Vec::with_capacity(self.layers.len());
        let mut x = image.values.clone();
        for layer in &self.layers {
            x = conv_stride2(&x, layer);
            feats.push(x.clone());
        }
        feats
    }
}

fn perceptual_net() -> &'static PerceptualNet {
    static NET: OnceLock<PerceptualNet> = OnceLock::new();
    NET.get_or_init(PerceptualNet::new)
}

/// Channel-normalized squared feature distance, averaged over space and
/// layers. Symmetric; exactly zero for identical inputs.
pub fn perceptual_distance(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(
            "perceptual_distance",
            format!("{:?}", a.values.shape()),
            format!("{:?}", b.values.shape()),
        ));
    }
    let net = perceptual_net();
    let fa = net.features(a);
    let fb = net.features(b);
    let mut total = 0.0f64;
    for (xa, xb) in fa.iter().zip(fb.iter()) {
        let (c, h, w) = xa.dim();
        let mut layer_sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                // Unit-normalize the channel vector at each location.
                let mut norm_a = 0.0f64;
                let mut norm_b = 0.0f64;
                for ch in 0..c {
                    norm_a += (xa[[ch, y, x]] as f64).powi(2);
                    norm_b += (xb[[ch, y, x]] as f64).powi(2);
                }
                let norm_a = norm_a.sqrt().max(1e-12);
                let norm_b = norm_b.sqrt().max(1e-12);
                for ch in 0..c {
                    let d = xa[[ch, y, x]] as f64 / norm_a - xb[[ch, y, x]] as f64 / norm_b;
                    layer_sum += d * d;
                }
            }
        }
        total += layer_sum / (h * w) as f64;
    }
    // Normalize so the distance lives on a [0, ~1] scale: per-location
    // normalized differences are bounded by 4.
    Ok(total / (4.0 * net.layers.len() as f64))
}

/// Mean over frames of `1 - perceptual_distance(frame, input)`, clamped to
/// `[0, 1]`. Higher is better.
pub fn compute_pic(frames: &[ImageBuf], input_image: &ImageBuf) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::config("PIC needs at least one frame"));
    }
    let mut sum = 0.0f64;
    for frame in frames {
        sum += 1.0 - perceptual_distance(frame, input_image)?;
    }
    Ok((sum / frames.len() as f64).clamp(0.0, 1.0))
}

/// Total perceptual deviation: sum of consecutive-frame distances.
pub fn compute_lpips_total(frames: &[ImageBuf]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::config("LPIPS_T needs at least one frame"));
    }
    let mut total = 0.0f64;
    for pair in frames.windows(2) {
        total += perceptual_distance(&pair[0], &pair[1])?;
    }
    Ok(total)
}

/// Max over interior frames of the distance to the nearest endpoint; zero
/// when there are no interior frames.
pub fn compute_lpips_max_endpoint(frames: &[ImageBuf]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::config("LPIPS_M needs at least one frame"));
    }
    if frames.len() <= 2 {
        return Ok(0.0);
    }
    let first = &frames[0];
    let last = &frames[frames.len() - 1];
    let mut max = 0.0f64;
    for frame in &frames[1..frames.len() - 1] {
        let d = perceptual_distance(frame, first)?.min(perceptual_distance(frame, last)?);
        max = max.max(d);
    }
    Ok(max)
}

/// Perceptual path length: `lpips_total / delta_alpha` with
/// `delta_alpha = 1 / (n - 1)`, i.e. `lpips_total * (n - 1)`.
pub fn compute_ppl(frames: &[ImageBuf]) -> Result<f64> {
    let total = compute_lpips_total(frames)?;
    Ok(total * (frames.len().saturating_sub(1)) as f64)
}

struct EmbedNet {
    layers: Vec<ConvLayer>,
    proj: Array2<f32>,
}

impl EmbedNet {
    fn new() -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(EMBED_SEED);
        let widths = [(8usize, 3usize), (16, 8)];
        let layers: Vec<ConvLayer> = widths
            .iter()
            .map(|(out_c, in_c)| frozen_conv(&mut rng, *out_c, *in_c))
            .collect();
        let std = 1.0 / 4.0;
        let proj = Array2::from_shape_simple_fn((16, EMBED_DIM), || {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * std
        });
        EmbedNet { layers, proj }
    }

    fn embed(&self, image: &ImageBuf) -> Array1<f64> {
        let mut x = image.values.clone();
        for layer in &self.layers {
            x = conv_stride2(&x, layer);
        }
        let (c, h, w) = x.dim();
        let mut pooled = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let mut acc = 0.0f32;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[[ch, y, xx]];
                }
            }
            pooled[ch] = acc / (h * w) as f32;
        }
        let projected = pooled.dot(&self.proj);
        normalize(projected.mapv(|v| v as f64))
    }
}

fn embed_net() -> &'static EmbedNet {
    static NET: OnceLock<EmbedNet> = OnceLock::new();
    NET.get_or_init(EmbedNet::new)
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v / norm
}

/// Frozen bag-of-tokens text embedding used by the text-consistency score.
fn text_embedding(text: &str) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(EMBED_DIM);
    for token in text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for b in token.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(TEXT_SEED ^ hash);
        for slot in acc.iter_mut() {
            let v: f32 = StandardNormal.sample(&mut rng);
            *slot += v as f64;
        }
    }
    normalize(acc)
}

pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// `(clip_text, clip_frame)`: mean frame-to-interpolated-stage-text
/// similarity and mean consecutive-frame similarity. `frame_alphas` carries
/// `(stage, alpha)` per frame, indexing into `stage_prompts`.
pub fn compute_clip_scores(
    frames: &[ImageBuf],
    stage_prompts: &[String],
    frame_alphas: &[(usize, f32)],
) -> Result<(f64, f64)> {
    if frames.is_empty() {
        return Err(Error::config("CLIP scores need at least one frame"));
    }
    if frames.len() != frame_alphas.len() {
        return Err(Error::shape(
            "compute_clip_scores",
            format!("{} frame_alphas", frames.len()),
            format!("{}", frame_alphas.len()),
        ));
    }
    let net = embed_net();
    let image_embeddings: Vec<Array1<f64>> = frames.iter().map(|f| net.embed(f)).collect();

    let clip_frame = if frames.len() < 2 {
        1.0
    } else {
        let mut sum = 0.0;
        for pair in image_embeddings.windows(2) {
            sum += cosine_similarity(&pair[0], &pair[1]);
        }
        sum / (frames.len() - 1) as f64
    };

    let mut text_sum = 0.0;
    for (emb, (stage, alpha)) in image_embeddings.iter().zip(frame_alphas.iter()) {
        if *stage + 1 >= stage_prompts.len() {
            return Err(Error::config(format!(
                "frame references stage {stage} but only {} prompts exist",
                stage_prompts.len()
            )));
        }
        let e_i = text_embedding(&stage_prompts[*stage]);
        let e_next = text_embedding(&stage_prompts[*stage + 1]);
        let interpolated = normalize(&e_i * (1.0 - *alpha as f64) + &e_next * (*alpha as f64));
        text_sum += cosine_similarity(emb, &interpolated);
    }
    let clip_text = text_sum / frames.len() as f64;
    Ok((clip_text, clip_frame))
}

/// Assemble the full report for one animation.
pub fn evaluate(
    frames: &[ImageBuf],
    input_image: &ImageBuf,
    stage_prompts: &[String],
    frame_alphas: &[(usize, f32)],
    runtime_seconds: f64,
) -> Result<MetricsReport> {
    let (clip_text, clip_frame) = compute_clip_scores(frames, stage_prompts, frame_alphas)?;
    Ok(MetricsReport {
        pic: compute_pic(frames, input_image)?,
        clip_text,
        clip_frame,
        lpips_total: compute_lpips_total(frames)?,
        lpips_max_endpoint: compute_lpips_max_endpoint(frames)?,
        ppl: compute_ppl(frames)?,
        runtime_seconds,
        n_frames: frames.len(),
        notes: metric_notes(),
    })
}

//! Frozen feature extractors.
//!
//! Two backends are provided. `ToyStub` is fully determined by a seed: text goes through a hashed
//! random projection and images through a fixed two-layer convolution. `Pretrained` loads
//! user-supplied weights (a word-vector table and a VGG-layout convolution stack). In both cases
//! the weights are plain tensors, never trainable variables, so no optimizer can touch them.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::params::tensors_checksum;
use crate::pixels::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Pretrained,
    ToyStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    /// Text embedding width `d_t`.
    pub text_dim: usize,
    /// Width of the stub's first convolution.
    pub hidden_channels: usize,
    /// Channels of the feature map handed to downstream modules.
    pub visual_channels: usize,
    /// Width `d` of pooled visual features, graph features, and codebook entries.
    pub pooled_dim: usize,
    pub seed: u64,
    /// Safetensors file with `features.{i}.weight/bias` convolution arrays.
    pub image_weights: Option<PathBuf>,
    /// Safetensors file with an `embeddings` table and a JSON `vocab` metadata list.
    pub text_weights: Option<PathBuf>,
    /// Number of convolutions of the pretrained stack to run; defaults to all but the last.
    pub feature_layer: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::ToyStub,
            text_dim: 512,
            hidden_channels: 64,
            visual_channels: 256,
            pooled_dim: 512,
            seed: 0x5eed,
            image_weights: None,
            text_weights: None,
            feature_layer: None,
        }
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            text_dim: 32,
            hidden_channels: 16,
            visual_channels: 64,
            pooled_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoders.text_dim", self.text_dim),
            ("encoders.hidden_channels", self.hidden_channels),
            ("encoders.visual_channels", self.visual_channels),
            ("encoders.pooled_dim", self.pooled_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field: field.into(),
                    message: "must be positive".into(),
                });
            }
        }
        if self.backend == Backend::Pretrained && self.image_weights.is_none() {
            return Err(Error::Config {
                field: "encoders.image_weights".into(),
                message: "the pretrained backend needs a weights path".into(),
            });
        }
        Ok(())
    }
}

/// A unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Vec<f32>);

impl TextEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, self.0.len(), device)?.to_dtype(dtype)?)
    }
}

/// Penultimate-layer activations of the frozen image encoder, `(C, h, w)`.
#[derive(Debug, Clone)]
pub struct ImageFeatureMap(pub Tensor);

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

enum TextBackend {
    Hashed { seed: u64 },
    Table { index: HashMap<String, usize>, table: Vec<Vec<f32>> },
}

pub struct TextEncoder {
    dim: usize,
    backend: TextBackend,
}

impl TextEncoder {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            backend: TextBackend::Hashed { seed },
        }
    }

    fn from_table(path: &std::path::Path, dim: usize) -> Result<Self> {
        let arch = archive::read(path, &Device::Cpu)?;
        let table = arch.tensor("embeddings")?.to_vec2::<f32>()?;
        let vocab: Vec<String> = serde_json::from_str(arch.meta("vocab")?)
            .map_err(|e| Error::Format(format!("vocab metadata: {e}")))?;
        if vocab.len() != table.len() {
            return Err(Error::Format("vocab and embedding table lengths differ".into()));
        }
        if table.first().map(Vec::len) != Some(dim) {
            return Err(Error::Config {
                field: "encoders.text_dim".into(),
                message: format!("does not match the table width in {}", path.display()),
            });
        }
        let index = vocab
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w.to_lowercase(), i))
            .collect();
        Ok(Self {
            dim,
            backend: TextBackend::Table { index, table },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::arg("cannot embed an empty string"));
        }
        let mut acc = vec![0.0f64; self.dim];
        match &self.backend {
            TextBackend::Hashed { seed } => {
                let lower = text.to_lowercase();
                // Whole-string feature plus boundary-marked byte trigrams.
                let padded: Vec<u8> = [b"^".as_slice(), lower.as_bytes(), b"$".as_slice()].concat();
                let mut features: Vec<(&[u8], f64)> = vec![(lower.as_bytes(), 1.0)];
                let grams: Vec<&[u8]> = padded.windows(3).collect();
                let w = 1.0 / (grams.len().max(1) as f64).sqrt();
                features.extend(grams.into_iter().map(|g| (g, w)));
                for (bytes, weight) in features {
                    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(bytes) ^ seed.rotate_left(29));
                    for a in acc.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *a += weight * z;
                    }
                }
            }
            TextBackend::Table { index, table } => {
                let mut hits = 0;
                for tok in text.split_whitespace() {
                    if let Some(&i) = index.get(&tok.to_lowercase()) {
                        for (a, v) in acc.iter_mut().zip(&table[i]) {
                            *a += *v as f64;
                        }
                        hits += 1;
                    }
                }
                if hits == 0 {
                    return Err(Error::arg(format!("no token of `{text}` is in the vocabulary")));
                }
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Internal(format!("degenerate embedding for `{text}`")));
        }
        Ok(TextEmbedding(acc.iter().map(|v| (v / norm) as f32).collect()))
    }
}

#[derive(Clone)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    pool_before: bool,
}

/// Frozen convolutional encoder followed by global average pooling and a fixed projection.
pub struct ImageEncoder {
    layers: Vec<ConvLayer>,
    /// Per-channel input normalization `(mean, std)`, identity for the stub.
    input_norm: Option<(Tensor, Tensor)>,
    leak: f64,
    proj_w: Tensor,
    proj_b: Tensor,
    channels: usize,
    dtype: DType,
    device: Device,
}

fn seeded_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

fn seeded_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

impl ImageEncoder {
    /// The seeded stub: `conv3x3/2 → leaky-relu → conv3x3/2 → leaky-relu`.
    pub fn toy(cfg: &EncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a6e_e4c0);
        let mut layers = Vec::new();
        for (cin, cout) in [(3, cfg.hidden_channels), (cfg.hidden_channels, cfg.visual_channels)] {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let weight = seeded_uniform(&mut rng, &[cout, cin, 3, 3], bound, device)?.to_dtype(dtype)?;
            let bias = seeded_uniform(&mut rng, &[cout], 0.1, device)?.to_dtype(dtype)?;
            layers.push(ConvLayer {
                weight,
                bias,
                stride: 2,
                padding: 1,
                pool_before: false,
            });
        }
        Self::finish(layers, None, cfg, &mut rng, dtype, device)
    }

    /// Loads a VGG-style `features.{i}` stack. A 2×2 max-pool is inserted wherever the layer
    /// indices skip more than an activation slot, matching the torchvision layout.
    pub fn pretrained(cfg: &EncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        let path = cfg.image_weights.as_ref().ok_or_else(|| Error::Config {
            field: "encoders.image_weights".into(),
            message: "missing".into(),
        })?;
        let arch = archive::read(path, device)?;
        let mut indices: Vec<usize> = arch
            .tensors
            .keys()
            .filter_map(|k| k.strip_prefix("features.")?.strip_suffix(".weight")?.parse().ok())
            .collect();
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::Format(format!("no `features.N.weight` arrays in {}", path.display())));
        }
        let keep = cfg.feature_layer.unwrap_or(indices.len().saturating_sub(1).max(1));
        if keep == 0 || keep > indices.len() {
            return Err(Error::Config {
                field: "encoders.feature_layer".into(),
                message: format!("must lie in 1..={}", indices.len()),
            });
        }
        let mut layers = Vec::new();
        let mut prev: Option<usize> = None;
        for &i in indices.iter().take(keep) {
            let weight = arch.tensor(&format!("features.{i}.weight"))?.to_dtype(dtype)?;
            let bias = arch.tensor(&format!("features.{i}.bias"))?.to_dtype(dtype)?;
            let k = weight.dim(2)?;
            layers.push(ConvLayer {
                weight,
                bias,
                stride: 1,
                padding: k / 2,
                pool_before: prev.is_some_and(|p| i > p + 2),
            });
            prev = Some(i);
        }
        let channels = layers.last().map(|l| l.weight.dim(0)).transpose()?.unwrap_or(0);
        if channels != cfg.visual_channels {
            return Err(Error::Config {
                field: "encoders.visual_channels".into(),
                message: format!("weights produce {channels} channels"),
            });
        }
        let mean = Tensor::from_slice(&[0.485f32, 0.456, 0.406], (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&[0.229f32, 0.224, 0.225], (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a6e_e4c0);
        let mut enc = Self::finish(layers, Some((mean, std)), cfg, &mut rng, dtype, device)?;
        enc.leak = 0.0;
        Ok(enc)
    }

    fn finish(
        layers: Vec<ConvLayer>,
        input_norm: Option<(Tensor, Tensor)>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let c = cfg.visual_channels;
        let proj_w = seeded_normal(rng, &[cfg.pooled_dim, c], 1.0 / (c as f64).sqrt(), device)?.to_dtype(dtype)?;
        let proj_b = seeded_uniform(rng, &[cfg.pooled_dim], 0.1, device)?.to_dtype(dtype)?;
        Ok(Self {
            layers,
            input_norm,
            leak: 0.2,
            proj_w,
            proj_b,
            channels: c,
            dtype,
            device: device.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pooled_dim(&self) -> usize {
        self.proj_w.dims()[0]
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Total spatial downsampling factor between input and feature map.
    pub fn stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.stride * if l.pool_before { 2 } else { 1 })
            .product()
    }

    /// `(B, 3, H, W) → (B, C, h, w)`; differentiable with respect to the input.
    pub fn feature_map(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::arg(format!("image encoder expects 3 channels, got {c}")));
        }
        let mut x = match &self.input_norm {
            Some((mean, std)) => images.broadcast_sub(mean)?.broadcast_div(std)?,
            None => images.clone(),
        };
        for layer in &self.layers {
            if layer.pool_before {
                x = x.max_pool2d(2)?;
            }
            x = x
                .conv2d(&layer.weight, layer.padding, layer.stride, 1, 1)?
                .broadcast_add(&layer.bias.reshape((1, (), 1, 1))?)?;
            x = if self.leak > 0.0 {
                candle_nn::ops::leaky_relu(&x, self.leak)?
            } else {
                x.relu()?
            };
        }
        Ok(x)
    }

    /// Spatial mean of a `(B, C, h, w)` feature map, then the fixed projection to `(B, d)`.
    pub fn pool(&self, features: &Tensor) -> Result<Tensor> {
        let mean = features.flatten_from(2)?.mean(D::Minus1)?;
        Ok(mean.matmul(&self.proj_w.t()?)?.broadcast_add(&self.proj_b)?)
    }

    pub fn encode(&self, image: &Image) -> Result<(ImageFeatureMap, Vec<f32>)> {
        let x = image.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        let fmap = self.feature_map(&x)?;
        let pooled = self.pool(&fmap)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
        Ok((ImageFeatureMap(fmap.squeeze(0)?), pooled))
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), l.weight.clone()));
            out.push((format!("conv{i}.bias"), l.bias.clone()));
        }
        out.push(("proj.weight".into(), self.proj_w.clone()));
        out.push(("proj.bias".into(), self.proj_b.clone()));
        out
    }
}

/// The frozen encoder bundle shared by every training stage.
pub struct Encoders {
    pub config: EncoderConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    /// Maps pooled visual features into the text embedding space.
    joint_proj: Tensor,
}

impl Encoders {
    pub fn new(cfg: &EncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let (text, image) = match cfg.backend {
            Backend::ToyStub => (
                TextEncoder::hashed(cfg.text_dim, cfg.seed),
                ImageEncoder::toy(cfg, dtype, device)?,
            ),
            Backend::Pretrained => {
                let text = match &cfg.text_weights {
                    Some(p) => TextEncoder::from_table(p, cfg.text_dim)?,
                    None => TextEncoder::hashed(cfg.text_dim, cfg.seed),
                };
                (text, ImageEncoder::pretrained(cfg, dtype, device)?)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0c11_9000);
        let joint_proj = seeded_normal(
            &mut rng,
            &[cfg.text_dim, cfg.pooled_dim],
            1.0 / (cfg.pooled_dim as f64).sqrt(),
            device,
        )?
        .to_dtype(dtype)?;
        Ok(Self {
            config: cfg.clone(),
            text,
            image,
            joint_proj,
        })
    }

    pub fn embed_text(&self, text: &str) -> Result<TextEmbedding> {
        self.text.embed(text)
    }

    pub fn encode_image(&self, image: &Image) -> Result<(ImageFeatureMap, Vec<f32>)> {
        self.image.encode(image)
    }

    /// Unit-norm joint-space embeddings of a `(B, 3, h, w)` batch, shape `(B, d_t)`.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let pooled = self.image.pool(&self.image.feature_map(images)?)?;
        let z = pooled.matmul(&self.joint_proj.t()?)?;
        let norm = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        Ok(z.broadcast_div(&norm)?)
    }

    pub fn checksum(&self) -> Result<String> {
        let mut all = self.image.named_tensors();
        all.push(("joint_proj".into(), self.joint_proj.clone()));
        tensors_checksum(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dtype: DType) -> Encoders {
        Encoders::new(&EncoderConfig::toy(), dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn text_embedding_is_unit_and_deterministic() {
        let enc = toy(DType::F32);
        let a = enc.embed_text("awe").unwrap();
        assert_eq!(a, enc.embed_text("awe").unwrap());
        for w in ["awe", "a", "majestic mountain", "ünïcode"] {
            let e = enc.embed_text(w).unwrap();
            let n: f64 = e.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(e.dim(), 32);
        }
        assert!(enc.embed_text("").is_err());
        assert!(enc.embed_text("   ").is_err());
    }

    #[test]
    fn hundred_words_are_distinct() {
        let enc = toy(DType::F32);
        let words: Vec<String> = (0..100).map(|i| format!("word{i}")).collect();
        let embs: Vec<_> = words.iter().map(|w| enc.embed_text(w).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j], "{} vs {}", words[i], words[j]);
            }
        }
    }

    #[test]
    fn image_encoding_shapes_and_determinism() {
        let enc = toy(DType::F32);
        let img = Image::filled(32, 32, [0.2, 0.5, 0.9]);
        let (f1, p1) = enc.encode_image(&img).unwrap();
        let (f2, p2) = enc.encode_image(&img).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.len(), 32);
        assert_eq!(f1.0.dims(), &[64, 8, 8]);
        let diff = (f1.0 - f2.0).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(enc.image.stride(), 4);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let enc = toy(DType::F32);
        let x = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.image.feature_map(&x), Err(Error::Argument(_))));
    }

    #[test]
    fn pooling_ignores_spatial_permutation() {
        let enc = toy(DType::F64);
        let img = crate::dataset::render_toy_image(
            crate::dataset::EmotionLabel::Fear,
            16,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let x = img.to_tensor(DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let fmap = enc.image.feature_map(&x).unwrap();
        let (b, c, h, w) = fmap.dims4().unwrap();
        let mut perm: Vec<u32> = (0..(h * w) as u32).collect();
        perm.reverse();
        perm.swap(0, 3);
        let idx = Tensor::from_vec(perm, h * w, &Device::Cpu).unwrap();
        let shuffled = fmap
            .reshape((b, c, h * w))
            .unwrap()
            .index_select(&idx, 2)
            .unwrap()
            .reshape((b, c, h, w))
            .unwrap();
        let a = enc.image.pool(&fmap).unwrap().to_vec2::<f64>().unwrap();
        let bb = enc.image.pool(&shuffled).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in a[0].iter().zip(&bb[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_image_matches_hand_traced_forward() {
        let enc = toy(DType::F64);
        let size = 8;
        let (_, pooled) = enc.encode_image(&Image::filled(size, size, [0.0; 3])).unwrap();

        // Independent trace with explicit loops.
        let leaky = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let l0 = &enc.image.layers[0];
        let l1 = &enc.image.layers[1];
        let b0 = l0.bias.to_vec1::<f64>().unwrap();
        let w1 = l1.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b1 = l1.bias.to_vec1::<f64>().unwrap();
        let (c0, c1) = (b0.len(), b1.len());
        // Layer 1 on a zero input: every output position is its bias; padding contributes zero.
        let h1 = size / 2;
        let h2 = h1 / 2;
        let mut mean = vec![0.0f64; c1];
        for oy in 0..h2 {
            for ox in 0..h2 {
                for co in 0..c1 {
                    let mut acc = b1[co];
                    for ci in 0..c0 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h1 as isize || ix >= h1 as isize {
                                    continue;
                                }
                                acc += w1[((co * c0 + ci) * 3 + ky) * 3 + kx] * leaky(b0[ci]);
                            }
                        }
                    }
                    mean[co] += leaky(acc) / (h2 * h2) as f64;
                }
            }
        }
        let pw = enc.image.proj_w.to_vec2::<f64>().unwrap();
        let pb = enc.image.proj_b.to_vec1::<f64>().unwrap();
        for (k, got) in pooled.iter().enumerate() {
            let want: f64 = pb[k] + pw[k].iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
            assert!((*got as f64 - want).abs() < 1e-5, "{k}: {got} vs {want}");
        }
    }

    #[test]
    fn joint_embeddings_are_unit_norm() {
        let enc = toy(DType::F64);
        let x = Tensor::rand(0.0, 1.0, (3, 3, 16, 16), &Device::Cpu).unwrap();
        let z = enc.embed_images(&x).unwrap();
        let n = z.sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(n.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn pretrained_stack_inserts_pools_and_checks_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let dev = Device::Cpu;
        let t = |shape: &[usize]| Tensor::ones(shape, DType::F32, &dev).unwrap();
        let tensors = vec![
            ("features.0.weight".to_string(), t(&[4, 3, 3, 3])),
            ("features.0.bias".to_string(), t(&[4])),
            ("features.2.weight".to_string(), t(&[4, 4, 3, 3])),
            ("features.2.bias".to_string(), t(&[4])),
            ("features.5.weight".to_string(), t(&[6, 4, 3, 3])),
            ("features.5.bias".to_string(), t(&[6])),
            ("features.7.weight".to_string(), t(&[6, 6, 3, 3])),
            ("features.7.bias".to_string(), t(&[6])),
        ];
        archive::write(&path, &tensors, Default::default()).unwrap();
        let cfg = EncoderConfig {
            backend: Backend::Pretrained,
            visual_channels: 6,
            pooled_dim: 5,
            text_dim: 8,
            image_weights: Some(path),
            ..EncoderConfig::default()
        };
        let enc = Encoders::new(&cfg, DType::F32, &dev).unwrap();
        assert_eq!(enc.image.layers.len(), 3);
        assert_eq!(enc.image.stride(), 2);
        let (f, p) = enc.encode_image(&Image::filled(8, 8, [0.5; 3])).unwrap();
        assert_eq!(f.0.dims(), &[6, 4, 4]);
        assert_eq!(p.len(), 5);
        let bad = EncoderConfig {
            visual_channels: 4,
            ..cfg
        };
        assert!(Encoders::new(&bad, DType::F32, &dev).is_err());
    }
}

//! Text-conditioned transfer network: a mapper from (text, emotion feature) to semantic tokens,
//! a joint-sequence transformer over semantic and image tokens, and a convolutional decoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Linear, Module, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::classifier::EmotionClassifier;
use crate::dataset::EmotionLabel;
use crate::emolat_space::{sample_emotion_feature, EmoLatSpace};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::losses::{
    clip_patch_loss, content_loss, emotion_loss, gan_loss, identity_loss, scalar, style_loss, total_loss_tensor, LossReport,
    LossTerms, LossWeights, PatchConfig, TransferDiscriminator,
};
use crate::params::ParamStore;
use crate::pixels::Image;

const MODEL_KIND: &str = "emolat_transfer";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub semantic_tokens: usize,
    pub mlp_ratio: usize,
    pub decoder_channels: usize,
    pub disc_hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub weights: LossWeights,
    pub patch: PatchConfig,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            token_dim: 256,
            blocks: 4,
            heads: 4,
            semantic_tokens: 4,
            mlp_ratio: 4,
            decoder_channels: 128,
            disc_hidden: 256,
            batch_size: 4,
            learning_rate: 5e-4,
            iterations: 80_000,
            weights: LossWeights::default(),
            patch: PatchConfig::default(),
            seed: 23,
        }
    }
}

impl TransferConfig {
    pub fn toy() -> Self {
        Self {
            token_dim: 64,
            blocks: 2,
            decoder_channels: 16,
            disc_hidden: 64,
            iterations: 2000,
            patch: PatchConfig {
                n_patches: 8,
                patch_size: 16,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("transfer.{field}"),
                message,
            })
        };
        if self.blocks == 0 {
            return bad("blocks", "must be at least 1".into());
        }
        if self.token_dim == 0 || !self.token_dim.is_multiple_of(4) {
            return bad("token_dim", format!("must be a positive multiple of 4, got {}", self.token_dim));
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return bad("heads", format!("must divide token_dim {}", self.token_dim));
        }
        for (name, v) in [
            ("semantic_tokens", self.semantic_tokens),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_channels", self.decoder_channels),
            ("disc_hidden", self.disc_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive".into());
        }
        if self.patch.n_patches == 0 || self.patch.patch_size == 0 {
            return bad("patch", "n_patches and patch_size must be positive".into());
        }
        self.weights.validate()
    }
}

/// `(x − mean) / sqrt(var + eps) · g + b` over the last axis, with a biased variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Pre-norm transformer block: `x ← MSA(LN(x)) + x`, then `x ← MLP(LN(x)) + x`.
pub struct Block {
    pub ln1: (Tensor, Tensor),
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: (Tensor, Tensor),
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: (
                store.constant(&format!("{name}.ln1.gain"), &[dim], 1.0)?,
                store.constant(&format!("{name}.ln1.bias"), &[dim], 0.0)?,
            ),
            qkv: store.linear(&format!("{name}.qkv"), dim, 3 * dim)?,
            out: store.linear(&format!("{name}.out"), dim, dim)?,
            ln2: (
                store.constant(&format!("{name}.ln2.gain"), &[dim], 1.0)?,
                store.constant(&format!("{name}.ln2.bias"), &[dim], 0.0)?,
            ),
            fc1: store.linear(&format!("{name}.fc1"), dim, mlp_ratio * dim)?,
            fc2: store.linear(&format!("{name}.fc2"), mlp_ratio * dim, dim)?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, dim) = x.dims3()?;
        let dh = dim / self.heads;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * dim, dim)?
                .reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = q.matmul(&k.t()?.contiguous()?)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, dim))?;
        Ok(self.out.forward(&ctx)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (self.attention(&layer_norm(x, &self.ln1.0, &self.ln1.1)?)? + x)?;
        let h = self.fc1.forward(&layer_norm(&x, &self.ln2.0, &self.ln2.1)?)?.gelu()?;
        Ok((self.fc2.forward(&h)? + x)?)
    }
}

/// Fixed 2-D sinusoidal position codes for an `h × w` token grid, shape `(h·w, dim)`.
pub fn grid_positions(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut data = vec![0f32; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[i] = (y as f64 * freq).sin() as f32;
                row[quarter + i] = (y as f64 * freq).cos() as f32;
                row[2 * quarter + i] = (x as f64 * freq).sin() as f32;
                row[3 * quarter + i] = (x as f64 * freq).cos() as f32;
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), device)?.to_dtype(dtype)?)
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, 1, 1, 1, 1)?.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Semantic and image tokens after splitting a fused sequence.
pub struct SplitTokens {
    pub semantic: Tensor,
    pub image: Tensor,
}

pub struct TransferModel {
    pub config: TransferConfig,
    store: ParamStore,
    mapper: [Linear; 2],
    token_proj: Linear,
    blocks: Vec<Block>,
    dec_in: Linear,
    dec_convs: Vec<ConvLayer>,
    dec_out: ConvLayer,
    text_dim: usize,
    feat_dim: usize,
    channels: usize,
    stride: usize,
}

impl TransferModel {
    pub fn new(cfg: &TransferConfig, encoders: &Encoders) -> Result<Self> {
        cfg.validate()?;
        let stride = encoders.image.stride();
        if !stride.is_power_of_two() {
            return Err(Error::arg(format!("encoder stride {stride} is not a power of two")));
        }
        let (text_dim, feat_dim, channels) = (encoders.config.text_dim, encoders.config.pooled_dim, encoders.image.channels());
        let mut store = ParamStore::new(cfg.seed, encoders.image.dtype(), encoders.image.device());
        let dt = cfg.token_dim;
        let mapper = [
            store.linear("mapper.fc0", text_dim + feat_dim, 2 * dt)?,
            store.linear("mapper.fc1", 2 * dt, cfg.semantic_tokens * dt)?,
        ];
        let token_proj = store.linear("tokens.proj", channels, dt)?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&mut store, &format!("block{i}"), dt, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let dec_in = store.linear("decoder.in", dt, cfg.decoder_channels)?;
        let c = cfg.decoder_channels;
        let dec_convs = (0..stride.trailing_zeros())
            .map(|i| {
                let (weight, bias) = store.conv2d(&format!("decoder.up{i}"), c, c, 3)?;
                Ok(ConvLayer { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        let (weight, bias) = store.conv2d("decoder.out", c, 3, 3)?;
        Ok(Self {
            config: cfg.clone(),
            store,
            mapper,
            token_proj,
            blocks,
            dec_in,
            dec_convs,
            dec_out: ConvLayer { weight, bias },
            text_dim,
            feat_dim,
            channels,
            stride,
        })
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// `(B, d_t)` text and `(B, d)` emotion features to `(B, M, d_tok)` semantic tokens.
    pub fn map_features(&self, f_e: &Tensor, f_c: &Tensor) -> Result<Tensor> {
        let (b, dt) = f_e.dims2()?;
        let (bc, dc) = f_c.dims2()?;
        if dt != self.text_dim || dc != self.feat_dim || b != bc {
            return Err(Error::arg(format!(
                "mapper expects ({b}, {}) and ({b}, {}), got ({b}, {dt}) and ({bc}, {dc})",
                self.text_dim, self.feat_dim
            )));
        }
        let f_ec = Tensor::cat(&[f_e, f_c], D::Minus1)?;
        let h = self.mapper[0].forward(&f_ec)?.gelu()?;
        Ok(self.mapper[1].forward(&h)?.reshape((b, self.config.semantic_tokens, self.config.token_dim))?)
    }

    /// `(B, C, h, w)` feature map to `(B, h·w, d_tok)` tokens with position codes added.
    pub fn image_tokens(&self, fmap: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = fmap.dims4()?;
        if c != self.channels {
            return Err(Error::arg(format!("feature map has {c} channels, model expects {}", self.channels)));
        }
        let tokens = self.token_proj.forward(&fmap.flatten_from(2)?.transpose(1, 2)?.contiguous()?)?;
        let pos = grid_positions(h, w, self.config.token_dim, fmap.dtype(), fmap.device())?;
        Ok(tokens.broadcast_add(&pos)?)
    }

    /// Concatenates `[semantic ; image]` along the token axis and applies every block.
    pub fn fuse(&self, f_m: &Tensor, image_tokens: &Tensor) -> Result<Tensor> {
        fuse_with(&self.blocks, f_m, image_tokens)
    }

    /// Inverse of the concatenation in [`fuse`](Self::fuse).
    pub fn split(&self, fused: &Tensor, image_token_count: usize) -> Result<SplitTokens> {
        split_tokens(fused, self.config.semantic_tokens, image_token_count)
    }

    /// `(B, h·w, d_tok)` tokens to a `(B, 3, h·s, w·s)` image in `[0, 1]`.
    pub fn decode(&self, image_tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, t, _) = image_tokens.dims3()?;
        if t != h * w {
            return Err(Error::Internal(format!("decoder got {t} tokens for a {h}x{w} grid")));
        }
        let mut x = self
            .dec_in
            .forward(image_tokens)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, self.config.decoder_channels, h, w))?;
        let (mut hh, mut ww) = (h, w);
        for conv in &self.dec_convs {
            hh *= 2;
            ww *= 2;
            x = candle_nn::ops::leaky_relu(&conv.forward(&x.upsample_nearest2d(hh, ww)?)?, 0.2)?;
        }
        sigmoid(&self.dec_out.forward(&x)?)
    }

    /// Full pass for a `(B, 3, H, W)` batch. Returns the image and the semantic output tokens.
    pub fn forward(&self, encoders: &Encoders, images: &Tensor, f_e: &Tensor, f_c: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, hgt, wid) = images.dims4()?;
        if hgt % self.stride != 0 || wid % self.stride != 0 {
            return Err(Error::arg(format!("image size {hgt}x{wid} must be divisible by {}", self.stride)));
        }
        let fmap = encoders.image.feature_map(images)?.detach();
        let (_, _, h, w) = fmap.dims4()?;
        let f_m = self.map_features(f_e, f_c)?;
        let fused = self.fuse(&f_m, &self.image_tokens(&fmap)?)?;
        let parts = self.split(&fused, h * w)?;
        Ok((self.decode(&parts.image, h, w)?, parts.semantic))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), MODEL_KIND.to_string()),
            ("format_version".to_string(), MODEL_FORMAT_VERSION.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("text_dim".to_string(), self.text_dim.to_string()),
            ("feat_dim".to_string(), self.feat_dim.to_string()),
            ("channels".to_string(), self.channels.to_string()),
        ]);
        archive::write(path, &self.store.named_tensors(), meta)
    }

    /// Loads a checkpoint; the encoders must match the dimensions it was trained with.
    pub fn load(path: &Path, encoders: &Encoders) -> Result<Self> {
        let arch = archive::read(path, encoders.image.device())?;
        arch.expect_version(MODEL_KIND, MODEL_FORMAT_VERSION)?;
        let cfg: TransferConfig =
            serde_json::from_str(arch.meta("config")?).map_err(|e| Error::Format(format!("config metadata: {e}")))?;
        let mut model = Self::new(&cfg, encoders)?;
        for (key, have) in [("text_dim", model.text_dim), ("feat_dim", model.feat_dim), ("channels", model.channels)] {
            let want = arch.meta_usize(key)?;
            if want != have {
                return Err(Error::Format(format!("checkpoint {key} is {want}, encoders give {have}")));
            }
        }
        model.store.load_from(path, "")?;
        Ok(model)
    }
}

pub fn fuse_with(blocks: &[Block], f_m: &Tensor, image_tokens: &Tensor) -> Result<Tensor> {
    let mut x = Tensor::cat(&[f_m, image_tokens], 1)?;
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

pub fn split_tokens(fused: &Tensor, semantic: usize, image: usize) -> Result<SplitTokens> {
    let n = fused.dim(1)?;
    if n != semantic + image {
        return Err(Error::Internal(format!(
            "fused sequence has {n} tokens, expected {semantic} semantic + {image} image"
        )));
    }
    Ok(SplitTokens {
        semantic: fused.narrow(1, 0, semantic)?,
        image: fused.narrow(1, semantic, image)?,
    })
}

/// Applies the trained model to one image with the given emotion word.
pub fn transfer(
    content: &Image,
    emotion_word: &str,
    model: &TransferModel,
    encoders: &Encoders,
    space: &EmoLatSpace,
    seed: u64,
) -> Result<Image> {
    let emotion = EmotionLabel::from_word(emotion_word)?;
    let (dtype, dev) = (encoders.image.dtype(), encoders.image.device());
    let f_e = encoders.embed_text(emotion_word)?.to_tensor(dtype, dev)?.unsqueeze(0)?;
    let f_c = sample_emotion_feature(space, emotion, seed);
    let f_c = Tensor::from_vec(f_c, (1, space.dim()), dev)?.to_dtype(dtype)?;
    let x = content.to_tensor(dtype, dev)?.unsqueeze(0)?;
    let (out, _) = model.forward(encoders, &x, &f_e, &f_c)?;
    Image::from_tensor(&out)
}

/// One training example: a content image, the target emotion, and a reference image of that emotion.
pub struct TransferBatch {
    pub contents: Vec<Image>,
    pub references: Vec<Image>,
    pub targets: Vec<EmotionLabel>,
    pub sample_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferStepReport {
    pub step: usize,
    pub losses: LossReport,
    /// Discriminator objective (maximized); absent when the adversarial weight is zero.
    pub gan_d: Option<f64>,
}

/// Training images grouped by emotion, used to draw batches.
pub struct TransferPool {
    pub images: Vec<Image>,
    pub labels: Vec<EmotionLabel>,
}

impl TransferPool {
    fn of_class(&self, e: EmotionLabel) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == e).collect()
    }

    /// Content uniform over the pool, target uniform over emotions present, reference uniform within the target class.
    pub fn draw(&self, batch_size: usize, rng: &mut impl Rng) -> Result<TransferBatch> {
        if self.images.is_empty() {
            return Err(Error::arg("empty training pool"));
        }
        let present: Vec<EmotionLabel> = EmotionLabel::ALL.into_iter().filter(|e| self.labels.contains(e)).collect();
        let mut b = TransferBatch {
            contents: Vec::with_capacity(batch_size),
            references: Vec::with_capacity(batch_size),
            targets: Vec::with_capacity(batch_size),
            sample_seeds: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let c = rng.random_range(0..self.images.len());
            let target = present[rng.random_range(0..present.len())];
            let members = self.of_class(target);
            let r = members[rng.random_range(0..members.len())];
            b.contents.push(self.images[c].clone());
            b.references.push(self.images[r].clone());
            b.targets.push(target);
            b.sample_seeds.push(rng.random());
        }
        Ok(b)
    }
}

pub struct TransferTrainer<'a> {
    pub model: TransferModel,
    encoders: &'a Encoders,
    space: &'a EmoLatSpace,
    classifier: Option<&'a EmotionClassifier>,
    disc: TransferDiscriminator,
    disc_store: ParamStore,
    opt_g: AdamW,
    opt_d: AdamW,
    step: usize,
}

impl<'a> TransferTrainer<'a> {
    pub fn new(
        model: TransferModel,
        encoders: &'a Encoders,
        space: &'a EmoLatSpace,
        classifier: Option<&'a EmotionClassifier>,
    ) -> Result<Self> {
        let cfg = model.config.clone();
        if space.dim() != encoders.config.pooled_dim {
            return Err(Error::arg(format!(
                "space dimension {} differs from encoder feature dimension {}",
                space.dim(),
                encoders.config.pooled_dim
            )));
        }
        if classifier.is_none() && cfg.weights.emotion > 0.0 {
            return Err(Error::Config {
                field: "weights.emotion".into(),
                message: "a classifier is required when the emotion weight is positive".into(),
            });
        }
        let mut disc_store = ParamStore::new(cfg.seed.wrapping_add(101), encoders.image.dtype(), encoders.image.device());
        let disc = TransferDiscriminator::new(&mut disc_store, encoders.config.pooled_dim, encoders.config.text_dim, cfg.disc_hidden)?;
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        };
        let opt_g = AdamW::new(model.store.vars(), params.clone())?;
        let opt_d = AdamW::new(disc_store.vars(), params)?;
        Ok(Self {
            model,
            encoders,
            space,
            classifier,
            disc,
            disc_store,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    pub fn discriminator_checksum(&self) -> Result<String> {
        self.disc_store.checksum()
    }

    fn nonfinite(&self, term: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                term: term.into(),
                step: self.step,
            })
        }
    }

    /// Adversarial update on detached generator output, then the generator update on `L_total`.
    pub fn step(&mut self, batch: &TransferBatch) -> Result<TransferStepReport> {
        let w = self.model.config.weights;
        let enc = self.encoders;
        let (dtype, dev) = (enc.image.dtype(), enc.image.device());
        let b = batch.contents.len();
        if b == 0 || batch.references.len() != b || batch.targets.len() != b || batch.sample_seeds.len() != b {
            return Err(Error::arg("inconsistent transfer batch"));
        }
        let contents = Image::batch_tensor(&batch.contents.iter().collect::<Vec<_>>(), dtype, dev)?;
        let refs = Image::batch_tensor(&batch.references.iter().collect::<Vec<_>>(), dtype, dev)?;
        let words = batch
            .targets
            .iter()
            .map(|e| enc.embed_text(e.name())?.to_tensor(dtype, dev))
            .collect::<Result<Vec<_>>>()?;
        let f_e = Tensor::stack(&words, 0)?;
        let f_c: Vec<f32> = batch
            .targets
            .iter()
            .zip(&batch.sample_seeds)
            .flat_map(|(e, s)| sample_emotion_feature(self.space, *e, *s))
            .collect();
        let f_c = Tensor::from_vec(f_c, (b, self.space.dim()), dev)?.to_dtype(dtype)?;

        let f_ref = enc.image.feature_map(&refs)?.detach();
        let p_ref = enc.image.pool(&f_ref)?.detach();
        let gan_d = if w.gan > 0.0 {
            let (gen, _) = self.model.forward(enc, &contents, &f_e, &f_c)?;
            let p_gen = enc.image.pool(&enc.image.feature_map(&gen.detach())?)?.detach();
            let (d_obj, _) = gan_loss(&self.disc, &p_gen, &p_ref, &f_e)?;
            let v = self.nonfinite("gan_d", scalar(&d_obj)?)?;
            self.opt_d.backward_step(&d_obj.neg()?)?;
            Some(v)
        } else {
            None
        };

        let keep = |t: Tensor, weight: f64| if weight > 0.0 { t } else { t.detach() };
        let (gen, _) = self.model.forward(enc, &contents, &f_e, &f_c)?;
        let f_gen = enc.image.feature_map(&gen)?;
        let f_ori = enc.image.feature_map(&contents)?.detach();
        let content = content_loss(&f_gen, &f_ori)?;
        let style = keep(style_loss(&f_gen, &f_ref)?, w.style);
        let id = if w.identity > 0.0 {
            let (i_ss, _) = self.model.forward(enc, &refs, &f_e, &f_c)?;
            let f_ss = enc.image.feature_map(&i_ss)?;
            identity_loss(&i_ss, &refs, &f_ss, &f_ref, w.gamma)?
        } else {
            let (i_ss, _) = self.model.forward(enc, &refs.detach(), &f_e, &f_c)?;
            let i_ss = i_ss.detach();
            identity_loss(&i_ss, &refs, &enc.image.feature_map(&i_ss)?, &f_ref, w.gamma)?
        };
        let gen_for_gan = if w.gan > 0.0 { f_gen.clone() } else { f_gen.detach() };
        let (_, gan_g) = gan_loss(&self.disc, &enc.image.pool(&gen_for_gan)?, &p_ref, &f_e)?;
        let emo = match self.classifier {
            Some(c) => keep(emotion_loss(c, &enc.image, &gen, &batch.targets)?, w.emotion),
            None => Tensor::zeros((), dtype, dev)?,
        };
        let clip_seed = self.model.config.seed ^ (self.step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
        let clip = keep(clip_patch_loss(enc, &gen, &f_e, &self.model.config.patch, clip_seed)?, w.clip);

        let terms = LossTerms {
            content: keep(content, w.content),
            style,
            id: keep(id, w.identity),
            gan: keep(gan_g, w.gan),
            emo,
            clip,
        };
        let values = LossTerms {
            content: self.nonfinite("content", scalar(&terms.content)?)?,
            style: self.nonfinite("style", scalar(&terms.style)?)?,
            id: self.nonfinite("id", scalar(&terms.id)?)?,
            gan: self.nonfinite("gan", scalar(&terms.gan)?)?,
            emo: self.nonfinite("emo", scalar(&terms.emo)?)?,
            clip: self.nonfinite("clip", scalar(&terms.clip)?)?,
        };
        let (_, total) = total_loss_tensor(&terms, &w)?;
        self.nonfinite("total", scalar(&total)?)?;
        self.opt_g.backward_step(&total)?;
        self.step += 1;
        Ok(TransferStepReport {
            step: self.step,
            losses: LossReport::from_terms(&values, &w),
            gan_d,
        })
    }

    /// Runs `iterations` steps on batches drawn from `pool`.
    pub fn train(
        &mut self,
        pool: &TransferPool,
        iterations: usize,
        mut on_step: impl FnMut(&TransferStepReport) -> Result<()>,
    ) -> Result<Vec<TransferStepReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed ^ 0x7a15_fe55);
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let batch = pool.draw(self.model.config.batch_size, &mut rng)?;
            let r = self.step(&batch)?;
            on_step(&r)?;
            out.push(r);
        }
        Ok(out)
    }
}

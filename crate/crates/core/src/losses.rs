//! Training objectives of the transfer network and their weighted combination.
//!
//! Every loss takes batched tensors and returns the batch mean of the per-sample value, so the
//! functions are differentiable end to end and reduce to the textbook formula when `B = 1`.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::EmotionClassifier;
use crate::dataset::EmotionLabel;
use crate::emolat_space::{one_hot, soft_cross_entropy};
use crate::encoders::{Encoders, ImageEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Clamp applied to discriminator probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

const SQRT_FLOOR: f64 = 1e-12;

/// `sqrt(x)` written as `x / sqrt(max(x, floor))`: exact zero at zero and a finite gradient there.
pub(crate) fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    let floor = x.ones_like()?.affine(SQRT_FLOOR, 0.0)?;
    Ok(x.div(&x.maximum(&floor)?.sqrt()?)?)
}

/// Per-sample Euclidean norm over every non-batch axis, shape `(B,)`.
pub fn batch_norms(x: &Tensor) -> Result<Tensor> {
    safe_sqrt(&x.flatten_from(1)?.sqr()?.sum(D::Minus1)?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::arg(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// `‖f_gen − f_ori‖₂` per sample.
pub fn content_loss(f_gen: &Tensor, f_ori: &Tensor) -> Result<Tensor> {
    same_shape(f_gen, f_ori, "content loss")?;
    Ok(batch_norms(&(f_gen - f_ori)?)?.mean_all()?)
}

/// Per-channel spatial mean and biased standard deviation of `(B, C, H, W)`, each `(B, C)`.
pub fn channel_moments(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let flat = f.flatten_from(2)?;
    let mu = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mu)?.sqr()?.mean(D::Minus1)?;
    Ok((mu.squeeze(D::Minus1)?, safe_sqrt(&var)?))
}

/// `‖μ(f_gen) − μ(f_style)‖₂ + ‖σ(f_gen) − σ(f_style)‖₂`; spatial sizes may differ.
pub fn style_loss(f_gen: &Tensor, f_style: &Tensor) -> Result<Tensor> {
    let (bg, cg, _, _) = f_gen.dims4()?;
    let (bs, cs, _, _) = f_style.dims4()?;
    if cg != cs || bg != bs {
        return Err(Error::arg(format!("style loss: {bg}x{cg} vs {bs}x{cs} (batch x channels)")));
    }
    let (mg, sg) = channel_moments(f_gen)?;
    let (ms, ss) = channel_moments(f_style)?;
    Ok((batch_norms(&(mg - ms)?)? + batch_norms(&(sg - ss)?)?)?.mean_all()?)
}

/// `‖I_ss − I_style‖₂ + γ·‖f_ss − f_style‖₂`.
pub fn identity_loss(i_ss: &Tensor, i_style: &Tensor, f_ss: &Tensor, f_style: &Tensor, gamma: f64) -> Result<Tensor> {
    same_shape(i_ss, i_style, "identity loss images")?;
    same_shape(f_ss, f_style, "identity loss features")?;
    let image = batch_norms(&(i_ss - i_style)?)?;
    let feats = batch_norms(&(f_ss - f_style)?)?;
    Ok((image + feats.affine(gamma, 0.0)?)?.mean_all()?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Conditional and unconditional real/fake heads over pooled image features.
pub struct TransferDiscriminator {
    uncond: [Linear; 2],
    cond: [Linear; 2],
}

impl TransferDiscriminator {
    pub fn new(store: &mut ParamStore, feat_dim: usize, text_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            uncond: [store.linear("dt.uncond0", feat_dim, hidden)?, store.linear("dt.uncond1", hidden, 1)?],
            cond: [
                store.linear("dt.cond0", feat_dim + text_dim, hidden)?,
                store.linear("dt.cond1", hidden, 1)?,
            ],
        })
    }

    fn head(layers: &[Linear; 2], x: &Tensor) -> Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&layers[0].forward(x)?, 0.2)?;
        sigmoid(&layers[1].forward(&h)?.squeeze(D::Minus1)?)
    }

    /// `D(f)`, shape `(B,)`.
    pub fn real_prob(&self, f: &Tensor) -> Result<Tensor> {
        Self::head(&self.uncond, f)
    }

    /// `D(f, f_tex)` on the concatenated input, shape `(B,)`.
    pub fn real_prob_given_text(&self, f: &Tensor, f_tex: &Tensor) -> Result<Tensor> {
        Self::head(&self.cond, &Tensor::cat(&[f, f_tex], D::Minus1)?)
    }
}

/// Objectives from the four discriminator outputs. Returns `(d_objective, g_objective)`, where the
/// first is maximized by the discriminator and the second minimized by the generator.
pub fn gan_objectives(p_style: &Tensor, p_gen: &Tensor, p_style_text: &Tensor, p_gen_text: &Tensor) -> Result<(Tensor, Tensor)> {
    let log = |p: &Tensor| -> Result<Tensor> { Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?) };
    let log1m = |p: &Tensor| -> Result<Tensor> { Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.affine(-1.0, 1.0)?.log()?) };
    let d = (((log(p_style)? + log1m(p_gen)?)? + log(p_style_text)?)? + log1m(p_gen_text)?)?.mean_all()?;
    let g = (log(p_gen)? + log(p_gen_text)?)?.neg()?.mean_all()?;
    Ok((d, g))
}

pub fn gan_loss(d: &TransferDiscriminator, f_gen: &Tensor, f_style: &Tensor, f_tex: &Tensor) -> Result<(Tensor, Tensor)> {
    gan_objectives(
        &d.real_prob(f_style)?,
        &d.real_prob(f_gen)?,
        &d.real_prob_given_text(f_style, f_tex)?,
        &d.real_prob_given_text(f_gen, f_tex)?,
    )
}

/// Cross-entropy of the classifier's softmax against the target labels.
pub fn emotion_loss(
    classifier: &EmotionClassifier,
    encoder: &ImageEncoder,
    images: &Tensor,
    targets: &[EmotionLabel],
) -> Result<Tensor> {
    let logits = classifier.logits(encoder, images)?;
    soft_cross_entropy(&logits, &one_hot(targets, images.dtype(), images.device())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub n_patches: usize,
    pub patch_size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            n_patches: 16,
            patch_size: 64,
        }
    }
}

/// `1 − mean cos(patch_b,k, text_b)` for patch embeddings `(B, P, d)` and texts `(B, d)`,
/// clamped to `[0, 2]`.
pub fn patch_text_loss(patches: &Tensor, texts: &Tensor) -> Result<Tensor> {
    let unit = |x: &Tensor| -> Result<Tensor> {
        let n = safe_sqrt(&x.sqr()?.sum_keepdim(D::Minus1)?)?;
        Ok(x.broadcast_div(&n)?)
    };
    let cos = unit(patches)?.broadcast_mul(&unit(texts)?.unsqueeze(1)?)?.sum(D::Minus1)?;
    Ok(cos.mean_all()?.affine(-1.0, 1.0)?.clamp(0.0, 2.0)?)
}

/// Crops seeded random square patches from each image, embeds them with the joint encoder and
/// compares them with the per-sample text embeddings `(B, d_t)`.
pub fn clip_patch_loss(encoders: &Encoders, images: &Tensor, texts: &Tensor, cfg: &PatchConfig, seed: u64) -> Result<Tensor> {
    let (b, _, h, w) = images.dims4()?;
    let p = cfg.patch_size;
    if p > h || p > w {
        return Err(Error::arg(format!("patch size {p} exceeds image size {h}x{w}")));
    }
    if cfg.n_patches == 0 {
        return Err(Error::arg("n_patches must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crops = Vec::with_capacity(b * cfg.n_patches);
    for i in 0..b {
        let img = images.narrow(0, i, 1)?;
        for _ in 0..cfg.n_patches {
            let y = rng.random_range(0..=h - p);
            let x = rng.random_range(0..=w - p);
            crops.push(img.narrow(2, y, p)?.narrow(3, x, p)?);
        }
    }
    let emb = encoders.embed_images(&Tensor::cat(&crops, 0)?)?;
    let emb = emb.reshape((b, cfg.n_patches, emb.dim(1)?))?;
    patch_text_loss(&emb, texts)
}

/// Loss weights: λ1 content, λ2 style, λ3 identity, λ4 adversarial, λ_emo, λ_clip, and the
/// identity feature weight γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub gan: f64,
    pub emotion: f64,
    pub clip: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            style: 3.0,
            identity: 1.0,
            gan: 0.1,
            emotion: 0.5,
            clip: 0.5,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn content_only() -> Self {
        Self {
            content: 1.0,
            style: 0.0,
            identity: 0.0,
            gan: 0.0,
            emotion: 0.0,
            clip: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("content", self.content),
            ("style", self.style),
            ("identity", self.identity),
            ("gan", self.gan),
            ("emotion", self.emotion),
            ("clip", self.clip),
            ("gamma", self.gamma),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field: format!("weights.{name}"),
                    message: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// The six weighted terms, as scalars or tensors.
#[derive(Debug, Clone)]
pub struct LossTerms<T> {
    pub content: T,
    pub style: T,
    pub id: T,
    pub gan: T,
    pub emo: T,
    pub clip: T,
}

/// Returns `(vis, total)`.
pub fn total_loss(t: &LossTerms<f64>, w: &LossWeights) -> (f64, f64) {
    let vis = w.content * t.content + w.style * t.style + w.identity * t.id + w.gan * t.gan;
    (vis, vis + w.emotion * t.emo + w.clip * t.clip)
}

/// Tensor version of [`total_loss`] for backpropagation.
pub fn total_loss_tensor(t: &LossTerms<Tensor>, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    let vis = (((t.content.affine(w.content, 0.0)? + t.style.affine(w.style, 0.0)?)? + t.id.affine(w.identity, 0.0)?)?
        + t.gan.affine(w.gan, 0.0)?)?;
    let total = ((&vis + t.emo.affine(w.emotion, 0.0)?)? + t.clip.affine(w.clip, 0.0)?)?;
    Ok((vis, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub style: f64,
    pub id: f64,
    pub gan: f64,
    pub vis: f64,
    pub emo: f64,
    pub clip: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(t: &LossTerms<f64>, w: &LossWeights) -> Self {
        let (vis, total) = total_loss(t, w);
        Self {
            content: t.content,
            style: t.style,
            id: t.id,
            gan: t.gan,
            vis,
            emo: t.emo,
            clip: t.clip,
            total,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("content", self.content),
            ("style", self.style),
            ("id", self.id),
            ("gan", self.gan),
            ("vis", self.vis),
            ("emo", self.emo),
            ("clip", self.clip),
            ("total", self.total),
        ]
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

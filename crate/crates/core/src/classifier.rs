//! Frozen-feature emotion classifier used by the emotion loss and the accuracy metrics.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::dataset::EmotionLabel;
use crate::emolat_space::{one_hot, soft_cross_entropy};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::losses::safe_sqrt;
use crate::params::ParamStore;
use crate::pixels::Image;

const CLASSIFIER_KIND: &str = "emolat_classifier";
pub const CLASSIFIER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 32,
            seed: 11,
        }
    }
}

/// Channel means and standard deviations of the frozen feature map, followed by a two-layer MLP.
pub struct EmotionClassifier {
    store: ParamStore,
    fc0: Linear,
    fc1: Linear,
    in_dim: usize,
}

/// `(B, C, h, w) → (B, 2C)`: per-channel spatial mean and biased standard deviation.
pub fn channel_statistics(fmap: &Tensor) -> Result<Tensor> {
    let flat = fmap.flatten_from(2)?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
    Ok(Tensor::cat(&[mean.squeeze(D::Minus1)?, safe_sqrt(&var)?], 1)?)
}

impl EmotionClassifier {
    pub fn new(in_dim: usize, hidden: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device);
        let fc0 = store.linear("fc0", in_dim, hidden)?;
        let fc1 = store.linear("fc1", hidden, EmotionLabel::COUNT)?;
        Ok(Self { store, fc0, fc1, in_dim })
    }

    pub fn for_encoder(encoder: &ImageEncoder, hidden: usize, seed: u64) -> Result<Self> {
        Self::new(2 * encoder.channels(), hidden, seed, encoder.dtype(), encoder.device())
    }

    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.fc0.forward(features)?.relu()?;
        Ok(self.fc1.forward(&h)?)
    }

    /// `(B, 3, H, W)` images to `(B, 8)` logits; differentiable with respect to the images.
    pub fn logits(&self, encoder: &ImageEncoder, images: &Tensor) -> Result<Tensor> {
        let feats = channel_statistics(&encoder.feature_map(images)?)?;
        if feats.dim(1)? != self.in_dim {
            return Err(Error::arg(format!(
                "classifier expects {} features, encoder gives {}",
                self.in_dim,
                feats.dim(1)?
            )));
        }
        self.logits_from_features(&feats)
    }

    pub fn predict(&self, encoder: &ImageEncoder, images: &[&Image]) -> Result<Vec<EmotionLabel>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = Image::batch_tensor(chunk, encoder.dtype(), encoder.device())?;
            let idx = self.logits(encoder, &x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            out.extend(idx.into_iter().map(|i| EmotionLabel::ALL[i as usize]));
        }
        Ok(out)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Fits the MLP on precomputed features with mini-batch Adam.
    pub fn fit(&mut self, encoder: &ImageEncoder, images: &[&Image], labels: &[EmotionLabel], cfg: &ClassifierConfig) -> Result<Vec<f64>> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::arg("classifier training needs one label per image"));
        }
        let (dtype, dev) = (encoder.dtype(), encoder.device());
        let mut feats = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = Image::batch_tensor(chunk, dtype, dev)?;
            feats.push(channel_statistics(&encoder.feature_map(&x)?)?.detach());
        }
        let feats = Tensor::cat(&feats, 0)?;
        let targets = one_hot(labels, dtype, dev)?;
        let mut opt = AdamW::new(
            self.store.vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<u32> = (0..images.len() as u32).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let idx = Tensor::from_slice(chunk, chunk.len(), dev)?;
                let loss = soft_cross_entropy(&self.logits_from_features(&feats.index_select(&idx, 0)?)?, &targets.index_select(&idx, 0)?)?;
                total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
                opt.backward_step(&loss)?;
            }
            losses.push(total / images.len() as f64);
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), CLASSIFIER_KIND.to_string()),
            ("format_version".to_string(), CLASSIFIER_FORMAT_VERSION.to_string()),
            ("in_dim".to_string(), self.in_dim.to_string()),
            ("hidden".to_string(), self.fc0.weight().dim(0)?.to_string()),
        ]);
        archive::write(path, &self.store.named_tensors(), meta)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let arch = archive::read(path, device)?;
        arch.expect_version(CLASSIFIER_KIND, CLASSIFIER_FORMAT_VERSION)?;
        let mut c = Self::new(arch.meta_usize("in_dim")?, arch.meta_usize("hidden")?, 0, dtype, device)?;
        c.store.load_from(path, "")?;
        Ok(c)
    }
}

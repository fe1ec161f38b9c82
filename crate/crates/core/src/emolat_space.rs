//! The emotion latent space: one codebook per emotion, filled by vector-quantizing graph
//! features and aligned adversarially with pooled features of real images.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Linear, Module, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::dataset::{EmotionLabel, ImageRecord};
use crate::embedding::{silhouette_score, tsne_2d};
use crate::encoders::{Encoders, TextEmbedding};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pixels::Image;
use crate::semantic_graph::{build_stage1_graph, EmotionGraph, GraphBatch, GraphConfig, GraphEncoder, Readout};

pub const SPACE_FORMAT_VERSION: u32 = 1;
const SPACE_KIND: &str = "emolat_space";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub emotion: EmotionLabel,
    rows: usize,
    dim: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(emotion: EmotionLabel, rows: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::arg("a codebook needs at least two entries"));
        }
        if entries.len() != rows * dim {
            return Err(Error::arg(format!("codebook data has {} values, expected {rows}x{dim}", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("codebook entries must be finite"));
        }
        Ok(Self {
            emotion,
            rows,
            dim,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0f64; self.dim];
        for k in 0..self.rows {
            for (a, v) in c.iter_mut().zip(self.entry(k)) {
                *a += *v as f64 / self.rows as f64;
            }
        }
        c
    }
}

/// Index of the entry nearest to `z`; ties go to the lowest index.
pub fn nearest_index(z: &[f32], book: &Codebook) -> Result<usize> {
    if z.len() != book.dim {
        return Err(Error::arg(format!("query has dimension {}, codebook {}", z.len(), book.dim)));
    }
    let mut best = (f64::INFINITY, 0);
    for k in 0..book.rows {
        let d: f64 = book
            .entry(k)
            .iter()
            .zip(z)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best.1)
}

/// Replaces `z` by its nearest codebook entry.
pub fn quantize(z: &[f32], book: &Codebook) -> Result<(Vec<f32>, usize)> {
    let k = nearest_index(z, book)?;
    Ok((book.entry(k).to_vec(), k))
}

/// Eight codebooks sharing one shape, in canonical emotion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmoLatSpace {
    codebooks: Vec<Codebook>,
}

impl EmoLatSpace {
    pub fn new(codebooks: Vec<Codebook>) -> Result<Self> {
        if codebooks.len() != EmotionLabel::COUNT {
            return Err(Error::arg(format!("expected 8 codebooks, got {}", codebooks.len())));
        }
        let (n, d) = (codebooks[0].rows, codebooks[0].dim);
        for (i, b) in codebooks.iter().enumerate() {
            if b.emotion.index() != i {
                return Err(Error::arg("codebooks must follow the canonical emotion order"));
            }
            if b.rows != n || b.dim != d {
                return Err(Error::arg("all codebooks must share N and d"));
            }
        }
        Ok(Self { codebooks })
    }

    /// Entries drawn from `N(0, 1/d)`.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0 / (dim as f64).sqrt()).map_err(|e| Error::Internal(e.to_string()))?;
        let books = EmotionLabel::ALL
            .iter()
            .map(|&e| {
                let data = (0..rows * dim)
                    .map(|_| rand_distr::Distribution::sample(&normal, &mut rng) as f32)
                    .collect();
                Codebook::new(e, rows, dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(books)
    }

    pub fn codebook(&self, emotion: EmotionLabel) -> &Codebook {
        &self.codebooks[emotion.index()]
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].dim
    }

    pub fn entries_per_book(&self) -> usize {
        self.codebooks[0].rows
    }

    /// Smallest Euclidean distance between the centroids of two codebooks.
    pub fn min_pairwise_mean_distance(&self) -> f64 {
        let cs: Vec<Vec<f64>> = self.codebooks.iter().map(Codebook::centroid).collect();
        let mut best = f64::INFINITY;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                let d = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// Silhouette of all entries, labelled by emotion.
    pub fn silhouette(&self) -> f64 {
        let (points, labels) = self.labelled_points();
        silhouette_score(&points, &labels)
    }

    fn labelled_points(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for b in &self.codebooks {
            for k in 0..b.rows {
                points.push(b.entry(k).iter().map(|v| *v as f64).collect());
                labels.push(b.emotion.index());
            }
        }
        (points, labels)
    }

    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for b in &self.codebooks {
            for v in &b.entries {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Draws one entry of the emotion's codebook uniformly at random.
pub fn sample_emotion_feature(space: &EmoLatSpace, emotion: EmotionLabel, seed: u64) -> Vec<f32> {
    let book = space.codebook(emotion);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    book.entry(rng.random_range(0..book.rows)).to_vec()
}

/// Name-based variant that rejects words outside the eight categories and their synonyms.
pub fn sample_emotion_feature_by_name(space: &EmoLatSpace, emotion: &str, seed: u64) -> Result<Vec<f32>> {
    Ok(sample_emotion_feature(space, EmotionLabel::from_word(emotion)?, seed))
}

pub fn export_space(space: &EmoLatSpace, path: &Path) -> Result<()> {
    let dev = Device::Cpu;
    let tensors = space
        .codebooks
        .iter()
        .enumerate()
        .map(|(i, b)| Ok((format!("codebook_{i}"), Tensor::from_slice(&b.entries, (b.rows, b.dim), &dev)?)))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<&str> = EmotionLabel::ALL.iter().map(|e| e.name()).collect();
    let metadata = HashMap::from([
        ("kind".to_string(), SPACE_KIND.to_string()),
        ("format_version".to_string(), SPACE_FORMAT_VERSION.to_string()),
        ("d".to_string(), space.dim().to_string()),
        ("n".to_string(), space.entries_per_book().to_string()),
        ("emotions".to_string(), serde_json::to_string(&names)?),
    ]);
    archive::write(path, &tensors, metadata)
}

pub fn import_space(path: &Path) -> Result<EmoLatSpace> {
    let arch = archive::read(path, &Device::Cpu)?;
    arch.expect_version(SPACE_KIND, SPACE_FORMAT_VERSION)?;
    let (d, n) = (arch.meta_usize("d")?, arch.meta_usize("n")?);
    let names: Vec<String> =
        serde_json::from_str(arch.meta("emotions")?).map_err(|e| Error::Format(format!("emotions metadata: {e}")))?;
    if names.len() != EmotionLabel::COUNT {
        return Err(Error::Format("emotion order must list 8 names".into()));
    }
    let mut books: Vec<Option<Codebook>> = vec![None; EmotionLabel::COUNT];
    for (i, name) in names.iter().enumerate() {
        let emotion: EmotionLabel = name.parse().map_err(|_| Error::Format(format!("unknown emotion `{name}`")))?;
        let t = arch.tensor(&format!("codebook_{i}"))?;
        if t.dims() != [n, d] {
            return Err(Error::Format(format!("codebook_{i} has shape {:?}, expected [{n}, {d}]", t.dims())));
        }
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        books[emotion.index()] = Some(Codebook::new(emotion, n, d, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let books = books
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format("emotion order repeats a category".into()))?;
    EmoLatSpace::new(books)
}

/// Writes `x,y,emotion` rows for every codebook entry, projected to 2-D with seeded t-SNE.
/// When `png` is given, a scatter plot is rendered there too.
pub fn export_embedding_plot(space: &EmoLatSpace, csv: &Path, png: Option<&Path>, seed: u64) -> Result<()> {
    let (points, labels) = space.labelled_points();
    let coords = tsne_2d(&points, 30.0, 500, seed);
    let mut out = String::from("x,y,emotion\n");
    for (p, l) in coords.iter().zip(&labels) {
        out.push_str(&format!("{},{},{}\n", p[0], p[1], EmotionLabel::ALL[*l]));
    }
    let mut f = std::fs::File::create(csv).map_err(|e| Error::io(csv, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(csv, e))?;
    if let Some(png) = png {
        render_scatter(&coords, &labels, png)?;
    }
    Ok(())
}

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.75, 0.10],
    [0.20, 0.45, 0.90],
    [0.30, 0.75, 0.35],
    [0.95, 0.45, 0.10],
    [0.80, 0.10, 0.10],
    [0.50, 0.55, 0.10],
    [0.45, 0.15, 0.55],
    [0.45, 0.50, 0.60],
];

fn render_scatter(coords: &[[f64; 2]], labels: &[usize], path: &Path) -> Result<()> {
    let size = 400usize;
    let mut img = Image::filled(size, size, [1.0; 3]);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in coords {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 12.0;
    for (p, &l) in coords.iter().zip(labels) {
        let to_px = |k: usize| -> f64 {
            let span = (hi[k] - lo[k]).max(1e-12);
            margin + (p[k] - lo[k]) / span * (size as f64 - 2.0 * margin)
        };
        let (cx, cy) = (to_px(0) as isize, to_px(1) as isize);
        for dy in -3..=3isize {
            for dx in -3..=3isize {
                if dx * dx + dy * dy > 9 {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    img.set(y as usize, x as usize, PALETTE[l]);
                }
            }
        }
    }
    img.save(path)
}

/// Batch mean dispersion: `(1/C²) Σ_i Σ_{j≠i} ‖μ_i − μ_j‖²` over the populated groups, where
/// `μ_i` is the mean of the rows of group `i`. Empty groups are skipped and `C` counts only the
/// populated ones.
pub fn mdi_loss(groups: &[Option<Tensor>]) -> Result<Tensor> {
    let means = groups
        .iter()
        .flatten()
        .map(|g| g.mean_keepdim(0))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let skipped = groups.len() - means.len();
    if skipped > 0 {
        log::debug!("mdi: {skipped} codebook(s) had no assigned features");
    }
    if means.is_empty() {
        return Err(Error::arg("mean dispersion needs at least one populated codebook"));
    }
    let c = means.len() as f64;
    let mu = Tensor::cat(&means, 0)?;
    let diff = mu.unsqueeze(0)?.broadcast_sub(&mu.unsqueeze(1)?)?;
    Ok(diff.sqr()?.sum_all()?.affine(1.0 / (c * c), 0.0)?)
}

/// Feed-forward critic producing eight emotion logits.
pub struct Discriminator {
    layers: [Linear; 3],
    dim: usize,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        let hidden = 2 * dim;
        Ok(Self {
            layers: [
                store.linear("disc.fc0", dim, hidden)?,
                store.linear("disc.fc1", hidden, hidden)?,
                store.linear("disc.fc2", hidden, EmotionLabel::COUNT)?,
            ],
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = candle_nn::ops::leaky_relu(&self.layers[0].forward(x)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&self.layers[1].forward(&h)?, 0.2)?;
        Ok(self.layers[2].forward(&h)?)
    }

    pub fn discriminate(&self, f: &[f32]) -> Result<Vec<f32>> {
        if f.len() != self.dim {
            return Err(Error::arg(format!("discriminator expects dimension {}, got {}", self.dim, f.len())));
        }
        let w = self.layers[0].weight();
        let x = Tensor::from_slice(f, (1, f.len()), w.device())?.to_dtype(w.dtype())?;
        Ok(self.forward(&x)?.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

/// Per-sample cross-entropy `−Σ_j y_j log softmax(logits)_j`, averaged over the batch.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * targets)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

pub fn one_hot(labels: &[EmotionLabel], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0f32; labels.len() * EmotionLabel::COUNT];
    for (i, l) in labels.iter().enumerate() {
        v[i * EmotionLabel::COUNT + l.index()] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), EmotionLabel::COUNT), device)?.to_dtype(dtype)?)
}

/// How the generator reads the adversarial term of its objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// Cross-entropy against the sample's own emotion.
    Masked,
    /// Sum of log-probabilities over all eight classes.
    Literal,
}

/// Which features enter the dispersion means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionSource {
    PreQuantization,
    PostQuantization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    pub codebook_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// When set, overrides `epochs` with an exact number of alternating steps.
    pub steps: Option<usize>,
    pub commitment: f64,
    pub generator_objective: GeneratorObjective,
    pub dispersion_source: DispersionSource,
    pub gcn_layers: usize,
    pub attn_dim: usize,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            batch_size: 64,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            epochs: 3,
            steps: None,
            commitment: 0.0,
            generator_objective: GeneratorObjective::Masked,
            dispersion_source: DispersionSource::PreQuantization,
            gcn_layers: 2,
            attn_dim: 64,
            readout: Readout::SemanticNode,
            seed: 17,
        }
    }
}

impl SpaceConfig {
    pub fn toy() -> Self {
        Self {
            codebook_size: 16,
            attn_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("space.{field}"),
                message: message.into(),
            })
        };
        if self.codebook_size < 2 {
            return bad("codebook_size", "must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.epochs == 0 && self.steps.is_none() {
            return bad("epochs", "must be positive");
        }
        if self.weight_decay < 0.0 || self.commitment < 0.0 {
            return bad("weight_decay", "weights must be nonnegative");
        }
        if self.gcn_layers == 0 || self.attn_dim == 0 {
            return bad("gcn_layers", "must be positive");
        }
        Ok(())
    }
}

/// One training example: the stage-one graph of a record, its label, and the pooled feature of its image.
#[derive(Debug, Clone)]
pub struct SpaceSample {
    pub graph: EmotionGraph,
    pub emotion: EmotionLabel,
    pub real: Vec<f32>,
}

pub fn prepare_space_samples(records: &[ImageRecord], images: &[Image], encoders: &Encoders) -> Result<Vec<SpaceSample>> {
    if records.len() != images.len() {
        return Err(Error::arg("one image per record is required"));
    }
    let mut cache: HashMap<String, TextEmbedding> = HashMap::new();
    records
        .iter()
        .zip(images)
        .map(|(r, img)| {
            r.validate()?;
            let graph = crate::semantic_graph::build_stage1_with(r, |w| {
                if let Some(e) = cache.get(w) {
                    return Ok(e.clone());
                }
                let e = encoders.embed_text(w)?;
                cache.insert(w.to_string(), e.clone());
                Ok(e)
            })?;
            let (_, real) = encoders.encode_image(img)?;
            Ok(SpaceSample {
                graph,
                emotion: r.emotion,
                real,
            })
        })
        .collect()
}

/// Builds the stage-one graph of a single record; exposed for callers that skip batching.
pub fn record_graph(record: &ImageRecord, encoders: &Encoders) -> Result<EmotionGraph> {
    build_stage1_graph(record, &encoders.text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceStepReport {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub mdi: f64,
    pub min_pairwise_mean_dist: f64,
}

/// Alternating trainer over the generator (graph encoder + codebooks) and the discriminator.
pub struct SpaceTrainer {
    pub config: SpaceConfig,
    generator: GraphEncoder,
    codebooks: Vec<Var>,
    gen_store: ParamStore,
    discriminator: Discriminator,
    disc_store: ParamStore,
    gen_opt: AdamW,
    disc_opt: AdamW,
    emotion_embeddings: Vec<TextEmbedding>,
    step: usize,
    dtype: DType,
    device: Device,
}

impl SpaceTrainer {
    pub fn new(config: &SpaceConfig, encoders: &Encoders, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let d = encoders.config.pooled_dim;
        let mut gen_store = ParamStore::new(config.seed, dtype, device);
        let generator = GraphEncoder::new(
            &mut gen_store,
            &GraphConfig {
                text_dim: encoders.config.text_dim,
                dim: d,
                attn_dim: config.attn_dim,
                layers: config.gcn_layers,
                readout: config.readout,
            },
        )?;
        let init = EmoLatSpace::random(config.codebook_size, d, config.seed ^ 0xc0de_b00c)?;
        let mut codebooks = Vec::with_capacity(EmotionLabel::COUNT);
        for (i, b) in init.codebooks().iter().enumerate() {
            let t = Tensor::from_slice(b.entries(), (b.len(), d), device)?;
            gen_store.insert(&format!("codebook.{i}"), t)?;
            codebooks.push(gen_store.get(&format!("codebook.{i}")).cloned().expect("just inserted"));
        }
        let mut disc_store = ParamStore::new(config.seed.wrapping_add(1), dtype, device);
        let discriminator = Discriminator::new(&mut disc_store, d)?;
        let adam = |wd| ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: wd,
            ..Default::default()
        };
        let gen_opt = AdamW::new(gen_store.vars(), adam(config.weight_decay))?;
        let disc_opt = AdamW::new(disc_store.vars(), adam(config.weight_decay))?;
        let emotion_embeddings = EmotionLabel::ALL
            .iter()
            .map(|e| encoders.embed_text(e.name()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            generator,
            codebooks,
            gen_store,
            discriminator,
            disc_store,
            gen_opt,
            disc_opt,
            emotion_embeddings,
            step: 0,
            dtype,
            device: device.clone(),
        })
    }

    pub fn generator_checksum(&self) -> Result<String> {
        self.gen_store.checksum()
    }

    pub fn discriminator_checksum(&self) -> Result<String> {
        self.disc_store.checksum()
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn space(&self) -> Result<EmoLatSpace> {
        let books = self
            .codebooks
            .iter()
            .zip(EmotionLabel::ALL)
            .map(|(v, e)| {
                let t = v.as_tensor();
                let (n, d) = t.dims2()?;
                Codebook::new(e, n, d, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
            })
            .collect::<Result<Vec<_>>>()?;
        EmoLatSpace::new(books)
    }

    fn graph_features(&self, batch: &[&SpaceSample]) -> Result<Tensor> {
        let graphs: Vec<&EmotionGraph> = batch.iter().map(|s| &s.graph).collect();
        let emotions: Vec<&TextEmbedding> = batch.iter().map(|s| &self.emotion_embeddings[s.emotion.index()]).collect();
        let gb = GraphBatch::new(&graphs, &emotions, self.dtype, &self.device)?;
        self.generator.forward_batch(&gb)
    }

    /// Quantizes each row with its own emotion's codebook. Forward values are the selected
    /// entries; gradients reach both the entries and, straight through, the graph features.
    fn quantize_batch(&self, features: &Tensor, labels: &[EmotionLabel]) -> Result<(Tensor, Tensor)> {
        let n = self.config.codebook_size;
        let rows = features.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let space = self.space()?;
        let mut idx = Vec::with_capacity(rows.len());
        for (z, l) in rows.iter().zip(labels) {
            let k = nearest_index(z, space.codebook(*l))?;
            idx.push((l.index() * n + k) as u32);
        }
        let all: Vec<&Tensor> = self.codebooks.iter().map(|v| v.as_tensor()).collect();
        let table = Tensor::cat(&all, 0)?;
        let idx = Tensor::from_vec(idx, rows.len(), &self.device)?;
        let selected = table.index_select(&idx, 0)?;
        let st = (selected.clone() + (features - features.detach())?)?;
        Ok((st, selected))
    }

    fn check(&self, term: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                term: term.into(),
                step: self.step,
            })
        }
    }

    /// Discriminator update with real features labelled by emotion and quantized graph features
    /// labelled uniformly. Only discriminator parameters change.
    pub fn discriminator_step(&mut self, batch: &[&SpaceSample]) -> Result<f64> {
        let labels: Vec<EmotionLabel> = batch.iter().map(|s| s.emotion).collect();
        let d = self.config_dim();
        let real: Vec<f32> = batch.iter().flat_map(|s| s.real.iter().copied()).collect();
        let real = Tensor::from_vec(real, (batch.len(), d), &self.device)?.to_dtype(self.dtype)?;
        let fake = self.graph_features(batch)?.detach();
        let (_, fake_q) = self.quantize_batch(&fake, &labels)?;
        let fake_q = fake_q.detach();
        let y_real = one_hot(&labels, self.dtype, &self.device)?;
        let y_fake = Tensor::full(1.0 / EmotionLabel::COUNT as f64, (batch.len(), EmotionLabel::COUNT), &self.device)?
            .to_dtype(self.dtype)?;
        let loss = (soft_cross_entropy(&self.discriminator.forward(&real)?, &y_real)?
            + soft_cross_entropy(&self.discriminator.forward(&fake_q)?, &y_fake)?)?;
        let value = self.check("L_D", loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)?;
        self.disc_opt.backward_step(&loss)?;
        Ok(value)
    }

    /// Generator update: adversarial term minus dispersion (plus optional commitment). Only the
    /// graph encoder and codebooks change.
    pub fn generator_step(&mut self, batch: &[&SpaceSample]) -> Result<(f64, f64)> {
        let labels: Vec<EmotionLabel> = batch.iter().map(|s| s.emotion).collect();
        let features = self.graph_features(batch)?;
        let (f_qg, selected) = self.quantize_batch(&features, &labels)?;
        let logits = self.discriminator.forward(&f_qg)?;
        let adv = match self.config.generator_objective {
            GeneratorObjective::Masked => soft_cross_entropy(&logits, &one_hot(&labels, self.dtype, &self.device)?)?,
            GeneratorObjective::Literal => candle_nn::ops::log_softmax(&logits, D::Minus1)?
                .sum(D::Minus1)?
                .neg()?
                .mean_all()?,
        };
        let source = match self.config.dispersion_source {
            DispersionSource::PreQuantization => &features,
            DispersionSource::PostQuantization => &f_qg,
        };
        let mut groups = Vec::with_capacity(EmotionLabel::COUNT);
        for e in EmotionLabel::ALL {
            let rows: Vec<u32> = labels.iter().enumerate().filter(|(_, l)| **l == e).map(|(i, _)| i as u32).collect();
            groups.push(if rows.is_empty() {
                None
            } else {
                let n = rows.len();
                Some(source.index_select(&Tensor::from_vec(rows, n, &self.device)?, 0)?)
            });
        }
        let mdi = mdi_loss(&groups)?;
        let mut loss = (adv - &mdi)?;
        if self.config.commitment > 0.0 {
            let commit = (features - selected.detach())?.sqr()?.sum(D::Minus1)?.mean_all()?;
            loss = (loss + commit.affine(self.config.commitment, 0.0)?)?;
        }
        let mdi_v = self.check("L_mdi", mdi.to_dtype(DType::F64)?.to_scalar::<f64>()?)?;
        let g_v = self.check("L_G", loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)?;
        self.gen_opt.backward_step(&loss)?;
        Ok((g_v, mdi_v))
    }

    fn config_dim(&self) -> usize {
        self.generator.dim()
    }

    /// One alternating step: discriminator first, then generator.
    pub fn train_step(&mut self, batch: &[&SpaceSample]) -> Result<SpaceStepReport> {
        if batch.is_empty() {
            return Err(Error::arg("empty training batch"));
        }
        let d_loss = self.discriminator_step(batch)?;
        let (g_loss, mdi) = self.generator_step(batch)?;
        self.step += 1;
        Ok(SpaceStepReport {
            step: self.step,
            d_loss,
            g_loss,
            mdi,
            min_pairwise_mean_dist: self.space()?.min_pairwise_mean_distance(),
        })
    }

    /// Runs `epochs` passes over shuffled batches, or exactly `steps` steps when configured.
    pub fn train(
        &mut self,
        samples: &[SpaceSample],
        mut on_step: impl FnMut(&SpaceStepReport) -> Result<()>,
    ) -> Result<Vec<SpaceStepReport>> {
        if samples.is_empty() {
            return Err(Error::arg("no training samples"));
        }
        let bs = self.config.batch_size.min(samples.len());
        let per_epoch = samples.len().div_ceil(bs);
        let total = self.config.steps.unwrap_or(self.config.epochs * per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xba7c);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut reports = Vec::with_capacity(total);
        let mut cursor = samples.len();
        while reports.len() < total {
            if cursor + bs > samples.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch: Vec<&SpaceSample> = order[cursor..cursor + bs].iter().map(|&i| &samples[i]).collect();
            cursor += bs;
            let r = self.train_step(&batch)?;
            on_step(&r)?;
            reports.push(r);
        }
        Ok(reports)
    }
}

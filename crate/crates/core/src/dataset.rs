//! Annotated-image records, manifests, splits, and the synthetic toy corpus.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::Image;

/// Maximum number of object–attribute pairs per image.
pub const MAX_PAIRS: usize = 14;

/// The eight emotion categories of Mikels' wheel, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl EmotionLabel {
    pub const COUNT: usize = 8;

    pub const ALL: [EmotionLabel; 8] = [
        EmotionLabel::Amusement,
        EmotionLabel::Awe,
        EmotionLabel::Contentment,
        EmotionLabel::Excitement,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Amusement => "amusement",
            EmotionLabel::Awe => "awe",
            EmotionLabel::Contentment => "contentment",
            EmotionLabel::Excitement => "excitement",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Sadness => "sadness",
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            EmotionLabel::Amusement
            | EmotionLabel::Awe
            | EmotionLabel::Contentment
            | EmotionLabel::Excitement => Polarity::Positive,
            EmotionLabel::Anger | EmotionLabel::Disgust | EmotionLabel::Fear | EmotionLabel::Sadness => {
                Polarity::Negative
            }
        }
    }

    /// Maps a guidance word to its emotion: the eight category names plus a few common synonyms.
    /// Anything else is rejected.
    pub fn from_word(word: &str) -> Result<Self> {
        let w = word.trim().to_lowercase();
        if let Ok(e) = w.parse() {
            return Ok(e);
        }
        let e = match w.as_str() {
            "amused" | "funny" | "humor" | "humour" => EmotionLabel::Amusement,
            "wonder" | "awed" | "awestruck" => EmotionLabel::Awe,
            "content" | "calm" | "peaceful" | "serene" => EmotionLabel::Contentment,
            "excited" | "thrill" | "thrilled" => EmotionLabel::Excitement,
            "angry" | "rage" | "fury" => EmotionLabel::Anger,
            "disgusted" | "revulsion" => EmotionLabel::Disgust,
            "afraid" | "scared" | "fearful" | "terror" => EmotionLabel::Fear,
            "sad" | "sorrow" | "grief" | "melancholy" => EmotionLabel::Sadness,
            _ => {
                let names: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
                return Err(Error::arg(format!(
                    "cannot map `{word}` to an emotion; supported: {}",
                    names.join(", ")
                )));
            }
        };
        Ok(e)
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown emotion `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAttribute {
    pub object: String,
    pub attribute: String,
}

impl ObjectAttribute {
    pub fn new(object: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            object: object.into(),
            attribute: attribute.into(),
        }
    }
}

/// One annotated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub emotion: EmotionLabel,
    pub global_attribute: String,
    pub pairs: Vec<ObjectAttribute>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        let schema = |message: &str| Error::Schema {
            record: self.image_id.clone(),
            message: message.to_string(),
        };
        if self.image_id.is_empty() {
            return Err(schema("empty image_id"));
        }
        if self.global_attribute.trim().is_empty() {
            return Err(schema("empty global attribute"));
        }
        if self.pairs.len() > MAX_PAIRS {
            return Err(schema(&format!(
                "pair limit exceeded: {} pairs (max {MAX_PAIRS})",
                self.pairs.len()
            )));
        }
        if self
            .pairs
            .iter()
            .any(|p| p.object.trim().is_empty() || p.attribute.trim().is_empty())
        {
            return Err(schema("empty object or attribute string"));
        }
        Ok(())
    }
}

// Mirrors ImageRecord with a free-form emotion so unknown labels can be reported per record.
#[derive(Deserialize)]
struct RawRecord {
    image_id: String,
    image_path: PathBuf,
    emotion: String,
    global_attribute: String,
    #[serde(default)]
    pairs: Vec<ObjectAttribute>,
}

/// Parses a line-delimited JSON manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            record: format!("line {}", lineno + 1),
            message: e.to_string(),
        })?;
        let emotion = raw.emotion.parse::<EmotionLabel>().map_err(|_| Error::Schema {
            record: raw.image_id.clone(),
            message: format!("unknown emotion `{}`", raw.emotion),
        })?;
        let rec = ImageRecord {
            image_id: raw.image_id,
            image_path: raw.image_path,
            emotion,
            global_attribute: raw.global_attribute,
            pairs: raw.pairs,
        };
        rec.validate()?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::Schema {
                record: rec.image_id,
                message: "duplicate image_id".into(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn manifest_to_string(records: &[ImageRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        r.validate()?;
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let text = manifest_to_string(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Resolves a record's image path against the manifest location.
pub fn resolve_image(manifest: &Path, record: &ImageRecord) -> PathBuf {
    match manifest.parent() {
        Some(dir) => dir.join(&record.image_path),
        None => record.image_path.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Number of held-out items for a class of `n` records.
pub fn test_count(n: usize) -> usize {
    ((0.05 * n as f64).round() as usize).max(1).min(n)
}

/// Per-class 95/5 split: ids of each class are shuffled with a seeded stream, the first part
/// trains and the tail tests.
pub fn make_splits(records: &[ImageRecord], seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::arg("cannot split an empty record list"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for emotion in EmotionLabel::ALL {
        let mut ids: Vec<&str> = records
            .iter()
            .filter(|r| r.emotion == emotion)
            .map(|r| r.image_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ emotion.index() as u64);
        ids.shuffle(&mut rng);
        let n = ids.len();
        if n < 20 {
            log::warn!("class {emotion} has only {n} records; holding out {}", test_count(n));
        }
        let n_train = n - test_count(n);
        train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        test.extend(ids[n_train..].iter().map(|s| s.to_string()));
    }
    Ok(DatasetSplit { train, test, seed })
}

const TOY_OBJECTS: [&str; 12] = [
    "dog", "tree", "sky", "house", "car", "flower", "river", "person", "cloud", "road", "cat", "mountain",
];

const TOY_NEUTRAL: [&str; 4] = ["small", "old", "distant", "tall"];

fn toy_attributes(e: EmotionLabel) -> [&'static str; 4] {
    match e {
        EmotionLabel::Amusement => ["funny", "playful", "silly", "cheerful"],
        EmotionLabel::Awe => ["majestic", "vast", "grand", "towering"],
        EmotionLabel::Contentment => ["peaceful", "cozy", "gentle", "calm"],
        EmotionLabel::Excitement => ["thrilling", "vibrant", "energetic", "wild"],
        EmotionLabel::Anger => ["furious", "aggressive", "harsh", "hostile"],
        EmotionLabel::Disgust => ["filthy", "rotten", "slimy", "gross"],
        EmotionLabel::Fear => ["dark", "ominous", "creepy", "threatening"],
        EmotionLabel::Sadness => ["lonely", "gloomy", "melancholic", "bleak"],
    }
}

fn toy_globals(e: EmotionLabel) -> [&'static str; 2] {
    match e {
        EmotionLabel::Amusement => ["joyful", "lighthearted"],
        EmotionLabel::Awe => ["breathtaking", "sublime"],
        EmotionLabel::Contentment => ["serene", "relaxed"],
        EmotionLabel::Excitement => ["exhilarating", "dynamic"],
        EmotionLabel::Anger => ["enraged", "violent"],
        EmotionLabel::Disgust => ["repulsive", "nauseating"],
        EmotionLabel::Fear => ["terrifying", "eerie"],
        EmotionLabel::Sadness => ["sorrowful", "somber"],
    }
}

#[derive(Clone, Copy)]
enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Radial,
    Checker,
    DiagonalStripes,
    Blotches,
    Vignette,
    Gradient,
}

struct ToyStyle {
    base: [f32; 3],
    accent: [f32; 3],
    pattern: Pattern,
    period: f32,
}

fn toy_style(e: EmotionLabel) -> ToyStyle {
    let (base, accent, pattern, period) = match e {
        EmotionLabel::Amusement => ([0.95, 0.85, 0.30], [0.95, 0.55, 0.70], Pattern::HorizontalStripes, 10.0),
        EmotionLabel::Awe => ([0.15, 0.30, 0.75], [0.85, 0.90, 1.00], Pattern::Gradient, 1.0),
        EmotionLabel::Contentment => ([0.45, 0.75, 0.40], [0.85, 0.95, 0.70], Pattern::Radial, 14.0),
        EmotionLabel::Excitement => ([0.95, 0.45, 0.10], [1.00, 0.90, 0.20], Pattern::Checker, 8.0),
        EmotionLabel::Anger => ([0.65, 0.05, 0.05], [0.20, 0.02, 0.02], Pattern::DiagonalStripes, 9.0),
        EmotionLabel::Disgust => ([0.45, 0.50, 0.15], [0.30, 0.22, 0.10], Pattern::Blotches, 12.0),
        EmotionLabel::Fear => ([0.25, 0.10, 0.35], [0.02, 0.02, 0.05], Pattern::Vignette, 1.0),
        EmotionLabel::Sadness => ([0.45, 0.50, 0.60], [0.30, 0.33, 0.40], Pattern::VerticalStripes, 12.0),
    };
    ToyStyle {
        base,
        accent,
        pattern,
        period,
    }
}

/// Draws one synthetic image whose color palette and texture program identify its class.
pub fn render_toy_image(emotion: EmotionLabel, size: usize, rng: &mut impl Rng) -> Image {
    use std::f32::consts::TAU;
    let style = toy_style(emotion);
    let phase: f32 = rng.random_range(0.0..TAU);
    let period = style.period * rng.random_range(0.85..1.15);
    let jitter: [f32; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    let cx: f32 = rng.random_range(0.3..0.7) * size as f32;
    let cy: f32 = rng.random_range(0.3..0.7) * size as f32;
    let blob_centers: Vec<(f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
            )
        })
        .collect();
    let scale = 32.0 / size as f32;
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 * scale, y as f32 * scale);
            let t = match style.pattern {
                Pattern::HorizontalStripes => 0.5 + 0.5 * (TAU * yf / period + phase).sin(),
                Pattern::VerticalStripes => 0.5 + 0.5 * (TAU * xf / period + phase).sin(),
                Pattern::DiagonalStripes => 0.5 + 0.5 * (TAU * (xf + yf) / period + phase).sin(),
                Pattern::Checker => {
                    let a = (TAU * xf / period + phase).sin();
                    let b = (TAU * yf / period).sin();
                    0.5 + 0.5 * (a * b).signum() * (a * b).abs().sqrt()
                }
                Pattern::Radial => {
                    let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() * scale;
                    0.5 + 0.5 * (TAU * r / period + phase).cos()
                }
                Pattern::Blotches => {
                    let m = blob_centers
                        .iter()
                        .map(|&(bx, by)| {
                            let d2 = ((x as f32 - bx).powi(2) + (y as f32 - by).powi(2)) * scale * scale;
                            (-d2 / (2.0 * period)).exp()
                        })
                        .fold(0.0f32, f32::max);
                    m
                }
                Pattern::Vignette => {
                    let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() / size as f32;
                    (r * 2.0).min(1.0)
                }
                Pattern::Gradient => y as f32 / (size - 1).max(1) as f32,
            };
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let v = style.base[c] * (1.0 - t) + style.accent[c] * t + jitter[c];
                let noise: f32 = rng.random_range(-0.03..0.03);
                rgb[c] = (v + noise).clamp(0.0, 1.0);
            }
            img.set(y, x, rgb);
        }
    }
    img
}

/// Builds a synthetic corpus of `8 · n_per_class` annotated images under `out_dir`: PNGs in
/// `images/` plus `manifest.jsonl`. Returns the records in manifest order.
pub fn generate_toy_dataset(
    out_dir: &Path,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    if n_per_class < 1 {
        return Err(Error::arg("n_per_class must be at least 1"));
    }
    if image_size < 8 {
        return Err(Error::arg("image_size must be at least 8"));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(8 * n_per_class);
    for emotion in EmotionLabel::ALL {
        for i in 0..n_per_class {
            let (record, image) = toy_sample(emotion, i, image_size, &mut rng);
            image.save(&out_dir.join(&record.image_path))?;
            records.push(record);
        }
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// One toy record and its image, without touching the filesystem.
pub fn toy_sample(
    emotion: EmotionLabel,
    index: usize,
    image_size: usize,
    rng: &mut impl Rng,
) -> (ImageRecord, Image) {
    let image_id = format!("{emotion}_{index:04}");
    let n_pairs = rng.random_range(1..=4);
    let attrs = toy_attributes(emotion);
    let pairs = (0..n_pairs)
        .map(|_| {
            let object = TOY_OBJECTS[rng.random_range(0..TOY_OBJECTS.len())];
            let attribute = if rng.random_bool(0.8) {
                attrs[rng.random_range(0..attrs.len())]
            } else {
                TOY_NEUTRAL[rng.random_range(0..TOY_NEUTRAL.len())]
            };
            ObjectAttribute::new(object, attribute)
        })
        .collect();
    let globals = toy_globals(emotion);
    let record = ImageRecord {
        image_path: PathBuf::from(format!("images/{image_id}.png")),
        image_id,
        emotion,
        global_attribute: globals[rng.random_range(0..globals.len())].to_string(),
        pairs,
    };
    let image = render_toy_image(emotion, image_size, rng);
    (record, image)
}

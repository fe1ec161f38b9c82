//! Acceptance gate. Runs each criterion at its stated tolerance and prints one line per
//! criterion. Pass criterion numbers as arguments to run a subset.

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use emolat::classifier::{ClassifierConfig, EmotionClassifier};
use emolat::dataset::{self, EmotionLabel, ImageRecord, ObjectAttribute};
use emolat::emolat_space::{self, Codebook, EmoLatSpace, SpaceConfig, SpaceTrainer};
use emolat::encoders::{EncoderConfig, Encoders, TextEncoder};
use emolat::losses::{self, LossWeights, PatchConfig};
use emolat::metrics;
use emolat::params::ParamStore;
use emolat::pixels::Image;
use emolat::semantic_graph::{self, GraphConfig, GraphEncoder, Readout};
use emolat::transfer_net::{self, TransferConfig, TransferModel, TransferPool, TransferTrainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn load_toy(dir: &Path, n_per_class: usize, size: usize, seed: u64) -> (Vec<dataset::ImageRecord>, Vec<Image>) {
    let records = dataset::generate_toy_dataset(dir, n_per_class, size, seed).unwrap();
    let manifest = dir.join("manifest.jsonl");
    let images = records
        .iter()
        .map(|r| Image::load(&dataset::resolve_image(&manifest, r)).unwrap())
        .collect();
    (records, images)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (records, images) = load_toy(dir.path(), 25, 32, 5);
    let dev = Device::Cpu;
    let enc = Encoders::new(&EncoderConfig::toy(), DType::F32, &dev).map_err(|e| e.to_string())?;
    let samples = emolat_space::prepare_space_samples(&records, &images, &enc).map_err(|e| e.to_string())?;
    let cfg = SpaceConfig {
        steps: Some(300),
        ..SpaceConfig::toy()
    };
    let mut trainer = SpaceTrainer::new(&cfg, &enc, DType::F32, &dev).map_err(|e| e.to_string())?;
    let initial: EmoLatSpace = trainer.space().map_err(|e| e.to_string())?;
    trainer.train(&samples, |_| Ok(())).map_err(|e| format!("training aborted: {e}"))?;
    let trained = trainer.space().map_err(|e| e.to_string())?;

    let (d0, d1) = (initial.min_pairwise_mean_distance(), trained.min_pairwise_mean_distance());
    let (s0, s1) = (initial.silhouette(), trained.silhouette());
    let csv = dir.path().join("space.csv");
    emolat_space::export_embedding_plot(&trained, &csv, None, 0).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?.lines().count() - 1;
    let elapsed = start.elapsed();
    check(d1 > d0, format!("min centroid distance {d0:.4} -> {d1:.4}"))?;
    check(rows == 128, format!("csv has {rows} rows"))?;
    check(s1 > s0, format!("silhouette {s0:.4} -> {s1:.4}"))?;
    within(elapsed, 600)?;
    Ok(format!(
        "centroid distance {d0:.4} -> {d1:.4}, silhouette {s0:.4} -> {s1:.4}, {rows} csv rows, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (records, images) = load_toy(dir.path(), 2, 32, 6);
    let labels: Vec<EmotionLabel> = records.iter().map(|r| r.emotion).collect();
    let enc = Encoders::new(&EncoderConfig::toy(), DType::F32, &dev).map_err(|e| e.to_string())?;
    let space = EmoLatSpace::random(16, enc.config.pooled_dim, 6).map_err(|e| e.to_string())?;
    let frozen = (enc.checksum().map_err(|e| e.to_string())?, space.checksum());
    let pool = TransferPool {
        images: images.clone(),
        labels: labels.clone(),
    };

    // (a) content-only reconstruction.
    let cfg = TransferConfig {
        weights: LossWeights::content_only(),
        ..TransferConfig::toy()
    };
    let model = TransferModel::new(&cfg, &enc).map_err(|e| e.to_string())?;
    let mut trainer = TransferTrainer::new(model, &enc, &space, None).map_err(|e| e.to_string())?;
    trainer.train(&pool, 2000, |_| Ok(())).map_err(|e| format!("(a) training aborted: {e}"))?;
    let mut ssims = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let word = EmotionLabel::ALL[(i + 3) % 8].name();
        let out = transfer_net::transfer(img, word, &trainer.model, &enc, &space, i as u64).map_err(|e| e.to_string())?;
        ssims.push(metrics::ssim(&out, img).map_err(|e| e.to_string())?);
    }
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    let min_ssim = ssims.iter().cloned().fold(f64::INFINITY, f64::min);

    // (b) full-loss overfit on one fixed batch.
    let mut classifier = EmotionClassifier::for_encoder(&enc.image, 64, 1).map_err(|e| e.to_string())?;
    let refs: Vec<&Image> = images.iter().collect();
    classifier
        .fit(&enc.image, &refs, &labels, &ClassifierConfig::default())
        .map_err(|e| e.to_string())?;
    let model = TransferModel::new(&TransferConfig::toy(), &enc).map_err(|e| e.to_string())?;
    let mut trainer = TransferTrainer::new(model, &enc, &space, Some(&classifier)).map_err(|e| e.to_string())?;
    let batch = pool.draw(4, &mut ChaCha8Rng::seed_from_u64(66)).map_err(|e| e.to_string())?;
    let mut totals = Vec::with_capacity(200);
    for _ in 0..200 {
        totals.push(trainer.step(&batch).map_err(|e| format!("(b) step failed: {e}"))?.losses.total);
    }
    let (first, last) = (totals[0], totals[totals.len() - 1]);

    // (c) frozen components.
    let after = (enc.checksum().map_err(|e| e.to_string())?, space.checksum());
    let elapsed = start.elapsed();
    check(
        mean_ssim >= 0.6,
        format!("(a) mean SSIM {mean_ssim:.4} (min {min_ssim:.4}) below 0.6"),
    )?;
    check(last < first, format!("(b) L_total {first:.4} -> {last:.4}"))?;
    check(after == frozen, "(c) frozen checksums changed")?;
    within(elapsed, 900)?;
    Ok(format!(
        "(a) mean SSIM {mean_ssim:.4} (min {min_ssim:.4}); (b) L_total {first:.4} -> {last:.4}; (c) checksums unchanged; {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Index of the first entry with the smallest squared distance, by exhaustive scan.
fn brute_force_nearest(z: &[f32], entries: &[Vec<f32>]) -> usize {
    let dists: Vec<f64> = entries
        .iter()
        .map(|e| e.iter().zip(z).map(|(a, b)| (*a as f64 - *b as f64) * (*a as f64 - *b as f64)).sum())
        .collect();
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|d| *d == min).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ties = 0;
    for case in 0..1000 {
        let d = rng.random_range(1..=8);
        // Every third case uses a small integer grid so exact ties occur.
        let grid = case % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if grid {
                rng.random_range(-2..=2) as f32
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let entries: Vec<Vec<f32>> = (0..16).map(|_| (0..d).map(|_| draw(&mut rng)).collect()).collect();
        let z: Vec<f32> = (0..d).map(|_| draw(&mut rng)).collect();
        let book = Codebook::new(EmotionLabel::Awe, 16, d, entries.concat()).map_err(err)?;
        let (entry, idx) = emolat_space::quantize(&z, &book).map_err(err)?;
        let want = brute_force_nearest(&z, &entries);
        check(idx == want, format!("case {case}: index {idx}, oracle {want}"))?;
        check(entry == entries[want], format!("case {case}: returned entry differs"))?;
        let dmin = |k: usize| entries[k].iter().zip(&z).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        if (0..16).filter(|&k| dmin(k) == dmin(want)).count() > 1 {
            ties += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, 5)?;
    Ok(format!("1000 cases match the exhaustive oracle ({ties} with ties), {:.3}s", elapsed.as_secs_f64()))
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the autodiff gradient of `f` at a
/// random 64-bit point in `R^n` and central finite differences.
fn gradient_error(n: usize, seed: u64, f: &dyn Fn(&Tensor) -> emolat::Result<Tensor>) -> Result<f64, String> {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.5 * z }).collect();
    let var = Var::from_tensor(&Tensor::from_slice(&theta, n, &dev).map_err(err)?).map_err(err)?;
    let loss = f(var.as_tensor()).map_err(err)?;
    let grads = loss.backward().map_err(err)?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.to_vec1().map_err(err)?,
        None => vec![0.0; n],
    };
    let h = 1e-5;
    let eval = |t: &[f64]| -> Result<f64, String> {
        let x = Tensor::from_slice(t, n, &dev).map_err(err)?;
        f(&x).map_err(err)?.to_scalar::<f64>().map_err(err)
    };
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let (mut up, mut down) = (theta.clone(), theta.clone());
        up[i] += h;
        down[i] -= h;
        numeric.push((eval(&up)? - eval(&down)?) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    check(scale > 1e-10, "gradient vanishes at the probe point")?;
    Ok(norm(&diff) / scale)
}

/// Fixed random affine map `θ ↦ base + B θ` reshaped to `shape`, so large inputs are probed
/// through an 8-dimensional parameter.
struct Lift {
    base: Tensor,
    basis: Tensor,
    shape: Vec<usize>,
}

impl Lift {
    fn new(shape: &[usize], n: usize, offset: f64, scale: f64, seed: u64) -> Self {
        let dev = Device::Cpu;
        let count: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |k: usize, s: f64| -> Vec<f64> {
            (0..k).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); s * z }).collect()
        };
        let base: Vec<f64> = normal(count, scale).into_iter().map(|v| v + offset).collect();
        let basis = normal(count * n, scale / (n as f64).sqrt());
        Self {
            base: Tensor::from_vec(base, count, &dev).unwrap(),
            basis: Tensor::from_vec(basis, (count, n), &dev).unwrap(),
            shape: shape.to_vec(),
        }
    }

    fn apply(&self, theta: &Tensor) -> emolat::Result<Tensor> {
        let x = (self.basis.matmul(&theta.unsqueeze(1)?)?.squeeze(1)? + &self.base)?;
        Ok(x.reshape(self.shape.as_slice())?)
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let count: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn weighted_sum(x: &Tensor, seed: u64) -> emolat::Result<Tensor> {
    Ok((x * random_tensor(x.dims(), seed))?.sum_all()?)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let dev = Device::Cpu;
    let enc = Encoders::new(&EncoderConfig::toy(), DType::F64, &dev).map_err(err)?;
    let mut results: Vec<(&str, f64, f64)> = Vec::new();

    let feats = Lift::new(&[6, 4], 8, 0.0, 1.0, 20);
    let mdi = |t: &Tensor| -> emolat::Result<Tensor> {
        let x = feats.apply(t)?;
        let groups = (0..3).map(|g| x.narrow(0, 2 * g, 2).map(Some)).collect::<candle_core::Result<Vec<_>>>()?;
        emolat_space::mdi_loss(&groups)
    };
    results.push(("mdi_loss", gradient_error(8, 1, &mdi)?, 1e-5));

    let gen = Lift::new(&[1, 2, 2, 2], 8, 0.0, 1.0, 21);
    let ori = random_tensor(&[1, 2, 2, 2], 22);
    let content = |t: &Tensor| losses::content_loss(&gen.apply(t)?, &ori);
    results.push(("content", gradient_error(8, 2, &content)?, 1e-4));

    let gen_s = Lift::new(&[1, 2, 3, 3], 8, 0.0, 1.0, 23);
    let sty = random_tensor(&[1, 2, 2, 2], 24);
    let style = |t: &Tensor| losses::style_loss(&gen_s.apply(t)?, &sty);
    results.push(("style", gradient_error(8, 3, &style)?, 1e-4));

    let iss = Lift::new(&[1, 3, 2, 2], 8, 0.5, 0.3, 25);
    let fss = Lift::new(&[1, 4], 8, 0.0, 1.0, 26);
    let (istyle, fstyle) = (random_tensor(&[1, 3, 2, 2], 27), random_tensor(&[1, 4], 28));
    let identity = |t: &Tensor| losses::identity_loss(&iss.apply(t)?, &istyle, &fss.apply(t)?, &fstyle, 0.3);
    results.push(("identity", gradient_error(8, 4, &identity)?, 1e-4));

    let img = Lift::new(&[1, 3, 8, 8], 8, 0.5, 0.15, 29);
    let clf = EmotionClassifier::for_encoder(&enc.image, 16, 5).map_err(err)?;
    let emotion = |t: &Tensor| losses::emotion_loss(&clf, &enc.image, &img.apply(t)?, &[EmotionLabel::Fear]);
    results.push(("emotion", gradient_error(8, 5, &emotion)?, 1e-4));

    let text = enc.embed_text("sadness").map_err(err)?.to_tensor(DType::F64, &dev).map_err(err)?.unsqueeze(0).map_err(err)?;
    let patch = PatchConfig {
        n_patches: 3,
        patch_size: 4,
    };
    let clip = |t: &Tensor| losses::clip_patch_loss(&enc, &img.apply(t)?, &text, &patch, 9);
    results.push(("clip_patch", gradient_error(8, 6, &clip)?, 1e-4));

    let mut store = ParamStore::new(3, DType::F64, &dev);
    let gcn = GraphEncoder::new(
        &mut store,
        &GraphConfig {
            text_dim: 4,
            dim: 4,
            attn_dim: 4,
            layers: 2,
            readout: Readout::SemanticNode,
        },
    )
    .map_err(err)?;
    let adj = Tensor::from_vec(semantic_graph::normalized_adjacency(3, &[(0, 1), (0, 2)]), (3, 3), &dev).map_err(err)?;
    let h0 = Lift::new(&[3, 4], 8, 0.0, 1.0, 30);
    let graph = |t: &Tensor| weighted_sum(&gcn.propagate(&h0.apply(t)?, &adj)?, 31);
    results.push(("gcn_forward", gradient_error(8, 7, &graph)?, 1e-4));

    let small = TransferConfig {
        token_dim: 8,
        heads: 2,
        blocks: 1,
        semantic_tokens: 1,
        mlp_ratio: 2,
        decoder_channels: 4,
        ..TransferConfig::toy()
    };
    let model = TransferModel::new(&small, &enc).map_err(err)?;
    let tokens = Lift::new(&[1, 3, 8], 8, 0.0, 1.0, 32);
    let block = |t: &Tensor| weighted_sum(&model.blocks()[0].forward(&tokens.apply(t)?)?, 33);
    results.push(("transformer_block", gradient_error(8, 8, &block)?, 1e-4));

    let elapsed = start.elapsed();
    let summary: Vec<String> = results.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect();
    for (name, e, tol) in &results {
        check(*e <= *tol, format!("{name}: relative error {e:.3e} exceeds {tol:.0e}"))?;
    }
    within(elapsed, 60)?;
    Ok(format!("{}; {:.2}s", summary.join(", "), elapsed.as_secs_f64()))
}

fn criterion_3() -> Outcome {
    let dev = Device::Cpu;
    let scalar = |t: Tensor| -> Result<f64, String> { t.to_scalar::<f64>().map_err(err) };
    let g = |v: &[f64]| Some(Tensor::from_slice(v, (1, 2), &dev).unwrap());
    let mdi = scalar(emolat_space::mdi_loss(&[g(&[0.0, 0.0]), g(&[2.0, 0.0])]).map_err(err)?)?;
    check((mdi - 2.0).abs() <= 1e-9, format!("mdi {mdi}"))?;

    let logits = Tensor::zeros((1, 8), DType::F64, &dev).map_err(err)?;
    let y = emolat_space::one_hot(&[EmotionLabel::Disgust], DType::F64, &dev).map_err(err)?;
    let ce = scalar(emolat_space::soft_cross_entropy(&logits, &y).map_err(err)?)?;
    check((ce - 8f64.ln()).abs() <= 1e-4, format!("uniform cross-entropy {ce}"))?;

    let half = Tensor::from_slice(&[0.5f64], 1, &dev).map_err(err)?;
    let (d, _) = losses::gan_objectives(&half, &half, &half, &half).map_err(err)?;
    let d = scalar(d)?;
    check((d - 4.0 * 0.5f64.ln()).abs() <= 1e-6, format!("gan d-objective {d}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let shift = [0.3, -1.2, 0.0, 2.0, 0.5, -0.1];
    let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
    let expected: f64 = shift.iter().map(|s| s * s).sum();
    let fid = metrics::fid(&a, &b).map_err(err)?;
    check((fid - expected).abs() <= 1e-3, format!("fid {fid} vs {expected}"))?;

    let img = Image::new(24, 24, (0..24 * 24 * 3).map(|_| rng.random_range(0.0f32..1.0)).collect()).map_err(err)?;
    let s = metrics::ssim(&img, &img).map_err(err)?;
    check((s - 1.0).abs() <= 1e-9, format!("ssim(x, x) {s}"))?;
    Ok(format!(
        "mdi {mdi}, CE {ce:.6}, D-objective {d:.6}, FID {fid:.6} (want {expected}), ssim(x,x) {s}"
    ))
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[&str] = &["a", "e", "k", "r", "s", "t", "é", "ß", "水", " ", "\"", "\\", "-"];
    let len = rng.random_range(1..=8);
    let mut w: String = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
    if w.trim().is_empty() {
        w.push('x');
    }
    w
}

fn random_record(rng: &mut ChaCha8Rng, i: usize, k: usize) -> ImageRecord {
    ImageRecord {
        image_id: format!("img_{i:05}"),
        image_path: format!("images/img_{i:05}.png").into(),
        emotion: EmotionLabel::ALL[rng.random_range(0..8)],
        global_attribute: random_word(rng),
        pairs: (0..k)
            .map(|_| ObjectAttribute {
                object: random_word(rng),
                attribute: random_word(rng),
            })
            .collect(),
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let text = TextEncoder::hashed(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..500 {
        let k = rng.random_range(0..=14);
        let rec = random_record(&mut rng, case, k);
        let g1 = semantic_graph::build_stage1_graph(&rec, &text).map_err(err)?;
        check(
            g1.nodes.len() == 2 * k + 1 && g1.edges.len() == 2 * k,
            format!("case {case}: k={k} gives {} nodes, {} edges", g1.nodes.len(), g1.edges.len()),
        )?;
        let g2 = semantic_graph::build_stage2_graph(&g1, &[0.0; 8]).map_err(err)?;
        check(
            g2.nodes.len() == g1.nodes.len() + 1 && g2.edges.len() == g1.edges.len() + 2 * k + 1,
            format!("case {case}: stage two adds {} nodes, {} edges", g2.nodes.len() - g1.nodes.len(), g2.edges.len() - g1.edges.len()),
        )?;
    }
    let elapsed = start.elapsed();
    within(elapsed, 5)?;
    Ok(format!("500 records, k in [0, 14], {:.3}s", elapsed.as_secs_f64()))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let n = rng.random_range(1..=50);
        let mut draw = || -> Vec<EmotionLabel> { (0..n).map(|_| EmotionLabel::ALL[rng.random_range(0..8)]).collect() };
        let (p, t) = (draw(), draw());
        let a8 = metrics::accuracy8_of(&p, &t).map_err(err)?;
        let a2 = metrics::accuracy2_of(&p, &t).map_err(err)?;
        check(a2 >= a8, format!("case {case}: acc2 {a2} < acc8 {a8}"))?;
    }
    // Exhaustive over single predictions.
    for p in EmotionLabel::ALL {
        for t in EmotionLabel::ALL {
            let (a8, a2) = (metrics::accuracy8_of(&[p], &[t]).map_err(err)?, metrics::accuracy2_of(&[p], &[t]).map_err(err)?);
            check(a2 >= a8, format!("{p} vs {t}"))?;
        }
    }
    Ok("200 random sets and all 64 single-prediction pairs".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_emolat"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    check(
        out.status.success(),
        format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let cfg = "[paths]\nmanifest = \"data/manifest.jsonl\"\noutput_dir = \"run\"\n\n[space]\nsteps = 20\n\n[transfer]\niterations = 6\n\n[classifier]\nepochs = 10\n";
    std::fs::write(dir.join("c.toml"), cfg).map_err(err)?;
    let common = ["--config", "c.toml", "--profile", "toy"];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        std::iter::once(cmd).chain(common).chain(extra.iter().copied()).map(String::from).collect()
    };
    run_cli(dir, &["gen-toy", "--out", "data", "--n-per-class", "4", "--size", "16", "--seed", "3"])?;
    for args in [
        with("train-space", &[]),
        with("visualize-space", &[]),
        with("train-classifier", &[]),
        with("train-transfer", &[]),
        with("transfer", &["--image", "data/images/awe_0001.png", "--emotion", "fear", "--seed", "7", "--out", "run/t1.png"]),
        with("transfer", &["--image", "data/images/awe_0001.png", "--emotion", "fear", "--seed", "7", "--out", "run/t2.png"]),
        with("evaluate", &[]),
        with("evaluate", &["--identity-stub", "--report", "run/stub.json"]),
    ] {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_cli(dir, &refs)?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    pipeline(a.path())?;
    pipeline(b.path())?;
    let bitwise = [
        "data/manifest.jsonl",
        "data/images/fear_0002.png",
        "run/splits.json",
        "run/space_log.jsonl",
        "run/space_embedding.csv",
        "run/classifier_report.json",
        "run/transfer_log.jsonl",
        "run/eval_report.json",
        "run/stub.json",
        "run/t1.png",
    ];
    for f in bitwise {
        let (x, y) = (std::fs::read(a.path().join(f)).map_err(err)?, std::fs::read(b.path().join(f)).map_err(err)?);
        check(x == y, format!("{f} differs between runs"))?;
    }
    let t1 = std::fs::read(a.path().join("run/t1.png")).map_err(err)?;
    check(t1 == std::fs::read(a.path().join("run/t2.png")).map_err(err)?, "repeated transfer differs")?;

    let sa = emolat_space::import_space(&a.path().join("run/space.safetensors")).map_err(err)?;
    let sb = emolat_space::import_space(&b.path().join("run/space.safetensors")).map_err(err)?;
    check(sa.checksum() == sb.checksum(), "space checkpoints differ")?;
    let enc = Encoders::new(&EncoderConfig::toy(), DType::F32, &Device::Cpu).map_err(err)?;
    let ma = TransferModel::load(&a.path().join("run/transfer.safetensors"), &enc).map_err(err)?;
    let mb = TransferModel::load(&b.path().join("run/transfer.safetensors"), &enc).map_err(err)?;
    check(ma.checksum().map_err(err)? == mb.checksum().map_err(err)?, "transfer checkpoints differ")?;
    let ca = EmotionClassifier::load(&a.path().join("run/classifier.safetensors"), DType::F32, &Device::Cpu).map_err(err)?;
    let cb = EmotionClassifier::load(&b.path().join("run/classifier.safetensors"), DType::F32, &Device::Cpu).map_err(err)?;
    check(ca.checksum().map_err(err)? == cb.checksum().map_err(err)?, "classifier checkpoints differ")?;

    let stub: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("run/stub.json")).map_err(err)?).map_err(err)?;
    check(stub["metrics"]["ssim"] == 1.0 && stub["metrics"]["recon_error"] == 0.0, "identity stub is not a perfect copy")?;
    Ok(format!(
        "{} artifacts bitwise equal, checkpoints numerically equal, identity stub ssim 1 / recon 0; {:.1}s",
        bitwise.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let path = dir.path().join("m.jsonl");
    for case in 0..100 {
        let n = rng.random_range(1..=12);
        let records: Vec<ImageRecord> = (0..n)
            .map(|i| {
                let k = rng.random_range(0..=14);
                random_record(&mut rng, i, k)
            })
            .collect();
        dataset::write_manifest(&path, &records).map_err(err)?;
        check(dataset::load_manifest(&path).map_err(err)? == records, format!("manifest case {case} changed"))?;
    }
    let spath = dir.path().join("s.safetensors");
    for case in 0..100 {
        let (n, d) = (rng.random_range(2..=20), rng.random_range(1..=16));
        let books = EmotionLabel::ALL
            .iter()
            .map(|&e| {
                let data: Vec<f32> = (0..n * d)
                    .map(|_| loop {
                        let v = f32::from_bits(rng.random());
                        if v.is_finite() {
                            break v;
                        }
                    })
                    .collect();
                Codebook::new(e, n, d, data)
            })
            .collect::<emolat::Result<Vec<_>>>()
            .map_err(err)?;
        let space = EmoLatSpace::new(books).map_err(err)?;
        emolat_space::export_space(&space, &spath).map_err(err)?;
        let back = emolat_space::import_space(&spath).map_err(err)?;
        let bits = |s: &EmoLatSpace| -> Vec<u32> { s.codebooks().iter().flat_map(|b| b.entries().iter().map(|v| v.to_bits())).collect() };
        check(bits(&back) == bits(&space), format!("space case {case} ({n}x{d}) changed"))?;
    }
    Ok("100 manifests and 100 spaces (arbitrary finite bit patterns) round-trip exactly".into())
}

const CRITERIA: &[Criterion] = &[
    (1, "VQ oracle equivalence", criterion_1),
    (2, "gradient suite", criterion_2),
    (3, "closed-form values", criterion_3),
    (4, "graph-shape property", criterion_4),
    (5, "toy space training", criterion_5),
    (6, "toy transfer training", criterion_6),
    (7, "metric coarsening", criterion_7),
    (8, "CLI determinism", criterion_8),
    (9, "round trips", criterion_9),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

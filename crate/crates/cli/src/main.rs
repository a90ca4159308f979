//! Command-line frontend for the feature-learning pipeline: synthetic scene
//! generation, reliable-track extraction, batch sampling, training, feature
//! extraction, matching, and reconstruction metrics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sfmfeat::colmap::{self, ModelFormat, SparseModel};
use sfmfeat::loss::LossParams;
use sfmfeat::matching::{self, MatchOptions};
use sfmfeat::metrics::{self, MetricsOptions};
use sfmfeat::refnet::{self, Keypoint, NetWeights, TrainConfig};
use sfmfeat::supervision::{
    self, BatchConfig, BatchSize, FrameTransform, TrainingSample, TARGET_SIZE,
};
use sfmfeat::synth::{self, SceneConfig};
use sfmfeat::tracks::{self, CorrespondenceSet, ReliableTrack};

use ndarray::{Array2, Array3};

#[derive(Parser, Debug, Serialize)]
#[command(name = "sfmfeat", version, about = "SfM-supervised local feature pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate a synthetic tube scene: sparse model + grayscale frames.
    Synth(SynthArgs),
    /// Extract reliable tracks from a sparse model directory.
    Tracks(TracksArgs),
    /// Sample training batches from tracks and frames.
    Batches(BatchesArgs),
    /// Train the reference network on a batch dump.
    Train(TrainArgs),
    /// Run the trained detector/descriptor over frames.
    Extract(ExtractArgs),
    /// Match two feature files.
    Match(MatchArgs),
    /// Reconstruction quality report over one model.
    Metrics(MetricsArgs),
    /// Coverage report over a set of submaps.
    Coverage(CoverageArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Output scene directory (sparse/ + images/).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 400)]
    landmarks: usize,
    #[arg(long, default_value_t = 256)]
    frame_size: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 3)]
    blobs: usize,
    #[arg(long, default_value_t = 1.0)]
    texture_amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TracksArgs {
    /// Sparse model directory (cameras/images/points3D).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum observed-interval length, frames.
    #[arg(long, default_value_t = 2)]
    min_length: usize,
}

#[derive(Args, Debug, Serialize)]
struct BatchesArgs {
    /// Sparse model directory; pass twice for dual-source supervision.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// Directory of grayscale PGM frames named as in the model.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Supervision source mode: single or dual.
    #[arg(long, default_value = "single", value_parser = ["single", "dual"])]
    supervision_source: String,
    /// Number of samples to draw.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Images per sample.
    #[arg(long, default_value_t = 4)]
    batch_n: usize,
    /// Upper end of a uniform batch-size range; omit for a fixed size.
    #[arg(long)]
    batch_n_max: Option<usize>,
    /// Heatmap blur sigma, px.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Apply photometric augmentation.
    #[arg(long, default_value_t = false)]
    augment: bool,
    #[arg(long, default_value_t = 2)]
    min_length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Batch dump from `batches`.
    #[arg(long)]
    samples: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log (one value per step); defaults to <out>.loss.txt.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    learning_rate: f64,
    /// Tracking-term weight.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Encoder channel widths.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    desc_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of grayscale PGM frames.
    #[arg(long)]
    images: PathBuf,
    /// Output directory for per-image .feat files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.015)]
    keypoint_threshold: f64,
    #[arg(long, default_value_t = 4)]
    nms_radius: usize,
    #[arg(long, default_value_t = 10000)]
    max_keypoints: usize,
}

#[derive(Args, Debug, Serialize)]
struct MatchArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    max_ratio: f64,
    /// Angular distance gate, radians.
    #[arg(long, default_value_t = 1.0)]
    max_distance: f64,
    /// Epipolar gate for the guided round, px.
    #[arg(long, default_value_t = 4.0)]
    max_error: f64,
    /// Enable geometry-guided second round.
    #[arg(long, default_value_t = false)]
    guided: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct MetricsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of per-image .feat files.
    #[arg(long)]
    features: PathBuf,
    /// Directory of grayscale PGM frames.
    #[arg(long)]
    images: PathBuf,
    /// Total images fed to the reconstruction.
    #[arg(long)]
    total: usize,
    /// Key-value report path; the table always prints to stdout.
    #[arg(long)]
    out: PathBuf,
    /// Average precision over all input images, not only registered ones.
    #[arg(long, default_value_t = false)]
    precision_over_all: bool,
}

#[derive(Args, Debug, Serialize)]
struct CoverageArgs {
    /// Sparse model directories, one per submap.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    total: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    inputs: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    version: &'a str,
    outputs: Vec<String>,
}

/// Serialize the manifest and land it atomically (write + rename) before the
/// command produces any output.
fn write_manifest(
    command: &str,
    inputs: &[&Path],
    config: &impl Serialize,
    seed: u64,
    outputs: &[&Path],
    manifest_path: &Path,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config: serde_json::to_value(config)?,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    if let Some(parent) = manifest_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = manifest_path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, manifest_path)?;
    Ok(())
}

fn manifest_for(out: &Path) -> PathBuf {
    if out.extension().is_some() {
        let mut name = out.file_name().unwrap().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    } else {
        out.join("manifest.json")
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Tracks(a) => cmd_tracks(a),
        Command::Batches(a) => cmd_batches(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Match(a) => cmd_match(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Coverage(a) => cmd_coverage(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SceneConfig {
        landmark_count: a.landmarks,
        frame_count: a.frames,
        frame_size: a.frame_size,
        dropout: a.dropout,
        specular_blob_count: a.blobs,
        texture_amplitude: a.texture_amplitude,
        texture_seed: a.seed.wrapping_add(1),
        calibration: fisheye_for(a.frame_size),
        ..Default::default()
    };
    std::fs::create_dir_all(&a.out)?;
    write_manifest("synth", &[], &a, a.seed, &[&a.out], &manifest_for(&a.out))?;
    let scene = synth::generate_scene(&config, a.seed)?;
    synth::write_scene(&scene, &a.out)?;
    println!(
        "scene: {} frames, {} points, {} images -> {}",
        scene.frames.len(),
        scene.truth.points.len(),
        scene.truth.images.len(),
        a.out.display()
    );
    Ok(())
}

fn fisheye_for(size: usize) -> [f64; 8] {
    let s = size as f64;
    [s * 0.45, s * 0.45, s / 2.0 - 0.5, s / 2.0 - 0.5, 0.02, -0.005, 0.001, 0.0]
}

fn load_model(dir: &Path) -> Result<SparseModel> {
    let model = colmap::read_model(dir, ModelFormat::Auto)
        .with_context(|| format!("reading model {}", dir.display()))?;
    let issues = colmap::validate_model(&model);
    if !issues.is_empty() {
        bail!("model {} invalid: {}", dir.display(), issues.join("; "));
    }
    Ok(model)
}

fn model_tracks(model: &SparseModel, min_length: usize) -> Result<Vec<ReliableTrack>> {
    let frame_order: Vec<u32> = model.images.keys().copied().collect();
    let reps = tracks::reproject_all(model, &frame_order)?;
    Ok(tracks::extract_reliable_tracks(&reps, &frame_order, min_length))
}

fn cmd_tracks(a: TracksArgs) -> Result<()> {
    write_manifest("tracks", &[&a.model], &a, 0, &[&a.out], &manifest_for(&a.out))?;
    let model = load_model(&a.model)?;
    let t = model_tracks(&model, a.min_length)?;
    tracks::write_tracks(&t, &a.out)?;
    println!("{} reliable tracks -> {}", t.len(), a.out.display());
    Ok(())
}

/// Preprocessed frames and coordinate transforms for every image of a model.
fn load_frames(
    model: &SparseModel,
    images: &Path,
) -> Result<(BTreeMap<u32, Array2<f64>>, BTreeMap<u32, FrameTransform>)> {
    let mut frames = BTreeMap::new();
    let mut transforms = BTreeMap::new();
    for img in model.images.values() {
        let path = images.join(&img.name);
        let gray = synth::read_pgm(&path)
            .with_context(|| format!("reading frame {}", path.display()))?;
        let rgb = gray_to_rgb(&gray);
        let (frame, transform) = supervision::preprocess_frame(&rgb, TARGET_SIZE)?;
        frames.insert(img.id, frame);
        transforms.insert(img.id, transform);
    }
    Ok((frames, transforms))
}

fn gray_to_rgb(gray: &Array2<u8>) -> Array3<u8> {
    let (h, w) = gray.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, _)| gray[[y, x]])
}

fn cmd_batches(a: BatchesArgs) -> Result<()> {
    match (a.supervision_source.as_str(), a.model.len()) {
        ("single", 1) | ("dual", 2) => {}
        (mode, n) => bail!("supervision source {mode} requires {} --model, got {n}",
            if mode == "dual" { 2 } else { 1 }),
    }
    let inputs: Vec<&Path> = a.model.iter().map(PathBuf::as_path).chain([a.images.as_path()]).collect();
    write_manifest("batches", &inputs, &a, a.seed, &[&a.out], &manifest_for(&a.out))?;

    // one supervision source = one model with its own tracks/frames; a
    // sample is always drawn from exactly one source
    struct Source {
        tracks: Vec<ReliableTrack>,
        frames: BTreeMap<u32, Array2<f64>>,
        transforms: BTreeMap<u32, FrameTransform>,
    }
    let mut sources = Vec::new();
    for dir in &a.model {
        let model = load_model(dir)?;
        let tracks = model_tracks(&model, a.min_length)?;
        let (frames, transforms) = load_frames(&model, &a.images)?;
        sources.push(Source { tracks, frames, transforms });
    }

    let config = BatchConfig {
        batch_size: match a.batch_n_max {
            Some(hi) => BatchSize::Range(a.batch_n, hi),
            None => BatchSize::Fixed(a.batch_n),
        },
        heatmap_sigma: a.sigma,
        augment: if a.augment {
            supervision::AugmentConfig::default()
        } else {
            supervision::AugmentConfig::identity()
        },
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let src = &sources[i % sources.len()];
        let seed = a.seed.wrapping_add(i as u64);
        let sample = supervision::sample_batch(&src.tracks, &config, seed, &src.transforms, &src.frames)
            .with_context(|| format!("sampling batch {i}"))?;
        samples.push(sample);
    }
    save_samples(&samples, &a.out)?;
    println!("{} samples -> {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let loss_log = a.loss_log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".loss.txt");
        a.out.with_file_name(name)
    });
    write_manifest("train", &[&a.samples], &a, a.seed, &[&a.out, &loss_log], &manifest_for(&a.out))?;
    let samples = load_samples(&a.samples)?;
    if samples.is_empty() {
        bail!("sample dump {} is empty", a.samples.display());
    }
    let channels: [usize; 4] = a.channels.clone().try_into().map_err(|_| {
        anyhow::anyhow!("--channels needs exactly 4 values")
    })?;
    let initial = NetWeights::with_dims(&channels, a.desc_dim, a.seed);
    let config = TrainConfig {
        learning_rate: a.learning_rate,
        steps: a.steps,
        loss: LossParams { lambda: a.lambda, ..Default::default() },
        ..Default::default()
    };
    let (weights, history) =
        refnet::train(|step| Ok(samples[step % samples.len()].clone()), initial, &config)?;
    refnet::save_weights(&weights, &a.out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(&loss_log)?);
    for (i, l) in history.iter().enumerate() {
        writeln!(log, "{i} {l}")?;
    }
    println!(
        "trained {} steps, loss {} -> {} -> {}",
        history.len(),
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    write_manifest("extract", &[&a.checkpoint, &a.images], &a, 0, &[&a.out], &manifest_for(&a.out))?;
    let weights = refnet::load_weights(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&a.images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |e| e == "pgm"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .pgm frames in {}", a.images.display());
    }
    for path in &entries {
        let gray = synth::read_pgm(path)?;
        let rgb = gray_to_rgb(&gray);
        let (frame, transform) = supervision::preprocess_frame(&rgb, TARGET_SIZE)?;
        let (_, desc, score) = refnet::forward(&weights, &frame)?;
        let kps_net = refnet::detect(&score, a.keypoint_threshold, a.nms_radius, a.max_keypoints);
        let descs = refnet::describe(&desc, &kps_net);
        // export keypoints in full-frame coordinates
        let kps: Vec<Keypoint> = kps_net
            .iter()
            .map(|k| Keypoint { xy: transform.invert(k.xy), score: k.score })
            .collect();
        let mut name = path.file_name().unwrap().to_os_string();
        name.push(".feat");
        refnet::save_features(&kps, &descs, &a.out.join(name))?;
    }
    println!("features for {} frames -> {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    write_manifest(
        "match",
        &[&a.features_a, &a.features_b],
        &a,
        a.seed,
        &[&a.out],
        &manifest_for(&a.out),
    )?;
    let (kps_a, desc_a) = refnet::load_features(&a.features_a)?;
    let (kps_b, desc_b) = refnet::load_features(&a.features_b)?;
    let options = MatchOptions {
        max_ratio: a.max_ratio,
        max_distance: a.max_distance,
        max_error: a.max_error,
        ransac_seed: a.seed,
        ..Default::default()
    };
    let matches = if a.guided {
        let g = matching::match_guided(&kps_a, &desc_a, &kps_b, &desc_b, &options)?;
        if !g.geometry_used {
            eprintln!("note: geometry estimation unavailable, brute-force matches kept");
        }
        g.matches
    } else {
        matching::match_brute_force(&desc_a, &desc_b, &options)?
    };
    matching::save_matches(&matches, &a.out)?;
    println!("{} matches -> {}", matches.len(), a.out.display());
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    write_manifest(
        "metrics",
        &[&a.model, &a.features, &a.images],
        &a,
        0,
        &[&a.out],
        &manifest_for(&a.out),
    )?;
    let model = load_model(&a.model)?;
    let mut detections = BTreeMap::new();
    let mut frames = BTreeMap::new();
    for img in model.images.values() {
        let feat_path = a.features.join(format!("{}.feat", img.name));
        let (kps, _) = refnet::load_features(&feat_path)
            .with_context(|| format!("reading features {}", feat_path.display()))?;
        detections.insert(img.id, kps);
        frames.insert(img.id, synth::read_pgm(&a.images.join(&img.name))?);
    }
    let options = MetricsOptions {
        precision_over_all_images: a.precision_over_all,
        ..Default::default()
    };
    let (m, failures) = metrics::quality_metrics(&model, &detections, &frames, a.total, &options)?;
    print!("{}", metrics::format_quality_table(&m));
    for (img, count) in &failures {
        eprintln!("image {img}: {count} reconstructed observations matched no detection");
    }
    metrics::write_quality_report(&m, &a.out)?;
    Ok(())
}

fn cmd_coverage(a: CoverageArgs) -> Result<()> {
    let inputs: Vec<&Path> = a.model.iter().map(PathBuf::as_path).collect();
    write_manifest("coverage", &inputs, &a, 0, &[&a.out], &manifest_for(&a.out))?;
    let mut models = Vec::new();
    for dir in &a.model {
        models.push(load_model(dir)?);
    }
    let refs: Vec<&SparseModel> = models.iter().collect();
    let c = metrics::coverage_metrics(&refs, a.total);
    print!("{}", metrics::format_coverage_table(&c));
    metrics::write_coverage_report(&c, &a.out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sample dump: little-endian binary, private to the CLI pipeline

const SAMPLES_MAGIC: &[u8; 6] = b"SFSMP1";

fn save_samples(samples: &[TrainingSample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| path.display().to_string())?,
    );
    f.write_all(SAMPLES_MAGIC)?;
    f.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        f.write_all(&(s.images.len() as u32).to_le_bytes())?;
        let side = s.images[0].dim().0;
        f.write_all(&(side as u32).to_le_bytes())?;
        for id in &s.image_ids {
            f.write_all(&id.to_le_bytes())?;
        }
        for arrs in [&s.images, &s.heatmaps] {
            for arr in arrs.iter() {
                for v in arr.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        f.write_all(&(s.correspondences.len() as u64).to_le_bytes())?;
        for (&(pa, pb), set) in &s.correspondences {
            f.write_all(&(pa as u32).to_le_bytes())?;
            f.write_all(&(pb as u32).to_le_bytes())?;
            f.write_all(&set.image_a.to_le_bytes())?;
            f.write_all(&set.image_b.to_le_bytes())?;
            f.write_all(&(set.pairs.len() as u64).to_le_bytes())?;
            for &(xa, xb, pid) in &set.pairs {
                for v in [xa[0], xa[1], xb[0], xb[1]] {
                    f.write_all(&v.to_le_bytes())?;
                }
                f.write_all(&pid.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn load_samples(path: &Path) -> Result<Vec<TrainingSample>> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| path.display().to_string())?,
    );
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)?;
    if &magic != SAMPLES_MAGIC {
        bail!("{} is not a sample dump", path.display());
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let mut read_u64 = |f: &mut dyn Read| -> Result<u64> {
        f.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let mut f64buf = [0u8; 8];
    let mut read_f64 = |f: &mut dyn Read| -> Result<f64> {
        f.read_exact(&mut f64buf)?;
        Ok(f64::from_le_bytes(f64buf))
    };

    let count = read_u64(&mut f)?;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = read_u32(&mut f)? as usize;
        let side = read_u32(&mut f)? as usize;
        let mut image_ids = Vec::with_capacity(n);
        for _ in 0..n {
            image_ids.push(read_u32(&mut f)?);
        }
        let mut read_stack = |f: &mut dyn Read| -> Result<Vec<Array2<f64>>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let mut data = Vec::with_capacity(side * side);
                for _ in 0..side * side {
                    data.push(read_f64(f)?);
                }
                out.push(Array2::from_shape_vec((side, side), data)?);
            }
            Ok(out)
        };
        let images = read_stack(&mut f)?;
        let heatmaps = read_stack(&mut f)?;
        let n_corr = read_u64(&mut f)?;
        let mut correspondences = BTreeMap::new();
        for _ in 0..n_corr {
            let pa = read_u32(&mut f)? as usize;
            let pb = read_u32(&mut f)? as usize;
            let image_a = read_u32(&mut f)?;
            let image_b = read_u32(&mut f)?;
            let n_pairs = read_u64(&mut f)?;
            let mut pairs = Vec::with_capacity(n_pairs as usize);
            for _ in 0..n_pairs {
                let xa = [read_f64(&mut f)?, read_f64(&mut f)?];
                let xb = [read_f64(&mut f)?, read_f64(&mut f)?];
                let pid = read_u64(&mut f)?;
                pairs.push((xa, xb, pid));
            }
            correspondences.insert((pa, pb), CorrespondenceSet { image_a, image_b, pairs });
        }
        samples.push(TrainingSample { image_ids, images, heatmaps, correspondences });
    }
    Ok(samples)
}

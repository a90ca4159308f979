//! Scratch experiment: measures descriptor-learning effect sizes. Not part
//! of the regular suite (ignored); run explicitly while tuning.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;

use sfmfeat::loss::{loss_total, sample_descriptor, LossParams};
use sfmfeat::matching::{match_brute_force, MatchOptions};
use sfmfeat::refnet::{self, NetWeights, TrainConfig};
use sfmfeat::supervision::{self, BatchConfig, BatchSize, FrameTransform};
use sfmfeat::synth::{self, SceneConfig};
use sfmfeat::tracks;

fn scene_config() -> SceneConfig {
    let s = 128.0;
    SceneConfig {
        landmark_count: 500,
        frame_count: 30,
        frame_size: 128,
        calibration: [s * 0.45, s * 0.45, s / 2.0 - 0.5, s / 2.0 - 0.5, 0.02, -0.005, 0.001, 0.0],
        ..Default::default()
    }
}

fn preprocess_all(
    scene: &synth::SynthScene,
    target: usize,
) -> (BTreeMap<u32, Array2<f64>>, BTreeMap<u32, FrameTransform>) {
    let mut frames = BTreeMap::new();
    let mut transforms = BTreeMap::new();
    for (&id, _) in &scene.frames {
        let rgb = scene.frame_rgb(id);
        let (f, t) = supervision::preprocess_frame(&rgb, target).unwrap();
        frames.insert(id, f);
        transforms.insert(id, t);
    }
    (frames, transforms)
}

fn recovery(
    w: &NetWeights,
    scene: &synth::SynthScene,
    frames: &BTreeMap<u32, Array2<f64>>,
    transforms: &BTreeMap<u32, FrameTransform>,
    eval_pairs: &[(u32, u32)],
) -> f64 {
    let mut fields = BTreeMap::new();
    let mut ids: Vec<u32> = eval_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let (_, desc, _) = refnet::forward(w, &frames[&id]).unwrap();
        fields.insert(id, desc);
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for &(a, b) in eval_pairs {
        let Some(set) = scene.correspondences.iter().find(|c| c.image_a == a && c.image_b == b)
        else {
            continue;
        };
        let da: Vec<Vec<f64>> = set
            .pairs
            .iter()
            .map(|p| sample_descriptor(&fields[&a], transforms[&a].apply(p.0)).unit)
            .collect();
        let db: Vec<Vec<f64>> = set
            .pairs
            .iter()
            .map(|p| sample_descriptor(&fields[&b], transforms[&b].apply(p.1)).unit)
            .collect();
        let matches = match_brute_force(&da, &db, &MatchOptions::default()).unwrap();
        hit += matches.iter().filter(|m| m.index_a == m.index_b).count();
        total += set.pairs.len();
    }
    hit as f64 / total.max(1) as f64
}

#[test]
#[ignore]
fn training_effect_probe() {
    let t0 = Instant::now();
    let target = 128usize;
    let scene = synth::generate_scene(&scene_config(), 42).unwrap();
    let (frames, transforms) = preprocess_all(&scene, target);
    eprintln!("scene+preprocess: {:.1?}", t0.elapsed());

    let frame_order: Vec<u32> = scene.truth.images.keys().copied().collect();
    let reps = tracks::reproject_all(&scene.truth, &frame_order).unwrap();
    let all_tracks = tracks::extract_reliable_tracks(&reps, &frame_order, 2);
    let train_tracks: Vec<_> = all_tracks
        .iter()
        .filter(|t| t.frames.iter().all(|&(id, _, _)| id <= 20))
        .cloned()
        .collect();
    eprintln!("tracks: {} total, {} train", all_tracks.len(), train_tracks.len());

    let eval_pairs: Vec<(u32, u32)> = (21..30).map(|i| (i, i + 1)).collect();
    let train_pairs: Vec<(u32, u32)> = (1..10).map(|i| (i, i + 1)).collect();

    let config = BatchConfig { batch_size: BatchSize::Fixed(2), ..Default::default() };
    let n_samples = 8;
    let samples: Vec<_> = (0..n_samples)
        .map(|i| {
            supervision::sample_batch(&train_tracks, &config, 1000 + i as u64, &transforms, &frames)
                .unwrap()
        })
        .collect();
    eprintln!("samples ready: {:.1?}", t0.elapsed());

    let seed = 1u64;
    let w0 = NetWeights::init(seed);
    let base = recovery(&w0, &scene, &frames, &transforms, &eval_pairs);
    let base_tr = recovery(&w0, &scene, &frames, &transforms, &train_pairs);
    eprintln!(
        "untrained recovery {base:.3} (train-range {base_tr:.3}) ({:.1?})",
        t0.elapsed()
    );

    for (steps, lr, lambda) in [
        (500usize, 3e-3, 1.0),
        (1000, 1e-3, 1.0),
        (1000, 3e-3, 10.0),
        (2000, 3e-3, 1.0),
    ] {
        let params = LossParams { lambda, ..Default::default() };
        let cfg = TrainConfig {
            learning_rate: lr,
            steps,
            loss: params.clone(),
            ..Default::default()
        };
        let ti = Instant::now();
        let out = refnet::train(|s| Ok(samples[s % samples.len()].clone()), w0.clone(), &cfg);
        let Ok((w, hist)) = out else {
            eprintln!("steps {steps} lr {lr} lambda {lambda}: diverged");
            continue;
        };
        let rec = recovery(&w, &scene, &frames, &transforms, &eval_pairs);
        let rec_tr = recovery(&w, &scene, &frames, &transforms, &train_pairs);
        // loss breakdown on sample 0: detection-only vs tracking-only
        let s0 = &samples[0];
        let eval_loss = |w: &NetWeights, p: &LossParams| -> f64 {
            let mut ls = Vec::new();
            let mut ds = Vec::new();
            for img in &s0.images {
                let (l, d, _) = refnet::forward(w, img).unwrap();
                ls.push(l);
                ds.push(d);
            }
            loss_total(&ls, &ds, &s0.heatmaps, &s0.correspondences, p).unwrap()
        };
        let det = eval_loss(&w, &LossParams { lambda: 0.0, ..Default::default() });
        let trk = eval_loss(&w, &LossParams { lambda: 1.0, ..Default::default() }) - det;
        eprintln!(
            "steps {steps} lr {lr} lambda {lambda}: loss {:.3}->{:.3} (det {det:.3} trk {trk:.4}), recovery {rec:.3} (train-range {rec_tr:.3}), train {:.1?}",
            hist[0],
            hist.last().unwrap(),
            ti.elapsed()
        );
    }
}

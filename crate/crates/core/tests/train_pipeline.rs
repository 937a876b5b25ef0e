//! Preprocessing, splitting, training determinism, checkpoints and prediction.

mod common;

use std::collections::BTreeSet;
use std::path::Path;

use canet_core::image::{distance_transform, fill_holes, load_image, normalize_map, zhang_suen_thinning, BinaryImage};
use canet_core::model::{Model, ModelConfig};
use canet_core::train::{
    generate_synthetic, predict, preprocess, split_dataset, train_from_config, Checkpoint, Dataset, Event, InputMode,
    TrainConfig, CHECKPOINT_MAGIC,
};
use canet_core::Error;
use common::{holed_blob, random_blob, rng};
use proptest::prelude::*;

fn ring(size: usize, outer: f64, inner: f64) -> BinaryImage {
    let c = (size as f64 - 1.0) / 2.0;
    BinaryImage::from_fn(size, size, |x, y| {
        let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
        d <= outer && d > inner
    })
}

#[test]
fn preprocess_modes_compose_the_image_operations() {
    let img = ring(24, 10.0, 3.0);
    let filled = fill_holes(&img);
    assert_ne!(filled, img);
    let raw = preprocess::<f64>(InputMode::RawShape, &img);
    let dist = preprocess::<f64>(InputMode::Distance, &img);
    let rep = preprocess::<f64>(InputMode::RepairedDistance, &img);
    assert_eq!(raw.shape(), &[1, 1, 24, 24]);
    assert!(raw.data().iter().zip(img.pixels()).all(|(&v, &p)| v == if p { 1.0 } else { 0.0 }));
    assert_eq!(dist.data(), normalize_map(&distance_transform(&img)).values.as_slice());
    assert_eq!(rep.data(), normalize_map(&distance_transform(&filled)).values.as_slice());

    // unnormalized maps differ exactly where the nearest background pixel was in the hole
    let (d_raw, d_rep) = (distance_transform(&img), distance_transform(&filled));
    let bg: Vec<(usize, usize)> = (0..24).flat_map(|y| (0..24).map(move |x| (x, y))).filter(|&(x, y)| !img.get(x, y)).collect();
    let d2 = |x: usize, y: usize, pts: &mut dyn Iterator<Item = (i64, i64)>| {
        pts.map(|(bx, by)| (bx - x as i64).pow(2) + (by - y as i64).pow(2)).min().unwrap_or(i64::MAX)
    };
    let mut changed = 0;
    for y in 0..24 {
        for x in 0..24 {
            let hole = (filled.get(x, y) && !img.get(x, y)) as usize;
            let to_hole = d2(x, y, &mut bg.iter().filter(|&&(bx, by)| filled.get(bx, by)).map(|&(a, b)| (a as i64, b as i64)));
            let outside_pts = bg.iter().filter(|&&(bx, by)| !filled.get(bx, by)).map(|&(a, b)| (a as i64, b as i64));
            let rim = (-1..=24).flat_map(|i| [(i, -1), (i, 24), (-1, i), (24, i)]);
            let to_outside = d2(x, y, &mut outside_pts.chain(rim));
            let expect_change = img.get(x, y) && to_hole < to_outside || hole == 1;
            assert_eq!(d_raw.get(x, y) != d_rep.get(x, y), expect_change, "({x}, {y})");
            changed += expect_change as usize;
        }
    }
    assert!(changed > 0);
}

#[test]
fn repaired_equals_distance_on_hole_free_shapes() {
    let mut r = rng(30);
    for _ in 0..10 {
        let b = random_blob(&mut r, 32, 32);
        if fill_holes(&b) == b {
            assert_eq!(
                preprocess::<f32>(InputMode::RepairedDistance, &b),
                preprocess::<f32>(InputMode::Distance, &b)
            );
        }
    }
    let b = holed_blob(&mut r, 32, 32);
    let x = preprocess::<f32>(InputMode::RepairedDistance, &b);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn split_matches_documented_counts() {
    let ids: Vec<u32> = (0..1218).collect();
    let (train, test) = split_dataset(&ids, 0.8, 7).unwrap();
    assert_eq!((train.len(), test.len()), (974, 244));
    assert!(split_dataset(&ids[..1], 0.8, 0).is_err());
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 2usize..200, ratio in 0.05f64..0.95, seed in 0u64..1000) {
        let ids: Vec<usize> = (0..n).collect();
        let (a, b) = split_dataset(&ids, ratio, seed).unwrap();
        prop_assert_eq!(split_dataset(&ids, ratio, seed).unwrap(), (a.clone(), b.clone()));
        let sa: BTreeSet<_> = a.iter().copied().collect();
        let sb: BTreeSet<_> = b.iter().copied().collect();
        prop_assert!(sa.is_disjoint(&sb));
        prop_assert_eq!(sa.len() + sb.len(), n);
        prop_assert!(!a.is_empty() && !b.is_empty());
    }
}

fn tiny_config(dir: &Path, steps: usize) -> TrainConfig {
    TrainConfig {
        shapes_dir: dir.join("shapes"),
        skeletons_dir: dir.join("skeletons"),
        model: ModelConfig {
            base_channels: 4,
            ..ModelConfig::default()
        },
        total_steps: steps,
        eval_interval: 4,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_data_is_seeded_and_thinned() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ids = generate_synthetic(6, 32, 9, &a).unwrap();
    generate_synthetic(6, 32, 9, &b).unwrap();
    for id in &ids {
        for sub in ["shapes", "skeletons"] {
            let f = format!("{sub}/{id}.pgm");
            assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
        }
        let shape = load_image(a.join(format!("shapes/{id}.pgm"))).unwrap();
        let skel = load_image(a.join(format!("skeletons/{id}.pgm"))).unwrap();
        assert!(skel.is_subset_of(&shape));
        assert_eq!(zhang_suen_thinning(&skel), skel);
    }
    assert!(generate_synthetic(1, 40, 0, &a).is_err());
}

#[test]
fn training_is_deterministic_and_logs_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(6, 32, 1, dir.path()).unwrap();
    let cfg = TrainConfig {
        lr_min: 0.001,
        ..tiny_config(dir.path(), 8)
    };
    let mut events = 0;
    let a = train_from_config(&cfg, &mut |_: Event<'_>| events += 1).unwrap();
    let b = train_from_config(&cfg, &mut |_: Event<'_>| {}).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.evals, b.evals);
    assert_eq!(a.steps.len(), 9);
    assert_eq!(events, 9 + 2);
    assert_eq!(a.steps[0].lr, 0.02);
    assert_eq!(a.steps[8].lr, 0.001);
    assert!(a.steps.iter().all(|s| s.loss.is_finite()));
    assert_eq!(a.checkpoint.step, 8);
    assert_eq!(a.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![4, 8]);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn non_finite_loss_aborts_with_step_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(6, 32, 2, dir.path()).unwrap();
    let cfg = TrainConfig {
        lr_max: 1e30,
        grad_clip: None,
        ..tiny_config(dir.path(), 20)
    };
    match train_from_config(&cfg, &mut |_: Event<'_>| {}) {
        Err(Error::NonFiniteLoss { step, ids }) => {
            assert!(step > 0 && step < 20);
            assert_eq!(ids.split(',').count(), 2);
            assert!(ids.starts_with("synth_"));
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn evaluation_set_is_disjoint_from_training() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(10, 32, 3, dir.path()).unwrap();
    let data = Dataset::load(&dir.path().join("shapes"), &dir.path().join("skeletons")).unwrap();
    let (train, eval) = data.split(0.8, 0).unwrap();
    let tr: BTreeSet<_> = train.ids().into_iter().collect();
    assert_eq!((train.len(), eval.len()), (8, 2));
    assert!(eval.ids().iter().all(|id| !tr.contains(id)));
}

/// Sum of every stored value and an FNV-1a hash of the tensor section,
/// parsed straight from the documented byte layout.
fn file_checksum(bytes: &[u8]) -> (f64, u64, usize) {
    assert_eq!(&bytes[..9], CHECKPOINT_MAGIC);
    assert_eq!(bytes[9], 1);
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let mut pos = 10 + 8 + u64_at(10);
    let (mut sum, mut hash, mut count) = (0.0, 0xcbf29ce484222325u64, 0);
    while pos < bytes.len() {
        let name_len = u64_at(pos);
        pos += 8 + name_len;
        let rank = u64_at(pos);
        pos += 8;
        let n: usize = (0..rank).map(|k| u64_at(pos + 8 * k)).product();
        pos += 8 * rank;
        for k in 0..n {
            let raw: [u8; 4] = bytes[pos + 4 * k..pos + 4 * k + 4].try_into().unwrap();
            sum += f32::from_le_bytes(raw) as f64;
            for b in raw {
                hash = (hash ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
        pos += 4 * n;
        count += 1;
    }
    assert_eq!(pos, bytes.len());
    (sum, hash, count)
}

fn model_checksum(m: &Model<f32>) -> (f64, u64, usize) {
    let mut values: Vec<f32> = m.params.params.iter().flat_map(|p| p.value.data().to_vec()).collect();
    for n in &m.params.norms {
        values.extend(&n.running_mean);
        values.extend(&n.running_var);
    }
    values.extend(std::iter::repeat_n(0.0f32, m.param_count()));
    let mut hash = 0xcbf29ce484222325u64;
    for v in &values {
        for b in v.to_le_bytes() {
            hash = (hash ^ b as u64).wrapping_mul(0x100000001b3);
        }
    }
    let count = 2 * m.params.params.len() + 2 * m.params.norms.len();
    (values.iter().map(|&v| v as f64).sum(), hash, count)
}

#[test]
fn fresh_checkpoint_matches_independent_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 10);
    let path = dir.path().join("fresh.ckpt");
    Checkpoint::fresh(cfg.clone()).unwrap().save(&path).unwrap();
    let independent = Model::<f32>::build(&cfg.model).unwrap();
    assert_eq!(file_checksum(&std::fs::read(&path).unwrap()), model_checksum(&independent));
}

#[test]
fn checkpoint_round_trip_preserves_predictions_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(6, 32, 4, dir.path()).unwrap();
    let cfg = TrainConfig {
        checkpoint: Some(dir.path().join("run/final.ckpt")),
        ..tiny_config(dir.path(), 6)
    };
    let out = train_from_config(&cfg, &mut |_: Event<'_>| {}).unwrap();
    let loaded = Checkpoint::load(dir.path().join("run/final.ckpt")).unwrap();
    assert!(dir.path().join("run/final.best.ckpt").is_file());
    assert_eq!(loaded.step, 6);
    assert_eq!(loaded.threshold, out.checkpoint.threshold);
    assert_eq!(loaded.config, out.checkpoint.config);
    assert_eq!(loaded.optimizer.velocities, out.checkpoint.optimizer.velocities);
    assert_eq!(loaded.to_bytes(), out.checkpoint.to_bytes());

    let shape = load_image(dir.path().join("shapes/synth_0002.pgm")).unwrap();
    for t in [None, Some(0.3)] {
        let a = predict(&out.checkpoint, &shape, t).unwrap();
        let b = predict(&loaded, &shape, t).unwrap();
        assert_eq!(a.probs.values, b.probs.values);
        assert_eq!(a.skeleton, b.skeleton);
    }
}

#[test]
fn truncated_or_corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = Checkpoint::fresh(tiny_config(dir.path(), 4)).unwrap().to_bytes();
    let mut r = rng(31);
    use rand::Rng;
    for _ in 0..40 {
        let cut = r.random_range(0..bytes.len());
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "accepted a {cut}-byte prefix");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes;
    bad[9] = 2;
    let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn prediction_threshold_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::fresh(tiny_config(dir.path(), 4)).unwrap();
    let shape = random_blob(&mut rng(32), 32, 32);
    let err = predict(&ck, &shape, None).unwrap_err().to_string();
    assert!(err.contains("threshold"), "{err}");
    assert_eq!(predict(&ck, &shape, Some(1.0)).unwrap().skeleton.count(), 0);
    assert_eq!(predict(&ck, &shape, Some(0.0)).unwrap().skeleton.count(), 32 * 32);
    assert!(predict(&ck, &shape, Some(1.5)).is_err());
    assert!(predict(&ck, &BinaryImage::new(24, 32), Some(0.5)).is_err());

    // a saturated head pushes every logit far past where f64 sigmoid rounds to 1
    let head = ck.model.params.find("head.bias").unwrap();
    ck.model.params.params[head].value.data_mut()[0] = 1e4;
    ck.threshold = Some(0.5);
    let p = predict(&ck, &shape, Some(1.0)).unwrap();
    assert!(p.probs.values.iter().all(|&v| v < 1.0));
    assert_eq!(p.skeleton.count(), 0);
    assert_eq!(predict(&ck, &shape, None).unwrap().skeleton.count(), 32 * 32);
}

use std::fs;

use dmnet::data::io::{mask_path, read_pgm, read_ppm, write_pgm};
use dmnet::data::metrics::class_counts;
use dmnet::data::{
    generate_dataset, generate_video, load_video_dir, mdice, miou, write_video_dir, LabelMode, Mask, MetricAccumulator,
    SceneConfig, NUM_CLASSES,
};
use dmnet::Error;
use num_rational::Rational64;
use proptest::prelude::*;

fn small(seed: u64) -> SceneConfig {
    SceneConfig { length: 12, seed, ..SceneConfig::default() }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_video(&small(3)).unwrap(), generate_video(&small(3)).unwrap());
    assert_ne!(generate_video(&small(3)).unwrap().frames, generate_video(&small(4)).unwrap().frames);
}

#[test]
fn sample_invariants() {
    for seed in 0..4 {
        let v = generate_video(&SceneConfig { blur_prob: 0.5, brightness_prob: 0.5, ..small(seed) }).unwrap();
        assert_eq!((v.frames.len(), v.masks.len(), v.events.len()), (12, 12, 12));
        for (f, m) in v.frames.iter().zip(&v.masks) {
            assert_eq!(f.shape(), &[3, 64, 80]);
            assert!(f.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert!(m.check_classes(NUM_CLASSES).is_ok());
        }
    }
}

#[test]
fn zero_blur_probability_logs_no_blur() {
    for seed in 0..5 {
        let v = generate_video(&SceneConfig { blur_prob: 0.0, length: 40, ..small(seed) }).unwrap();
        assert!(v.events.iter().all(|e| !e.blur));
    }
    let v = generate_video(&SceneConfig { blur_prob: 1.0, ..small(0) }).unwrap();
    assert!(v.events.iter().all(|e| e.blur));
}

#[test]
fn visible_instruments_show_every_part() {
    for seed in 0..6 {
        let cfg = SceneConfig { mode: LabelMode::Parts, length: 40, ..small(seed) };
        for m in generate_video(&cfg).unwrap().masks {
            if m.count(0) < m.labels().len() {
                for class in 1..NUM_CLASSES as u8 {
                    assert!(m.count(class) > 0, "seed {seed}: class {class} missing");
                }
            }
        }
    }
}

#[test]
fn dataset_rotates_types() {
    let cfg = SceneConfig { mode: LabelMode::Type, length: 8, ..small(1) };
    let videos = generate_dataset(&cfg, 6).unwrap();
    let mut seen = [false; NUM_CLASSES];
    for v in &videos {
        for m in &v.masks {
            for c in 1..NUM_CLASSES {
                seen[c] |= m.count(c as u8) > 0;
            }
        }
    }
    assert!(seen[1..].iter().all(|&s| s));
}

#[test]
fn oversized_tools_are_rejected() {
    let cfg = SceneConfig { tool_width: 40.0, ..small(0) };
    assert!(matches!(generate_video(&cfg), Err(Error::Config(_))));
}

#[test]
fn video_dir_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = generate_video(&small(9)).unwrap();
    write_video_dir(&v, dir.path()).unwrap();
    let events = fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(events.lines().count(), 1 + v.len());
    let ppm = fs::read(dir.path().join("frame_00000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n80 64\n255\n"));

    let back = load_video_dir(dir.path(), NUM_CLASSES).unwrap();
    assert_eq!(back.masks, v.masks);
    assert_eq!(back.events, v.events);
    for (a, b) in back.frames.iter().zip(&v.frames) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn missing_and_malformed_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    write_video_dir(&generate_video(&small(2)).unwrap(), dir.path()).unwrap();
    let missing = mask_path(dir.path(), 3);
    fs::remove_file(&missing).unwrap();
    let err = load_video_dir(dir.path(), NUM_CLASSES).unwrap_err();
    assert!(err.to_string().contains("mask_00003.pgm"), "{err}");

    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"P3\n2 2\n255\n").unwrap();
    assert!(read_ppm(&bad).unwrap_err().to_string().contains("bad.ppm"));

    let overflow = dir.path().join("mask_00003.pgm");
    write_pgm(&overflow, &Mask::filled(64, 80, 7)).unwrap();
    assert_eq!(read_pgm(&overflow).unwrap().max_label(), 7);
    assert!(load_video_dir(dir.path(), NUM_CLASSES).is_err());
}

fn r(a: i64, b: i64) -> Rational64 {
    Rational64::new(a, b)
}

#[test]
fn metric_fixtures() {
    let gt = Mask::new(2, 4, vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
    assert_eq!(miou(&gt, &gt, 4).unwrap(), Some(r(1, 1)));
    assert_eq!(mdice(&gt, &gt, 4).unwrap(), Some(r(1, 1)));

    // prediction covers half of a four-pixel class with no false positives
    let gt = Mask::new(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let pred = Mask::new(1, 6, vec![1, 1, 0, 0, 0, 0]).unwrap();
    let c = class_counts(&pred, &gt, 2).unwrap();
    assert_eq!(c[1].iou(), Some(r(1, 2)));
    assert_eq!(c[1].dice(), Some(r(2, 3)));
    assert_eq!(miou(&pred, &gt, 2).unwrap(), Some(r(1, 2)));

    let gt = Mask::new(1, 4, vec![1, 1, 2, 2]).unwrap();
    let pred = Mask::new(1, 4, vec![2, 2, 1, 1]).unwrap();
    assert_eq!(miou(&pred, &gt, 3).unwrap(), Some(r(0, 1)));
    assert_eq!(mdice(&pred, &gt, 3).unwrap(), Some(r(0, 1)));

    // background and empty classes drop out of the mean
    let gt = Mask::new(1, 4, vec![0, 0, 0, 0]).unwrap();
    assert_eq!(miou(&gt, &gt, 4).unwrap(), None);
    let over = Mask::new(1, 4, vec![0, 0, 0, 5]).unwrap();
    assert!(miou(&over, &gt, 4).is_err());
}

#[test]
fn accumulator_averages_frames() {
    let gt = Mask::new(1, 4, vec![1, 1, 1, 1]).unwrap();
    let mut acc = MetricAccumulator::new(2, false);
    acc.add(&gt, &gt).unwrap();
    acc.add(&Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap(), &gt).unwrap();
    acc.add(&Mask::filled(1, 4, 0), &Mask::filled(1, 4, 0)).unwrap();
    let m = acc.finish();
    assert_eq!(m.frames, 3);
    assert!((m.miou - 0.75).abs() < 1e-15);
    assert_eq!(m.class_iou[0], Some(0.5));
    assert_eq!(m.class_iou[1], Some(0.75));
}

fn masks(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..4, len), prop::collection::vec(0u8..4, len))
}

proptest! {
    #[test]
    fn dice_dominates_iou((a, b) in masks(24)) {
        let (p, g) = (Mask::new(4, 6, a).unwrap(), Mask::new(4, 6, b).unwrap());
        for c in class_counts(&p, &g, 4).unwrap() {
            if let (Some(i), Some(d)) = (c.iou(), c.dice()) {
                prop_assert!(d >= i);
                let extreme = i == r(0, 1) || i == r(1, 1);
                prop_assert_eq!(d == i, extreme);
            }
        }
    }

    #[test]
    fn metrics_are_symmetric((a, b) in masks(24)) {
        let (p, g) = (Mask::new(4, 6, a).unwrap(), Mask::new(4, 6, b).unwrap());
        prop_assert_eq!(miou(&p, &g, 4).unwrap(), miou(&g, &p, 4).unwrap());
        prop_assert_eq!(mdice(&p, &g, 4).unwrap(), mdice(&g, &p, 4).unwrap());
    }
}

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use proptest::prelude::*;
use vstpose_core::container::write_tensor;
use vstpose_core::dataset::{
    assemble_frames, load_manifest, preprocess_recording, read_manifest, slide_windows, split, synth_clips,
    synth_generate, window_count, windows_from_clips, write_manifest, CsiWindow, Granularity, LoadOptions, ManifestRow,
    PreprocessOptions, RawCsiRecording, Ratio, SkeletonSequence, SplitSpec, SynthConfig, Units, MANIFEST_FILE,
};
use vstpose_core::Tensor;

/// 3 s of CSI at 150 Hz from 3 × 3 antennas on 30 subcarriers, with a 30 fps
/// skeleton track of the same duration.
fn fixture() -> (RawCsiRecording<f64>, SkeletonSequence<f64>) {
    let amps = Tensor::from_fn(&[450, 3, 3, 30], |i| 10.0 + ((i * 7919) % 1000) as f64 / 100.0);
    let rec = RawCsiRecording::new(amps, 150.0).unwrap();
    let coords = Tensor::from_fn(&[90, 17, 2], |i| (i % 640) as f64);
    (rec, SkeletonSequence::new(coords, None, Units::Pixels).unwrap())
}

fn windows_of_fixture() -> Vec<CsiWindow<f64>> {
    let (rec, sk) = fixture();
    let clips = preprocess_recording(&rec, &sk, &PreprocessOptions::default(), 0).unwrap();
    clips.iter().flat_map(|c| slide_windows(c, 3, 2).unwrap()).collect()
}

fn key(w: &CsiWindow<f64>) -> (usize, usize) {
    (w.clip_id, w.start)
}

#[test]
fn fixture_frame_clip_and_window_counts() {
    let (rec, sk) = fixture();
    let frames = assemble_frames(&rec);
    assert_eq!(frames.len(), 90);
    assert_eq!(frames[0].image.shape(), &[3, 90, 5]);
    let clips = preprocess_recording(&rec, &sk, &PreprocessOptions::default(), 0).unwrap();
    assert_eq!(clips.len(), 10);
    assert!(clips.iter().all(|c| c.frames.shape() == [9, 3, 90, 5] && c.skeleton.len() == 9));
    assert_eq!(window_count(9, 3, 2), 4);
    let windows = windows_of_fixture();
    assert_eq!(windows.len(), 40);
    assert!(windows.iter().all(|w| w.frames.shape() == [3, 3, 90, 5]));
}

#[test]
fn frame_pixels_come_from_the_expected_samples() {
    let (rec, _) = fixture();
    let frames = assemble_frames(&rec);
    let amps = rec.amplitudes();
    for (f, tx, row, step) in [(0, 0, 0, 0), (7, 2, 89, 4), (45, 1, 31, 2), (89, 0, 60, 3)] {
        let expected = amps.at(&[f * 5 + step, tx, row / 30, row % 30]);
        assert_eq!(frames[f].image.at(&[tx, row, step]), expected);
    }
}

#[test]
fn preprocessing_without_denoise_keeps_raw_values() {
    let (rec, sk) = fixture();
    let opts = PreprocessOptions { denoise: None, ..PreprocessOptions::default() };
    let clips = preprocess_recording(&rec, &sk, &opts, 100).unwrap();
    assert_eq!(clips[0].clip_id, 100);
    // second clip, second frame = frame 10 = samples 50..55
    assert_eq!(clips[1].frames.at(&[1, 0, 0, 0]), rec.amplitudes().at(&[50, 0, 0, 0]));
    assert_eq!(clips[1].skeleton.coords.at(&[1, 0, 0]), sk.coords.at(&[10, 0, 0]));
}

#[test]
fn velocity_target_is_last_minus_first() {
    for w in windows_of_fixture().iter().take(5) {
        let k = &w.skeleton.coords;
        for j in 0..17 {
            for c in 0..2 {
                assert_eq!(w.velocity_gt.at(&[j, c]), k.at(&[2, j, c]) - k.at(&[0, j, c]));
            }
        }
    }
}

fn check_split(windows: &[CsiWindow<f64>], spec: SplitSpec, train_n: usize, test_n: usize) {
    let (train, test) = split(windows, &spec).unwrap();
    assert_eq!((train.len(), test.len()), (train_n, test_n));
    let a: BTreeSet<_> = train.iter().map(key).collect();
    let b: BTreeSet<_> = test.iter().map(key).collect();
    assert!(a.is_disjoint(&b));
    let all: BTreeSet<_> = windows.iter().map(key).collect();
    assert_eq!(a.union(&b).copied().collect::<BTreeSet<_>>(), all);
    let (again, _) = split(windows, &spec).unwrap();
    assert_eq!(again.iter().map(key).collect::<Vec<_>>(), train.iter().map(key).collect::<Vec<_>>());
    if spec.granularity == Granularity::Clip {
        let ca: BTreeSet<_> = train.iter().map(|w| w.clip_id).collect();
        let cb: BTreeSet<_> = test.iter().map(|w| w.clip_id).collect();
        assert!(ca.is_disjoint(&cb));
    }
}

#[test]
fn four_to_one_clip_split() {
    let windows = windows_of_fixture();
    check_split(&windows, SplitSpec::default(), 32, 8);
    let other = SplitSpec { seed: 99, ..SplitSpec::default() };
    let (a, _) = split(&windows, &SplitSpec::default()).unwrap();
    let (b, _) = split(&windows, &other).unwrap();
    assert_ne!(a.iter().map(key).collect::<Vec<_>>(), b.iter().map(key).collect::<Vec<_>>());
}

#[test]
fn three_to_one_window_split() {
    let spec = SplitSpec { ratio: Ratio::new(3, 1), seed: 4, granularity: Granularity::Window };
    check_split(&windows_of_fixture(), spec, 30, 10);
}

#[test]
fn empty_split_and_bad_ratio_fail() {
    assert!(split::<f64>(&[], &SplitSpec::default()).is_err());
    let bad = SplitSpec { ratio: Ratio::new(0, 1), ..SplitSpec::default() };
    assert!(split(&windows_of_fixture(), &bad).is_err());
}

#[test]
fn manifest_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let clips = synth_clips::<f64>(&SynthConfig { num_clips: 3, joints: 17, frame_shape: [1, 6, 5], ..SynthConfig::default() })
        .unwrap();
    let mut rows = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let (csi, sk) = (format!("csi_{i}.vst"), format!("sk_{i}.vst"));
        write_tensor(&dir.path().join(&csi), &clip.frames).unwrap();
        write_tensor(&dir.path().join(&sk), &clip.skeleton.coords).unwrap();
        rows.push(ManifestRow {
            csi_path: csi.into(),
            skeleton_path: sk.into(),
            action_label: clip.action_label.clone().unwrap(),
            subject_id: clip.subject_id.clone().unwrap(),
            confidence_path: None,
        });
    }
    write_manifest(&dir.path().join(MANIFEST_FILE), &rows).unwrap();
    assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), rows);

    let opts = LoadOptions { units: Some(Units::Normalized), ..LoadOptions::default() };
    let loaded = load_manifest::<f64>(dir.path(), &opts).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in loaded.iter().zip(&clips) {
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.skeleton.coords, b.skeleton.coords);
        assert_eq!(a.action_label, b.action_label);
    }
    assert_eq!(windows_from_clips(&loaded, &opts).unwrap().len(), 12);
}

#[test]
fn malformed_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    std::fs::write(&path, "a\tb\tc\td\nonly\ttwo\n").unwrap();
    let err = read_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

/// Least-squares linear decoder from one CSI frame to the pose of that frame.
fn fit_decoder(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    xtx.cholesky().expect("full column rank").solve(&xty)
}

fn frames_and_poses(windows: &[CsiWindow<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let pix = windows[0].frames.len() / windows[0].len();
    let lat = windows[0].skeleton.joints() * windows[0].skeleton.dims();
    let n = windows.len() * windows[0].len();
    let x = DMatrix::from_row_iterator(n, pix, windows.iter().flat_map(|w| w.frames.data().iter().copied()));
    let y = DMatrix::from_row_iterator(n, lat, windows.iter().flat_map(|w| w.skeleton.coords.data().iter().copied()));
    (x, y)
}

#[test]
fn synthetic_csi_linearly_encodes_position() {
    // 16 pixels for 8 position + 8 velocity latents: the mixing is invertible
    let cfg = SynthConfig { num_clips: 40, joints: 4, frame_shape: [1, 4, 4], ..SynthConfig::default() };
    let windows = synth_generate::<f64>(&cfg).unwrap();
    let (train, test) = split(&windows, &SplitSpec::default()).unwrap();
    let (xa, ya) = frames_and_poses(&train);
    let (xb, yb) = frames_and_poses(&test);
    let w = fit_decoder(&xa, &ya);
    let resid = (&xb * &w - &yb).norm() / yb.norm();
    assert!(resid < 1e-6, "held-out relative error {resid}");

    // a decoder fit to poses from other frames explains far less
    let shuffled = DMatrix::from_fn(ya.nrows(), ya.ncols(), |r, c| ya[((r * 7 + 3) % ya.nrows(), c)]);
    let w_bad = fit_decoder(&xa, &shuffled);
    assert!((&xb * &w_bad - &yb).norm() / yb.norm() > 100.0 * resid.max(1e-12));
}

proptest! {
    #[test]
    fn window_count_matches_enumeration(len in 0usize..60, window in 1usize..12, stride in 1usize..6) {
        let mut starts = 0;
        let mut s = 0;
        while s + window <= len {
            starts += 1;
            s += stride;
        }
        prop_assert_eq!(window_count(len, window, stride), starts);
    }

    #[test]
    fn splits_partition_every_window(seed in any::<u64>(), clips in 2usize..12, train in 1u32..6, test in 1u32..6, by_window in any::<bool>()) {
        let cfg = SynthConfig { num_clips: clips, joints: 2, frame_shape: [1, 2, 2], ..SynthConfig::default() };
        let windows = synth_generate::<f64>(&cfg).unwrap();
        let granularity = if by_window { Granularity::Window } else { Granularity::Clip };
        let spec = SplitSpec { ratio: Ratio::new(train, test), seed, granularity };
        let (a, b) = split(&windows, &spec).unwrap();
        prop_assert_eq!(a.len() + b.len(), windows.len());
        prop_assert!(!a.is_empty() && !b.is_empty());
        let ka: BTreeSet<_> = a.iter().map(key).collect();
        let kb: BTreeSet<_> = b.iter().map(key).collect();
        prop_assert!(ka.is_disjoint(&kb));
    }
}

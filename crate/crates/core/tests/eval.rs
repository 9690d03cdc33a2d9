use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gaitflow::classify::RankedPrediction;
use gaitflow::eval::*;
use gaitflow::optflow::{flow_sequence, FlowParams};
use gaitflow::synth::*;
use gaitflow::videoio::{DatasetLayout, Scenario};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

fn random_ranking(rng: &mut ChaCha8Rng, classes: u32) -> RankedPrediction {
    let mut labels: Vec<u32> = (0..classes).collect();
    labels.shuffle(rng);
    RankedPrediction {
        entries: labels.into_iter().enumerate().map(|(i, l)| (l, 1.0 - i as f64 * 0.01)).collect(),
    }
}

#[test]
fn rank_k_matches_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<RankedPrediction> = (0..200).map(|_| random_ranking(&mut rng, 10)).collect();
    let truth: Vec<u32> = (0..200).map(|_| rng.gen_range(0..10)).collect();
    for k in 1..=10 {
        let mut hits = 0;
        for (p, &t) in preds.iter().zip(&truth) {
            if p.entries[..k].iter().any(|e| e.0 == t) {
                hits += 1;
            }
        }
        assert_eq!(rank_k_accuracy(&preds, &truth, k).unwrap(), 100.0 * hits as f64 / 200.0);
    }
}

#[test]
fn confusion_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth: Vec<u32> = (0..300).map(|_| rng.gen_range(0..4)).collect();
    let pred: Vec<u32> = (0..300).map(|_| rng.gen_range(0..4)).collect();
    let m = confusion_matrix(&pred, &truth, 4).unwrap();
    let mut tally = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(&truth) {
        *tally.entry((t, p)).or_insert(0u64) += 1;
    }
    for i in 0..4u32 {
        for j in 0..4u32 {
            assert_eq!(m.counts[i as usize][j as usize], tally.get(&(i, j)).copied().unwrap_or(0));
        }
        let row: u64 = m.counts[i as usize].iter().sum();
        assert_eq!(row, truth.iter().filter(|&&t| t == i).count() as u64);
    }
    let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
    assert_eq!(m.accuracy(), correct as f64 / 300.0);
}

proptest! {
    #[test]
    fn rank5_dominates_rank1(seed in 0u64..100_000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<RankedPrediction> = (0..n).map(|_| random_ranking(&mut rng, 7)).collect();
        let truth: Vec<u32> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let r1 = rank_k_accuracy(&preds, &truth, 1).unwrap();
        let r5 = rank_k_accuracy(&preds, &truth, 5).unwrap();
        prop_assert!(r5 >= r1);
        prop_assert!((0.0..=100.0).contains(&r1) && (0.0..=100.0).contains(&r5));
    }

    #[test]
    fn confusion_rows_sum_to_class_counts(seed in 0u64..100_000, n in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let m = confusion_matrix(&pred, &truth, 3).unwrap();
        for c in 0..3u32 {
            prop_assert_eq!(m.counts[c as usize].iter().sum::<u64>(), truth.iter().filter(|&&t| t == c).count() as u64);
        }
    }
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        subjects: 5,
        normal_sequences: 4,
        bag_sequences: 0,
        shoe_sequences: 0,
        seed,
        ..Default::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_dataset_counts_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let layout = generate_synth_dataset(&small_spec(3), a.path()).unwrap();
    assert_eq!(layout.sequences.len(), 20);
    let loaded = DatasetLayout::load(&a.path().join(LAYOUT_FILE)).unwrap();
    for e in &loaded.sequences {
        assert_eq!(loaded.load_entry(e).unwrap().len(), 60);
    }
    generate_synth_dataset(&small_spec(3), b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

/// Dominant non-DC frequency (Hz) of the per-step flow energy.
fn dominant_frequency(spec: &SynthSpec, p: &SubjectParams) -> f64 {
    let (seq, _) = render_sequence(spec, p, Scenario::N, 1);
    let flows = flow_sequence(&seq, &FlowParams::default()).unwrap();
    let energy: Vec<f64> = flows
        .iter()
        .map(|f| f.u.data().iter().map(|&u| (u as f64).powi(2)).sum())
        .collect();
    let mean = energy.iter().sum::<f64>() / energy.len() as f64;
    let mut buf: Vec<Complex<f64>> = energy.iter().map(|&e| Complex::new(e - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let n = buf.len();
    let best = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    best as f64 * spec.fps as f64 / n as f64
}

#[test]
fn limb_frequency_shows_in_flow_spectrum() {
    let base = SynthSpec {
        subjects: 2,
        frames: 100,
        noise: 0.0,
        ..Default::default()
    };
    let mut params = base.subject_params();
    params[0].frequency_hz = 0.8;
    params[1].frequency_hz = 1.6;
    for p in params.iter_mut() {
        p.speed_px = 0.3;
    }
    let spec = SynthSpec {
        params: Some(params.clone()),
        ..base
    };
    let slow = dominant_frequency(&spec, &params[0]);
    let fast = dominant_frequency(&spec, &params[1]);
    assert!(fast > slow, "slow {slow} Hz, fast {fast} Hz");
}

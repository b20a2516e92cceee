use super::*;
use crate::eval::{compute_eer, ScoreSet};

fn small_spec(n: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        num_records: n,
        ..CorpusSpec::default()
    }
}

/// Hand-built detector: largest frame-to-frame jump for bursts, and the
/// variance of a 40-frame moving average of frame energy for modulation.
/// Each statistic is standardized on the bonafide records; the score is the
/// larger of the two.
fn oracle_scores(corpus: &Corpus) -> ScoreSet {
    let (t_len, f_len) = (corpus.frames, corpus.features);
    let stats: Vec<(f64, f64)> = corpus
        .records
        .iter()
        .map(|r| {
            let x = r.features.data();
            let mut jump = 0.0f64;
            for t in 1..t_len {
                for f in 0..f_len {
                    jump = jump.max((x[t * f_len + f] - x[(t - 1) * f_len + f]).abs() as f64);
                }
            }
            let energy: Vec<f64> = (0..t_len)
                .map(|t| x[t * f_len..(t + 1) * f_len].iter().map(|&v| (v as f64).powi(2)).sum())
                .collect();
            let mean_e = energy.iter().sum::<f64>() / t_len as f64;
            let ma: Vec<f64> = energy.windows(40).map(|w| w.iter().sum::<f64>() / 40.0 / mean_e).collect();
            let m = ma.iter().sum::<f64>() / ma.len() as f64;
            let var = ma.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ma.len() as f64;
            (jump, var)
        })
        .collect();
    // standardize both statistics against the genuine records
    let genuine: Vec<(f64, f64)> = corpus
        .records
        .iter()
        .zip(&stats)
        .filter(|(r, _)| r.label == Label::Bonafide)
        .map(|(_, &s)| s)
        .collect();
    let moments = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        (m, sd)
    };
    let (mj, sj) = moments(genuine.iter().map(|s| s.0).collect());
    let (mv, sv) = moments(genuine.iter().map(|s| s.1).collect());
    let mut set = ScoreSet::new();
    for (r, (j, v)) in corpus.records.iter().zip(stats) {
        // bonafide-minus-spoof convention: higher means more genuine
        set.push(r.label, -((j - mj) / sj).max((v - mv) / sv));
    }
    set
}

/// Logistic regression on per-record frame means, scored on its own
/// training data.
fn frame_mean_probe(corpus: &Corpus) -> f64 {
    let f_len = corpus.features;
    let feats: Vec<Vec<f64>> = corpus
        .records
        .iter()
        .map(|r| {
            let mut m = vec![0.0; f_len];
            for row in r.features.data().chunks(f_len) {
                for (a, &v) in m.iter_mut().zip(row) {
                    *a += v as f64 / corpus.frames as f64;
                }
            }
            m
        })
        .collect();
    let y: Vec<f64> = corpus.records.iter().map(|r| (r.label == Label::Bonafide) as u8 as f64).collect();
    let mut w = vec![0.0; f_len + 1];
    for _ in 0..2000 {
        let mut grad = vec![0.0; f_len + 1];
        for (x, &t) in feats.iter().zip(&y) {
            let z = w[f_len] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            for i in 0..f_len {
                grad[i] += (p - t) * x[i];
            }
            grad[f_len] += p - t;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / feats.len() as f64;
        }
    }
    let mut set = ScoreSet::new();
    for (r, x) in corpus.records.iter().zip(&feats) {
        set.push(r.label, w[f_len] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>());
    }
    compute_eer(&set).unwrap().eer_percent
}

#[test]
fn oracle_detector_separates_but_frame_means_do_not() {
    let corpus = generate(&small_spec(400, 0)).unwrap();
    let oracle = compute_eer(&oracle_scores(&corpus)).unwrap().eer_percent;
    let probe = frame_mean_probe(&corpus);
    eprintln!("oracle EER {oracle:.2}%, frame-mean probe EER {probe:.2}%");
    assert!(oracle < 5.0, "oracle EER {oracle}");
    assert!(probe > 25.0, "frame-mean probe EER {probe}");
}

#[test]
fn generation_is_deterministic_across_workers() {
    let spec = small_spec(60, 9);
    let a = generate_with_workers(&spec, 1).unwrap().encode().unwrap();
    let b = generate_with_workers(&spec, 4).unwrap().encode().unwrap();
    let c = generate_with_workers(&spec, 1).unwrap().encode().unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, generate(&small_spec(60, 10)).unwrap().encode().unwrap());
}

#[test]
fn class_counts_follow_proportions() {
    for n in [1, 7, 100, 401] {
        let spec = small_spec(n, 1);
        let counts = spec.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, p) in counts.iter().zip(spec.proportions.as_array()) {
            assert!((*c as f64 - p * n as f64).abs() <= 1.0);
        }
        let corpus = generate(&spec).unwrap();
        for r in &corpus.records {
            assert_eq!(r.label == Label::Bonafide, r.class == ArtifactClass::None);
            assert_eq!(r.features.shape(), &[200, 16]);
        }
        for (i, c) in ArtifactClass::ALL.iter().enumerate() {
            assert_eq!(corpus.records.iter().filter(|r| r.class == *c).count(), counts[i]);
        }
    }
}

#[test]
fn spec_validation() {
    let bad = [
        CorpusSpec {
            proportions: Proportions {
                bonafide: 0.7,
                ..Proportions::default()
            },
            ..CorpusSpec::default()
        },
        CorpusSpec {
            num_records: 0,
            ..CorpusSpec::default()
        },
        CorpusSpec {
            burst_count_min: 5,
            burst_count_max: 4,
            ..CorpusSpec::default()
        },
        CorpusSpec {
            frames: 10,
            ..CorpusSpec::default()
        },
        CorpusSpec {
            mod_depth: 1.0,
            ..CorpusSpec::default()
        },
    ];
    for spec in bad {
        assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
    }
}

#[test]
fn degenerate_artifacts_match_bonafide_statistics() {
    let spec = CorpusSpec {
        burst_amplitude: 0.0,
        mod_depth: 0.0,
        ..small_spec(400, 4)
    };
    let corpus = generate(&spec).unwrap();
    let f_len = spec.features;
    let moments = |label: Label| {
        let mut sum = vec![0.0; f_len];
        let mut sq = vec![0.0; f_len];
        let mut n = 0.0;
        for r in corpus.records.iter().filter(|r| r.label == label) {
            for row in r.features.data().chunks(f_len) {
                for f in 0..f_len {
                    sum[f] += row[f] as f64;
                    sq[f] += (row[f] as f64).powi(2);
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| q / n - m * m).collect();
        (mean, var)
    };
    let (mb, vb) = moments(Label::Bonafide);
    let (ms, vs) = moments(Label::Spoof);
    // 200 records of strongly autocorrelated frames: the per-record mean is
    // the effective sample, so the tolerance is generous
    for f in 0..f_len {
        assert!((mb[f] - ms[f]).abs() < 0.15, "feature {f}: means {} vs {}", mb[f], ms[f]);
        assert!((vb[f] / vs[f] - 1.0).abs() < 0.15, "feature {f}: variances {} vs {}", vb[f], vs[f]);
    }
}

#[test]
fn bursts_stay_within_three_frames() {
    let spec = small_spec(1, 0);
    for id in 0..50u32 {
        let root = SplitRng::new(id as u64 + 100);
        let base = base_signal(&spec, &mut root.child_named("base").stream());
        let mut shorted = base.clone();
        apply_short(&spec, &mut shorted, &mut root.child_named("short").stream());
        let touched: Vec<bool> = (0..spec.frames)
            .map(|t| (0..spec.features).any(|f| shorted[t * spec.features + f] != base[t * spec.features + f]))
            .collect();
        let mut run = 0;
        let mut runs = 0;
        for &hit in touched.iter().chain([false].iter()) {
            if hit {
                run += 1;
            } else {
                if run > 0 {
                    runs += 1;
                }
                assert!(run <= 3, "burst of {run} frames");
                run = 0;
            }
        }
        assert!((spec.burst_count_min..=spec.burst_count_max).contains(&runs));
    }
}

#[test]
fn modulation_has_no_fast_components() {
    let spec = CorpusSpec::default();
    let t_len = spec.frames;
    // bins above this index correspond to periods shorter than 40 frames
    let cutoff = (t_len as f64 / spec.mod_period_min).ceil() as usize + 1;
    for seed in 0..50 {
        let gain = modulation_gain(&spec, &mut SplitRng::new(seed).stream());
        let mean = gain.iter().sum::<f64>() / t_len as f64;
        let hann = |t: usize| 0.5 - 0.5 * (TAU * t as f64 / (t_len - 1) as f64).cos();
        let power: Vec<f64> = (0..=t_len / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, g) in gain.iter().enumerate() {
                    let w = hann(t) * (g - mean);
                    let a = TAU * (k * t) as f64 / t_len as f64;
                    re += w * a.cos();
                    im -= w * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let total: f64 = power.iter().sum();
        let fast: f64 = power[cutoff + 1..].iter().sum();
        assert!(fast / total < 0.01, "seed {seed}: {:.4} of power above cutoff", fast / total);
    }
}

#[test]
fn file_round_trip_and_size() {
    let spec = small_spec(23, 2);
    let corpus = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.spfb");
    write_corpus(&corpus, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), spec.file_size());
    assert_eq!(bytes.len(), 18 + 23 * (6 + 200 * 16 * 4));
    let back = read_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(back.encode().unwrap(), bytes);
}

#[test]
fn file_errors_are_named() {
    let bytes = generate(&small_spec(3, 2)).unwrap().encode().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Corpus::decode(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Corpus::decode(&bad), Err(Error::VersionMismatch { found: 9, .. })));
    assert!(matches!(Corpus::decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    assert!(matches!(Corpus::decode(&bytes[..3]), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(Corpus::decode(&bad), Err(Error::Malformed(_))));
    let mut bad = bytes.clone();
    bad[18 + 5] = 7;
    assert!(matches!(Corpus::decode(&bad), Err(Error::Malformed(_))));
}

#[test]
fn batch_stacks_records() {
    let corpus = generate(&small_spec(4, 3)).unwrap();
    let b = corpus.batch(&[2, 0]);
    assert_eq!(b.shape(), &[2, 200, 16]);
    assert_eq!(&b.data()[..3200], corpus.records[2].features.data());
}

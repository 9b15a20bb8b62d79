use msa_core::data::{
    generate_synthetic, generate_synthetic_with_latents, load_archive, parse_archive, write_archive, ArchiveRecord, FeatureArchive,
    SynthSpec, UtteranceSample, CLS_ID,
};
use msa_core::Matrix;
use proptest::prelude::*;

fn labels(a: &FeatureArchive) -> Vec<f64> {
    a.records().iter().map(|r| r.sample.label).collect()
}

#[test]
fn generator_label_distribution() {
    let a = generate_synthetic(7, 64, &SynthSpec::default()).unwrap();
    let y = labels(&a);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((-1.0..=1.0).contains(&mean), "mean {mean}");
    assert!(min <= -2.0, "min {min}");
    assert!(max >= 2.0, "max {max}");
    assert!(y.iter().all(|v| (-3.0..=3.0).contains(v)));
}

/// Least squares by the normal equations and Gauss-Jordan elimination.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * t;
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        for v in &mut a[c] {
            *v /= pivot;
        }
        for r in 0..d {
            if r != c {
                let f = a[r][c];
                let pivot_row = a[c].clone();
                for (v, p) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    a.iter().map(|r| r[d]).collect()
}

#[test]
fn labels_are_linearly_recoverable_from_latents() {
    let data = generate_synthetic_with_latents(42, 64, &SynthSpec::default()).unwrap();
    let train: Vec<usize> = (0..data.archive.records().len()).filter(|&i| data.archive.records()[i].split == "train").collect();
    let x: Vec<Vec<f64>> = train.iter().map(|&i| data.latents[i].iter().cloned().chain([1.0]).collect()).collect();
    let y: Vec<f64> = train.iter().map(|&i| data.archive.records()[i].sample.label).collect();
    let w = least_squares(&x, &y);
    let mae = x.iter().zip(&y).map(|(r, t)| (r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - t).abs()).sum::<f64>() / y.len() as f64;
    assert!(mae < 0.2, "probe MAE {mae}");
}

#[test]
fn archive_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { d_v: 3, d_a: 4, vocab: 50, max_text_len: 6, max_frames: 4, noise: 0.3 };
    let a = generate_synthetic(42, 16, &spec).unwrap();
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    write_archive(&a, &p1).unwrap();
    let loaded = load_archive(&p1).unwrap();
    write_archive(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.manifest.d_v, 3);
    assert_eq!(loaded.manifest.splits["train"], 16);
}

#[test]
fn shipped_example_archive_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/example_archive.jsonl");
    let a = load_archive(std::path::Path::new(path)).unwrap();
    assert_eq!((a.manifest.d_v, a.manifest.d_a), (8, 8));
    for split in ["train", "valid", "test"] {
        assert!(!a.split(split).is_empty());
    }
}

fn record_strategy() -> impl Strategy<Value = ArchiveRecord> {
    (
        proptest::collection::vec(2usize..30, 0..5),
        1usize..4,
        1usize..4,
        proptest::collection::vec(-1e6f64..1e6, 24),
        -3.0f64..=3.0,
        any::<bool>(),
        0usize..3,
    )
        .prop_map(|(rest, tv, ta, vals, label, with_text, split)| {
            let visual = Matrix::from_vec(tv, 2, vals[..tv * 2].to_vec());
            let audio = Matrix::from_vec(ta, 3, vals[12..12 + ta * 3].to_vec());
            ArchiveRecord {
                split: ["train", "valid", "test"][split].to_string(),
                sample: UtteranceSample {
                    id: String::new(),
                    tokens: std::iter::once(CLS_ID).chain(rest).collect(),
                    text: with_text.then(|| "a \"quoted\" line".to_string()),
                    visual,
                    audio,
                    label,
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn archives_round_trip_through_text(records in proptest::collection::vec(record_strategy(), 1..6)) {
        let records: Vec<ArchiveRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.sample.id = format!("r{i}");
                r
            })
            .collect();
        let a = FeatureArchive::new(2, 3, 30, records).unwrap();
        let text = a.to_jsonl().unwrap();
        let b = parse_archive(&text).unwrap();
        prop_assert_eq!(b.records(), a.records());
        prop_assert_eq!(b.to_jsonl().unwrap(), text);
    }
}

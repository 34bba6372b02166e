mod common;

use common::{oracle_ced, oracle_gte, oracle_nme, random_points, rel_diff};
use facevox::geometry::{BBox, LandmarkSet};
use facevox::metrics::{
    ced_curve, gte, linear_thresholds, nme, pose_bucketed_nme, BucketAverage, Interocular, MetricReport,
    SampleMetrics, YawBucket,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(points: Vec<[f64; 3]>) -> LandmarkSet {
    LandmarkSet::new(points, "custom").unwrap()
}

#[test]
fn gte_and_nme_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let gt = random_points(&mut rng, 12, -50.0, 50.0);
        let pred = random_points(&mut rng, 12, -50.0, 50.0);
        let (g, p) = (set(gt.clone()), set(pred.clone()));
        let a = gte(&p, &g, 3, 7, Interocular::ThreeD).unwrap();
        assert!(rel_diff(a, oracle_gte(&pred, &gt, 3, 7)) < 1e-12);
        let (bw, bh) = (rng.random_range(10.0..90.0), rng.random_range(10.0..90.0));
        let b = nme(&p, &g, &BBox::new(0.0, 0.0, bw, bh).unwrap()).unwrap();
        assert!(rel_diff(b, oracle_nme(&pred, &gt, bw, bh)) < 1e-12);
    }
}

#[test]
fn gte_is_translation_and_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let gt = random_points(&mut rng, 12, -1.0, 1.0);
    let pred = random_points(&mut rng, 12, -1.0, 1.0);
    let base = gte(&set(pred.clone()), &set(gt.clone()), 0, 1, Interocular::ThreeD).unwrap();
    let moved = |pts: &[[f64; 3]], s: f64| -> LandmarkSet {
        set(pts.iter().map(|p| [s * p[0] + 3.0, s * p[1] - 7.0, s * p[2] + 0.5]).collect())
    };
    let other = gte(&moved(&pred, 4.0), &moved(&gt, 4.0), 0, 1, Interocular::ThreeD).unwrap();
    assert!(rel_diff(base, other) < 1e-12);
}

#[test]
fn two_d_interocular_ignores_depth_gap() {
    let gt = set(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]]);
    let pred = set(vec![[1.0, 0.0, 0.0], [4.0, 0.0, 4.0]]);
    assert!((gte(&pred, &gt, 0, 1, Interocular::ThreeD).unwrap() - 20.0).abs() < 1e-12);
    assert!((gte(&pred, &gt, 0, 1, Interocular::TwoD).unwrap() - 100.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mismatched_counts_are_rejected() {
    let a = set(vec![[0.0; 3], [1.0; 3]]);
    let b = set(vec![[0.0; 3], [1.0; 3], [2.0; 3]]);
    assert!(gte(&a, &b, 0, 1, Interocular::ThreeD).is_err());
    assert!(nme(&a, &b, &BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()).is_err());
}

#[test]
fn ced_matches_oracle_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let t = linear_thresholds(10.0, 101);
    assert_eq!(t.len(), 101);
    assert_eq!((t[0], t[100]), (0.0, 10.0));
    for _ in 0..100 {
        let errors: Vec<f64> = (0..rng.random_range(1..50)).map(|_| rng.random_range(0.0..12.0)).collect();
        let c = ced_curve(&errors, &t).unwrap();
        assert_eq!(c, oracle_ced(&errors, &t));
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
    }
    assert!(ced_curve(&[], &t).is_err());
    assert!(ced_curve(&[1.0], &[2.0, 1.0]).is_err());
}

#[test]
fn yaw_buckets_split_at_boundaries() {
    assert_eq!(YawBucket::from_degrees(-12.0), YawBucket::Low);
    assert_eq!(YawBucket::from_degrees(30.0), YawBucket::Low);
    assert_eq!(YawBucket::from_degrees(30.5), YawBucket::Mid);
    assert_eq!(YawBucket::from_degrees(-75.0), YawBucket::High);
    assert_eq!("30-60".parse::<YawBucket>().unwrap(), YawBucket::Mid);
    assert!("10-20".parse::<YawBucket>().is_err());
}

#[test]
fn pose_table_averages() {
    let items = [
        (Some(YawBucket::Low), 2.0),
        (Some(YawBucket::Low), 4.0),
        (Some(YawBucket::Mid), 6.0),
        (None, 100.0),
    ];
    let t = pose_bucketed_nme(&items, BucketAverage::BucketMeans).unwrap();
    assert_eq!(t.buckets, [Some(3.0), Some(6.0), None]);
    assert!((t.mean - 4.5).abs() < 1e-12);
    assert!((t.std - 1.5).abs() < 1e-12);
    let all = pose_bucketed_nme(&items, BucketAverage::AllSamples).unwrap();
    assert!((all.mean - 4.0).abs() < 1e-12);
}

#[test]
fn report_text_lists_samples_and_absent_buckets() {
    let per = vec![
        SampleMetrics { sample_id: "a".into(), gte: 1.0, nme: 0.5, yaw_bucket: Some(YawBucket::Low) },
        SampleMetrics { sample_id: "b".into(), gte: 3.0, nme: 1.5, yaw_bucket: Some(YawBucket::Mid) },
    ];
    let r = MetricReport::build(per, &linear_thresholds(5.0, 6), BucketAverage::BucketMeans).unwrap();
    assert_eq!((r.gte_mean, r.gte_std), (2.0, 1.0));
    let text = r.to_text();
    assert!(text.lines().any(|l| l.starts_with('a')));
    assert!(text.contains("absent"));
    assert_eq!(r.ced_text().lines().filter(|l| !l.starts_with('#')).count(), 6);
}

//! Landmark localisation metrics: interocular-normalised 3D error (GTE),
//! bbox-normalised 2D error (NME), cumulative error curves, and
//! pose-bucketed NME.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::geometry::{BBox, LandmarkSet, Point3};

fn dist3(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Which distance the GTE normaliser uses between the outer eye corners.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interocular {
    #[default]
    ThreeD,
    TwoD,
}

fn check_pair(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "prediction has {} landmarks, ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean 3D point error divided by the ground-truth outer-eye distance, in
/// percent.
pub fn gte(pred: &LandmarkSet, gt: &LandmarkSet, left_eye: usize, right_eye: usize, norm: Interocular) -> Result<f64> {
    check_pair(pred, gt)?;
    let g = gt.points();
    if left_eye >= g.len() || right_eye >= g.len() {
        return Err(invalid(format!("eye index out of range for {} landmarks", g.len())));
    }
    let d = match norm {
        Interocular::ThreeD => dist3(&g[left_eye], &g[right_eye]),
        Interocular::TwoD => dist2(&g[left_eye], &g[right_eye]),
    };
    if !(d > 0.0) {
        return Err(invalid("outer eye corners coincide; interocular distance is zero"));
    }
    let mean = pred.points().iter().zip(g).map(|(p, q)| dist3(p, q)).sum::<f64>() / g.len() as f64;
    Ok(100.0 * mean / d)
}

/// Looks the eye-corner indices up in the ground truth's scheme.
pub fn gte_for_scheme(pred: &LandmarkSet, gt: &LandmarkSet, norm: Interocular) -> Result<f64> {
    let s = crate::scheme::lookup(gt.scheme())?;
    gte(pred, gt, s.left_eye_outer, s.right_eye_outer, norm)
}

/// Mean 2D point error divided by `sqrt(width * height)` of `bbox`, in
/// percent. Depth is ignored.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, bbox: &BBox) -> Result<f64> {
    check_pair(pred, gt)?;
    let area = bbox.width * bbox.height;
    if !(area > 0.0) {
        return Err(invalid("bbox has zero area"));
    }
    let mean = pred.points().iter().zip(gt.points()).map(|(p, q)| dist2(p, q)).sum::<f64>() / gt.len() as f64;
    Ok(100.0 * mean / area.sqrt())
}

/// Fraction of `errors` at or below each threshold.
pub fn ced_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(invalid("CED needs at least one error value"));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("CED thresholds must be sorted ascending"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| sorted.partition_point(|e| e <= t) as f64 / n)
        .collect())
}

/// `count` evenly spaced thresholds from 0 to `max` inclusive.
pub fn linear_thresholds(max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..count).map(|i| max * i as f64 / (count - 1) as f64).collect(),
    }
}

/// Absolute-yaw label carried by dataset metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum YawBucket {
    Low,
    Mid,
    High,
}

impl YawBucket {
    pub const ALL: [YawBucket; 3] = [YawBucket::Low, YawBucket::Mid, YawBucket::High];

    pub fn label(self) -> &'static str {
        match self {
            YawBucket::Low => "0-30",
            YawBucket::Mid => "30-60",
            YawBucket::High => "60-90",
        }
    }

    /// Boundary angles belong to the lower bucket.
    pub fn from_degrees(yaw: f64) -> Self {
        let a = yaw.abs();
        if a <= 30.0 {
            YawBucket::Low
        } else if a <= 60.0 {
            YawBucket::Mid
        } else {
            YawBucket::High
        }
    }
}

impl fmt::Display for YawBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for YawBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        YawBucket::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| invalid(format!("unknown yaw bucket `{s}` (expected 0-30, 30-60 or 60-90)")))
    }
}

/// How the overall mean of a pose table is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BucketAverage {
    /// Mean and std over the per-bucket means that are present.
    #[default]
    BucketMeans,
    /// Mean and std over all samples, ignoring buckets.
    AllSamples,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseTable {
    /// Per-bucket mean NME in [`YawBucket::ALL`] order; `None` if empty.
    pub buckets: [Option<f64>; 3],
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Samples without a label are skipped; errors if none are labelled.
pub fn pose_bucketed_nme(items: &[(Option<YawBucket>, f64)], avg: BucketAverage) -> Result<PoseTable> {
    let mut sums = [(0.0, 0usize); 3];
    let mut all = Vec::new();
    for (b, e) in items {
        if let Some(b) = b {
            let slot = &mut sums[*b as usize];
            slot.0 += e;
            slot.1 += 1;
            all.push(*e);
        }
    }
    if all.is_empty() {
        return Err(invalid("no samples carry a yaw bucket"));
    }
    let buckets = sums.map(|(s, c)| (c > 0).then(|| s / c as f64));
    let (mean, std) = match avg {
        BucketAverage::BucketMeans => mean_std(&buckets.iter().flatten().copied().collect::<Vec<_>>()),
        BucketAverage::AllSamples => mean_std(&all),
    };
    Ok(PoseTable { buckets, mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub gte: f64,
    pub nme: f64,
    pub yaw_bucket: Option<YawBucket>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub gte_mean: f64,
    pub gte_std: f64,
    pub nme_mean: f64,
    pub nme_std: f64,
    /// `(threshold, fraction)` pairs on the per-sample GTE.
    pub ced: Vec<(f64, f64)>,
    pub pose: Option<PoseTable>,
}

impl MetricReport {
    pub fn build(per_sample: Vec<SampleMetrics>, thresholds: &[f64], avg: BucketAverage) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(invalid("cannot build a report from zero samples"));
        }
        let g: Vec<f64> = per_sample.iter().map(|s| s.gte).collect();
        let n: Vec<f64> = per_sample.iter().map(|s| s.nme).collect();
        let (gte_mean, gte_std) = mean_std(&g);
        let (nme_mean, nme_std) = mean_std(&n);
        let fr = ced_curve(&g, thresholds)?;
        let labelled: Vec<(Option<YawBucket>, f64)> = per_sample.iter().map(|s| (s.yaw_bucket, s.nme)).collect();
        let pose = if labelled.iter().any(|(b, _)| b.is_some()) {
            Some(pose_bucketed_nme(&labelled, avg)?)
        } else {
            None
        };
        Ok(Self {
            per_sample,
            gte_mean,
            gte_std,
            nme_mean,
            nme_std,
            ced: thresholds.iter().copied().zip(fr).collect(),
            pose,
        })
    }

    /// One `sample` record per line, then `#`-prefixed aggregate lines.
    pub fn to_text(&self) -> String {
        let mut t = String::from("# sample_id gte_percent nme_percent yaw_bucket\n");
        for s in &self.per_sample {
            let yb = s.yaw_bucket.map_or("-", YawBucket::label);
            let _ = writeln!(t, "{} {} {} {}", s.sample_id, s.gte, s.nme, yb);
        }
        let _ = writeln!(t, "# n={}", self.per_sample.len());
        let _ = writeln!(t, "# gte_mean={} gte_std={}", self.gte_mean, self.gte_std);
        let _ = writeln!(t, "# nme_mean={} nme_std={}", self.nme_mean, self.nme_std);
        if let Some(p) = &self.pose {
            for (b, v) in YawBucket::ALL.iter().zip(&p.buckets) {
                match v {
                    Some(v) => {
                        let _ = writeln!(t, "# nme_yaw_{}={}", b.label(), v);
                    }
                    None => {
                        let _ = writeln!(t, "# nme_yaw_{}=absent", b.label());
                    }
                }
            }
            let _ = writeln!(t, "# nme_pose_mean={} nme_pose_std={}", p.mean, p.std);
        }
        t
    }

    /// Two columns: threshold (GTE percent) and fraction of samples.
    pub fn ced_text(&self) -> String {
        let mut t = String::from("# threshold fraction\n");
        for (th, f) in &self.ced {
            let _ = writeln!(t, "{th} {f}");
        }
        t
    }
}

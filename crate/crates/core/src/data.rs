//! Samples, the on-disk dataset layout, and a synthetic posed-face
//! generator.
//!
//! Layout of a dataset directory: `<id>.img` (binary PPM), `<id>.pts3`
//! (landmark text), and an optional `<id>.meta` with `key=value` lines
//! (`bbox=x0 y0 width height`, `yaw_bucket=0-30|30-60|60-90`).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::fsutil::atomic_write;
use crate::geometry::{normalize_depth, BBox, LandmarkSet, Point3};
use crate::imaging::ImageTensor;
use crate::metrics::YawBucket;
use crate::scheme;
use crate::training::TrainItem;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: ImageTensor,
    /// Image pixels with zero-mean depth.
    pub landmarks: LandmarkSet,
    pub bbox: BBox,
    pub yaw_bucket: Option<YawBucket>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if !self.image.is_finite() {
            return Err(invalid(format!("sample {}: non-finite image", self.sample_id)));
        }
        let guard = self.bbox.expanded(1.5);
        if let Some(n) = self.landmarks.points().iter().position(|p| !guard.contains(p[0], p[1])) {
            return Err(invalid(format!("sample {}: landmark {n} far outside its bbox", self.sample_id)));
        }
        Ok(())
    }

    /// Crops the bbox out of the image and resizes it to `input_size`,
    /// carrying the landmarks into the crop's pixel frame.
    pub fn to_train_item(&self, input_size: (usize, usize)) -> Result<TrainItem> {
        let frame = InputFrame {
            bbox: self.bbox,
            input_size,
        };
        Ok(TrainItem {
            image: frame.crop(&self.image),
            landmarks: frame.to_input(&self.landmarks)?,
        })
    }
}

/// Affine relation between an image's bbox and the network input crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputFrame {
    pub bbox: BBox,
    /// `(height, width)`
    pub input_size: (usize, usize),
}

impl InputFrame {
    fn scales(&self) -> (f64, f64) {
        (
            self.input_size.1 as f64 / self.bbox.width,
            self.input_size.0 as f64 / self.bbox.height,
        )
    }

    pub fn to_input(&self, lm: &LandmarkSet) -> Result<LandmarkSet> {
        let (sx, sy) = self.scales();
        let pts = lm
            .points()
            .iter()
            .map(|p| [(p[0] - self.bbox.x0) * sx, (p[1] - self.bbox.y0) * sy, p[2] * sx])
            .collect();
        normalize_depth(&LandmarkSet::new(pts, lm.scheme())?)
    }

    pub fn from_input(&self, lm: &LandmarkSet) -> Result<LandmarkSet> {
        let (sx, sy) = self.scales();
        let pts = lm
            .points()
            .iter()
            .map(|p| [p[0] / sx + self.bbox.x0, p[1] / sy + self.bbox.y0, p[2] / sx])
            .collect();
        LandmarkSet::new(pts, lm.scheme())
    }

    pub fn crop(&self, image: &ImageTensor) -> ImageTensor {
        let (h, w) = self.input_size;
        let full = self.bbox == BBox { x0: 0.0, y0: 0.0, width: w as f64, height: h as f64 };
        if full && image.width() == w && image.height() == h {
            return image.clone();
        }
        let (sx, sy) = self.scales();
        let mut out = ImageTensor::zeros(w, h);
        for v in 0..h {
            for u in 0..w {
                let x = (u as f64 + 0.5) / sx + self.bbox.x0;
                let y = (v as f64 + 0.5) / sy + self.bbox.y0;
                for c in 0..ImageTensor::CHANNELS {
                    out.set(c, u, v, image.sample(c, x - 0.5, y - 0.5));
                }
            }
        }
        out
    }
}

fn meta_text(s: &Sample) -> String {
    let b = s.bbox;
    let mut t = format!("bbox={} {} {} {}\n", b.x0, b.y0, b.width, b.height);
    if let Some(y) = s.yaw_bucket {
        let _ = writeln!(t, "yaw_bucket={}", y.label());
    }
    t
}

pub fn save_sample(root: &Path, s: &Sample) -> Result<()> {
    s.image.save(&root.join(format!("{}.img", s.sample_id)))?;
    s.landmarks.write(&root.join(format!("{}.pts3", s.sample_id)))?;
    atomic_write(&root.join(format!("{}.meta", s.sample_id)), meta_text(s).as_bytes())
}

pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    samples.iter().try_for_each(|s| save_sample(root, s))
}

/// Lazily reads samples from a dataset directory in lexicographic id order.
pub struct DatasetReader {
    root: PathBuf,
    ids: std::vec::IntoIter<String>,
    scheme: Option<String>,
}

impl DatasetReader {
    /// Requires every sample to use `scheme`.
    pub fn expect_scheme(mut self, scheme: impl Into<String>) -> Self {
        self.scheme = Some(scheme.into());
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() == 0
    }

    fn read(&self, id: &str) -> Result<Sample> {
        let pts_path = self.root.join(format!("{id}.pts3"));
        let landmarks = LandmarkSet::read(&pts_path)?;
        if let Some(want) = &self.scheme {
            if landmarks.scheme() != want {
                return Err(Error::Parse {
                    path: pts_path,
                    msg: format!("scheme {} does not match expected {want}", landmarks.scheme()),
                });
            }
        }
        let img_path = self.root.join(format!("{id}.img"));
        let image = ImageTensor::load(&img_path).map_err(|e| Error::Parse {
            path: img_path.clone(),
            msg: e.to_string(),
        })?;
        let meta_path = self.root.join(format!("{id}.meta"));
        let mut bbox = None;
        let mut yaw_bucket = None;
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path)?;
            let err = |msg: String| Error::Parse {
                path: meta_path.clone(),
                msg,
            };
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
                match k.trim() {
                    "bbox" => {
                        let vals: Vec<f64> = v
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| err(format!("bbox: {e}")))?;
                        if vals.len() != 4 {
                            return Err(err("bbox needs x0 y0 width height".into()));
                        }
                        bbox = Some(BBox::new(vals[0], vals[1], vals[2], vals[3]).map_err(|e| err(e.to_string()))?);
                    }
                    "yaw_bucket" => yaw_bucket = Some(v.trim().parse().map_err(|e: Error| err(e.to_string()))?),
                    other => return Err(err(format!("unknown key `{other}`"))),
                }
            }
        }
        let bbox = match bbox {
            Some(b) => b,
            None => BBox::enclosing(&landmarks)?,
        };
        let sample = Sample {
            sample_id: id.to_string(),
            image,
            landmarks,
            bbox,
            yaw_bucket,
        };
        sample.validate().map_err(|e| Error::Parse {
            path: pts_path,
            msg: e.to_string(),
        })?;
        Ok(sample)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.next()?;
        Some(self.read(&id))
    }
}

/// Opens a dataset directory. Sample ids are the stems of `.pts3` files.
pub fn load_dataset(root: &Path) -> Result<DatasetReader> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pts3") {
            if let Some(stem) = path.file_stem() {
                ids.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    Ok(DatasetReader {
        root: root.to_path_buf(),
        ids: ids.into_iter().collect::<Vec<_>>().into_iter(),
        scheme: None,
    })
}

/// Canonical face shape for a scheme in a unit frame: x right, y down, z
/// toward the viewer, centred with zero-mean depth.
pub fn template(scheme_id: &str) -> Result<Vec<Point3>> {
    let pts = match scheme_id {
        scheme::FACE12 => vec![
            [-0.50, -0.20, 0.00],
            [-0.18, -0.20, 0.12],
            [0.18, -0.20, 0.12],
            [0.50, -0.20, 0.00],
            [0.00, 0.10, 0.50],
            [-0.25, 0.40, 0.10],
            [0.00, 0.33, 0.25],
            [0.25, 0.40, 0.10],
            [0.00, 0.48, 0.20],
            [-0.60, 0.45, -0.30],
            [0.00, 0.75, 0.05],
            [0.60, 0.45, -0.30],
        ],
        scheme::FACE68 => face68(),
        scheme::FACE66 => face68()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 60 && *i != 64)
            .map(|(_, p)| p)
            .collect(),
        other => return Err(Error::UnknownScheme(other.to_string())),
    };
    let mean_z = pts.iter().map(|p| p[2]).sum::<f64>() / pts.len() as f64;
    Ok(pts.into_iter().map(|[x, y, z]| [x, y, z - mean_z]).collect())
}

fn face68() -> Vec<Point3> {
    let mut p = Vec::with_capacity(68);
    // jaw, temple to temple through the chin
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        p.push([-0.72 * t.cos(), -0.1 + 0.85 * t.sin(), -0.45 + 0.45 * t.sin()]);
    }
    // brows, outer to inner on the left, inner to outer on the right
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let f = i as f64 / 4.0;
            let f = if side < 0.0 { 1.0 - f } else { f };
            let x = side * (0.12 + 0.5 * f);
            p.push([x, -0.42 - 0.06 * (PI * f).sin(), 0.1]);
        }
    }
    for i in 0..4 {
        let f = i as f64 / 3.0;
        p.push([0.0, -0.25 + 0.37 * f, 0.2 + 0.35 * f]);
    }
    for i in 0..5 {
        let x = -0.16 + 0.08 * i as f64;
        p.push([x, 0.2, 0.38 - 0.5 * x.abs()]);
    }
    // eyes: outer corner, two upper, inner corner, two lower; the right eye
    // starts at its inner corner
    let eye = |cx: f64, outer_sign: f64, a: f64| -> Point3 {
        [cx + outer_sign * 0.15 * a.cos(), -0.2 - 0.05 * a.sin(), 0.05]
    };
    for k in 0..6 {
        let a = PI * k as f64 / 3.0;
        p.push(eye(-0.33, -1.0, a));
    }
    for k in 0..6 {
        let a = PI + PI * k as f64 / 3.0;
        p.push(eye(0.33, 1.0, -a));
    }
    for k in 0..12 {
        let a = PI * k as f64 / 6.0;
        p.push([-0.28 * a.cos(), 0.45 - 0.1 * a.sin(), 0.2]);
    }
    for k in 0..8 {
        let a = PI * k as f64 / 4.0;
        p.push([-0.2 * a.cos(), 0.45 - 0.04 * a.sin(), 0.22]);
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderStyle {
    /// One Gaussian blob per landmark.
    Blobs,
    /// Blobs plus faint edges between consecutive landmarks.
    BlobsAndEdges,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub scheme: String,
    pub n_samples: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Symmetric ranges in degrees.
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Std-dev of per-point Gaussian shape noise, template units.
    pub deformation: f64,
    /// Face width in pixels relative to the image side.
    pub face_scale: f64,
    /// Max translation of the face centre, pixels.
    pub jitter_px: f64,
    pub blob_sigma_px: f64,
    pub render: RenderStyle,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn toy(n_samples: usize, seed: u64) -> Self {
        Self {
            scheme: scheme::FACE12.to_string(),
            n_samples,
            image_size: 64,
            yaw_deg: 40.0,
            pitch_deg: 15.0,
            roll_deg: 15.0,
            deformation: 0.03,
            face_scale: 0.4,
            jitter_px: 3.0,
            blob_sigma_px: 1.5,
            render: RenderStyle::BlobsAndEdges,
            seed,
        }
    }
}

fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    // roll (about z) * pitch (about x) * yaw (about y)
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&rx, &ry))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Places a template in a `size x size` image: rotate, scale by
/// `scale_px`, translate to `center`, orthographic projection, zero-mean z.
pub fn place_shape(shape: &[Point3], rot: &[[f64; 3]; 3], scale_px: f64, center: [f64; 2]) -> Vec<Point3> {
    let mut out: Vec<Point3> = shape
        .iter()
        .map(|p| {
            let q: Vec<f64> = (0..3).map(|i| (0..3).map(|k| rot[i][k] * p[k]).sum()).collect();
            [center[0] + scale_px * q[0], center[1] + scale_px * q[1], scale_px * q[2]]
        })
        .collect();
    let mean_z = out.iter().map(|p| p[2]).sum::<f64>() / out.len() as f64;
    for p in &mut out {
        p[2] -= mean_z;
    }
    out
}

/// Renders landmark cues: red encodes landmark identity, green encodes
/// depth, blue carries blobs and (optionally) edges.
pub fn render(points: &[Point3], size: usize, spec: &SyntheticSpec) -> ImageTensor {
    let mut img = ImageTensor::zeros(size, size);
    let n = points.len();
    let depth_span = 0.6 * spec.face_scale * size as f64;
    let inv = 1.0 / (2.0 * spec.blob_sigma_px * spec.blob_sigma_px);
    let reach = (3.0 * spec.blob_sigma_px).ceil() as i64;
    let mut paint = |c: usize, u: i64, v: i64, val: f64| {
        if u >= 0 && v >= 0 && (u as usize) < size && (v as usize) < size {
            let cur = img.get(c, u as usize, v as usize);
            if val > cur {
                img.set(c, u as usize, v as usize, val);
            }
        }
    };
    if spec.render == RenderStyle::BlobsAndEdges {
        for pair in points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let steps = (len * 2.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = a[0] + t * (b[0] - a[0]);
                let y = a[1] + t * (b[1] - a[1]);
                paint(2, (x - 0.5).round() as i64, (y - 0.5).round() as i64, 0.35);
            }
        }
    }
    for (i, p) in points.iter().enumerate() {
        let identity = 0.3 + 0.7 * (i + 1) as f64 / n as f64;
        let depth = (0.5 + p[2] / depth_span).clamp(0.05, 1.0);
        let (cu, cv) = ((p[0] - 0.5).round() as i64, (p[1] - 0.5).round() as i64);
        for v in cv - reach..=cv + reach {
            for u in cu - reach..=cu + reach {
                let d2 = (u as f64 + 0.5 - p[0]).powi(2) + (v as f64 + 0.5 - p[1]).powi(2);
                let w = (-d2 * inv).exp();
                paint(0, u, v, identity * w);
                paint(1, u, v, depth * w);
                paint(2, u, v, w);
            }
        }
    }
    img
}

/// Deterministic synthetic dataset: randomly posed, mildly deformed
/// templates, orthographically projected and rendered.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let base = template(&spec.scheme)?;
    if base.len() < 4 {
        return Err(invalid("synthetic shapes need at least 4 landmarks"));
    }
    if spec.image_size == 0 || !(spec.face_scale > 0.0) {
        return Err(invalid("image_size and face_scale must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size as f64;
    let uniform = |r: &mut ChaCha8Rng, half: f64| if half > 0.0 { r.random_range(-half..=half) } else { 0.0 };
    let width = spec.n_samples.max(1).to_string().len();
    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let yaw = uniform(&mut rng, spec.yaw_deg);
        let pitch = uniform(&mut rng, spec.pitch_deg);
        let roll = uniform(&mut rng, spec.roll_deg);
        let center = [
            size / 2.0 + uniform(&mut rng, spec.jitter_px),
            size / 2.0 + uniform(&mut rng, spec.jitter_px),
        ];
        let shape: Vec<Point3> = base
            .iter()
            .map(|p| {
                let mut q = *p;
                if spec.deformation > 0.0 {
                    for v in &mut q {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += spec.deformation * z;
                    }
                }
                q
            })
            .collect();
        let rot = rotation(yaw.to_radians(), pitch.to_radians(), roll.to_radians());
        let pts = place_shape(&shape, &rot, spec.face_scale * size, center);
        let image = render(&pts, spec.image_size, spec);
        let landmarks = LandmarkSet::new(pts, spec.scheme.clone())?;
        let sample = Sample {
            sample_id: format!("syn{:0width$}", i),
            image,
            landmarks,
            bbox: BBox::new(0.0, 0.0, size, size)?,
            yaw_bucket: Some(YawBucket::from_degrees(yaw)),
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

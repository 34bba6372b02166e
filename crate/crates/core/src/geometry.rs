//! Landmark sets, image-to-volume mapping, depth normalization, and
//! landmark-aware augmentation.
//!
//! Rotation convention: a positive angle turns the picture counter-clockwise
//! as displayed (x right, y down). A point right of centre moves up.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fsutil::atomic_write;
use crate::imaging::ImageTensor;
use crate::scheme;

pub type Point3 = [f64; 3];

/// Ordered landmarks tagged with their ordering scheme.
///
/// The same type carries image-frame points (pixels, zero-mean depth) and
/// volume-frame points (voxel units); the frame is implied by context.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point3>,
    scheme: String,
}

impl LandmarkSet {
    /// Validates non-emptiness and finiteness; for registered schemes the
    /// point count must match.
    pub fn new(points: Vec<Point3>, scheme: impl Into<String>) -> Result<Self> {
        let scheme = scheme.into();
        if points.is_empty() {
            return Err(invalid("landmark set is empty"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("landmark set has non-finite coordinates"));
        }
        if let Ok(s) = scheme::lookup(&scheme) {
            if s.n_points != points.len() {
                return Err(invalid(format!(
                    "scheme {scheme} expects {} points, got {}",
                    s.n_points,
                    points.len()
                )));
            }
        }
        Ok(Self { points, scheme })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(x1, y1, z1, ..., xN, yN, zN)`
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], scheme: impl Into<String>) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(invalid(format!("coordinate vector length {} is not 3N", flat.len())));
        }
        Self::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(), scheme)
    }

    fn with_points(&self, points: Vec<Point3>) -> Self {
        Self {
            points,
            scheme: self.scheme.clone(),
        }
    }

    /// Parses the text format: one `x y z` line per landmark, optional
    /// `# scheme=<id> n=<N>` header.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let mut scheme = String::from("custom");
        let mut declared_n = None;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("scheme=") {
                        scheme = v.to_string();
                    } else if let Some(v) = field.strip_prefix("n=") {
                        declared_n = Some(v.parse::<usize>().map_err(|e| err(format!("bad n: {e}")))?);
                    }
                }
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(err(format!("line {}: expected 3 values, got {}", lineno + 1, vals.len())));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        if let Some(n) = declared_n {
            if n != points.len() {
                return Err(err(format!("header declares {n} points, file has {}", points.len())));
            }
        }
        Self::new(points, scheme).map_err(|e| err(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# scheme={} n={}\n", self.scheme, self.points.len());
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

/// Subtracts the mean depth so z has zero mean; x and y are untouched.
pub fn normalize_depth(landmarks: &LandmarkSet) -> Result<LandmarkSet> {
    if landmarks.is_empty() {
        return Err(invalid("empty landmark set"));
    }
    let n = landmarks.len() as f64;
    let mean = landmarks.points.iter().map(|p| p[2]).sum::<f64>() / n;
    Ok(landmarks.with_points(
        landmarks
            .points
            .iter()
            .map(|&[x, y, z]| [x, y, z - mean])
            .collect(),
    ))
}

/// Axis-aligned 2D box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(invalid(format!("bbox must have positive area, got {width}x{height}")));
        }
        Ok(Self {
            x0,
            y0,
            width,
            height,
        })
    }

    /// Tight box around the 2D projection of the landmarks.
    pub fn enclosing(landmarks: &LandmarkSet) -> Result<Self> {
        let (mut lx, mut ly) = (f64::INFINITY, f64::INFINITY);
        let (mut hx, mut hy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in landmarks.points() {
            lx = lx.min(p[0]);
            ly = ly.min(p[1]);
            hx = hx.max(p[0]);
            hy = hy.max(p[1]);
        }
        Self::new(lx, ly, hx - lx, hy - ly)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn expanded(&self, factor: f64) -> Self {
        let dw = self.width * (factor - 1.0) / 2.0;
        let dh = self.height * (factor - 1.0) / 2.0;
        Self {
            x0: self.x0 - dw,
            y0: self.y0 - dh,
            width: self.width + 2.0 * dw,
            height: self.height + 2.0 * dh,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x0 + self.width && y >= self.y0 && y <= self.y0 + self.height
    }
}

/// Affine map from image pixels (plus raw depth) into a `w x h x d` volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubeMapping {
    pub source_bbox: BBox,
    pub depth_offset: f64,
    pub depth_scale: f64,
    pub target_dims: [usize; 3],
    /// Landmarks outside `source_bbox` grown by this factor are rejected.
    pub expansion: f64,
}

impl CubeMapping {
    pub fn new(source_bbox: BBox, depth_offset: f64, depth_scale: f64, target_dims: [usize; 3]) -> Result<Self> {
        if !(depth_scale > 0.0) {
            return Err(invalid(format!("depth_scale must be positive, got {depth_scale}")));
        }
        if target_dims.contains(&0) {
            return Err(invalid("target dims must be positive"));
        }
        Ok(Self {
            source_bbox,
            depth_offset,
            depth_scale,
            target_dims,
            expansion: 1.5,
        })
    }

    /// Square crop of `bbox` into the volume with depth scaled like x, and
    /// zero depth landing on the middle z-slice.
    pub fn centered(source_bbox: BBox, target_dims: [usize; 3]) -> Result<Self> {
        let scale = target_dims[0] as f64 / source_bbox.width;
        let offset = target_dims[2] as f64 / 2.0 / scale;
        Self::new(source_bbox, offset, scale, target_dims)
    }

    fn sx(&self) -> f64 {
        self.target_dims[0] as f64 / self.source_bbox.width
    }

    fn sy(&self) -> f64 {
        self.target_dims[1] as f64 / self.source_bbox.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappedLandmarks {
    pub landmarks: LandmarkSet,
    /// Set when any coordinate had to be clamped into the volume.
    pub clamped: bool,
}

/// Maps image-frame landmarks into the volume. Coordinates that land
/// outside `[0, dim - 1]` are clamped and flagged.
pub fn map_to_volume(landmarks: &LandmarkSet, mapping: &CubeMapping) -> Result<MappedLandmarks> {
    let guard = mapping.source_bbox.expanded(mapping.expansion);
    let mut clamped = false;
    let mut out = Vec::with_capacity(landmarks.len());
    for (n, p) in landmarks.points().iter().enumerate() {
        if !guard.contains(p[0], p[1]) {
            return Err(invalid(format!(
                "landmark {n} at ({}, {}) lies outside the expanded crop",
                p[0], p[1]
            )));
        }
        let raw = [
            (p[0] - mapping.source_bbox.x0) * mapping.sx(),
            (p[1] - mapping.source_bbox.y0) * mapping.sy(),
            (p[2] + mapping.depth_offset) * mapping.depth_scale,
        ];
        let mut q = [0.0; 3];
        for a in 0..3 {
            let hi = (mapping.target_dims[a] - 1) as f64;
            q[a] = raw[a].clamp(0.0, hi);
            clamped |= q[a] != raw[a];
        }
        out.push(q);
    }
    Ok(MappedLandmarks {
        landmarks: landmarks.with_points(out),
        clamped,
    })
}

/// Inverse of [`map_to_volume`] for unclamped points.
pub fn map_to_image(landmarks: &LandmarkSet, mapping: &CubeMapping) -> LandmarkSet {
    landmarks.with_points(
        landmarks
            .points()
            .iter()
            .map(|p| {
                [
                    p[0] / mapping.sx() + mapping.source_bbox.x0,
                    p[1] / mapping.sy() + mapping.source_bbox.y0,
                    p[2] / mapping.depth_scale - mapping.depth_offset,
                ]
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            flip: false,
            seed: 0,
        }
    }
}

/// Sampling ranges for random augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            scale_min: 0.75,
            scale_max: 1.25,
            flip_probability: 0.5,
        }
    }
}

impl AugmentRanges {
    pub fn sample(&self, seed: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation_deg = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg)
        } else {
            0.0
        };
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        let flip = rng.random::<f64>() < self.flip_probability;
        AugmentParams {
            rotation_deg,
            scale,
            flip,
            seed,
        }
    }
}

/// Forward 2D similarity about `center`, followed by an optional mirror.
fn transform_point(p: [f64; 2], center: [f64; 2], width: f64, params: &AugmentParams) -> [f64; 2] {
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let mut x = center[0] + params.scale * (cos * dx + sin * dy);
    let y = center[1] + params.scale * (-sin * dx + cos * dy);
    if params.flip {
        x = width - x;
    }
    [x, y]
}

/// Rotates, scales and optionally mirrors an image together with its
/// image-frame landmarks. Depth is scaled by the same factor. On a flip the
/// landmark order is permuted so left/right identities survive.
pub fn augment(
    image: &ImageTensor,
    landmarks: &LandmarkSet,
    params: &AugmentParams,
) -> Result<(ImageTensor, LandmarkSet)> {
    if !(params.scale > 0.0) {
        return Err(invalid(format!("augment scale must be positive, got {}", params.scale)));
    }
    let remap = if params.flip {
        Some(scheme::flip_remap(landmarks.scheme())?)
    } else {
        None
    };
    let (w, h) = (image.width(), image.height());
    let center = [w as f64 / 2.0, h as f64 / 2.0];
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();

    let mut out = ImageTensor::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            let mut qx = u as f64 + 0.5;
            let qy = v as f64 + 0.5;
            if params.flip {
                qx = w as f64 - qx;
            }
            let dx = (qx - center[0]) / params.scale;
            let dy = (qy - center[1]) / params.scale;
            let sx = center[0] + cos * dx - sin * dy;
            let sy = center[1] + sin * dx + cos * dy;
            for c in 0..ImageTensor::CHANNELS {
                out.set(c, u, v, image.sample(c, sx - 0.5, sy - 0.5));
            }
        }
    }

    let moved: Vec<Point3> = landmarks
        .points()
        .iter()
        .map(|p| {
            let [x, y] = transform_point([p[0], p[1]], center, w as f64, params);
            [x, y, p[2] * params.scale]
        })
        .collect();
    let points = match remap {
        Some(perm) => perm.iter().map(|&src| moved[src]).collect(),
        None => moved,
    };
    Ok((out, landmarks.with_points(points)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(points: Vec<Point3>) -> LandmarkSet {
        LandmarkSet::new(points, "custom").unwrap()
    }

    #[test]
    fn normalize_depth_examples() {
        let out = normalize_depth(&set(vec![[1.0, 2.0, 2.0], [3.0, 4.0, 4.0], [5.0, 6.0, 6.0]])).unwrap();
        assert_eq!(out.points(), &[[1.0, 2.0, -2.0], [3.0, 4.0, 0.0], [5.0, 6.0, 2.0]]);
        let zeros = set(vec![[0.0; 3]; 3]);
        assert_eq!(normalize_depth(&zeros).unwrap(), zeros);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(LandmarkSet::new(vec![], "custom").is_err());
        assert!(LandmarkSet::new(vec![[0.0; 3]; 11], scheme::FACE12).is_err());
    }

    #[test]
    fn map_midpoint_and_identity() {
        let bbox = BBox::new(0.0, 0.0, 256.0, 256.0).unwrap();
        // offset 128 with scale 1/4 puts raw z = 0 on slice 32
        let m = CubeMapping::new(bbox, 128.0, 0.25, [64, 64, 64]).unwrap();
        let out = map_to_volume(&set(vec![[128.0, 128.0, 0.0]]), &m).unwrap();
        assert_eq!(out.landmarks.points(), &[[32.0, 32.0, 32.0]]);
        assert!(!out.clamped);

        let id = CubeMapping::new(BBox::new(0.0, 0.0, 16.0, 16.0).unwrap(), 0.0, 1.0, [16, 16, 16]).unwrap();
        let pts = set(vec![[1.5, 2.25, 3.0], [15.0, 0.0, 7.5]]);
        assert_eq!(map_to_volume(&pts, &id).unwrap().landmarks, pts);
    }

    #[test]
    fn out_of_volume_points_are_clamped_and_flagged() {
        let m = CubeMapping::new(BBox::new(0.0, 0.0, 64.0, 64.0).unwrap(), 0.0, 1.0, [16, 16, 16]).unwrap();
        let out = map_to_volume(&set(vec![[66.0, 10.0, -3.0]]), &m).unwrap();
        assert!(out.clamped);
        assert_eq!(out.landmarks.points()[0], [15.0, 2.5, 0.0]);
        // far outside the expanded crop
        assert!(map_to_volume(&set(vec![[500.0, 10.0, 0.0]]), &m).is_err());
    }

    #[test]
    fn identity_augment_is_bit_exact() {
        let mut img = ImageTensor::zeros(8, 6);
        for (i, v) in (0..8 * 6 * 3).map(|i| (i as f64 * 0.37).sin().abs()).enumerate() {
            img.set(i / 48, i % 8, (i / 8) % 6, v);
        }
        let pts = set(vec![[1.25, 2.5, 0.5], [6.0, 1.0, -1.0]]);
        let (a, b) = augment(&img, &pts, &AugmentParams::identity()).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, pts);
    }

    #[test]
    fn quarter_turn_moves_right_of_centre_to_above_centre() {
        let img = ImageTensor::zeros(64, 64);
        let pts = set(vec![[48.0, 32.0, 5.0]]);
        let params = AugmentParams {
            rotation_deg: 90.0,
            ..AugmentParams::identity()
        };
        let (_, out) = augment(&img, &pts, &params).unwrap();
        let p = out.points()[0];
        assert!((p[0] - 32.0).abs() < 1e-12 && (p[1] - 16.0).abs() < 1e-12 && p[2] == 5.0);
    }

    #[test]
    fn image_and_landmarks_move_together() {
        // a bright pixel must follow its landmark through rotation + scale + flip
        let mut img = ImageTensor::zeros(32, 32);
        img.set(0, 20, 10, 1.0);
        let pts = set(vec![[20.5, 10.5, 0.0]]);
        let params = AugmentParams {
            rotation_deg: 90.0,
            scale: 1.0,
            flip: true,
            seed: 0,
        };
        let pts = LandmarkSet::new(pts.points().to_vec(), "custom").unwrap();
        // custom schemes cannot flip
        assert!(matches!(augment(&img, &pts, &params), Err(Error::UnknownScheme(_))));
        let no_flip = AugmentParams { flip: false, ..params };
        let (out, moved) = augment(&img, &pts, &no_flip).unwrap();
        let p = moved.points()[0];
        let (u, v) = (p[0].floor() as usize, p[1].floor() as usize);
        assert!((out.get(0, u, v) - 1.0).abs() < 1e-9, "pixel at {u},{v}");
    }

    #[test]
    fn double_flip_restores_landmarks() {
        let pts: Vec<Point3> = (0..12).map(|i| [3.0 + i as f64 * 4.1, 60.0 - i as f64 * 2.7, i as f64 - 5.5]).collect();
        let lm = LandmarkSet::new(pts, scheme::FACE12).unwrap();
        let img = ImageTensor::zeros(64, 64);
        let params = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let (img1, once) = augment(&img, &lm, &params).unwrap();
        let (_, twice) = augment(&img1, &once, &params).unwrap();
        for (a, b) in twice.points().iter().zip(lm.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
        // the left outer eye corner is still index 0 after one flip
        assert!((once.points()[0][0] - (64.0 - lm.points()[3][0])).abs() < 1e-12);
    }

    #[test]
    fn landmark_text_round_trip() {
        let lm = LandmarkSet::new(vec![[0.1, 2.0, -3.5]; 12], scheme::FACE12).unwrap();
        let back = LandmarkSet::parse(&lm.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, lm);
        assert!(LandmarkSet::parse("1 2\n", Path::new("bad.pts3")).is_err());
        let short = "# scheme=face12 n=12\n".to_string() + &"1 2 3\n".repeat(11);
        assert!(LandmarkSet::parse(&short, Path::new("short.pts3")).is_err());
    }

    proptest! {
        #[test]
        fn normalize_depth_is_zero_mean_and_idempotent(zs in prop::collection::vec(-50.0f64..50.0, 1..80)) {
            let lm = set(zs.iter().map(|&z| [1.0, 2.0, z]).collect());
            let once = normalize_depth(&lm).unwrap();
            let mean = once.points().iter().map(|p| p[2]).sum::<f64>() / zs.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let twice = normalize_depth(&once).unwrap();
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a[2] - b[2]).abs() < 1e-9);
                prop_assert_eq!(a[0], b[0]);
            }
        }

        #[test]
        fn volume_mapping_round_trips(
            x0 in -50.0f64..50.0, y0 in -50.0f64..50.0, bw in 20.0f64..400.0, bh in 20.0f64..400.0,
            scale in 0.05f64..2.0, offset in -10.0f64..10.0,
            fr in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20),
        ) {
            let dims = [64, 48, 32];
            let m = CubeMapping::new(BBox::new(x0, y0, bw, bh).unwrap(), offset, scale, dims).unwrap();
            // points whose volume image is in range
            let pts: Vec<Point3> = fr.iter().map(|&(a, b, c)| {
                [x0 + a * bw * 63.0 / 64.0, y0 + b * bh * 47.0 / 48.0, c * 31.0 / scale - offset]
            }).collect();
            let lm = set(pts);
            let mapped = map_to_volume(&lm, &m).unwrap();
            prop_assert!(!mapped.clamped);
            let back = map_to_image(&mapped.landmarks, &m);
            let vol_again = map_to_volume(&back, &m).unwrap().landmarks;
            for (a, b) in vol_again.points().iter().zip(mapped.landmarks.points()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }
}

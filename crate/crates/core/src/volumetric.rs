//! The compact volumetric landmark representation.
//!
//! Every landmark contributes an isotropic Gaussian to a single `w x h x d`
//! grid and the grid keeps the voxel-wise maximum, so its size does not
//! depend on the number of landmarks. The normalizer is `1 / (2 pi sigma^2)`
//! (the planar constant, kept on the 3D kernel), which only rescales
//! targets uniformly.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::fsutil::atomic_write;
use crate::geometry::{LandmarkSet, Point3};

/// Gaussians are cut off beyond this many sigmas when truncation is on.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

pub const MAGIC: &[u8; 4] = b"CVR1";

/// Peak value of a single landmark's contribution.
pub fn peak_value(sigma: f64) -> f64 {
    1.0 / (2.0 * PI * sigma * sigma)
}

/// Contribution of a landmark at `landmark` to voxel `(i, j, k)`.
pub fn gaussian_contribution(landmark: Point3, voxel: [usize; 3], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d2: f64 = (0..3).map(|a| (landmark[a] - voxel[a] as f64).powi(2)).sum();
    Ok(peak_value(sigma) * (-d2 / (2.0 * sigma * sigma)).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    values: Vec<f64>,
    sigma: f64,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3], sigma: f64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if !(sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            dims,
            values: vec![0.0; dims.iter().product()],
            sigma,
        })
    }

    /// `values` in x-fastest order: index `(k * h + j) * w + i`.
    pub fn from_values(dims: [usize; 3], sigma: f64, values: Vec<f64>) -> Result<Self> {
        let mut g = Self::zeros(dims, sigma)?;
        if values.len() != g.values.len() {
            return Err(invalid(format!(
                "{} values for a {dims:?} grid",
                values.len()
            )));
        }
        g.values = values;
        Ok(g)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Voxel-wise maximum with another grid of the same shape.
    pub fn max_assign(&mut self, other: &VoxelGrid) -> Result<()> {
        if other.dims != self.dims {
            return Err(invalid(format!("grid dims {:?} vs {:?}", self.dims, other.dims)));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.max(*b);
        }
        Ok(())
    }

    /// Binary container: magic, three little-endian `u32` dims, `f64` sigma,
    /// then `w*h*d` little-endian `f32` values, x fastest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 12 + 8 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.sigma.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("voxel grid container: {m}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing CVR1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let dims = [u32_at(4), u32_at(8), u32_at(12)];
        let sigma = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let n: usize = dims.iter().product();
        if bytes.len() != 24 + 4 * n {
            return Err(bad(&format!("expected {} payload bytes, got {}", 4 * n, bytes.len() - 24)));
        }
        let values = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(dims, sigma, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Zero contributions farther than [`TRUNCATION_SIGMAS`] sigmas away.
    pub truncate: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { truncate: true }
    }
}

/// Max-composes per-landmark Gaussians into one grid of size `dims`.
pub fn encode(landmarks: &LandmarkSet, dims: [usize; 3], sigma: f64, opts: EncodeOptions) -> Result<VoxelGrid> {
    encode_points(landmarks.points(), dims, sigma, opts)
}

pub fn encode_points(points: &[Point3], dims: [usize; 3], sigma: f64, opts: EncodeOptions) -> Result<VoxelGrid> {
    if points.is_empty() {
        return Err(invalid("cannot encode an empty landmark set"));
    }
    let mut grid = VoxelGrid::zeros(dims, sigma)?;
    let peak = peak_value(sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let radius = TRUNCATION_SIGMAS * sigma;
    for p in points {
        let mut lo = [0usize; 3];
        let mut hi = dims;
        if opts.truncate {
            for a in 0..3 {
                lo[a] = (p[a] - radius).ceil().max(0.0) as usize;
                hi[a] = ((p[a] + radius).floor() + 1.0).clamp(0.0, dims[a] as f64) as usize;
            }
        }
        for k in lo[2]..hi[2] {
            let dz = (p[2] - k as f64).powi(2);
            for j in lo[1]..hi[1] {
                let dyz = dz + (p[1] - j as f64).powi(2);
                let row = (k * dims[1] + j) * dims[0];
                for i in lo[0]..hi[0] {
                    let d2 = dyz + (p[0] - i as f64).powi(2);
                    if opts.truncate && d2 > radius * radius {
                        continue;
                    }
                    let v = peak * (-d2 * inv).exp();
                    let slot = &mut grid.values[row + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Targets for coarse-to-fine supervision, one grid per z-resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePyramid {
    grids: Vec<VoxelGrid>,
    z_resolutions: Vec<usize>,
}

impl VolumePyramid {
    pub fn grids(&self) -> &[VoxelGrid] {
        &self.grids
    }

    pub fn z_resolutions(&self) -> &[usize] {
        &self.z_resolutions
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn finest(&self) -> &VoxelGrid {
        self.grids.last().expect("pyramid has at least one level")
    }
}

pub fn check_z_resolutions(z_resolutions: &[usize]) -> Result<()> {
    if z_resolutions.is_empty() || z_resolutions[0] == 0 {
        return Err(invalid("z resolutions must be a non-empty list of positive integers"));
    }
    if z_resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(format!("z resolutions must be strictly increasing, got {z_resolutions:?}")));
    }
    Ok(())
}

/// Re-encodes volume-frame landmarks at each z-resolution, scaling z by
/// `r / d_max` where `d_max` is the last (finest) resolution.
pub fn build_pyramid(
    landmarks: &LandmarkSet,
    width: usize,
    height: usize,
    z_resolutions: &[usize],
    sigma: f64,
    opts: EncodeOptions,
) -> Result<VolumePyramid> {
    check_z_resolutions(z_resolutions)?;
    let d_max = *z_resolutions.last().unwrap() as f64;
    let grids = z_resolutions
        .iter()
        .map(|&r| {
            let f = r as f64 / d_max;
            let pts: Vec<Point3> = landmarks.points().iter().map(|&[x, y, z]| [x, y, z * f]).collect();
            encode_points(&pts, [width, height, r], sigma, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VolumePyramid {
        grids,
        z_resolutions: z_resolutions.to_vec(),
    })
}

/// Local maxima above `min_value`, refined to sub-voxel precision and
/// merged when closer than `min_separation` (the higher peak wins).
///
/// The refinement fits a parabola through the log-values of three
/// consecutive samples along each axis, which is exact for an isolated
/// Gaussian. On a face of the grid the three samples run inward from the peak.
pub fn decode_peaks(grid: &VoxelGrid, min_value: f64, min_separation: f64) -> Vec<Point3> {
    let [w, h, d] = grid.dims();
    let mut candidates: Vec<(f64, Point3)> = Vec::new();
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let v = grid.get(i, j, k);
                if v <= min_value || !is_local_max(grid, i, j, k) {
                    continue;
                }
                let mut p = [i as f64, j as f64, k as f64];
                let idx = [i, j, k];
                for a in 0..3 {
                    let n = grid.dims()[a];
                    if n < 3 {
                        continue;
                    }
                    // Middle sample of the fitted triple, kept inside the grid.
                    let mid = idx[a].clamp(1, n - 2);
                    let sample = |at: usize| {
                        let mut q = idx;
                        q[a] = at;
                        grid.get(q[0], q[1], q[2])
                    };
                    if let Some(off) = parabola_vertex(sample(mid - 1), sample(mid), sample(mid + 1)) {
                        p[a] = (mid as f64 + off).clamp(p[a] - 0.5, p[a] + 0.5);
                    }
                }
                candidates.push((v, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<Point3> = Vec::new();
    for (_, p) in candidates {
        let far = kept.iter().all(|q| {
            let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
            d2.sqrt() >= min_separation
        });
        if far {
            kept.push(p);
        }
    }
    kept
}

fn is_local_max(grid: &VoxelGrid, i: usize, j: usize, k: usize) -> bool {
    let v = grid.get(i, j, k);
    let [w, h, d] = grid.dims();
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if ni < 0 || nj < 0 || nk < 0 || ni >= w as i64 || nj >= h as i64 || nk >= d as i64 {
                    continue;
                }
                if grid.get(ni as usize, nj as usize, nk as usize) > v {
                    return false;
                }
            }
        }
    }
    true
}

/// Vertex offset from the middle sample of a parabola through three equally
/// spaced values, fitted in the log domain when all are positive.
fn parabola_vertex(vm: f64, v0: f64, vp: f64) -> Option<f64> {
    let (a, b, c) = if vm > 0.0 && vp > 0.0 && v0 > 0.0 {
        (vm.ln(), v0.ln(), vp.ln())
    } else {
        (vm, v0, vp)
    };
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return None;
    }
    Some(0.5 * (a - c) / denom)
}

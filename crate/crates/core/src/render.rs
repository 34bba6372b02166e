//! Small raster views for inspection: maximum-intensity projections of a
//! volume, landmark overlays, and a three-tile panel (image with landmarks,
//! volume projection, landmarks shaded by depth).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::geometry::Point3;
use crate::imaging::{encode_rgb8, ImageTensor};
use crate::volumetric::VoxelGrid;

/// Axis collapsed by a projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Grey-level maximum-intensity projection scaled so the grid maximum is
/// white. Collapsing z gives a `w x h` image, y gives `w x d`, x gives
/// `d x h`.
pub fn mip(grid: &VoxelGrid, axis: Axis) -> RgbImage {
    let [w, h, d] = grid.dims();
    let (iw, ih) = match axis {
        Axis::Z => (w, h),
        Axis::Y => (w, d),
        Axis::X => (d, h),
    };
    let peak = grid.max_value();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut acc = vec![0.0f64; iw * ih];
    for k in 0..d {
        for j in 0..h {
            for i in 0..w {
                let (u, v) = match axis {
                    Axis::Z => (i, j),
                    Axis::Y => (i, k),
                    Axis::X => (k, j),
                };
                let a = &mut acc[v * iw + u];
                *a = a.max(grid.get(i, j, k));
            }
        }
    }
    RgbImage::from_fn(iw as u32, ih as u32, |u, v| {
        let g = (acc[v as usize * iw + u as usize] * scale).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}

fn mark(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (cx, cy) = ((x - 0.5).round() as i64, (y - 0.5).round() as i64);
    for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
        let (u, v) = (cx + dx, cy + dy);
        if u >= 0 && v >= 0 && (u as u32) < img.width() && (v as u32) < img.height() {
            img.put_pixel(u as u32, v as u32, color);
        }
    }
}

/// The image with a small cross at every landmark (pixel frame).
pub fn overlay(image: &ImageTensor, points: &[Point3]) -> RgbImage {
    let mut img = image.to_rgb8();
    for p in points {
        mark(&mut img, p[0], p[1], Rgb([255, 220, 0]));
    }
    img
}

fn depth_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([(255.0 * t) as u8, 64, (255.0 * (1.0 - t)) as u8])
}

/// Side-by-side tiles at the image's size: overlay, nearest-neighbour
/// upscaled z projection of `volume`, and the landmarks alone coloured from
/// blue (far) to red (near).
pub fn panel(image: &ImageTensor, volume: &VoxelGrid, points: &[Point3]) -> RgbImage {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let mut out = RgbImage::new(3 * w, h);
    let left = overlay(image, points);
    let proj = mip(volume, Axis::Z);
    for v in 0..h {
        for u in 0..w {
            out.put_pixel(u, v, *left.get_pixel(u, v));
            let pu = (u as u64 * proj.width() as u64 / w as u64) as u32;
            let pv = (v as u64 * proj.height() as u64 / h as u64) as u32;
            out.put_pixel(w + u, v, *proj.get_pixel(pu, pv));
        }
    }
    let (zmin, zmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[2]), b.max(p[2])));
    let span = if zmax > zmin { zmax - zmin } else { 1.0 };
    let mut right = RgbImage::new(w, h);
    for p in points {
        mark(&mut right, p[0], p[1], depth_color((p[2] - zmin) / span));
    }
    for (u, v, px) in right.enumerate_pixels() {
        out.put_pixel(2 * w + u, v, *px);
    }
    out
}

/// PNG for `.png` paths, binary PPM otherwise; written atomically.
pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    encode_rgb8(img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumetric::{encode_points, EncodeOptions};

    #[test]
    fn projections_have_axis_shapes_and_white_peak() {
        let g = encode_points(&[[2.0, 3.0, 4.0]], [6, 5, 7], 1.0, EncodeOptions::default()).unwrap();
        let z = mip(&g, Axis::Z);
        assert_eq!(z.dimensions(), (6, 5));
        assert_eq!(z.get_pixel(2, 3).0[0], 255);
        assert_eq!(mip(&g, Axis::Y).dimensions(), (6, 7));
        let x = mip(&g, Axis::X);
        assert_eq!(x.dimensions(), (7, 5));
        assert_eq!(x.get_pixel(4, 3).0[0], 255);
    }
}

//! Spherical range-view projection of a sweep and its inverse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelImage};
use crate::kitti_io::{Point, PointCloudScan};
use crate::tensor::Tensor;

/// Channel layout of a [`RangeImage`].
pub mod channel {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const RANGE: usize = 3;
    pub const REMISSION: usize = 4;
    pub const N1: usize = 5;
    pub const N2: usize = 6;
    pub const N3: usize = 7;
    pub const COUNT: usize = 8;
}

/// Marks a pixel no point landed on.
pub const NO_POINT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Upper edge of the vertical field of view, degrees.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, degrees.
    pub fov_down: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: -25.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("projection size must be at least 1×1".into()));
        }
        if !(self.fov_up > self.fov_down) {
            return Err(Error::Config(format!(
                "fov_up ({}) must exceed fov_down ({})",
                self.fov_up, self.fov_down
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("projection size exceeds 65535".into()));
        }
        Ok(())
    }

    /// Pixel a point falls in, clamped to the image.
    pub fn pixel_of(&self, p: &Point) -> Option<(usize, usize, f64)> {
        let r = p.range();
        if r == 0.0 {
            return None;
        }
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let yaw = y.atan2(x);
        let pitch = (z / r).clamp(-1.0, 1.0).asin();
        let up = self.fov_up.to_radians();
        let down = self.fov_down.to_radians();

        let u = 0.5 * (1.0 - yaw / std::f64::consts::PI) * self.width as f64;
        let v = (1.0 - (pitch - down) / (up - down)) * self.height as f64;
        let col = (u.floor().max(0.0) as usize).min(self.width - 1);
        let row = (v.floor().max(0.0) as usize).min(self.height - 1);
        Some((row, col, r))
    }
}

/// Dense multi-channel raster of a sweep.
///
/// Invalid pixels have every channel at zero; a valid pixel always has a
/// strictly positive range, so `range > 0` and `pixel_point != NO_POINT`
/// are equivalent.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    channels: Vec<f32>,
    pixel_point: Vec<u32>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        RangeImage {
            height,
            width,
            channels: vec![0.0; channel::COUNT * height * width],
            pixel_point: vec![NO_POINT; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.channels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn value(&self, c: usize, row: usize, col: usize) -> f32 {
        self.channels[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.pixel_point[row * self.width + col] != NO_POINT
    }

    /// Index of the point that owns the pixel.
    pub fn owner(&self, row: usize, col: usize) -> Option<usize> {
        match self.pixel_point[row * self.width + col] {
            NO_POINT => None,
            i => Some(i as usize),
        }
    }

    pub fn pixel_points(&self) -> &[u32] {
        &self.pixel_point
    }

    pub fn valid_count(&self) -> usize {
        self.pixel_point.iter().filter(|&&i| i != NO_POINT).count()
    }

    pub fn xyz(&self, row: usize, col: usize) -> [f32; 3] {
        [
            self.value(channel::X, row, col),
            self.value(channel::Y, row, col),
            self.value(channel::Z, row, col),
        ]
    }

    /// Writes a point's channels into a pixel and records ownership.
    /// Normal channels are cleared.
    pub fn set_pixel(&mut self, row: usize, col: usize, point_index: usize, p: &Point) {
        let r = p.range() as f32;
        let vals = [p.x, p.y, p.z, r, p.remission, 0.0, 0.0, 0.0];
        let n = self.height * self.width;
        let off = row * self.width + col;
        for (c, v) in vals.into_iter().enumerate() {
            self.channels[c * n + off] = v;
        }
        self.pixel_point[off] = point_index as u32;
    }

    pub fn set_normal(&mut self, row: usize, col: usize, n: [f32; 3]) {
        let plane = self.height * self.width;
        let off = row * self.width + col;
        for (k, v) in n.into_iter().enumerate() {
            self.channels[(channel::N1 + k) * plane + off] = v;
        }
    }

    pub fn normal(&self, row: usize, col: usize) -> [f32; 3] {
        [
            self.value(channel::N1, row, col),
            self.value(channel::N2, row, col),
            self.value(channel::N3, row, col),
        ]
    }

    pub fn range_grid(&self) -> Grid<f32> {
        Grid::from_vec(self.height, self.width, self.plane(channel::RANGE).to_vec())
    }

    /// The 8-channel network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(channel::COUNT, self.height, self.width, self.channels.clone())
    }

    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        channels: Vec<f32>,
        pixel_point: Vec<u32>,
    ) -> Self {
        debug_assert_eq!(channels.len(), channel::COUNT * height * width);
        debug_assert_eq!(pixel_point.len(), height * width);
        RangeImage {
            height,
            width,
            channels,
            pixel_point,
        }
    }

    pub(crate) fn raw_channels(&self) -> &[f32] {
        &self.channels
    }

    /// Range channel as an 8-bit binary PGM, scaled by the maximum range.
    pub fn write_range_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let range = self.plane(channel::RANGE);
        let max = range.iter().cloned().fold(0.0f32, f32::max);
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(range.iter().map(|&r| {
            if max > 0.0 {
                (r / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Where each point of a scan landed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointPixelMap {
    pub rows: Vec<u16>,
    pub cols: Vec<u16>,
    pub ranges: Vec<f32>,
}

impl PointPixelMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> (usize, usize) {
        (self.rows[i] as usize, self.cols[i] as usize)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.cols.len() != self.rows.len() || self.ranges.len() != self.rows.len() {
            return Err(Error::Input("pixel map columns have unequal lengths".into()));
        }
        let oob = (0..self.len()).find(|&i| {
            let (r, c) = self.pixel(i);
            r >= height || c >= width
        });
        match oob {
            Some(i) => Err(Error::Input(format!(
                "point {i} maps to {:?}, outside {height}×{width}",
                self.pixel(i)
            ))),
            None => Ok(()),
        }
    }
}

/// Projects a scan onto the range image. The nearest point wins each pixel;
/// on equal ranges the earlier point keeps it. Normal channels are left zero.
pub fn spherical_project(
    scan: &PointCloudScan,
    cfg: &ProjectionConfig,
) -> Result<(RangeImage, PointPixelMap)> {
    cfg.validate()?;
    let mut img = RangeImage::empty(cfg.height, cfg.width);
    let n = scan.count();
    let mut map = PointPixelMap {
        rows: Vec::with_capacity(n),
        cols: Vec::with_capacity(n),
        ranges: Vec::with_capacity(n),
    };
    for (i, p) in scan.points.iter().enumerate() {
        let (row, col, r) = cfg.pixel_of(p).ok_or(Error::DegeneratePoint { index: i })?;
        let r32 = r as f32;
        map.rows.push(row as u16);
        map.cols.push(col as u16);
        map.ranges.push(r32);
        if !img.is_valid(row, col) || r32 < img.value(channel::RANGE, row, col) {
            img.set_pixel(row, col, i, p);
        }
    }
    Ok((img, map))
}

/// Naive inverse: every point takes the label of the pixel it fell in.
pub fn unproject_labels(map: &PointPixelMap, label_image: &LabelImage) -> Result<Vec<u8>> {
    map.check_bounds(label_image.height(), label_image.width())?;
    Ok((0..map.len())
        .map(|i| {
            let (r, c) = map.pixel(i);
            label_image.at(r, c)
        })
        .collect())
}

/// Rotates every point about the vertical axis.
pub fn augment_rotate(scan: &PointCloudScan, angle: f64) -> PointCloudScan {
    let (s, c) = angle.sin_cos();
    let points = scan
        .points
        .iter()
        .map(|p| {
            let (x, y) = (p.x as f64, p.y as f64);
            Point {
                x: (c * x - s * y) as f32,
                y: (s * x + c * y) as f32,
                ..*p
            }
        })
        .collect();
    PointCloudScan { points }
}

/// Mirrors the scan across the x–z plane (`y → −y`).
pub fn augment_flip(scan: &PointCloudScan) -> PointCloudScan {
    let points = scan.points.iter().map(|p| Point { y: -p.y, ..*p }).collect();
    PointCloudScan { points }
}

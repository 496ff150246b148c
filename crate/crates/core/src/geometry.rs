//! Agent bounding boxes from pose keypoints, context masking and body crops.
//!
//! Bounds are half-open pixel ranges `[top, bottom) x [left, right)`. The
//! expanded real-valued box is rounded outward (floor for top/left, ceil for
//! bottom/right) and then clipped to the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of joints in the BODY25 layout.
pub const BODY25_JOINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }
}

/// The 25 BODY25 joints of one agent at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    joints: [Keypoint; BODY25_JOINTS],
    pub frame_index: usize,
}

impl KeypointSet {
    pub fn new(joints: [Keypoint; BODY25_JOINTS], frame_index: usize) -> Self {
        Self {
            joints,
            frame_index,
        }
    }

    /// Builds a set from a flat `x1,y1,c1,...,x25,y25,c25` array.
    pub fn from_flat(values: &[f64], frame_index: usize) -> Result<Self> {
        if values.len() != 3 * BODY25_JOINTS {
            return Err(Error::Malformed(format!(
                "frame {frame_index}: expected {} values, got {}",
                3 * BODY25_JOINTS,
                values.len()
            )));
        }
        let mut joints = [Keypoint::new(0.0, 0.0, 0.0); BODY25_JOINTS];
        for (joint, chunk) in joints.iter_mut().zip(values.chunks_exact(3)) {
            *joint = Keypoint::new(chunk[0], chunk[1], chunk[2]);
        }
        Ok(Self::new(joints, frame_index))
    }

    /// Builds a set from a partial list of joints; the rest get zero confidence.
    pub fn from_partial(partial: &[Keypoint], frame_index: usize) -> Self {
        let mut joints = [Keypoint::new(0.0, 0.0, 0.0); BODY25_JOINTS];
        for (slot, kp) in joints.iter_mut().zip(partial) {
            *slot = *kp;
        }
        Self::new(joints, frame_index)
    }

    pub fn joints(&self) -> &[Keypoint; BODY25_JOINTS] {
        &self.joints
    }

    pub fn joints_mut(&mut self) -> &mut [Keypoint; BODY25_JOINTS] {
        &mut self.joints
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints
            .iter()
            .flat_map(|k| [k.x, k.y, k.confidence])
            .collect()
    }
}

/// Half-open pixel box: rows `[top, bottom)`, columns `[left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.top > self.bottom || self.bottom > height || self.left > self.right || self.right > width
        {
            return Err(Error::contract(format!(
                "bbox {self:?} outside a {height}x{width} image"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Joints with confidence strictly below this are discarded.
    pub conf_threshold: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            lambda_x: 0.1,
            lambda_y: 0.25,
            conf_threshold: 0.10,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_x >= 0.0 && self.lambda_y >= 0.0) {
            return Err(Error::config("expansion factors must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("conf_threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Row-major `H x W x C` 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image must have positive height and width"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::contract(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let start = (row * self.width + col) * self.channels;
        &self.pixels[start..start + self.channels]
    }

    fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let start = (row * self.width + col) * self.channels;
        &mut self.pixels[start..start + self.channels]
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?;
        let img = match img.color().channel_count() {
            1 | 2 => image::DynamicImage::ImageLuma8(img.to_luma8()),
            _ => image::DynamicImage::ImageRgb8(img.to_rgb8()),
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let channels = img.color().channel_count() as usize;
        Self::new(h, w, channels, img.into_bytes())
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }
}

/// Expanded bounding box of the agent described by `kps`, or `None` when no
/// joint survives the confidence filter.
pub fn compute_agent_bbox(
    kps: &KeypointSet,
    height: usize,
    width: usize,
    cfg: &ExpansionConfig,
) -> Result<Option<BBox>> {
    if height == 0 || width == 0 {
        return Err(Error::contract("image dimensions must be positive"));
    }
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut survivors = 0usize;
    for (n, kp) in kps.joints.iter().enumerate() {
        if !(kp.x.is_finite() && kp.y.is_finite() && kp.confidence.is_finite()) {
            return Err(Error::Malformed(format!(
                "frame {}: joint {n} has non-finite values",
                kps.frame_index
            )));
        }
        if kp.confidence < cfg.conf_threshold {
            continue;
        }
        survivors += 1;
        x_min = x_min.min(kp.x);
        x_max = x_max.max(kp.x);
        y_min = y_min.min(kp.y);
        y_max = y_max.max(kp.y);
    }
    if survivors == 0 {
        return Ok(None);
    }

    let e_x = cfg.lambda_x * (x_max - x_min);
    let e_y = cfg.lambda_y * (y_max - y_min);
    let clip = |v: f64, hi: usize| -> usize { v.clamp(0.0, hi as f64) as usize };

    let top = clip((y_min - e_y).floor(), height);
    let bottom = clip((y_max + e_y).ceil(), height);
    let left = clip((x_min - e_x).floor(), width);
    let right = clip((x_max + e_x).ceil(), width);
    Ok(Some(BBox {
        top,
        bottom,
        left,
        right,
    }))
}

/// Zeroes every channel of every pixel inside `bbox`. Without a box the
/// image is returned unchanged.
pub fn mask_agent(img: &Image, bbox: Option<&BBox>) -> Result<Image> {
    let mut out = img.clone();
    let Some(bbox) = bbox else {
        return Ok(out);
    };
    bbox.validate(img.height, img.width)?;
    let row_bytes = img.width * img.channels;
    for row in bbox.top..bbox.bottom {
        let start = row * row_bytes + bbox.left * img.channels;
        let end = row * row_bytes + bbox.right * img.channels;
        out.pixels[start..end].fill(0);
    }
    Ok(out)
}

/// Region a crop actually reads: the box itself, or for a zero-extent axis a
/// single pixel at the box origin clamped inside the image.
pub fn crop_region(img: &Image, bbox: &BBox) -> BBox {
    let (top, bottom) = if bbox.height() == 0 {
        let r = bbox.top.min(img.height - 1);
        (r, r + 1)
    } else {
        (bbox.top, bbox.bottom)
    };
    let (left, right) = if bbox.width() == 0 {
        let c = bbox.left.min(img.width - 1);
        (c, c + 1)
    } else {
        (bbox.left, bbox.right)
    };
    BBox {
        top,
        bottom,
        left,
        right,
    }
}

/// Sub-image `img[top:bottom, left:right]`; the whole image without a box.
pub fn crop_body(img: &Image, bbox: Option<&BBox>) -> Result<Image> {
    let Some(bbox) = bbox else {
        return Ok(img.clone());
    };
    bbox.validate(img.height, img.width)?;
    let region = crop_region(img, bbox);
    let c = img.channels;
    let mut pixels = Vec::with_capacity(region.area() * c);
    for row in region.top..region.bottom {
        let start = (row * img.width + region.left) * c;
        let end = (row * img.width + region.right) * c;
        pixels.extend_from_slice(&img.pixels[start..end]);
    }
    Image::new(region.height(), region.width(), c, pixels)
}

/// Writes `patch` into `canvas` with its top-left corner at `(top, left)`.
pub fn paste(canvas: &mut Image, patch: &Image, top: usize, left: usize) -> Result<()> {
    if patch.channels != canvas.channels
        || top + patch.height > canvas.height
        || left + patch.width > canvas.width
    {
        return Err(Error::contract("patch does not fit inside canvas"));
    }
    for row in 0..patch.height {
        for col in 0..patch.width {
            canvas
                .pixel_mut(top + row, left + col)
                .copy_from_slice(patch.pixel(row, col));
        }
    }
    Ok(())
}

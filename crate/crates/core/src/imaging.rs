//! Pixel-level primitives: colour conversion, SSIM, differential images,
//! skin masking, connected components, morphology, background subtraction
//! and crop/resize.
//!
//! Every function here is pure. Frames are 8-bit, row-major and
//! channel-interleaved.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit raster with 1 (gray) or 3 (RGB or YCbCr) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "frame must be non-empty, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidChannelCount {
                expected: 3,
                got: channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} frame needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Frame with every byte set to `value`.
    ///
    /// Panics on zero dimensions or a channel count other than 1 or 3.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid frame dimensions")
    }

    /// Grayscale frame built from `f(row, col)`.
    pub fn gray_from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, 1, data).expect("valid frame dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [u8] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Value of channel 0 at `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels]
    }

    fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn require_channels(&self, expected: usize) -> Result<()> {
        if self.channels == expected {
            Ok(())
        } else {
            Err(Error::InvalidChannelCount {
                expected,
                got: self.channels,
            })
        }
    }

    /// Reads a PNG or binary PNM file. Colour inputs become 3-channel RGB,
    /// gray inputs 1-channel.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let frame = match img.color().channel_count() {
            1 | 2 => {
                let g = img.into_luma8();
                let (w, h) = g.dimensions();
                Frame::new(w as usize, h as usize, 1, g.into_raw())?
            }
            _ => {
                let rgb = img.into_rgb8();
                let (w, h) = rgb.dimensions();
                Frame::new(w as usize, h as usize, 3, rgb.into_raw())?
            }
        };
        Ok(frame)
    }

    /// Binary PGM (P5) for 1-channel frames, PPM (P6) for 3-channel ones.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }
}

/// One bit per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Set pixels as 255, clear pixels as 0.
    pub fn to_frame(&self) -> Frame {
        let data = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Frame::new(self.width, self.height, 1, data).expect("mask dimensions are non-zero")
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.max_row + 1 - self.min_row
    }

    pub fn width(&self) -> usize {
        self.max_col + 1 - self.min_col
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.min_row..=self.max_row).contains(&row) && (self.min_col..=self.max_col).contains(&col)
    }
}

/// 8-connected component of a [`BinaryMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub area: usize,
    pub bbox: BBox,
    /// Always equal to `bbox.min_row`.
    pub top_row: usize,
    /// (row, col) mean of the member pixels.
    pub centroid: (f64, f64),
    /// Member pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub l: f64,
    /// Side of the square uniform window; odd and at least 3.
    pub window: usize,
    pub stride: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            l: 255.0,
            window: 7,
            stride: 1,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let small = |k: f64| k > 0.0 && k < 1.0;
        if !small(self.k1) || !small(self.k2) {
            return Err(Error::InvalidParams(format!(
                "K1 and K2 must lie in (0, 1), got {} and {}",
                self.k1, self.k2
            )));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "dynamic range must be positive, got {}",
                self.l
            )));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParams(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParams("stride must be >= 1".into()));
        }
        Ok(())
    }
}

fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

pub fn to_grayscale(frame: &Frame) -> Result<Frame> {
    frame.require_channels(3)?;
    let data = frame
        .data
        .chunks_exact(3)
        .map(|p| round_u8(luma(p[0], p[1], p[2])))
        .collect();
    Frame::new(frame.width, frame.height, 1, data)
}

/// Gray frames pass through unchanged; RGB frames are converted.
pub fn ensure_gray(frame: &Frame) -> Result<Frame> {
    if frame.channels == 1 {
        Ok(frame.clone())
    } else {
        to_grayscale(frame)
    }
}

/// Full-range (JPEG) conversion to interleaved Y, Cb, Cr.
pub fn rgb_to_ycbcr(frame: &Frame) -> Result<Frame> {
    frame.require_channels(3)?;
    let mut data = Vec::with_capacity(frame.data.len());
    for p in frame.data.chunks_exact(3) {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        data.push(round_u8(luma(p[0], p[1], p[2])));
        data.push(round_u8(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b));
        data.push(round_u8(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b));
    }
    Frame::new(frame.width, frame.height, 3, data)
}

/// Summed-area table with one row and column of leading zeros.
struct Integral {
    stride: usize,
    sums: Vec<i64>,
}

impl Integral {
    fn build(width: usize, height: usize, value: impl Fn(usize) -> i64) -> Self {
        let stride = width + 1;
        let mut sums = vec![0i64; stride * (height + 1)];
        for r in 0..height {
            let mut row_sum = 0i64;
            for c in 0..width {
                row_sum += value(r * width + c);
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row_sum;
            }
        }
        Self { stride, sums }
    }

    fn window(&self, r: usize, c: usize, side: usize) -> i64 {
        let s = self.stride;
        self.sums[(r + side) * s + c + side] - self.sums[r * s + c + side] - self.sums[(r + side) * s + c]
            + self.sums[r * s + c]
    }
}

/// Mean SSIM over all `window x window` uniform windows at the given stride.
///
/// Window moments are taken from exact integer sums, so `ssim(x, x)` is
/// exactly 1 and the result is symmetric in its arguments bit for bit.
pub fn ssim(x: &Frame, y: &Frame, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    x.require_channels(1)?;
    y.require_channels(1)?;
    if !x.same_dims(y) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            x.width, x.height, y.width, y.height
        )));
    }
    let (w, h, win) = (x.width, x.height, p.window);
    if win > w || win > h {
        return Err(Error::WindowTooLarge {
            window: win,
            width: w,
            height: h,
        });
    }
    let (xd, yd) = (&x.data, &y.data);
    let sx = Integral::build(w, h, |i| xd[i] as i64);
    let sy = Integral::build(w, h, |i| yd[i] as i64);
    let sxx = Integral::build(w, h, |i| (xd[i] as i64).pow(2));
    let syy = Integral::build(w, h, |i| (yd[i] as i64).pow(2));
    let sxy = Integral::build(w, h, |i| xd[i] as i64 * yd[i] as i64);

    let n = (win * win) as i64;
    let n2 = (n * n) as f64;
    let nf = n as f64;
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in (0..=h - win).step_by(p.stride) {
        for c in (0..=w - win).step_by(p.stride) {
            let (a, b) = (sx.window(r, c, win), sy.window(r, c, win));
            // n^2 * population (co)variance, exact in integers.
            let vx = (n * sxx.window(r, c, win) - a * a) as f64 / n2;
            let vy = (n * syy.window(r, c, win) - b * b) as f64 / n2;
            let cxy = (n * sxy.window(r, c, win) - a * b) as f64 / n2;
            let (mx, my) = (a as f64 / nf, b as f64 / nf);
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Motion of `frame_i` relative to the reference `frame_0`: `1 - ssim`.
pub fn issim(frame_i: &Frame, frame_0: &Frame, p: &SsimParams) -> Result<f64> {
    Ok(1.0 - ssim(frame_i, frame_0, p)?)
}

/// Pixels where `|a - b| > threshold`.
pub fn threshold_diff(a: &Frame, b: &Frame, threshold: u8) -> Result<BinaryMask> {
    a.require_channels(1)?;
    b.require_channels(1)?;
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(BinaryMask {
        width: a.width,
        height: a.height,
        bits: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&p, &q)| p.abs_diff(q) > threshold)
            .collect(),
    })
}

/// Motion present in both consecutive differences around `cur`.
pub fn differential_image(prev: &Frame, cur: &Frame, next: &Frame, diff_threshold: u8) -> Result<BinaryMask> {
    let mut mask = threshold_diff(cur, prev, diff_threshold)?;
    let second = threshold_diff(next, cur, diff_threshold)?;
    for (m, &s) in mask.bits.iter_mut().zip(&second.bits) {
        *m &= s;
    }
    Ok(mask)
}

/// Inclusive chrominance bounds of the skin detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkinRanges {
    pub cb: (u8, u8),
    pub cr: (u8, u8),
}

impl Default for SkinRanges {
    fn default() -> Self {
        Self {
            cb: (80, 120),
            cr: (133, 173),
        }
    }
}

/// Pixels whose Cb and Cr both fall in the ranges; Y is ignored.
pub fn skin_mask(ycbcr: &Frame, ranges: &SkinRanges) -> Result<BinaryMask> {
    ycbcr.require_channels(3)?;
    let (cb, cr) = (ranges.cb.0..=ranges.cb.1, ranges.cr.0..=ranges.cr.1);
    Ok(BinaryMask {
        width: ycbcr.width,
        height: ycbcr.height,
        bits: ycbcr
            .data
            .chunks_exact(3)
            .map(|p| cb.contains(&p[1]) && cr.contains(&p[2]))
            .collect(),
    })
}

/// 8-connected labelling. Blobs are ordered by their first pixel in raster
/// order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Blob> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let j = nr * w + nc;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        blobs.push(blob_from_pixels(pixels));
    }
    blobs
}

fn blob_from_pixels(pixels: Vec<(usize, usize)>) -> Blob {
    let mut bbox = BBox {
        min_row: usize::MAX,
        min_col: usize::MAX,
        max_row: 0,
        max_col: 0,
    };
    let (mut sr, mut sc) = (0usize, 0usize);
    for &(r, c) in &pixels {
        bbox.min_row = bbox.min_row.min(r);
        bbox.min_col = bbox.min_col.min(c);
        bbox.max_row = bbox.max_row.max(r);
        bbox.max_col = bbox.max_col.max(c);
        sr += r;
        sc += c;
    }
    let n = pixels.len();
    Blob {
        area: n,
        bbox,
        top_row: bbox.min_row,
        centroid: (sr as f64 / n as f64, sc as f64 / n as f64),
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Square structuring element of side `2 * radius + 1`, clipped at the
/// border. Radius 0 is the identity.
pub fn morph(mask: &BinaryMask, op: MorphOp, radius: usize) -> BinaryMask {
    // The square element is separable: filter rows, then columns.
    let (w, h) = (mask.width, mask.height);
    let combine = |mut it: Box<dyn Iterator<Item = bool> + '_>| match op {
        MorphOp::Erode => it.all(|b| b),
        MorphOp::Dilate => it.any(|b| b),
    };
    let mut rows = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(w - 1);
            rows[r * w + c] = combine(Box::new((lo..=hi).map(|cc| mask.bits[r * w + cc])));
        }
    }
    let mut bits = vec![false; w * h];
    for r in 0..h {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(h - 1);
        for c in 0..w {
            bits[r * w + c] = combine(Box::new((lo..=hi).map(|rr| rows[rr * w + c])));
        }
    }
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

/// Foreground mask per frame against the per-pixel median of the first
/// `bg_frames` frames. An even window takes the mean of the two middle
/// values.
pub fn background_foreground(sequence: &[Frame], bg_frames: usize, fg_threshold: u8) -> Result<Vec<BinaryMask>> {
    if bg_frames == 0 {
        return Err(Error::InvalidParams("bg_frames must be >= 1".into()));
    }
    if sequence.len() <= bg_frames {
        return Err(Error::SequenceTooShort {
            len: sequence.len(),
            min: bg_frames + 1,
        });
    }
    let first = &sequence[0];
    for f in sequence {
        f.require_channels(1)?;
        if !f.same_dims(first) {
            return Err(Error::DimensionMismatch("frames of a sequence differ in size".into()));
        }
    }
    let npx = first.width * first.height;
    let mut column = vec![0u8; bg_frames];
    // Background kept doubled so even-window medians stay integral.
    let mut background2 = vec![0u16; npx];
    for (i, bg) in background2.iter_mut().enumerate() {
        for (slot, f) in column.iter_mut().zip(sequence) {
            *slot = f.data[i];
        }
        column.sort_unstable();
        let m = bg_frames / 2;
        *bg = if bg_frames % 2 == 1 {
            2 * column[m] as u16
        } else {
            column[m - 1] as u16 + column[m] as u16
        };
    }
    let t2 = 2 * fg_threshold as u16;
    Ok(sequence
        .iter()
        .map(|f| BinaryMask {
            width: f.width,
            height: f.height,
            bits: f
                .data
                .iter()
                .zip(&background2)
                .map(|(&p, &b)| (2 * p as u16).abs_diff(b) > t2)
                .collect(),
        })
        .collect())
}

/// Bilinear resample of the continuous region `[x0, x1) x [y0, y1)` (pixel
/// edge coordinates) to `out_w x out_h`, sampling at output pixel centres.
fn resample(frame: &Frame, region: (f64, f64, f64, f64), out_w: usize, out_h: usize) -> Frame {
    let (x0, y0, x1, y1) = region;
    let ch = frame.channels;
    let (sx, sy) = ((x1 - x0) / out_w as f64, (y1 - y0) / out_h as f64);
    let max_x = (frame.width - 1) as f64;
    let max_y = (frame.height - 1) as f64;
    let taps = |u: f64, max: f64| {
        let u = u.clamp(0.0, max);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(max as usize);
        (i0, i1, u - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w)
        .map(|j| taps(x0 + (j as f64 + 0.5) * sx - 0.5, max_x))
        .collect();
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for i in 0..out_h {
        let (r0, r1, fy) = taps(y0 + (i as f64 + 0.5) * sy - 0.5, max_y);
        for &(c0, c1, fx) in &cols {
            for k in 0..ch {
                let v = |r: usize, c: usize| frame.data[(r * frame.width + c) * ch + k] as f64;
                let top = v(r0, c0) + fx * (v(r0, c1) - v(r0, c0));
                let bottom = v(r1, c0) + fx * (v(r1, c1) - v(r1, c0));
                data.push(round_u8(top + fy * (bottom - top)));
            }
        }
    }
    Frame::new(out_w, out_h, ch, data).expect("output dimensions are non-zero")
}

/// Whole-frame bilinear resize.
pub fn resize_bilinear(frame: &Frame, out_w: usize, out_h: usize) -> Result<Frame> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidRegion(format!("output size {out_w}x{out_h}")));
    }
    let region = (0.0, 0.0, frame.width as f64, frame.height as f64);
    Ok(resample(frame, region, out_w, out_h))
}

/// Crops `bbox` grown by `margin_frac` of its size on each side (clamped to
/// the frame) and resamples it to `out_w x out_h`.
pub fn crop_resize(frame: &Frame, bbox: &BBox, margin_frac: f64, out_w: usize, out_h: usize) -> Result<Frame> {
    frame.require_channels(1)?;
    if bbox.min_row > bbox.max_row || bbox.min_col > bbox.max_col {
        return Err(Error::InvalidRegion(format!("degenerate box {bbox:?}")));
    }
    if bbox.max_row >= frame.height || bbox.max_col >= frame.width {
        return Err(Error::InvalidRegion(format!(
            "box {bbox:?} outside {}x{} frame",
            frame.width, frame.height
        )));
    }
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(Error::InvalidParams(format!("margin must be >= 0, got {margin_frac}")));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidRegion(format!("output size {out_w}x{out_h}")));
    }
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let x0 = (bbox.min_col as f64 - margin_frac * bw).max(0.0);
    let x1 = (bbox.max_col as f64 + 1.0 + margin_frac * bw).min(frame.width as f64);
    let y0 = (bbox.min_row as f64 - margin_frac * bh).max(0.0);
    let y1 = (bbox.max_row as f64 + 1.0 + margin_frac * bh).min(frame.height as f64);
    Ok(resample(frame, (x0, y0, x1, y1), out_w, out_h))
}

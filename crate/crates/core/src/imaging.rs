//! Image I/O (PNG, binary PPM) and the preprocessing operators: area
//! resize, channel swap, fractional crop and Otsu binarization.

use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lprnet::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::tensor::{Shape4, Tensor4};

/// A `1 x 3 x h x w` RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor4,
    pub source_path: Option<PathBuf>,
}

impl Image {
    pub fn new(pixels: Tensor4) -> Result<Self> {
        let s = pixels.shape();
        crate::tensor::check_axis("batch", 1, s.n)?;
        crate::tensor::check_axis("channels", 3, s.c)?;
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {v} is outside [0, 1]")));
        }
        Ok(Image {
            pixels,
            source_path: None,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let shape = Shape4::new(1, 3, height, width)?;
        let plane = shape.plane_len();
        let mut data = Vec::with_capacity(shape.len());
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Image::new(Tensor4::from_vec(shape, data)?)
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let shape = Shape4::new(1, 3, height, width)?;
        if bytes.len() != shape.len() {
            return Err(Error::Dimension {
                axis: "pixel bytes",
                expected: shape.len(),
                actual: bytes.len(),
            });
        }
        let plane = shape.plane_len();
        let mut data = vec![0.0; shape.len()];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Image::new(Tensor4::from_vec(shape, data)?)
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.pixels.shape().plane_len();
        let d = self.pixels.data();
        let mut out = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                out.push(quantize(d[c * plane + i]));
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn pixels(&self) -> &Tensor4 {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.get(0, c, y, x)
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.pixels.shape().plane_len();
        let d = self.pixels.data();
        let mut m = [0.0; 3];
        for (c, v) in m.iter_mut().enumerate() {
            *v = d[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        m
    }

    fn map_pixels(&self, pixels: Tensor4) -> Image {
        Image {
            pixels,
            source_path: self.source_path.clone(),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let mut img = decode_png(&bytes)?;
    img.source_path = Some(path.to_path_buf());
    Ok(img)
}

/// Decodes an in-memory PNG. Palette, grayscale and 16-bit inputs are
/// expanded to 8-bit RGB; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut cursor = Cursor::new(bytes);
    let fail = |cursor: &Cursor<&[u8]>, e: png::DecodingError| Error::Decode {
        offset: cursor.position(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(&mut cursor);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let reader = decoder.read_info();
    let mut reader = match reader {
        Ok(r) => r,
        Err(e) => return Err(fail(&cursor, e)),
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        offset: 0,
        message: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = match reader.next_frame(&mut buf) {
        Ok(info) => info,
        Err(e) => {
            drop(reader);
            return Err(fail(&cursor, e));
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Decode {
                offset: 0,
                message: "unexpanded palette image".into(),
            })
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..w * samples].chunks_exact(samples) {
            if samples < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    Image::from_rgb8(w, h, &rgb)
}

pub fn encode_png(image: &Image, out: impl Write) -> Result<()> {
    let mut enc = png::Encoder::new(out, image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&image.to_rgb8()).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    encode_png(image, BufWriter::new(file))
}

/// Binary portable pixmap (P6) with maxval up to 255.
pub fn read_ppm(mut input: impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let bad = |pos: usize, msg: &str| Error::Decode {
        offset: pos as u64,
        message: msg.to_string(),
    };
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad(0, "missing P6 magic"));
    }
    pos += 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "expected a decimal header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(pos, "expected whitespace after the header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad(pos, "only maxval 1..=255 is supported"));
    }
    let need = w * h * 3;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad(bytes.len(), "truncated pixel data"))?;
    let scaled: Vec<u8> = if maxval == 255 {
        body.to_vec()
    } else {
        body.iter().map(|&b| ((f64::from(b) / maxval as f64) * 255.0).round() as u8).collect()
    };
    Image::from_rgb8(w, h, &scaled)
}

pub fn write_ppm(image: &Image, mut out: impl Write) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", image.width(), image.height())?;
    out.write_all(&image.to_rgb8())?;
    Ok(())
}

/// Per-axis weights: output index `o` averages `src[j]` with `weights[o]`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Reduces the image by exact area averaging: every output pixel is the
/// mean of its, possibly fractional, source footprint.
pub fn resize_area(image: &Image, target_w: usize, target_h: usize) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    if target_w == 0 || target_h == 0 {
        return Err(Error::Parameter(format!("target size {target_w}x{target_h} is empty")));
    }
    if target_w > w || target_h > h {
        return Err(Error::UnsupportedDirection {
            from_w: w,
            from_h: h,
            to_w: target_w,
            to_h: target_h,
        });
    }
    if (target_w, target_h) == (w, h) {
        return Ok(image.clone());
    }
    let wx = area_weights(w, target_w);
    let wy = area_weights(h, target_h);
    let src = image.pixels.data();
    let shape = Shape4::new(1, 3, target_h, target_w)?;
    let mut out = vec![0.0; shape.len()];
    let mut rows = vec![0.0; h * target_w];
    for c in 0..3 {
        let plane = &src[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for (ox, weights) in wx.iter().enumerate() {
                rows[y * target_w + ox] = weights.iter().map(|&(j, k)| plane[y * w + j] * k).sum();
            }
        }
        for (oy, weights) in wy.iter().enumerate() {
            for ox in 0..target_w {
                let v: f64 = weights.iter().map(|&(j, k)| rows[j * target_w + ox] * k).sum();
                out[(c * target_h + oy) * target_w + ox] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(image.map_pixels(Tensor4::from_vec(shape, out)?))
}

pub fn rgb_to_bgr(image: &Image) -> Image {
    let s = image.pixels.shape();
    let plane = s.plane_len();
    let d = image.pixels.data();
    let mut out = Vec::with_capacity(d.len());
    for c in (0..3).rev() {
        out.extend_from_slice(&d[c * plane..(c + 1) * plane]);
    }
    image.map_pixels(Tensor4::from_vec(s, out).expect("same length"))
}

/// Fractional region `(left, top, right, bottom)` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl CropBox {
    pub const FULL: CropBox = CropBox {
        left: 0.0,
        top: 0.0,
        right: 1.0,
        bottom: 1.0,
    };

    /// Drops the country band on the left of a generated plate and trims the
    /// empty margins around the glyph row.
    pub const PLATE_ROI: CropBox = CropBox {
        left: 0.10,
        top: 0.05,
        right: 0.98,
        bottom: 0.95,
    };

    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let b = CropBox {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.left, self.top, self.right, self.bottom];
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) || self.left >= self.right || self.top >= self.bottom {
            return Err(Error::Parameter(format!("crop box {self:?} is not an ordered sub-rectangle of [0, 1]")));
        }
        Ok(())
    }

    /// Pixel bounds `(x0, y0, x1, y1)`, exclusive on the right and bottom,
    /// rounding half up.
    pub fn resolve(&self, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        let r = |f: f64, n: usize| ((f * n as f64 + 0.5).floor() as usize).min(n);
        let b = (r(self.left, width), r(self.top, height), r(self.right, width), r(self.bottom, height));
        if b.2 <= b.0 || b.3 <= b.1 {
            return Err(Error::Parameter(format!(
                "crop box {self:?} resolves to an empty region on a {width}x{height} image"
            )));
        }
        Ok(b)
    }

    /// `inner` taken relative to `self`.
    pub fn compose(&self, inner: &CropBox) -> CropBox {
        let (w, h) = (self.right - self.left, self.bottom - self.top);
        CropBox {
            left: self.left + inner.left * w,
            top: self.top + inner.top * h,
            right: self.left + inner.right * w,
            bottom: self.top + inner.bottom * h,
        }
    }
}

pub fn crop(image: &Image, b: &CropBox) -> Result<Image> {
    let (x0, y0, x1, y1) = b.resolve(image.width(), image.height())?;
    crop_pixels(image, x0, y0, x1, y1)
}

pub fn crop_pixels(image: &Image, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
    if x1 <= x0 || y1 <= y0 || x1 > image.width() || y1 > image.height() {
        return Err(Error::Parameter(format!("pixel box ({x0}, {y0}, {x1}, {y1}) is outside the image")));
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let shape = Shape4::new(1, 3, h, w)?;
    let mut out = Vec::with_capacity(shape.len());
    let src = image.pixels.data();
    let (sw, sh) = (image.width(), image.height());
    for c in 0..3 {
        for y in y0..y1 {
            let row = (c * sh + y) * sw;
            out.extend_from_slice(&src[row + x0..row + x1]);
        }
    }
    Ok(image.map_pixels(Tensor4::from_vec(shape, out)?))
}

/// 256-bin histogram of the channel-mean gray level.
pub fn gray_histogram(image: &Image) -> ([usize; 256], Vec<u8>) {
    let plane = image.pixels.shape().plane_len();
    let d = image.pixels.data();
    let mut hist = [0usize; 256];
    let bins: Vec<u8> = (0..plane)
        .map(|i| {
            let g = (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0;
            let b = quantize(g);
            hist[b as usize] += 1;
            b
        })
        .collect();
    (hist, bins)
}

/// Between-class variance when bins `0..=t` form the lower class.
pub fn between_class_variance(hist: &[usize; 256], t: usize) -> f64 {
    let total: usize = hist.iter().sum();
    let (mut n0, mut s0) = (0usize, 0.0);
    for (b, &n) in hist.iter().enumerate().take(t + 1) {
        n0 += n;
        s0 += (b * n) as f64;
    }
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let s_all: f64 = hist.iter().enumerate().map(|(b, &n)| (b * n) as f64).sum();
    let (m0, m1) = (s0 / n0 as f64, (s_all - s0) / n1 as f64);
    let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

/// Otsu threshold as a bin index, ties to the lowest; `None` when no split
/// separates anything.
pub fn otsu_threshold(hist: &[usize; 256]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255 {
        let v = between_class_variance(hist, t);
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
}

/// Pixels above the Otsu threshold become 1 in every channel, the rest 0.
/// An image with a single gray level comes out all zeros.
pub fn binarize_otsu(image: &Image) -> Image {
    let (hist, bins) = gray_histogram(image);
    let s = image.pixels.shape();
    let plane = s.plane_len();
    let mut out = vec![0.0; s.len()];
    if let Some(t) = otsu_threshold(&hist) {
        for (i, &b) in bins.iter().enumerate() {
            if b as usize > t {
                for c in 0..3 {
                    out[c * plane + i] = 1.0;
                }
            }
        }
    }
    image.map_pixels(Tensor4::from_vec(s, out).expect("same length"))
}

/// The standard network input: ROI crop, area reduction to 94x24, then
/// RGB to BGR. Returns a `1 x 3 x 24 x 94` tensor.
pub fn to_network_input(image: &Image, roi: &CropBox) -> Result<Tensor4> {
    let cropped = crop(image, roi)?;
    let small = resize_area(&cropped, INPUT_WIDTH, INPUT_HEIGHT)?;
    Ok(rgb_to_bgr(&small).into_tensor())
}

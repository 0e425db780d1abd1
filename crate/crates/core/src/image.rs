//! Image representation, PNG I/O, luminance conversion, and resampling.
//!
//! Pixels live in double precision at unit range; quantization happens only
//! when an image is written out. Supported files are 8/16-bit grayscale and
//! 8-bit RGB PNG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{reflect_index, FeatureMap};

/// Declared numeric range of the stored pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[0, 255]`.
    EightBit,
}

impl ValueRange {
    pub fn max_value(self) -> f64 {
        match self {
            ValueRange::Unit => 1.0,
            ValueRange::EightBit => 255.0,
        }
    }
}

/// Output bit depth for [`save_image_with_depth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

/// A grayscale (1-channel) or RGB (3-channel) image.
///
/// Storage is row-major, channel-interleaved for RGB: `data[(y*w + x)*ch + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
    h: usize,
    w: usize,
    channels: usize,
    range: ValueRange,
    id: String,
}

impl Image {
    pub fn new(
        h: usize,
        w: usize,
        channels: usize,
        range: ValueRange,
        data: Vec<f64>,
        id: impl Into<String>,
    ) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("degenerate image {h}x{w}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "channel count {channels} not in {{1, 3}}"
            )));
        }
        if data.len() != h * w * channels {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{channels} expects {} values, got {}",
                h * w * channels,
                data.len()
            )));
        }
        let max = range.max_value();
        if data.iter().any(|&v| !v.is_finite() || v < 0.0 || v > max) {
            return Err(Error::Shape(format!(
                "pixel values outside declared range [0, {max}]"
            )));
        }
        Ok(Image {
            data,
            h,
            w,
            channels,
            range,
            id: id.into(),
        })
    }

    pub fn constant(h: usize, w: usize, value: f64, id: impl Into<String>) -> Self {
        Image::new(h, w, 1, ValueRange::Unit, vec![value; h * w], id).expect("valid constant")
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        id: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Image::new(h, w, 1, ValueRange::Unit, data, id).expect("valid image")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.channels + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// View a single-channel image as a 1×H×W feature map.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "feature map conversion needs 1 channel, image '{}' has {}",
                self.id, self.channels
            )));
        }
        FeatureMap::from_vec(1, self.h, self.w, self.data.clone())
    }

    /// Wrap a 1×H×W feature map as a unit-range image, clamping to `[0, 1]`.
    pub fn from_feature_map(map: &FeatureMap, id: impl Into<String>) -> Result<Image> {
        if map.channels() != 1 {
            return Err(Error::Shape(format!(
                "image conversion needs 1 channel, map has {}",
                map.channels()
            )));
        }
        let data = map.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(map.height(), map.width(), 1, ValueRange::Unit, data, id)
    }

    /// Remove `border` pixels from every edge.
    pub fn crop_border(&self, border: usize) -> Result<Image> {
        if 2 * border >= self.h || 2 * border >= self.w {
            return Err(Error::Shape(format!(
                "border crop {border} consumes the whole {}x{} image",
                self.h, self.w
            )));
        }
        let nh = self.h - 2 * border;
        let nw = self.w - 2 * border;
        let mut data = Vec::with_capacity(nh * nw * self.channels);
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..self.channels {
                    data.push(self.at(y + border, x + border, c));
                }
            }
        }
        Image::new(nh, nw, self.channels, self.range, data, self.id.clone())
    }
}

fn path_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

/// Load an 8/16-bit grayscale or 8-bit RGB PNG, normalized to unit range.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let id = path_stem(path);
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::new(h, w, 1, ValueRange::Unit, data, id)
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            Image::new(h, w, 1, ValueRange::Unit, data, id)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Image::new(h, w, 3, ValueRange::Unit, data, id)
        }
        other => Err(Error::Format(format!(
            "{}: unsupported pixel layout {:?}; expected 8/16-bit gray or 8-bit RGB",
            path.display(),
            other.color()
        ))),
    }
}

fn quantize(v: f64, range: ValueRange, levels: f64) -> f64 {
    let unit = (v / range.max_value()).clamp(0.0, 1.0);
    (unit * levels).round()
}

/// Save at 8-bit depth. See [`save_image_with_depth`] for 16-bit output.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

/// Quantize to the requested bit depth and write a PNG. Round-tripping
/// through `load_image` stays within half a quantization step per pixel.
pub fn save_image_with_depth(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.w as u32, img.h as u32);
    let write = |buf: &[u8], color: image::ExtendedColorType| -> Result<()> {
        image::save_buffer_with_format(path, buf, w, h, color, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format(format!("{}: {other}", path.display())),
            })
    };
    match (img.channels, depth) {
        (1, BitDepth::Eight) => {
            let buf: Vec<u8> = img
                .data
                .iter()
                .map(|&v| quantize(v, img.range, 255.0) as u8)
                .collect();
            write(&buf, image::ExtendedColorType::L8)
        }
        (1, BitDepth::Sixteen) => {
            let raw: Vec<u16> = img
                .data
                .iter()
                .map(|&v| quantize(v, img.range, 65535.0) as u16)
                .collect();
            let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                image::ImageBuffer::from_raw(w, h, raw).expect("sized buffer");
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(path, io),
                    other => Error::Format(format!("{}: {other}", path.display())),
                })
        }
        (3, BitDepth::Eight) => {
            let buf: Vec<u8> = img
                .data
                .iter()
                .map(|&v| quantize(v, img.range, 255.0) as u8)
                .collect();
            write(&buf, image::ExtendedColorType::Rgb8)
        }
        (3, BitDepth::Sixteen) => Err(Error::Format(
            "16-bit RGB output is not supported".to_string(),
        )),
        _ => unreachable!("channel count validated at construction"),
    }
}

/// BT.601 luminance weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Collapse to the luminance channel. Grayscale input is returned unchanged;
/// RGB is converted with BT.601 weights.
pub fn to_luminance(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let mut data = Vec::with_capacity(img.h * img.w);
            for y in 0..img.h {
                for x in 0..img.w {
                    let v = LUMA_WEIGHTS[0] * img.at(y, x, 0)
                        + LUMA_WEIGHTS[1] * img.at(y, x, 1)
                        + LUMA_WEIGHTS[2] * img.at(y, x, 2);
                    data.push(v.clamp(0.0, img.range.max_value()));
                }
            }
            Image::new(img.h, img.w, 1, img.range, data, img.id.clone())
        }
        n => Err(Error::Shape(format!("channel count {n} not in {{1, 3}}"))),
    }
}

/// Cubic convolution kernel with a = -0.5.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Bicubic resampling (a = -0.5, reflect boundary). Output dimensions are
/// `floor(input * factor)`; results are clamped to the declared value range.
pub fn bicubic_resample(img: &Image, factor: f64) -> Result<Image> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Parameter(format!("resample factor {factor} must be positive")));
    }
    let oh = (img.h as f64 * factor + 1e-9).floor() as usize;
    let ow = (img.w as f64 * factor + 1e-9).floor() as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!(
            "resampling {}x{} by {factor} gives degenerate output {oh}x{ow}",
            img.h, img.w
        )));
    }
    let max = img.range.max_value();
    let mut data = vec![0.0; oh * ow * img.channels];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) / factor - 0.5;
        let y0 = sy.floor() as isize;
        let wy: Vec<f64> = (-1..=2).map(|t| cubic_weight(sy - (y0 + t) as f64)).collect();
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) / factor - 0.5;
            let x0 = sx.floor() as isize;
            let wx: Vec<f64> = (-1..=2).map(|t| cubic_weight(sx - (x0 + t) as f64)).collect();
            for c in 0..img.channels {
                let mut acc = 0.0;
                for (ti, wyv) in wy.iter().enumerate() {
                    let yy = reflect_index(y0 - 1 + ti as isize, img.h);
                    for (tj, wxv) in wx.iter().enumerate() {
                        let xx = reflect_index(x0 - 1 + tj as isize, img.w);
                        acc += wyv * wxv * img.at(yy, xx, c);
                    }
                }
                data[(oy * ow + ox) * img.channels + c] = acc.clamp(0.0, max);
            }
        }
    }
    Image::new(oh, ow, img.channels, img.range, data, img.id.clone())
}

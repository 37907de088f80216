//! Binary PNM rasters (P5 grayscale, P6 RGB) and bilinear resampling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub microns_per_pixel: f64,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
        microns_per_pixel: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Data(format!(
                "image must be nonempty with 1 or 3 channels, got {width}x{height}x{channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{} pixel bytes for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        if !(microns_per_pixel > 0.0 && microns_per_pixel.is_finite()) {
            return Err(Error::Data(format!("microns_per_pixel must be > 0, got {microns_per_pixel}")));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
            microns_per_pixel,
        })
    }

    /// Copies the `side × side` square at `(x, y)` as RGB.
    pub fn crop_rgb(&self, x: usize, y: usize, side: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(side * side * 3);
        for r in y..y + side {
            let start = (r * self.width + x) * self.channels;
            let row = &self.pixels[start..start + side * self.channels];
            if self.channels == 3 {
                out.extend_from_slice(row);
            } else {
                for &v in row {
                    out.extend_from_slice(&[v, v, v]);
                }
            }
        }
        out
    }
}

fn next_token(buf: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format {
            offset: start as u64,
            msg: "unexpected end of PNM header".into(),
        });
    }
    Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
}

/// Parses a P5 or P6 image with maxval 255.
pub fn decode_pnm(buf: &[u8], microns_per_pixel: f64) -> Result<RasterImage> {
    let mut pos = 0;
    let magic = next_token(buf, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported PNM magic {other:?}, expected P5 or P6"),
            })
        }
    };
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let at = pos;
        let tok = next_token(buf, &mut pos)?;
        *n = tok.parse().map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("bad PNM header field {tok:?}"),
        })?;
    }
    let [width, height, maxval] = nums;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("only 8-bit PNM is supported, maxval {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    if buf.len() < pos + need {
        return Err(Error::Format {
            offset: buf.len() as u64,
            msg: format!("PNM raster truncated: need {need} bytes after offset {pos}"),
        });
    }
    RasterImage::new(width, height, channels, buf[pos..pos + need].to_vec(), microns_per_pixel)
}

pub fn read_pnm(path: &Path, microns_per_pixel: f64) -> Result<RasterImage> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&buf, microns_per_pixel)
}

pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pnm(img: &RasterImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centers and clamped borders. Equal
/// sizes return the input unchanged.
pub fn resize_bilinear(
    src: &[u8],
    w: usize,
    h: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<u8> {
    if w == out_w && h == out_h {
        return src.to_vec();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = vec![0u8; out_w * out_h * channels];
    let axis = |o: usize, scale: f64, len: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, w);
            for c in 0..channels {
                let at = |x: usize, y: usize| src[(y * w + x) * channels + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[(oy * out_w + ox) * channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

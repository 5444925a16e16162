use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 16;
const VIMG_MAGIC: &[u8; 4] = b"VIMG";
const VIMG_VERSION: u32 = 1;

/// RGB image with values in `[0, 1]`, stored row-major as `h×w×3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawImage", into = "RawImage")]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TryFrom<RawImage> for Image {
    type Error = Error;
    fn try_from(r: RawImage) -> Result<Image> {
        Image::new(r.height, r.width, r.data)
    }
}

impl From<Image> for RawImage {
    fn from(i: Image) -> RawImage {
        RawImage {
            height: i.height,
            width: i.width,
            data: i.data,
        }
    }
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Validation(format!(
                "image {height}×{width} is smaller than {MIN_SIDE}×{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Validation(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Image> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[o + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at cell centres of an `out_h×out_w` grid.
    pub fn resample(&self, out_h: usize, out_w: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_h * out_w * 3];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * self.height as f64 / out_h as f64 - 0.5)
                .clamp(0.0, (self.height - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * self.width as f64 / out_w as f64 - 0.5)
                    .clamp(0.0, (self.width - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f64;
                for c in 0..3 {
                    let at = |y: usize, x: usize| self.data[(y * self.width + x) * 3 + c];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out[(oy * out_w + ox) * 3 + c] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Writes the raw `.vimg` grid: magic `VIMG`, version, height, width,
    /// channels (all `u32` LE), then `f32` values.
    pub fn write_vimg<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(VIMG_MAGIC)?;
        for v in [VIMG_VERSION, self.height as u32, self.width as u32, 3] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_vimg<R: Read>(r: &mut R) -> Result<Image> {
        let bad = |m: &str| Error::Validation(format!("vimg: {m}"));
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != VIMG_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VIMG_VERSION {
            return Err(bad("unsupported version"));
        }
        let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if c != 3 {
            return Err(bad("only 3-channel images are supported"));
        }
        let mut raw = vec![0u8; h * w * 3 * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Image::new(h, w, data)
    }

    pub fn save_vimg(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_vimg(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_vimg(path: &Path) -> Result<Image> {
        let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        Image::read_vimg(&mut f)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Validation(format!("cannot decode image: {e}")))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| f64::from(*v) / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    /// 8-bit PNG encoding (values are rounded to the nearest level).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw = self.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Validation("image buffer does not match its size".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("cannot encode image: {e}")))?;
        Ok(out.into_inner())
    }

    /// Loads `.vimg` files natively and anything else through the image decoder.
    pub fn load(path: &Path) -> Result<Image> {
        if path.extension().and_then(|e| e.to_str()) == Some("vimg") {
            return Image::load_vimg(path);
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_png_bytes(&bytes)
    }
}

/// Axis-aligned box in absolute pixels, `(x_min, y_min, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

impl Bbox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Bbox {
        Bbox {
            x_min,
            y_min,
            width,
            height,
        }
    }

    pub fn from_xywh(v: [f64; 4]) -> Bbox {
        Bbox::new(v[0], v[1], v[2], v[3])
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> [f64; 4] {
        [
            self.x_min,
            self.y_min,
            self.x_min + self.width,
            self.y_min + self.height,
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Bbox {
        let (x1, x2) = (c[0].min(c[2]), c[0].max(c[2]));
        let (y1, y2) = (c[1].min(c[3]), c[1].max(c[3]));
        Bbox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn validate(&self, image_width: f64, image_height: f64) -> Result<()> {
        let vals = [self.x_min, self.y_min, self.width, self.height];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("bbox has non-finite coordinates".into()));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Validation(format!(
                "bbox has zero area ({}×{})",
                self.width, self.height
            )));
        }
        let [x1, y1, x2, y2] = self.to_corners();
        if x1 < 0.0 || y1 < 0.0 || x2 > image_width + 1e-9 || y2 > image_height + 1e-9 {
            return Err(Error::Validation(format!(
                "bbox [{x1}, {y1}, {x2}, {y2}] exceeds image {image_width}×{image_height}"
            )));
        }
        Ok(())
    }

    /// Normalised `(x_min, y_min, width, height)` against the image size.
    pub fn normalized(&self, image_width: f64, image_height: f64) -> [f64; 4] {
        [
            self.x_min / image_width,
            self.y_min / image_height,
            self.width / image_width,
            self.height / image_height,
        ]
    }
}

//! Bit-exact binary raster format and PNG export.
//!
//! Every image exchanged between CLI stages is a `PRAS` file: a 16-byte
//! header (magic, version, layout, width, height, all little-endian)
//! followed by float32 samples in row-major, channel-interleaved order.
//! Storage is float32 to keep files small; all in-memory math stays in
//! float64 and converts at this boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::decomp;
use crate::error::{Error, Result};
use crate::polmath::CovarianceMatrix;

pub const MAGIC: [u8; 4] = *b"PRAS";
pub const FORMAT_VERSION: u16 = 1;

/// Channel layout of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Single intensity plane.
    Gray1,
    /// Covariance planes C11, C22, C33, Re C12, Im C12, Re C13, Im C13,
    /// Re C23, Im C23.
    Cov9,
    /// Integer class labels stored as float32.
    Class1,
    /// The nine decoded feature parameter planes in head order.
    Param9,
}

impl Layout {
    pub fn channels(self) -> usize {
        match self {
            Layout::Gray1 | Layout::Class1 => 1,
            Layout::Cov9 | Layout::Param9 => 9,
        }
    }

    fn code(self) -> u16 {
        match self {
            Layout::Gray1 => 0,
            Layout::Cov9 => 1,
            Layout::Class1 => 2,
            Layout::Param9 => 3,
        }
    }

    fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(Layout::Gray1),
            1 => Ok(Layout::Cov9),
            2 => Ok(Layout::Class1),
            3 => Ok(Layout::Param9),
            other => Err(Error::UnknownLayout(other)),
        }
    }
}

/// In-memory raster: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolRaster {
    pub width: u32,
    pub height: u32,
    pub layout: Layout,
    pub data: Vec<f32>,
}

impl PolRaster {
    pub fn new(width: u32, height: u32, layout: Layout) -> Self {
        let len = width as usize * height as usize * layout.channels();
        Self {
            width,
            height,
            layout,
            data: vec![0.0; len],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32, c: usize) -> f32 {
        let ch = self.layout.channels();
        self.data[(y as usize * self.width as usize + x as usize) * ch + c]
    }

    pub fn set(&mut self, x: u32, y: u32, c: usize, v: f32) {
        let ch = self.layout.channels();
        self.data[(y as usize * self.width as usize + x as usize) * ch + c] = v;
    }

    /// Covariance matrix at a pixel (COV9 layout).
    pub fn covariance(&self, x: u32, y: u32) -> Result<CovarianceMatrix> {
        if self.layout != Layout::Cov9 {
            return Err(Error::ShapeMismatch {
                expected: "COV9 layout".into(),
                got: format!("{:?}", self.layout),
            });
        }
        let v: Vec<f64> = (0..9).map(|c| self.get(x, y, c) as f64).collect();
        CovarianceMatrix::new(
            v[0],
            v[1],
            v[2],
            Complex64::new(v[3], v[4]),
            Complex64::new(v[5], v[6]),
            Complex64::new(v[7], v[8]),
        )
    }

    pub fn set_covariance(&mut self, x: u32, y: u32, cov: &CovarianceMatrix) {
        let d = cov.diag();
        let c12 = cov.get(0, 1);
        let c13 = cov.get(0, 2);
        let c23 = cov.get(1, 2);
        for (c, v) in [
            d[0], d[1], d[2], c12.re, c12.im, c13.re, c13.im, c23.re, c23.im,
        ]
        .into_iter()
        .enumerate()
        {
            self.set(x, y, c, v as f32);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.layout.code().to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(truncation)?;
        if header[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let layout = Layout::from_code(u16::from_le_bytes([header[6], header[7]]))?;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let len = width as usize * height as usize * layout.channels();
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload).map_err(truncation)?;
        // Anything beyond the declared payload is a malformed file too, but
        // reading stops exactly at the payload boundary by design.
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            layout,
            data,
        })
    }
}

fn truncation(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::TruncatedPayload
    } else {
        Error::Io(e)
    }
}

/// Rendering mode for [`export_png`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PngMode {
    /// GRAY1 intensity displayed in dB over [−25, 0].
    GrayDb,
    /// GRAY1 values displayed linearly with a 97th-percentile white point
    /// (for non-intensity planes such as distance maps).
    GrayLinear,
    /// COV9 rendered with the Pauli color coding.
    Pauli,
    /// COV9 rendered with Freeman-Durden powers (R = double-bounce,
    /// G = volume, B = surface).
    Freeman,
    /// CLASS1 zone labels rendered with a fixed 8-color palette.
    HAlphaZones,
}

const ZONE_PALETTE: [[u8; 3]; 9] = [
    [40, 40, 40],    // 0: unused / background
    [0, 60, 200],    // 1: low-entropy surface
    [90, 200, 250],  // 2: low-entropy dipole
    [200, 30, 30],   // 3: low-entropy multiple
    [60, 120, 220],  // 4: medium-entropy surface
    [60, 180, 60],   // 5: medium-entropy vegetation
    [230, 120, 40],  // 6: medium-entropy multiple
    [140, 220, 100], // 7: high-entropy vegetation
    [240, 220, 60],  // 8: high-entropy multiple
];

/// Render a raster to an 8-bit PNG.
///
/// Grayscale uses the fixed [−25, 0] dB window; color modes stretch each
/// channel in dB with the channel's 97th-percentile value as the white
/// point and a 25 dB window below it.
pub fn export_png(raster: &PolRaster, mode: PngMode, path: &Path) -> Result<()> {
    let w = raster.width;
    let h = raster.height;
    let mut rgb = vec![0u8; w as usize * h as usize * 3];
    match (mode, raster.layout) {
        (PngMode::GrayDb, Layout::Gray1) => {
            for (i, &v) in raster.data.iter().enumerate() {
                let g = db_byte(v as f64, 0.0);
                rgb[i * 3] = g;
                rgb[i * 3 + 1] = g;
                rgb[i * 3 + 2] = g;
            }
        }
        (PngMode::GrayLinear, Layout::Gray1) => {
            let mut vals: Vec<f64> = raster.data.iter().map(|&v| v as f64).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = ((vals.len() - 1) as f64 * 0.97).round() as usize;
            let white = vals[idx].max(f64::MIN_POSITIVE);
            for (i, &v) in raster.data.iter().enumerate() {
                let g = ((v as f64 / white).clamp(0.0, 1.0) * 255.0).round() as u8;
                rgb[i * 3] = g;
                rgb[i * 3 + 1] = g;
                rgb[i * 3 + 2] = g;
            }
        }
        (PngMode::Pauli, Layout::Cov9) => {
            let mut planes = vec![[0.0f64; 3]; raster.pixels()];
            for y in 0..h {
                for x in 0..w {
                    let cov = raster.covariance(x, y)?;
                    let (r, g, b) = decomp::pauli_rgb(&cov);
                    planes[(y * w + x) as usize] = [r, g, b];
                }
            }
            color_stretch(&planes, &mut rgb);
        }
        (PngMode::Freeman, Layout::Cov9) => {
            let mut planes = vec![[0.0f64; 3]; raster.pixels()];
            for y in 0..h {
                for x in 0..w {
                    let cov = raster.covariance(x, y)?;
                    let p = decomp::freeman_durden(&cov);
                    planes[(y * w + x) as usize] = [p.pd, p.pv, p.ps];
                }
            }
            color_stretch(&planes, &mut rgb);
        }
        (PngMode::HAlphaZones, Layout::Class1) => {
            for (i, &v) in raster.data.iter().enumerate() {
                let zone = (v.round() as usize).min(8);
                rgb[i * 3..i * 3 + 3].copy_from_slice(&ZONE_PALETTE[zone]);
            }
        }
        (mode, layout) => {
            return Err(Error::ShapeMismatch {
                expected: format!("layout compatible with {mode:?}"),
                got: format!("{layout:?}"),
            })
        }
    }
    let img = image::RgbImage::from_raw(w, h, rgb).expect("buffer sized to raster");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Png(e.to_string()))
}

/// Map a linear power to a display byte: dB relative to `white_db`, with a
/// 25 dB window.
fn db_byte(power: f64, white_db: f64) -> u8 {
    if power <= 0.0 {
        return 0;
    }
    let db = 10.0 * power.log10();
    let t = ((db - (white_db - 25.0)) / 25.0).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

fn color_stretch(planes: &[[f64; 3]], rgb: &mut [u8]) {
    let mut whites = [0.0f64; 3];
    for (c, white) in whites.iter_mut().enumerate() {
        let mut vals: Vec<f64> = planes.iter().map(|p| p[c]).filter(|v| *v > 0.0).collect();
        if vals.is_empty() {
            *white = 0.0;
            continue;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((vals.len() - 1) as f64 * 0.97).round() as usize;
        *white = 10.0 * vals[idx].log10();
    }
    for (i, p) in planes.iter().enumerate() {
        for c in 0..3 {
            rgb[i * 3 + c] = db_byte(p[c], whites[c]);
        }
    }
}

//! Desk-scale encoders: whitespace/punctuation tokenization, seeded hash
//! embeddings for text, and a seeded linear patch embedding for toy images.

use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, TokenMatrix};

pub const PAD_SYMBOL: &str = "[PAD]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    tokens: Vec<String>,
}

impl TextTokens {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.iter().any(String::is_empty) {
            return Err(Error::config("empty token"));
        }
        Ok(TextTokens { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_symbol(&self) -> &'static str {
        PAD_SYMBOL
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || matches!(
            c,
            ',' | '.' | '[' | ']' | '(' | ')' | '{' | '}' | ';' | ':' | '!' | '?' | '"'
        )
}

/// Lowercases and splits on whitespace and punctuation. Hyphens survive, so
/// `pink-white` stays one token.
pub fn tokenize(text: &str) -> TextTokens {
    let tokens = text
        .to_lowercase()
        .split(is_separator)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    TextTokens { tokens }
}

/// Unit-norm embedding of one token, a pure function of `(token, seed)`.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"promptground-token");
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Embeds tokens into `pad_to` rows; pad rows are zero and masked out.
pub fn embed_text(tokens: &TextTokens, dim: usize, pad_to: usize, seed: u64) -> Result<TokenMatrix> {
    if tokens.len() > pad_to {
        return Err(Error::Capacity {
            count: tokens.len(),
            limit: pad_to,
        });
    }
    if dim == 0 || pad_to == 0 {
        return Err(Error::config("embedding needs dim > 0 and pad_to > 0"));
    }
    let mut data = Matrix::zeros(pad_to, dim);
    let mut mask = vec![false; pad_to];
    for (i, tok) in tokens.tokens().iter().enumerate() {
        data.row_mut(i).copy_from_slice(&token_vector(tok, dim, seed));
        mask[i] = true;
    }
    TokenMatrix::new(data, mask)
}

/// Interleaved-channel raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ToyImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config("images have 1 or 3 channels"));
        }
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::config(format!(
                "pixel buffer of {} values does not fit {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NumericDomain("pixel values must lie in [0, 1]".into()));
        }
        Ok(ToyImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        ToyImage::new(width, height, channels, vec![value; width * height * channels])
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: usize, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::NumericDomain(format!("pixel value {v}")));
        }
        self.pixels[(y * self.width + x) * self.channels + c] = v;
        Ok(())
    }

    pub fn check_patch(&self, patch: usize) -> Result<PatchGrid> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 {
            return Err(Error::config(format!(
                "{}x{} image is not divisible by patch size {patch}",
                self.width, self.height
            )));
        }
        Ok(PatchGrid {
            cols: self.width / patch,
            rows: self.height / patch,
            patch,
        })
    }

    /// Flattened patch at grid cell `(cx, cy)`: rows, then columns, then channels.
    pub fn patch_values(&self, cx: usize, cy: usize, patch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(patch * patch * self.channels);
        for y in cy * patch..(cy + 1) * patch {
            let start = (y * self.width + cx * patch) * self.channels;
            out.extend_from_slice(&self.pixels[start..start + patch * self.channels]);
        }
        out
    }

    pub fn read_pnm(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = if img.color().has_color() {
            (3, img.to_rgb8().into_raw())
        } else {
            (1, img.to_luma8().into_raw())
        };
        ToyImage::new(w, h, channels, raw.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// Writes a textual PGM (1 channel) or PPM (3 channels), 8-bit.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p * 255.0).round() as u8)
            .collect();
        let (subtype, color) = if self.channels == 1 {
            (PnmSubtype::Graymap(SampleEncoding::Ascii), ExtendedColorType::L8)
        } else {
            (PnmSubtype::Pixmap(SampleEncoding::Ascii), ExtendedColorType::Rgb8)
        };
        PnmEncoder::new(BufWriter::new(file))
            .with_subtype(subtype)
            .write_image(&raw, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Patch grid geometry shared by the image embedding and the anchor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub cols: usize,
    pub rows: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn cells(&self) -> usize {
        self.cols * self.rows
    }

    /// Row-major cell index to `(cx, cy)`.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.cols, index / self.cols)
    }

    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.cols + cx
    }

    /// Pixel box `(x1, y1, x2, y2)` of a cell.
    pub fn cell_box(&self, index: usize) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.cell(index);
        let p = self.patch as f64;
        (cx as f64 * p, cy as f64 * p, (cx + 1) as f64 * p, (cy + 1) as f64 * p)
    }
}

/// Seeded linear patch map. The last output coordinate is reserved for the
/// patch's mean intensity; every other coordinate's weights sum to zero over
/// the patch so a flat patch contributes only through that coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedder {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
    patch: usize,
    channels: usize,
}

impl ImageEmbedder {
    pub fn new(weight: Matrix, bias: Vec<f64>, patch: usize, channels: usize) -> Result<Self> {
        if weight.rows() != patch * patch * channels || bias.len() != weight.cols() {
            return Err(Error::config(format!(
                "image embedder {}x{} (bias {}) does not fit patch {patch} with {channels} channels",
                weight.rows(),
                weight.cols(),
                bias.len()
            )));
        }
        if weight.cols() < 2 {
            return Err(Error::config("image embedding needs dim >= 2"));
        }
        Ok(ImageEmbedder {
            weight,
            bias,
            patch,
            channels,
        })
    }

    pub fn seeded(dim: usize, patch: usize, channels: usize, seed: u64) -> Result<Self> {
        let pixels = patch * patch * channels;
        let mut rng = crate::weights::rng_for(seed, "image-embed");
        let std = 16.0 / (pixels as f64).sqrt();
        let mut weight = Matrix::zeros(pixels, dim);
        for c in 0..dim - 1 {
            let col: Vec<f64> = (0..pixels)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); std * z })
                .collect();
            let mean = col.iter().sum::<f64>() / pixels as f64;
            for (r, v) in col.iter().enumerate() {
                weight.set(r, c, v - mean);
            }
        }
        let bias = (0..dim)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.05 * z })
            .collect();
        ImageEmbedder::new(weight, bias, patch, channels)
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Embedding of one flattened patch.
    pub fn embed_patch(&self, values: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.bias.clone();
        for (k, &x) in values.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(k)) {
                *o += x * w;
            }
        }
        out[d - 1] += values.iter().sum::<f64>() / values.len() as f64;
        out
    }
}

/// One row per patch, row-major over the grid, all valid.
pub fn embed_image(img: &ToyImage, embedder: &ImageEmbedder) -> Result<TokenMatrix> {
    let grid = img.check_patch(embedder.patch)?;
    if img.channels != embedder.channels {
        return Err(Error::config(format!(
            "image has {} channels, embedder expects {}",
            img.channels, embedder.channels
        )));
    }
    let mut data = Matrix::zeros(grid.cells(), embedder.dim());
    for idx in 0..grid.cells() {
        let (cx, cy) = grid.cell(idx);
        let row = embedder.embed_patch(&img.patch_values(cx, cy, embedder.patch));
        data.row_mut(idx).copy_from_slice(&row);
    }
    TokenMatrix::dense(data)
}

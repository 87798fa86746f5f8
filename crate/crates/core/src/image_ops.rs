//! Raster operations over RGB screenshots.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::font;
use crate::geometry::{BBox, CropFrame, GeometryError, ImageDims};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot encode PNG: {0}")]
    Encode(#[source] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("grid {rows}x{cols} does not fit a {dims} image")]
    InvalidGrid { rows: u32, cols: u32, dims: ImageDims },
    #[error("pixel buffer of {len} bytes does not match {dims}")]
    BufferSize { len: usize, dims: ImageDims },
}

pub type Rgb = [u8; 3];

pub const BLACK: Rgb = [0, 0, 0];
pub const GREEN: Rgb = [0, 255, 0];
pub const RED: Rgb = [255, 0, 0];
pub const WHITE: Rgb = [255, 255, 255];

pub const STROKE_WIDTH: u32 = 3;
const LABEL_SCALE: u32 = 2;
const LABEL_PAD: u32 = 2;

/// Row-major RGB raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    dims: ImageDims,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster").field("dims", &self.dims).finish_non_exhaustive()
    }
}

impl Raster {
    pub fn filled(dims: ImageDims, color: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(dims.area() as usize * 3);
        for _ in 0..dims.area() {
            pixels.extend_from_slice(&color);
        }
        Self { dims, pixels }
    }

    pub fn from_pixels(dims: ImageDims, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() as u64 != dims.area() * 3 {
            return Err(ImageError::BufferSize {
                len: pixels.len(),
                dims,
            });
        }
        Ok(Self { dims, pixels })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.dims.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, color: Rgb) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&color);
    }

    /// Fill a box (clipped to the raster) with a solid colour, in place.
    pub fn fill_box(&mut self, b: BBox, color: Rgb) {
        let Some(b) = b.clip(self.dims) else { return };
        for y in b.y1..=b.y2 {
            let start = self.offset(b.x1, y);
            let end = self.offset(b.x2, y) + 3;
            for px in self.pixels[start..end].chunks_exact_mut(3) {
                px.copy_from_slice(&color);
            }
        }
    }

    /// Count pixels inside `b` (clipped) that are exactly `color`.
    pub fn count_color(&self, b: BBox, color: Rgb) -> u64 {
        let Some(b) = b.clip(self.dims) else { return 0 };
        let mut n = 0;
        for y in b.y1..=b.y2 {
            let start = self.offset(b.x1, y);
            let end = self.offset(b.x2, y) + 3;
            n += self.pixels[start..end]
                .chunks_exact(3)
                .filter(|px| *px == color)
                .count() as u64;
        }
        n
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.dims.width, self.dims.height, self.pixels.clone())
            .expect("buffer length is an invariant of Raster")
    }

    pub fn from_rgb_image(img: image::RgbImage) -> Result<Self, ImageError> {
        let dims = ImageDims::new(img.width(), img.height())?;
        Self::from_pixels(dims, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(ImageError::Encode)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| ImageError::Encode(image::ImageError::IoError(e)))
    }
}

/// Number of blocks along each axis for grid partitioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
}

impl GridSpec {
    pub fn new(rows: u32, cols: u32) -> Option<Self> {
        (rows >= 1 && cols >= 1).then_some(Self { rows, cols })
    }

    pub fn cells(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn fits(&self, dims: ImageDims) -> bool {
        self.rows >= 1 && self.cols >= 1 && self.rows <= dims.height && self.cols <= dims.width
    }
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    /// Parses `RxC`, e.g. `16x16`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected RxC, got {s:?}"))?;
        let rows: u32 = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
        let cols: u32 = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
        GridSpec::new(rows, cols).ok_or_else(|| format!("grid must be at least 1x1, got {s:?}"))
    }
}

pub fn load_image(path: &Path) -> Result<Raster, ImageError> {
    if !path.is_file() {
        return Err(ImageError::Missing(path.to_path_buf()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| ImageError::Decode {
            path: path.to_path_buf(),
            source: image::ImageError::IoError(e),
        })?
        .with_guessed_format()
        .map_err(|e| ImageError::Decode {
            path: path.to_path_buf(),
            source: image::ImageError::IoError(e),
        })?
        .decode()
        .map_err(|source| ImageError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
    Raster::from_rgb_image(img.to_rgb8())
}

pub fn crop(img: &Raster, frame: CropFrame) -> Result<Raster, ImageError> {
    frame.check_fits(img.dims)?;
    let row_bytes = frame.dims.width as usize * 3;
    let mut pixels = Vec::with_capacity(frame.dims.area() as usize * 3);
    for v in 0..frame.dims.height {
        let start = img.offset(frame.origin.x, frame.origin.y + v);
        pixels.extend_from_slice(&img.pixels[start..start + row_bytes]);
    }
    Ok(Raster {
        dims: frame.dims,
        pixels,
    })
}

/// Copy of `img` with every region (clipped to the image) filled black.
pub fn mask_regions(img: &Raster, regions: &[BBox]) -> Raster {
    let mut out = img.clone();
    for r in regions {
        out.fill_box(*r, BLACK);
    }
    out
}

/// Partition `dims` into `grid.rows × grid.cols` blocks in row-major order.
/// The last row and column absorb any remainder.
pub fn grid_blocks(dims: ImageDims, grid: GridSpec) -> Result<Vec<BBox>, ImageError> {
    if !grid.fits(dims) {
        return Err(ImageError::InvalidGrid {
            rows: grid.rows,
            cols: grid.cols,
            dims,
        });
    }
    let spans = |full: u32, n: u32| -> Vec<(u32, u32)> {
        let step = full / n;
        (0..n)
            .map(|i| {
                let start = i * step;
                let end = if i + 1 == n { full - 1 } else { start + step - 1 };
                (start, end)
            })
            .collect()
    };
    let rows = spans(dims.height, grid.rows);
    let cols = spans(dims.width, grid.cols);
    let mut blocks = Vec::with_capacity(grid.cells() as usize);
    for &(y1, y2) in &rows {
        for &(x1, x2) in &cols {
            blocks.push(BBox { x1, y1, x2, y2 });
        }
    }
    Ok(blocks)
}

/// Index of the grid cell holding `(x, y)`, consistent with [`grid_blocks`].
pub fn grid_cell_of(dims: ImageDims, grid: GridSpec, x: u32, y: u32) -> (u32, u32) {
    let row = (y / (dims.height / grid.rows)).min(grid.rows - 1);
    let col = (x / (dims.width / grid.cols)).min(grid.cols - 1);
    (row, col)
}

/// Draw a labelled rectangle. The stroke runs along the inside of `b`; the
/// label sits just above the box's top-left corner, or inside the box when
/// there is no room above it.
pub fn annotate_box(img: &Raster, b: BBox, color: Rgb, label: &str) -> Raster {
    let mut out = img.clone();
    let Some(b) = b.clip(img.dims) else { return out };

    let s = STROKE_WIDTH;
    let top = BBox { y2: (b.y1 + s - 1).min(b.y2), ..b };
    let bottom = BBox { y1: b.y2.saturating_sub(s - 1).max(b.y1), ..b };
    let left = BBox { x2: (b.x1 + s - 1).min(b.x2), ..b };
    let right = BBox { x1: b.x2.saturating_sub(s - 1).max(b.x1), ..b };
    for edge in [top, bottom, left, right] {
        out.fill_box(edge, color);
    }

    if label.is_empty() {
        return out;
    }
    let n = label.chars().count() as u32;
    let glyph_w = font::GLYPH_WIDTH * LABEL_SCALE;
    let glyph_h = font::GLYPH_HEIGHT * LABEL_SCALE;
    let tag_w = n * glyph_w + (n - 1) * LABEL_SCALE + 2 * LABEL_PAD;
    let tag_h = glyph_h + 2 * LABEL_PAD;
    let (tx, ty) = if b.y1 >= tag_h {
        (b.x1, b.y1 - tag_h)
    } else {
        (b.x1 + s, b.y1 + s)
    };
    let tag = BBox {
        x1: tx,
        y1: ty,
        x2: tx + tag_w - 1,
        y2: ty + tag_h - 1,
    };
    out.fill_box(tag, color);
    for (i, c) in label.chars().enumerate() {
        let gx = tx + LABEL_PAD + i as u32 * (glyph_w + LABEL_SCALE);
        let gy = ty + LABEL_PAD;
        let rows = font::glyph(c);
        for row in 0..font::GLYPH_HEIGHT {
            for col in 0..font::GLYPH_WIDTH {
                if font::is_set(rows, col, row) {
                    let cell = BBox {
                        x1: gx + col * LABEL_SCALE,
                        y1: gy + row * LABEL_SCALE,
                        x2: gx + col * LABEL_SCALE + LABEL_SCALE - 1,
                        y2: gy + row * LABEL_SCALE + LABEL_SCALE - 1,
                    };
                    out.fill_box(cell, WHITE);
                }
            }
        }
    }
    out
}

pub fn encode_png_base64(img: &Raster) -> Result<String, ImageError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(img.encode_png()?))
}

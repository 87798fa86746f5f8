//! Masked prediction distribution: mask random grid blocks, re-ground, and
//! look at where the predicted centers land.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CallContext, GroundingBackend, GroundingRequest};
use crate::geometry::{ImageDims, Point, TransformStack};
use crate::image_ops::{grid_blocks, grid_cell_of, mask_regions, GridSpec, ImageError, Raster};
use crate::seeding::keyed_rng;

#[derive(Debug, Error)]
pub enum MpdError {
    #[error("invalid MPD configuration: {0}")]
    Config(String),
    #[error("all {samples} masked predictions failed (first error: {first})")]
    EmptyResult { samples: u32, first: String },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpdConfig {
    pub grid: GridSpec,
    pub samples: u32,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for MpdConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec { rows: 16, cols: 16 },
            samples: 300,
            alpha_min: 0.1,
            alpha_max: 0.9,
            seed: 0,
        }
    }
}

impl MpdConfig {
    pub fn validate(&self) -> Result<(), MpdError> {
        if self.samples == 0 {
            return Err(MpdError::Config("samples must be at least 1".into()));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(MpdError::Config("grid must be at least 1x1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_min)
            || !(0.0..=1.0).contains(&self.alpha_max)
            || self.alpha_min > self.alpha_max
        {
            return Err(MpdError::Config(format!(
                "need 0 <= alpha_min <= alpha_max <= 1, got [{}, {}]",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// One mask draw: the ratio and the row-major block ids it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDraw {
    pub k: u32,
    pub alpha: f64,
    pub blocks: Vec<u32>,
}

/// The `k`-th mask of a run. Depends only on the config and `k`.
pub fn draw_mask(cfg: &MpdConfig, k: u32) -> MaskDraw {
    let mut rng = keyed_rng(&[b"mpd", &cfg.seed.to_le_bytes(), &k.to_le_bytes()]);
    let alpha = if cfg.alpha_max > cfg.alpha_min {
        rng.random_range(cfg.alpha_min..=cfg.alpha_max)
    } else {
        cfg.alpha_min
    };
    let cells = cfg.grid.cells();
    let count = ((alpha * cells as f64).floor() as u32).min(cells);
    let mut blocks: Vec<u32> = sample(&mut rng, cells as usize, count as usize)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    blocks.sort_unstable();
    MaskDraw { k, alpha, blocks }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdPoint {
    pub k: u32,
    pub point: Point,
    pub alpha: f64,
    pub masked_block_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdFailure {
    pub k: u32,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdResult {
    pub grid: GridSpec,
    pub points: Vec<MpdPoint>,
    pub failures: Vec<MpdFailure>,
    /// `heat[row][col]`: recorded points per grid cell.
    pub heat: Vec<Vec<u64>>,
}

impl MpdResult {
    pub fn dropped(&self) -> usize {
        self.failures.len()
    }
}

/// Run `cfg.samples` masked predictions. Draws run in parallel on the
/// current rayon pool; results come back ordered by `k`.
pub fn run_mpd(
    ground: &dyn GroundingBackend,
    query: &str,
    img: &Raster,
    cfg: &MpdConfig,
    ctx: &CallContext,
) -> Result<MpdResult, MpdError> {
    cfg.validate()?;
    let dims = img.dims();
    let blocks = grid_blocks(dims, cfg.grid)?;
    let frames = TransformStack::new(dims);

    let outcomes: Vec<Result<MpdPoint, MpdFailure>> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| {
            let draw = draw_mask(cfg, k);
            let regions: Vec<_> = draw.blocks.iter().map(|&b| blocks[b as usize]).collect();
            let masked = mask_regions(img, &regions);
            let req = GroundingRequest {
                query,
                image: &masked,
                frames: &frames,
                call_index: k,
                ctx,
            };
            match ground.ground(&req) {
                Ok(pred) => Ok(MpdPoint {
                    k,
                    point: pred.anchor(dims),
                    alpha: draw.alpha,
                    masked_block_ids: draw.blocks,
                }),
                Err(e) => Err(MpdFailure {
                    k,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                }),
            }
        })
        .collect();

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => points.push(p),
            Err(f) => failures.push(f),
        }
    }
    if points.is_empty() {
        return Err(MpdError::EmptyResult {
            samples: cfg.samples,
            first: failures.first().map(|f| f.message.clone()).unwrap_or_default(),
        });
    }
    if !failures.is_empty() {
        log::warn!("MPD dropped {} of {} predictions", failures.len(), cfg.samples);
    }
    let pts: Vec<Point> = points.iter().map(|p| p.point).collect();
    let heat = aggregate_heatmap(&pts, dims, cfg.grid)?;
    Ok(MpdResult {
        grid: cfg.grid,
        points,
        failures,
        heat,
    })
}

/// Count points per grid cell. Points outside `dims` are clamped to the edge.
pub fn aggregate_heatmap(points: &[Point], dims: ImageDims, cells: GridSpec) -> Result<Vec<Vec<u64>>, ImageError> {
    grid_blocks(dims, cells)?;
    let mut heat = vec![vec![0u64; cells.cols as usize]; cells.rows as usize];
    for p in points {
        let x = p.x.min(dims.width - 1);
        let y = p.y.min(dims.height - 1);
        let (r, c) = grid_cell_of(dims, cells, x, y);
        heat[r as usize][c as usize] += 1;
    }
    Ok(heat)
}

pub fn write_scatter_csv(points: &[MpdPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "k,alpha,x,y")?;
    for p in points {
        writeln!(w, "{},{:.6},{},{}", p.k, p.alpha, p.point.x, p.point.y)?;
    }
    Ok(())
}

pub fn write_heatmap_csv(heat: &[Vec<u64>], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "row,col,count")?;
    for (r, row) in heat.iter().enumerate() {
        for (c, n) in row.iter().enumerate() {
            writeln!(w, "{r},{c},{n}")?;
        }
    }
    Ok(())
}

/// Screenshot with each grid cell blended toward white in proportion to its
/// share of the busiest cell.
pub fn heatmap_overlay(img: &Raster, heat: &[Vec<u64>], grid: GridSpec) -> Result<Raster, ImageError> {
    let blocks = grid_blocks(img.dims(), grid)?;
    let max = heat.iter().flatten().copied().max().unwrap_or(0);
    let mut out = img.clone();
    for (i, b) in blocks.iter().enumerate() {
        let (r, c) = (i / grid.cols as usize, i % grid.cols as usize);
        let level = if max == 0 { 0.0 } else { heat[r][c] as f64 / max as f64 };
        let keep = 1.0 - 0.75 * level;
        for y in b.y1..=b.y2 {
            for x in b.x1..=b.x2 {
                let px = out.get(x, y);
                let g = (px[0] as f64 * 0.299 + px[1] as f64 * 0.587 + px[2] as f64 * 0.114) * keep
                    + 255.0 * (1.0 - keep);
                let g = g.round().clamp(0.0, 255.0) as u8;
                out.put(x, y, [g, g, g]);
            }
        }
    }
    Ok(out)
}

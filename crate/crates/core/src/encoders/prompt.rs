use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// User-supplied region of interest, in normalised `[0, 1]` image
/// coordinates. Only positive prompts are modelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VisualPrompt {
    /// Clicks as `[x, y]` pairs.
    Points { points: Vec<[f64; 2]> },
    Box {
        x_min: f64,
        y_min: f64,
        width: f64,
        height: f64,
    },
    /// Binary grid at image resolution, row-major.
    Mask {
        height: usize,
        width: usize,
        data: Vec<u8>,
    },
    Absent,
}

impl VisualPrompt {
    pub fn point(x: f64, y: f64) -> VisualPrompt {
        VisualPrompt::Points {
            points: vec![[x, y]],
        }
    }

    pub fn boxed(x_min: f64, y_min: f64, width: f64, height: f64) -> VisualPrompt {
        VisualPrompt::Box {
            x_min,
            y_min,
            width,
            height,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            VisualPrompt::Points { .. } => "points",
            VisualPrompt::Box { .. } => "box",
            VisualPrompt::Mask { .. } => "mask",
            VisualPrompt::Absent => "absent",
        }
    }

    /// Checks coordinate ranges and mask contents.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        match self {
            VisualPrompt::Points { points } => {
                if points.is_empty() {
                    return Err(Error::Validation("points prompt has no points".into()));
                }
                for (i, [x, y]) in points.iter().enumerate() {
                    if !unit(*x) || !unit(*y) {
                        return Err(Error::Validation(format!(
                            "point {i} ({x}, {y}) lies outside [0, 1]²"
                        )));
                    }
                }
            }
            VisualPrompt::Box {
                x_min,
                y_min,
                width,
                height,
            } => {
                let fits = unit(*x_min)
                    && unit(*y_min)
                    && width.is_finite()
                    && height.is_finite()
                    && *width > 0.0
                    && *height > 0.0
                    && x_min + width <= 1.0 + 1e-9
                    && y_min + height <= 1.0 + 1e-9;
                if !fits {
                    return Err(Error::Validation(format!(
                        "box ({x_min}, {y_min}, {width}, {height}) must have positive size and fit in [0, 1]²"
                    )));
                }
            }
            VisualPrompt::Mask {
                height,
                width,
                data,
            } => {
                if data.len() != height * width || *height == 0 || *width == 0 {
                    return Err(Error::Validation(format!(
                        "mask {height}×{width} has {} cells",
                        data.len()
                    )));
                }
                if data.iter().any(|v| *v > 1) {
                    return Err(Error::Validation("mask values must be 0 or 1".into()));
                }
            }
            VisualPrompt::Absent => {}
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the mask-matches-image rule.
    pub fn validate_for(&self, image_height: usize, image_width: usize) -> Result<()> {
        self.validate()?;
        if let VisualPrompt::Mask { height, width, .. } = self {
            if (*height, *width) != (image_height, image_width) {
                return Err(Error::Validation(format!(
                    "mask {height}×{width} does not match image {image_height}×{image_width}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic `√n×√n` grid of cell centres. Point `i·√n + j` is
/// `((i + 0.5)/√n, (j + 0.5)/√n)`.
pub fn sample_uniform_points(n: usize) -> Result<VisualPrompt> {
    let side = (n as f64).sqrt().round() as usize;
    if n == 0 || side * side != n {
        return Err(Error::Config(format!(
            "sampled point count {n} is not a positive perfect square"
        )));
    }
    let c = |i: usize| (i as f64 + 0.5) / side as f64;
    let points = (0..side)
        .flat_map(|i| (0..side).map(move |j| [c(i), c(j)]))
        .collect();
    Ok(VisualPrompt::Points { points })
}

/// Area-average a binary mask onto a `grid×grid` raster. Cells that cover
/// no pixel centre take the nearest pixel.
pub(crate) fn downsample_mask(height: usize, width: usize, data: &[u8], grid: usize) -> Vec<f64> {
    let mut sum = vec![0.0; grid * grid];
    let mut count = vec![0usize; grid * grid];
    for y in 0..height {
        let gy = (y * grid) / height;
        for x in 0..width {
            let gx = (x * grid) / width;
            sum[gy * grid + gx] += f64::from(data[y * width + x]);
            count[gy * grid + gx] += 1;
        }
    }
    (0..grid * grid)
        .map(|cell| {
            if count[cell] > 0 {
                sum[cell] / count[cell] as f64
            } else {
                let (gy, gx) = (cell / grid, cell % grid);
                let y = ((gy as f64 + 0.5) * height as f64 / grid as f64) as usize;
                let x = ((gx as f64 + 0.5) * width as f64 / grid as f64) as usize;
                f64::from(data[y.min(height - 1) * width + x.min(width - 1)])
            }
        })
        .collect()
}

/// Fraction of each `grid×grid` cell covered by the prompt: box overlap
/// area, the cells holding each point, or the downsampled mask.
pub(crate) fn coverage(prompt: &VisualPrompt, grid: usize) -> Vec<f64> {
    let g = grid as f64;
    match prompt {
        VisualPrompt::Box {
            x_min,
            y_min,
            width,
            height,
        } => {
            let overlap = |i: usize, lo: f64, len: f64| {
                let (a, b) = (i as f64 / g, (i + 1) as f64 / g);
                ((b.min(lo + len) - a.max(lo)).max(0.0)) * g
            };
            (0..grid * grid)
                .map(|cell| overlap(cell % grid, *x_min, *width) * overlap(cell / grid, *y_min, *height))
                .collect()
        }
        VisualPrompt::Points { points } => {
            let mut out = vec![0.0; grid * grid];
            let idx = |v: f64| ((v * g) as usize).min(grid - 1);
            for [x, y] in points {
                out[idx(*y) * grid + idx(*x)] = 1.0;
            }
            out
        }
        VisualPrompt::Mask { height, width, data } => downsample_mask(*height, *width, data, grid),
        VisualPrompt::Absent => vec![0.0; grid * grid],
    }
}

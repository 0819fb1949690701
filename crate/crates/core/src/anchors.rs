//! Dense multi-scale anchor cuboids and the anchor recall study.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{cuboid_overlap, BBox, Tubelet};

/// Layout of the anchor cuboids over a set of square feature grids.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub image_width: f64,
    pub image_height: f64,
    /// Cells per side of each feature grid, strictly decreasing.
    pub grid_sizes: Vec<usize>,
    /// One scale per grid, as a fraction of the image size.
    pub scales: Vec<f64>,
    /// Width/height ratios generated at every cell.
    pub aspect_ratios: Vec<f64>,
    /// Adds the square anchor of scale `sqrt(s_g * s_{g+1})` at every cell.
    pub extra_square: bool,
    /// Sequence length.
    pub k: usize,
}

impl AnchorConfig {
    /// SSD-style layout: six grids, linearly spaced scales and the
    /// `{1, 2, 1/2, 3, 1/3}` ratio set plus the extra square anchor.
    pub fn ssd(image_width: f64, image_height: f64, k: usize) -> Self {
        let grid_sizes = vec![38, 19, 10, 5, 3, 1];
        let (s_min, s_max) = (0.2, 0.9);
        let m = grid_sizes.len();
        let mut scales = vec![0.1];
        scales.extend((1..m).map(|g| s_min + (s_max - s_min) * (g - 1) as f64 / (m - 2) as f64));
        AnchorConfig {
            image_width,
            image_height,
            grid_sizes,
            scales,
            aspect_ratios: vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0],
            extra_square: true,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return fail("image size must be positive");
        }
        if self.grid_sizes.is_empty() {
            return fail("at least one grid is required");
        }
        if self.grid_sizes.windows(2).any(|w| w[0] <= w[1]) || self.grid_sizes.contains(&0) {
            return fail("grid sizes must be positive and strictly decreasing");
        }
        if self.scales.len() != self.grid_sizes.len() {
            return fail("one scale per grid is required");
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return fail("scales must lie in (0, 1]");
        }
        if self.aspect_ratios.is_empty() && !self.extra_square {
            return fail("no anchor shapes configured");
        }
        if self.aspect_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return fail("aspect ratios must be positive");
        }
        if self.k == 0 {
            return fail("K must be at least 1");
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.extra_square)
    }

    pub fn anchor_count(&self) -> usize {
        self.grid_sizes.iter().map(|g| g * g).sum::<usize>() * self.anchors_per_cell()
    }

    pub fn cell_center(&self, grid: usize, row: usize, col: usize) -> (f64, f64) {
        let g = self.grid_sizes[grid] as f64;
        (
            (col as f64 + 0.5) / g * self.image_width,
            (row as f64 + 0.5) / g * self.image_height,
        )
    }

    /// Unclipped square reference box of a cell (scale `s_g`, ratio 1).
    pub fn cell_reference(&self, grid: usize, row: usize, col: usize) -> BBox {
        let (cx, cy) = self.cell_center(grid, row, col);
        let s = self.scales[grid];
        BBox::from_center(cx, cy, s * self.image_width, s * self.image_height)
    }

    /// Width and height of every anchor shape of a grid, in slot order.
    fn shapes(&self, grid: usize) -> Vec<(f64, f64)> {
        let s = self.scales[grid];
        let (w, h) = (s * self.image_width, s * self.image_height);
        let mut shapes: Vec<_> = self
            .aspect_ratios
            .iter()
            .map(|r| (w * r.sqrt(), h / r.sqrt()))
            .collect();
        if self.extra_square {
            let next = self.scales.get(grid + 1).copied().unwrap_or(1.0);
            let s2 = (s * next).sqrt();
            shapes.push((s2 * self.image_width, s2 * self.image_height));
        }
        shapes
    }
}

/// A box held fixed over K frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorCuboid {
    pub bbox: BBox,
    pub grid: usize,
    pub row: usize,
    pub col: usize,
    /// Shape index within the cell.
    pub slot: usize,
}

impl AnchorCuboid {
    /// The cuboid as a tubelet of `k` identical boxes.
    pub fn to_tubelet(&self, start_frame: usize, k: usize) -> Tubelet {
        Tubelet::new(start_frame, vec![self.bbox; k])
    }
}

/// Anchors in grid-major, row, column, shape order, clipped to the image.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<Vec<AnchorCuboid>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.anchor_count());
    for (grid, &g) in cfg.grid_sizes.iter().enumerate() {
        let shapes = cfg.shapes(grid);
        for row in 0..g {
            for col in 0..g {
                let (cx, cy) = cfg.cell_center(grid, row, col);
                for (slot, &(w, h)) in shapes.iter().enumerate() {
                    out.push(AnchorCuboid {
                        bbox: BBox::from_center(cx, cy, w, h)
                            .clip(cfg.image_width, cfg.image_height),
                        grid,
                        row,
                        col,
                        slot,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Best cuboid overlap of any anchor with a tubelet.
pub fn best_anchor_overlap(anchors: &[AnchorCuboid], t: &Tubelet) -> f64 {
    let hull = t.boxes.iter().skip(1).fold(t.boxes[0], |h, b| {
        BBox::new(h.x1.min(b.x1), h.y1.min(b.y1), h.x2.max(b.x2), h.y2.max(b.y2))
    });
    anchors
        .iter()
        .filter(|a| a.bbox.intersection_area(&hull) > 0.0)
        .map(|a| cuboid_overlap(&a.bbox, t))
        .fold(0.0, f64::max)
}

/// Class x threshold recall matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable {
    pub thresholds: Vec<f64>,
    /// `None` for classes without ground-truth tubelets.
    pub per_class: Vec<Option<Vec<f64>>>,
    /// Unweighted mean over classes that have tubelets.
    pub mean: Vec<f64>,
}

impl RecallTable {
    /// Tab-separated table: header row of thresholds, one row per class, then
    /// the mean row. Classes without tubelets print `nan`.
    pub fn to_tsv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class");
        for t in &self.thresholds {
            s.push_str(&format!("\t{t:.2}"));
        }
        s.push('\n');
        for (c, row) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            s.push_str(&name);
            for i in 0..self.thresholds.len() {
                match row {
                    Some(r) => s.push_str(&format!("\t{:.6}", r[i])),
                    None => s.push_str("\tnan"),
                }
            }
            s.push('\n');
        }
        s.push_str("mean");
        for v in &self.mean {
            s.push_str(&format!("\t{v:.6}"));
        }
        s.push('\n');
        s
    }
}

/// Fraction of ground-truth tubelets per class whose best anchor overlap
/// reaches each threshold.
pub fn anchor_recall(
    anchors: &[AnchorCuboid],
    gt: &[Vec<Tubelet>],
    thresholds: &[f64],
) -> RecallTable {
    let per_class: Vec<Option<Vec<f64>>> = gt
        .iter()
        .map(|tubelets| {
            if tubelets.is_empty() {
                return None;
            }
            let best: Vec<f64> = tubelets
                .par_iter()
                .map(|t| best_anchor_overlap(anchors, t))
                .collect();
            Some(
                thresholds
                    .iter()
                    .map(|&th| {
                        best.iter().filter(|&&b| b >= th).count() as f64 / best.len() as f64
                    })
                    .collect(),
            )
        })
        .collect();
    let present: Vec<&Vec<f64>> = per_class.iter().flatten().collect();
    let mean = (0..thresholds.len())
        .map(|i| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|r| r[i]).sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    RecallTable {
        thresholds: thresholds.to_vec(),
        per_class,
        mean,
    }
}

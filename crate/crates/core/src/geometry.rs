//! Boxes, tubelets, tubes and the overlap measures between them.
//!
//! Every overlap here is built on plain 2D IoU. Tubelets and tubes are compared
//! by averaging per-frame IoU; there is no volumetric IoU.

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    /// Corners are finite and ordered.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        BBox {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// Intersection over union. Two zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A start frame plus one box per consecutive frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Tubelet {
    pub start_frame: usize,
    pub boxes: Vec<BBox>,
}

impl Tubelet {
    pub fn new(start_frame: usize, boxes: Vec<BBox>) -> Self {
        debug_assert!(!boxes.is_empty());
        Tubelet { start_frame, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Last covered frame (inclusive).
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len() - 1
    }

    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start_frame && frame <= self.end_frame()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }
}

/// Variable-length box sequence with a class label and a score.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTube {
    pub start_frame: usize,
    pub boxes: Vec<BBox>,
    pub label: usize,
    pub score: f64,
}

impl ActionTube {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len() - 1
    }

    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start_frame && frame <= self.end_frame()
    }

    pub fn box_at(&self, frame: usize) -> Option<&BBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
    }

    /// The K-frame window starting at `start`, if the tube covers all of it.
    pub fn window(&self, start: usize, k: usize) -> Option<Tubelet> {
        let offset = start.checked_sub(self.start_frame)?;
        let boxes = self.boxes.get(offset..offset + k)?;
        Some(Tubelet::new(start, boxes.to_vec()))
    }
}

/// Mean per-frame IoU of two tubelets covering the same frames.
pub fn tubelet_overlap(a: &Tubelet, b: &Tubelet) -> Result<f64> {
    if a.start_frame != b.start_frame || a.len() != b.len() {
        return Err(Error::Misaligned(format!(
            "frames {}..={} vs {}..={}",
            a.start_frame,
            a.end_frame(),
            b.start_frame,
            b.end_frame()
        )));
    }
    Ok(mean_iou(a.boxes.iter().zip(&b.boxes)))
}

/// Mean IoU between a fixed box (an anchor cuboid) and every box of a tubelet.
pub fn cuboid_overlap(anchor: &BBox, t: &Tubelet) -> f64 {
    mean_iou(t.boxes.iter().map(|b| (anchor, b)))
}

/// Mean IoU between the last tubelet of a link and a candidate, over the frames
/// both cover.
pub fn link_tubelet_overlap(last_of_link: &Tubelet, t: &Tubelet) -> Result<f64> {
    let first = last_of_link.start_frame.max(t.start_frame);
    let last = last_of_link.end_frame().min(t.end_frame());
    if first > last {
        return Err(Error::NoTemporalOverlap {
            link_end: last_of_link.end_frame(),
            candidate_start: t.start_frame,
        });
    }
    Ok(mean_iou((first..=last).map(|f| {
        (
            last_of_link.box_at(f).expect("frame inside link tubelet"),
            t.box_at(f).expect("frame inside candidate"),
        )
    })))
}

/// Spatio-temporal tube overlap: per-frame IoU summed over the temporal union
/// of both tubes, divided by the union length. Frames covered by only one tube
/// contribute zero.
pub fn tube_overlap(a: &ActionTube, b: &ActionTube) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let union_start = a.start_frame.min(b.start_frame);
    let union_end = a.end_frame().max(b.end_frame());
    let first = a.start_frame.max(b.start_frame);
    let last = a.end_frame().min(b.end_frame());
    if first > last {
        return 0.0;
    }
    let sum: f64 = (first..=last)
        .map(|f| iou(a.box_at(f).unwrap(), b.box_at(f).unwrap()))
        .sum();
    sum / (union_end - union_start + 1) as f64
}

/// Mean IoU between each box of a tube and the box `n` frames later.
///
/// `None` when the tube is shorter than `n + 1` frames.
pub fn motion_overlap(gt: &ActionTube, n: usize) -> Option<f64> {
    if gt.len() < n + 1 {
        return None;
    }
    if n == 0 {
        return Some(1.0);
    }
    let pairs = gt.boxes.iter().zip(&gt.boxes[n..]);
    Some(mean_iou(pairs))
}

fn mean_iou<'a>(pairs: impl Iterator<Item = (&'a BBox, &'a BBox)>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in pairs {
        sum += iou(a, b);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

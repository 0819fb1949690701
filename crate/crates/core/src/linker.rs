//! Online tubelet linking.
//!
//! For each sequence start frame, per-class candidates go through tubelet NMS
//! and are then offered to the live links of their class. Links take
//! candidates greedily in descending link-score order; unclaimed candidates
//! start new links; links left unextended for more than `patience` frames are
//! closed. Closed links become action tubes by per-frame box averaging.

use crate::error::{Error, Result};
use crate::geometry::{iou, link_tubelet_overlap, tubelet_overlap, ActionTube, BBox, Tubelet};
use crate::head::{ScoredTubelet, SCORE_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct LinkerConfig {
    pub nms_threshold: f64,
    pub top_n: usize,
    pub tau: f64,
    pub k: usize,
    /// Frames a link may stay unextended; defaults to `k - 1`.
    pub patience: usize,
    /// Class scores at or below this never enter the linker.
    pub score_floor: f64,
}

impl LinkerConfig {
    pub fn new(k: usize) -> Self {
        LinkerConfig {
            nms_threshold: 0.3,
            top_n: 10,
            tau: 0.2,
            k,
            patience: k.saturating_sub(1),
            score_floor: SCORE_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.nms_threshold) || !unit(self.tau) {
            return Err(Error::Config("linker thresholds must lie in [0, 1]".into()));
        }
        if !(self.score_floor >= 0.0 && self.score_floor < 1.0) {
            return Err(Error::Config("score floor must lie in [0, 1)".into()));
        }
        if self.top_n == 0 || self.k == 0 {
            return Err(Error::Config("top_n and K must be at least 1".into()));
        }
        Ok(())
    }
}

/// A tubelet entering the linker with the score of the class being linked.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tubelet: Tubelet,
    pub score: f64,
    pub anchor: usize,
}

impl Candidate {
    pub fn from_scored(t: &ScoredTubelet, class: usize) -> Self {
        Candidate {
            tubelet: t.tubelet.clone(),
            score: t.class_score(class),
            anchor: t.anchor,
        }
    }
}

/// Descending score, then anchor index, then input order.
fn rank(cands: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| {
        cands[b]
            .score
            .total_cmp(&cands[a].score)
            .then(cands[a].anchor.cmp(&cands[b].anchor))
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy NMS on tubelet overlap, then the `top_n` best survivors.
pub fn tubelet_nms(cands: &[Candidate], nms_threshold: f64, top_n: usize) -> Vec<Candidate> {
    let mut kept: Vec<&Candidate> = Vec::new();
    for i in rank(cands) {
        if kept.len() == top_n {
            break;
        }
        let c = &cands[i];
        let suppressed = kept.iter().any(|k| {
            tubelet_overlap(&k.tubelet, &c.tubelet).expect("NMS candidates share frames")
                > nms_threshold
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Per-class NMS over the detections of one sequence scoring above the floor.
pub fn nms_per_class(dets: &[ScoredTubelet], num_classes: usize, cfg: &LinkerConfig) -> Vec<Vec<Candidate>> {
    (0..num_classes)
        .map(|c| {
            let cands: Vec<Candidate> = dets
                .iter()
                .filter(|d| d.class_score(c) > cfg.score_floor)
                .map(|d| Candidate::from_scored(d, c))
                .collect();
            tubelet_nms(&cands, cfg.nms_threshold, cfg.top_n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub label: usize,
    pub tubelets: Vec<Candidate>,
    pub score: f64,
    pub frames_since_extension: usize,
}

impl Link {
    fn start(label: usize, c: Candidate) -> Self {
        Link {
            label,
            score: c.score,
            tubelets: vec![c],
            frames_since_extension: 0,
        }
    }

    fn last(&self) -> &Tubelet {
        &self.tubelets.last().expect("links are never empty").tubelet
    }

    fn push(&mut self, c: Candidate) {
        let n = self.tubelets.len() as f64;
        self.score = (self.score * n + c.score) / (n + 1.0);
        self.tubelets.push(c);
        self.frames_since_extension = 0;
    }

    /// Overlap with a candidate over their shared frames. When the link has
    /// waited exactly K-1 frames the candidate starts right after the last
    /// tubelet ends; the boxes on either side of that boundary are compared.
    fn overlap(&self, t: &Tubelet) -> f64 {
        let last = self.last();
        match link_tubelet_overlap(last, t) {
            Ok(v) => v,
            Err(_) if t.start_frame == last.end_frame() + 1 => {
                iou(last.boxes.last().unwrap(), &t.boxes[0])
            }
            Err(_) => 0.0,
        }
    }
}

/// Linking state for one video.
#[derive(Debug, Clone)]
pub struct Linker {
    cfg: LinkerConfig,
    live: Vec<Vec<Link>>,
    done: Vec<Link>,
    last_frame: Option<usize>,
}

impl Linker {
    pub fn new(cfg: LinkerConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Linker {
            cfg,
            live: vec![Vec::new(); num_classes],
            done: Vec::new(),
            last_frame: None,
        })
    }

    pub fn live_links(&self) -> impl Iterator<Item = &Link> {
        self.live.iter().flatten()
    }

    pub fn finished_links(&self) -> &[Link] {
        &self.done
    }

    /// Process the NMS-filtered candidates of the sequence starting at `frame`,
    /// one list per class. Frames must be pushed in increasing order; skipped
    /// frames count as frames without candidates.
    pub fn push_frame(&mut self, frame: usize, candidates: Vec<Vec<Candidate>>) -> Result<()> {
        if candidates.len() != self.live.len() {
            return Err(Error::Shape(format!(
                "{} candidate lists for {} classes",
                candidates.len(),
                self.live.len()
            )));
        }
        if let Some(prev) = self.last_frame {
            if frame <= prev {
                return Err(Error::Config(format!("frame {frame} pushed after frame {prev}")));
            }
            for missing in prev + 1..frame {
                self.advance(missing, vec![Vec::new(); self.live.len()]);
            }
        }
        self.advance(frame, candidates);
        self.last_frame = Some(frame);
        Ok(())
    }

    fn advance(&mut self, _frame: usize, candidates: Vec<Vec<Candidate>>) {
        for (label, cands) in candidates.into_iter().enumerate() {
            let order = rank(&cands);
            let mut claimed = vec![false; cands.len()];
            let links = &mut self.live[label];
            // stable sort keeps creation order among equal scores
            links.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut survivors = Vec::with_capacity(links.len());
            for mut link in links.drain(..) {
                let pick = order
                    .iter()
                    .copied()
                    .find(|&i| !claimed[i] && link.overlap(&cands[i].tubelet) >= self.cfg.tau);
                match pick {
                    Some(i) => {
                        claimed[i] = true;
                        link.push(cands[i].clone());
                        survivors.push(link);
                    }
                    None => {
                        link.frames_since_extension += 1;
                        if link.frames_since_extension > self.cfg.patience {
                            self.done.push(link);
                        } else {
                            survivors.push(link);
                        }
                    }
                }
            }
            for i in order {
                if !claimed[i] {
                    survivors.push(Link::start(label, cands[i].clone()));
                }
            }
            *links = survivors;
        }
    }

    /// Close every live link and return all links in closing order.
    pub fn finish(mut self) -> Vec<Link> {
        for links in &mut self.live {
            self.done.append(links);
        }
        self.done
    }
}

/// Per-frame coordinate mean over the link's tubelets; the tube score is the
/// link score.
pub fn smooth_to_tube(link: &Link) -> ActionTube {
    let start = link
        .tubelets
        .iter()
        .map(|t| t.tubelet.start_frame)
        .min()
        .expect("non-empty link");
    let end = link
        .tubelets
        .iter()
        .map(|t| t.tubelet.end_frame())
        .max()
        .unwrap();
    let mut sums = vec![([0.0f64; 4], 0usize); end - start + 1];
    for t in &link.tubelets {
        for (i, b) in t.tubelet.boxes.iter().enumerate() {
            let slot = &mut sums[t.tubelet.start_frame + i - start];
            slot.0[0] += b.x1;
            slot.0[1] += b.y1;
            slot.0[2] += b.x2;
            slot.0[3] += b.y2;
            slot.1 += 1;
        }
    }
    let mut boxes = Vec::with_capacity(sums.len());
    let mut prev: Option<BBox> = None;
    for (s, n) in sums {
        let b = if n == 0 {
            // links never leave gaps with patience <= K-1; hold the last box otherwise
            prev.expect("first frame of a link is covered")
        } else {
            let n = n as f64;
            BBox::new(s[0] / n, s[1] / n, s[2] / n, s[3] / n)
        };
        boxes.push(b);
        prev = Some(b);
    }
    ActionTube {
        start_frame: start,
        boxes,
        label: link.label,
        score: link.score,
    }
}

/// Link a whole video. `sequences` holds, in increasing start-frame order, the
/// detections of every sequence.
pub fn link_video(
    sequences: &[(usize, Vec<ScoredTubelet>)],
    num_classes: usize,
    cfg: &LinkerConfig,
) -> Result<Vec<ActionTube>> {
    let mut linker = Linker::new(cfg.clone(), num_classes)?;
    for (frame, dets) in sequences {
        linker.push_frame(*frame, nms_per_class(dets, num_classes, cfg))?;
    }
    Ok(linker.finish().iter().map(smooth_to_tube).collect())
}

/// A per-frame box with one class score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy box NMS by descending score.
pub fn box_nms(boxes: &[ScoredBox], threshold: f64) -> Vec<ScoredBox> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in idx {
        if kept.iter().all(|k| iou(&k.bbox, &boxes[i].bbox) <= threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Boxes at `frame` from every tubelet covering it, per class, after box NMS.
/// Only class scores above `floor` are considered.
pub fn frame_level_detections(
    tubelets: &[ScoredTubelet],
    frame: usize,
    num_classes: usize,
    nms_threshold: f64,
    floor: f64,
) -> Vec<Vec<ScoredBox>> {
    (0..num_classes)
        .map(|c| {
            let boxes: Vec<ScoredBox> = tubelets
                .iter()
                .filter(|t| t.class_score(c) > floor)
                .filter_map(|t| {
                    t.tubelet.box_at(frame).map(|b| ScoredBox {
                        bbox: *b,
                        score: t.class_score(c),
                    })
                })
                .collect();
            box_nms(&boxes, nms_threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: BBox = BBox::new(0.0, 0.0, 10.0, 10.0);

    fn cand(start: usize, k: usize, b: BBox, score: f64, anchor: usize) -> Candidate {
        Candidate {
            tubelet: Tubelet::new(start, vec![b; k]),
            score,
            anchor,
        }
    }

    #[test]
    fn nms_examples() {
        let kept = tubelet_nms(&[cand(0, 3, UNIT, 0.8, 0), cand(0, 3, UNIT, 0.9, 1)], 0.3, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        // IoU 0.2: 10x10 vs shifted 10x10 with overlap 10*x / (200 - 10x) = 0.2 -> x = 10/3
        let shifted = UNIT.translate(10.0 - 10.0 / 3.0, 0.0);
        assert!((iou(&UNIT, &shifted) - 0.2).abs() < 1e-12);
        let kept = tubelet_nms(&[cand(0, 3, UNIT, 0.9, 0), cand(0, 3, shifted, 0.8, 1)], 0.3, 10);
        assert_eq!(kept.len(), 2);

        let many: Vec<_> = (0..15)
            .map(|i| cand(0, 3, UNIT.translate(20.0 * i as f64, 0.0), 0.5 + 0.01 * i as f64, i))
            .collect();
        let kept = tubelet_nms(&many, 0.3, 10);
        assert_eq!(kept.len(), 10);
        assert_eq!(kept[0].anchor, 14);
    }

    fn single(c: Candidate) -> Vec<Vec<Candidate>> {
        vec![vec![c]]
    }

    #[test]
    fn link_extends_on_overlap() {
        let mut l = Linker::new(LinkerConfig::new(2), 1).unwrap();
        l.push_frame(0, single(cand(0, 2, UNIT, 0.9, 0))).unwrap();
        // IoU 0.5 on the shared frame
        let half = BBox::new(0.0, 0.0, 10.0, 5.0);
        l.push_frame(1, single(cand(1, 2, half, 0.7, 0))).unwrap();
        let links = l.finish();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].tubelets.len(), 2);
        assert!((links[0].score - 0.8).abs() < 1e-15);
    }

    #[test]
    fn higher_scored_link_wins() {
        let mut l = Linker::new(LinkerConfig::new(3), 1).unwrap();
        let a = cand(0, 3, UNIT, 0.7, 0);
        let b = cand(0, 3, UNIT.translate(1.0, 0.0), 0.9, 1);
        l.push_frame(0, vec![vec![a, b]]).unwrap();
        l.push_frame(1, single(cand(1, 3, UNIT.translate(0.5, 0.0), 0.5, 2))).unwrap();
        let live: Vec<&Link> = l.live_links().collect();
        let winner = live.iter().find(|k| k.tubelets.len() == 2).unwrap();
        assert_eq!(winner.tubelets[0].anchor, 1);
        let loser = live.iter().find(|k| k.tubelets.len() == 1).unwrap();
        assert_eq!(loser.frames_since_extension, 1);
    }

    #[test]
    fn patience_of_k_minus_one() {
        let k = 4;
        let mut l = Linker::new(LinkerConfig::new(k), 1).unwrap();
        l.push_frame(0, single(cand(0, k, UNIT, 0.9, 0))).unwrap();
        for f in 1..k {
            l.push_frame(f, vec![vec![]]).unwrap();
        }
        assert_eq!(l.live_links().next().unwrap().frames_since_extension, k - 1);
        l.push_frame(k, single(cand(k, k, UNIT, 0.9, 0))).unwrap();
        let links = l.finish();
        assert_eq!(links.len(), 1);
        assert_eq!(smooth_to_tube(&links[0]).len(), 2 * k);

        let mut l = Linker::new(LinkerConfig::new(k), 1).unwrap();
        l.push_frame(0, single(cand(0, k, UNIT, 0.9, 0))).unwrap();
        l.push_frame(k + 1, single(cand(k + 1, k, UNIT, 0.9, 0))).unwrap();
        assert_eq!(l.finished_links().len(), 1);
        assert_eq!(l.finish().len(), 2);
    }

    #[test]
    fn candidates_are_exclusive_and_classes_separate() {
        let mut l = Linker::new(LinkerConfig::new(2), 2).unwrap();
        l.push_frame(0, vec![vec![cand(0, 2, UNIT, 0.9, 0), cand(0, 2, UNIT, 0.8, 1)], vec![]])
            .unwrap();
        l.push_frame(1, vec![vec![cand(1, 2, UNIT, 0.6, 0)], vec![cand(1, 2, UNIT, 0.6, 0)]])
            .unwrap();
        let links = l.finish();
        assert_eq!(links.len(), 3);
        assert_eq!(links.iter().filter(|k| k.tubelets.len() == 2).count(), 1);
        assert_eq!(links.iter().filter(|k| k.label == 1).count(), 1);
        assert!(l_ok(&links));
    }

    fn l_ok(links: &[Link]) -> bool {
        links.iter().all(|k| {
            let mean = k.tubelets.iter().map(|t| t.score).sum::<f64>() / k.tubelets.len() as f64;
            (mean - k.score).abs() < 1e-12
                && k.tubelets.windows(2).all(|w| w[0].tubelet.start_frame < w[1].tubelet.start_frame)
        })
    }

    #[test]
    fn smoothing_examples() {
        let link = Link::start(1, cand(3, 4, UNIT, 0.6, 0));
        let tube = smooth_to_tube(&link);
        assert_eq!(tube.start_frame, 3);
        assert_eq!(tube.boxes, vec![UNIT; 4]);
        assert_eq!(tube.score, 0.6);
        assert_eq!(tube.label, 1);

        let mut link = Link::start(0, cand(0, 2, UNIT, 0.5, 0));
        link.push(cand(1, 2, BBox::new(2.0, 0.0, 12.0, 10.0), 0.7, 0));
        let tube = smooth_to_tube(&link);
        assert_eq!(tube.boxes[1], BBox::new(1.0, 0.0, 11.0, 10.0));
        assert_eq!(tube.boxes[2], BBox::new(2.0, 0.0, 12.0, 10.0));

        let mut link = Link::start(0, cand(0, 5, UNIT, 0.5, 0));
        for f in 1..7 {
            link.push(cand(f, 5, UNIT, 0.5, 0));
        }
        assert_eq!(smooth_to_tube(&link).len(), 7 + 5 - 1);
    }

    #[test]
    fn frame_level_examples() {
        let t = |start: usize, b: BBox, s: f64| ScoredTubelet {
            tubelet: Tubelet::new(start, vec![b; 3]),
            scores: vec![1.0 - s, s],
            anchor: 0,
        };
        let one = frame_level_detections(&[t(0, UNIT, 0.8)], 1, 1, 0.3, 0.01);
        assert_eq!(one[0], vec![ScoredBox { bbox: UNIT, score: 0.8 }]);
        let three = frame_level_detections(&[t(0, UNIT, 0.8), t(1, UNIT, 0.7), t(2, UNIT, 0.9)], 2, 1, 0.3, 0.01);
        assert_eq!(three[0].len(), 1);
        assert_eq!(three[0][0].score, 0.9);
        assert!(frame_level_detections(&[t(0, UNIT, 0.8)], 7, 1, 0.3, 0.01)[0].is_empty());
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut l = Linker::new(LinkerConfig::new(2), 1).unwrap();
        l.push_frame(3, vec![vec![]]).unwrap();
        assert!(l.push_frame(3, vec![vec![]]).is_err());
        assert!(l.push_frame(4, vec![vec![], vec![]]).is_err());
    }
}

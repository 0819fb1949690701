//! Randomized datasets of scenes and training-sequence eligibility.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kv::{join, KeyValues};
use super::scene::{ActorSpec, SceneConfig, SignatureMode};
use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::geometry::{ActionTube, BBox};

/// Direction of actor motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Uniformly random angle.
    Any,
    /// Left or right at random. In motion-only mode the class decides.
    Horizontal,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Direction::Any),
            "horizontal" => Ok(Direction::Horizontal),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

impl Direction {
    fn name(self) -> &'static str {
        match self {
            Direction::Any => "any",
            Direction::Horizontal => "horizontal",
        }
    }
}

/// Recipe for a dataset of random scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub class_names: Vec<String>,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    /// Actors per video, inclusive range.
    pub actors: (usize, usize),
    /// When set every actor spans the whole video.
    pub trimmed: bool,
    /// Shortest actor extent of untrimmed videos.
    pub min_extent: usize,
    /// Actor width as a fraction of the image width.
    pub actor_size: (f64, f64),
    /// Actor width over height.
    pub actor_aspect: (f64, f64),
    /// Displacement per frame as a fraction of the actor width.
    pub speed: (f64, f64),
    pub direction: Direction,
    pub growth: f64,
    pub mode: SignatureMode,
    pub noise: f64,
    pub layout: AnchorConfig,
}

const KEYS: &[&str] = &[
    "seed",
    "classes",
    "train_videos",
    "test_videos",
    "frames",
    "actors",
    "trimmed",
    "min_extent",
    "actor_size",
    "actor_aspect",
    "speed",
    "direction",
    "growth",
    "mode",
    "noise",
    "image_width",
    "image_height",
    "grid_sizes",
    "scales",
    "aspect_ratios",
    "extra_square",
    "k",
];

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            class_names: vec!["right".into(), "left".into()],
            train_videos: 40,
            test_videos: 20,
            frames: 20,
            actors: (1, 1),
            trimmed: true,
            min_extent: 10,
            actor_size: (0.25, 0.35),
            actor_aspect: (0.75, 1.33),
            speed: (0.02, 0.04),
            direction: Direction::Horizontal,
            growth: 0.0,
            mode: SignatureMode::Appearance,
            noise: 0.02,
            layout: AnchorConfig {
                image_width: 96.0,
                image_height: 96.0,
                grid_sizes: vec![12, 6, 3, 1],
                scales: vec![0.15, 0.3, 0.55, 0.85],
                aspect_ratios: vec![1.0, 2.0, 0.5],
                extra_square: true,
                k: 6,
            },
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_videos(&self) -> usize {
        self.train_videos + self.test_videos
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(KEYS)?;
        let d = DatasetConfig::default();
        let range_usize = |key: &str, default: (usize, usize)| -> Result<(usize, usize)> {
            Ok(kv.range(key)?.map_or(default, |(a, b)| (a as usize, b as usize)))
        };
        let layout = AnchorConfig {
            image_width: kv.get_or("image_width", d.layout.image_width)?,
            image_height: kv.get_or("image_height", d.layout.image_height)?,
            grid_sizes: kv.list("grid_sizes")?.unwrap_or(d.layout.grid_sizes),
            scales: kv.list("scales")?.unwrap_or(d.layout.scales),
            aspect_ratios: kv.list("aspect_ratios")?.unwrap_or(d.layout.aspect_ratios),
            extra_square: kv.get_or("extra_square", d.layout.extra_square)?,
            k: kv.get_or("k", d.layout.k)?,
        };
        let cfg = DatasetConfig {
            seed: kv.get_or("seed", d.seed)?,
            class_names: kv.list("classes")?.unwrap_or(d.class_names),
            train_videos: kv.get_or("train_videos", d.train_videos)?,
            test_videos: kv.get_or("test_videos", d.test_videos)?,
            frames: kv.get_or("frames", d.frames)?,
            actors: range_usize("actors", d.actors)?,
            trimmed: kv.get_or("trimmed", d.trimmed)?,
            min_extent: kv.get_or("min_extent", d.min_extent)?,
            actor_size: kv.range("actor_size")?.unwrap_or(d.actor_size),
            actor_aspect: kv.range("actor_aspect")?.unwrap_or(d.actor_aspect),
            speed: kv.range("speed")?.unwrap_or(d.speed),
            direction: kv.get_or("direction", d.direction)?,
            growth: kv.get_or("growth", d.growth)?,
            mode: kv.get_or("mode", d.mode)?,
            noise: kv.get_or("noise", d.noise)?,
            layout,
        };
        cfg.validate()
            .map_err(|e| Error::Format { path: kv.path.clone(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn to_text(&self) -> String {
        let l = &self.layout;
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        [
            format!("seed = {}", self.seed),
            format!("classes = {}", self.class_names.join(",")),
            format!("train_videos = {}", self.train_videos),
            format!("test_videos = {}", self.test_videos),
            format!("frames = {}", self.frames),
            format!("actors = {},{}", self.actors.0, self.actors.1),
            format!("trimmed = {}", self.trimmed),
            format!("min_extent = {}", self.min_extent),
            format!("actor_size = {}", pair(self.actor_size)),
            format!("actor_aspect = {}", pair(self.actor_aspect)),
            format!("speed = {}", pair(self.speed)),
            format!("direction = {}", self.direction.name()),
            format!("growth = {}", self.growth),
            format!("mode = {}", self.mode.name()),
            format!("noise = {}", self.noise),
            format!("image_width = {}", l.image_width),
            format!("image_height = {}", l.image_height),
            format!("grid_sizes = {}", join(&l.grid_sizes)),
            format!("scales = {}", join(&l.scales)),
            format!("aspect_ratios = {}", join(&l.aspect_ratios)),
            format!("extra_square = {}", l.extra_square),
            format!("k = {}", l.k),
        ]
        .join("\n")
            + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.class_names.is_empty() {
            return fail("at least one class is required".into());
        }
        if self.class_names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return fail("class names must be non-empty and contain no spaces".into());
        }
        if self.frames == 0 {
            return fail("videos need at least one frame".into());
        }
        if self.actors.0 > self.actors.1 {
            return fail("actor count range is empty".into());
        }
        if !self.trimmed && (self.min_extent == 0 || self.min_extent > self.frames) {
            return fail(format!("min_extent must lie in 1..={}", self.frames));
        }
        let (s0, s1) = self.actor_size;
        if !(s0 > 0.0 && s1 < 1.0) {
            return fail("actor_size must lie in (0, 1)".into());
        }
        if self.actor_aspect.0.is_nan() || self.actor_aspect.0 <= 0.0 || self.speed.0.is_nan() || self.speed.0 < 0.0 {
            return fail("actor_aspect must be positive and speed non-negative".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return fail("noise must be non-negative".into());
        }
        if self.growth.abs() >= 0.1 {
            return fail("growth must lie in (-0.1, 0.1)".into());
        }
        Ok(())
    }

    /// Scene of video `index`, drawn from its own stream of the dataset seed.
    pub fn scene(&self, index: usize) -> Result<SceneConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let n = rng.random_range(self.actors.0..=self.actors.1);
        let actors = (0..n)
            .map(|_| self.random_actor(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cfg = SceneConfig {
            image_width: self.layout.image_width,
            image_height: self.layout.image_height,
            num_frames: self.frames,
            num_classes: self.num_classes(),
            actors,
            mode: self.mode,
            noise: self.noise,
            seed: rng.random(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn random_actor(&self, rng: &mut ChaCha8Rng) -> Result<ActorSpec> {
        let (w_img, h_img) = (self.layout.image_width, self.layout.image_height);
        let class = rng.random_range(0..self.num_classes());
        let (start_frame, end_frame) = if self.trimmed {
            (0, self.frames - 1)
        } else {
            let len = rng.random_range(self.min_extent..=self.frames);
            let start = rng.random_range(0..=self.frames - len);
            (start, start + len - 1)
        };
        let span = (end_frame - start_frame) as f64;
        let unit = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let w0 = unit(rng, self.actor_size) * w_img;
        let h0 = w0 / unit(rng, self.actor_aspect);
        let speed = unit(rng, self.speed) * w0;
        let angle = match (self.direction, self.mode) {
            (_, SignatureMode::MotionOnly) => {
                if class % 2 == 0 {
                    0.0
                } else {
                    std::f64::consts::PI
                }
            }
            (Direction::Horizontal, _) => {
                if rng.random_bool(0.5) {
                    0.0
                } else {
                    std::f64::consts::PI
                }
            }
            (Direction::Any, _) => rng.random_range(0.0..std::f64::consts::TAU),
        };
        let velocity = (speed * angle.cos(), speed * angle.sin());
        // the box grows or shrinks monotonically, so its largest size is at an end
        let scale_end = (1.0 + self.growth).powf(span);
        let (w_max, h_max) = (w0 * scale_end.max(1.0), h0 * scale_end.max(1.0));
        let dx = velocity.0 * span;
        let dy = velocity.1 * span;
        let x_lo = w_max / 2.0 - dx.min(0.0);
        let x_hi = w_img - w_max / 2.0 - dx.max(0.0);
        let y_lo = h_max / 2.0 - dy.min(0.0);
        let y_hi = h_img - h_max / 2.0 - dy.max(0.0);
        if x_lo > x_hi || y_lo > y_hi {
            return Err(Error::Config(format!(
                "an actor of {w_max:.1}x{h_max:.1} moving {dx:.1},{dy:.1} px does not fit the image"
            )));
        }
        let cx = unit(rng, (x_lo, x_hi));
        let cy = unit(rng, (y_lo, y_hi));
        Ok(ActorSpec {
            class,
            start_box: BBox::from_center(cx, cy, w0, h0),
            velocity,
            growth: self.growth,
            start_frame,
            end_frame,
        })
    }
}

/// Start frames of the K-frame windows to train on: every frame of the
/// window lies strictly inside the extent of some actor that covers the whole
/// window, and no actor's first or last annotated frame falls in the window.
pub fn eligible_sequences(tubes: &[ActionTube], num_frames: usize, k: usize) -> Vec<usize> {
    if k == 0 || num_frames < k {
        return Vec::new();
    }
    (0..=num_frames - k)
        .filter(|&f| {
            let last = f + k - 1;
            let touches_boundary = tubes.iter().any(|t| {
                (f..=last).contains(&t.start_frame) || (f..=last).contains(&t.end_frame())
            });
            let covered = tubes
                .iter()
                .any(|t| t.start_frame < f && t.end_frame() > last);
            covered && !touches_boundary
        })
        .collect()
}

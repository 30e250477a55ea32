//! Procedural moving-shape videos with analytic optical flow.
//!
//! One shape (square, circle, or bar) translates at a constant integer
//! pixel velocity over a solid or vertical-gradient background. Rendering is
//! pure: identical `(spec, T, H, W)` always produces identical bytes.
//! Sub-pixel shape positions are drawn with exact area coverage, so a pixel
//! that is fully inside the shape holds the pure shape color; those fully
//! covered pixels are exactly what the analytic flow marks, which is what
//! makes the warp consistency check exact for integer velocities.
//!
//! Captions come from the frozen [`crate::vocab`] table, e.g.
//! `"red square large gradient"` / `"moving right fast"`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{hash64, Rng};
use crate::tensor::Tensor;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Bar,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Bar => "bar",
        }
    }

    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Bar];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Solid,
    Gradient,
}

impl Background {
    pub fn word(self) -> &'static str {
        match self {
            Background::Solid => "solid",
            Background::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedClass {
    Slow,
    Fast,
}

impl SpeedClass {
    pub fn word(self) -> &'static str {
        match self {
            SpeedClass::Slow => "slow",
            SpeedClass::Fast => "fast",
        }
    }
}

/// Named palette: (caption word, rgb in [0,1]).
pub const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [1.0, 0.1, 0.1]),
    ("green", [0.1, 1.0, 0.1]),
    ("blue", [0.15, 0.25, 1.0]),
    ("yellow", [1.0, 1.0, 0.1]),
    ("cyan", [0.1, 1.0, 1.0]),
    ("magenta", [1.0, 0.1, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.55, 0.1]),
];

const SIZE_SMALL: (f64, f64) = (0.10, 0.16);
const SIZE_LARGE: (f64, f64) = (0.20, 0.28);
const COVER_FULL: f64 = 1.0 - 1e-9;
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub kind: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
    /// Shape half-extent as a fraction of min(H, W).
    pub size_frac: f64,
    /// Start center in normalized [0,1]² coordinates (x, y).
    pub start: (f64, f64),
    /// Pixels per frame (vx, vy); integer-valued.
    pub velocity: (f64, f64),
    pub speed_class: SpeedClass,
    pub background: Background,
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    /// [T,3,H,W], values in [-1,1].
    pub frames: Tensor<f32>,
    pub spatial_tokens: Vec<u32>,
    pub motion_tokens: Vec<u32>,
    /// [T-1,2,H,W]: (dx, dy) in pixels on fully covered shape pixels, 0 elsewhere.
    pub flow: Tensor<f32>,
    pub spec: SceneSpec,
}

/// The four axis directions used for dataset balancing: +x, -x, +y, -y.
pub const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

impl SceneSpec {
    pub fn size_word(&self) -> &'static str {
        if self.size_frac < SIZE_LARGE.0 {
            "small"
        } else {
            "large"
        }
    }

    pub fn spatial_caption(&self) -> String {
        format!(
            "{} {} {} {}",
            PALETTE[self.color].0,
            self.kind.word(),
            self.size_word(),
            self.background.word()
        )
    }

    pub fn motion_caption(&self) -> String {
        match direction_word(self.velocity) {
            None => String::from("static"),
            Some(dir) => format!("moving {} {}", dir, self.speed_class.word()),
        }
    }

    /// Shape half extents (ex, ey) in pixels at a given resolution.
    pub fn half_extents(&self, h: usize, w: usize) -> (f64, f64) {
        let e = self.size_frac * h.min(w) as f64;
        match self.kind {
            ShapeKind::Square | ShapeKind::Circle => (e, e),
            ShapeKind::Bar => (1.6 * e, 0.5 * e),
        }
    }

    /// Shape center in pixels at frame t.
    pub fn center_at(&self, t: usize, h: usize, w: usize) -> (f64, f64) {
        (
            self.start.0 * w as f64 + self.velocity.0 * t as f64,
            self.start.1 * h as f64 + self.velocity.1 * t as f64,
        )
    }

    /// Whether the whole trajectory stays inside the frame for `t` frames.
    pub fn fits(&self, frames: usize, h: usize, w: usize) -> bool {
        let (ex, ey) = self.half_extents(h, w);
        for t in 0..frames {
            let (cx, cy) = self.center_at(t, h, w);
            if cx - ex < 0.0 || cx + ex > w as f64 || cy - ey < 0.0 || cy + ey > h as f64 {
                return false;
            }
        }
        true
    }
}

/// Direction word for an axis-aligned velocity; `None` when static.
pub fn direction_word(v: (f64, f64)) -> Option<&'static str> {
    if v.0 == 0.0 && v.1 == 0.0 {
        None
    } else if v.0.abs() >= v.1.abs() {
        Some(if v.0 > 0.0 { "right" } else { "left" })
    } else {
        Some(if v.1 > 0.0 { "down" } else { "up" })
    }
}

/// Draw a random scene that fits `(frames, h, w)`. `forced_dir` pins one of
/// [`DIRECTIONS`] (dataset balancing); otherwise the direction is drawn too.
pub fn sample_scene(
    rng: &mut Rng,
    frames: usize,
    h: usize,
    w: usize,
    forced_dir: Option<usize>,
) -> Result<SceneSpec> {
    let seed = rng.next_u64();
    scene_from_seed(seed, frames, h, w, forced_dir)
}

/// Rebuild the exact scene a stored seed produced (manifests persist the
/// seed; the forced direction is recoverable from the motion caption).
pub fn scene_from_seed(
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
    forced_dir: Option<usize>,
) -> Result<SceneSpec> {
    let mut local = Rng::new(seed);
    for _ in 0..MAX_RESAMPLES {
        let kind = ShapeKind::ALL[local.next_below(3)];
        let color = local.next_below(PALETTE.len());
        let large = local.next_bool(0.5);
        let (lo, hi) = if large { SIZE_LARGE } else { SIZE_SMALL };
        let size_frac = local.next_range_f64(lo, hi);
        let dir = DIRECTIONS[forced_dir.unwrap_or_else(|| local.next_below(4))];
        let fast = local.next_bool(0.5);
        let speed = if fast {
            (2 + local.next_below(2)) as f64 // 2 or 3 px/frame
        } else {
            1.0
        };
        let velocity = (dir.0 * speed, dir.1 * speed);
        let background = if local.next_bool(0.5) {
            Background::Gradient
        } else {
            Background::Solid
        };
        let start = (local.next_range_f64(0.2, 0.8), local.next_range_f64(0.2, 0.8));
        let spec = SceneSpec {
            seed,
            kind,
            color,
            size_frac,
            start,
            velocity,
            speed_class: if fast { SpeedClass::Fast } else { SpeedClass::Slow },
            background,
        };
        if spec.fits(frames, h, w) {
            return Ok(spec);
        }
    }
    Err(Error::SceneGeneration(format!(
        "no valid trajectory after {MAX_RESAMPLES} resamples for {frames}x{h}x{w}"
    )))
}

fn background_value(bg: Background, y: usize, h: usize) -> f64 {
    match bg {
        Background::Solid => 0.3,
        Background::Gradient => 0.15 + 0.3 * (y as f64 / (h.saturating_sub(1)).max(1) as f64),
    }
}

/// Pixel coverage of the shape at center (cx, cy); exact for rectangles,
/// a 1px linear edge ramp for circles. Translating the center by integer
/// amounts translates the coverage field exactly.
fn coverage(spec: &SceneSpec, cx: f64, cy: f64, ex: f64, ey: f64, x: usize, y: usize) -> f64 {
    match spec.kind {
        ShapeKind::Square | ShapeKind::Bar => {
            let px = x as f64;
            let py = y as f64;
            let ox = (px + 1.0).min(cx + ex) - px.max(cx - ex);
            let oy = (py + 1.0).min(cy + ey) - py.max(cy - ey);
            ox.max(0.0) * oy.max(0.0)
        }
        ShapeKind::Circle => {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d = libm::sqrt(dx * dx + dy * dy);
            (ex - d + 0.5).clamp(0.0, 1.0)
        }
    }
}

/// Render one frame into `out` ([3,H,W] slice, values in [-1,1]).
fn render_frame_into(spec: &SceneSpec, t: usize, h: usize, w: usize, out: &mut [f32]) {
    let (cx, cy) = spec.center_at(t, h, w);
    let (ex, ey) = spec.half_extents(h, w);
    let color = PALETTE[spec.color].1;
    for y in 0..h {
        let bg = background_value(spec.background, y, h);
        for x in 0..w {
            let cov = coverage(spec, cx, cy, ex, ey, x, y);
            for (c, &col) in color.iter().enumerate() {
                let v = bg + cov * (col - bg);
                out[c * h * w + y * w + x] = (2.0 * v - 1.0) as f32;
            }
        }
    }
}

/// Render a single frame as [3,H,W]; frame 0 of [`render`] is bit-identical
/// to this.
pub fn render_frame(spec: &SceneSpec, t: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut data = alloc::vec![0.0f32; 3 * h * w];
    render_frame_into(spec, t, h, w, &mut data);
    Tensor::new(alloc::vec![3, h, w], data).expect("consistent frame shape")
}

/// Render the full sample: frames, captions, and analytic flow.
pub fn render(spec: &SceneSpec, frames: usize, h: usize, w: usize) -> Result<VideoSample> {
    if frames < 2 || h < 8 || w < 8 {
        return Err(Error::SceneGeneration(format!(
            "render requires T >= 2 and H, W >= 8, got {frames}x{h}x{w}"
        )));
    }
    if !spec.fits(frames, h, w) {
        return Err(Error::SceneGeneration(format!(
            "trajectory leaves the {h}x{w} frame within {frames} frames"
        )));
    }
    let mut fr = alloc::vec![0.0f32; frames * 3 * h * w];
    for t in 0..frames {
        render_frame_into(spec, t, h, w, &mut fr[t * 3 * h * w..(t + 1) * 3 * h * w]);
    }
    let mut fl = alloc::vec![0.0f32; (frames - 1) * 2 * h * w];
    let (ex, ey) = spec.half_extents(h, w);
    for t in 0..frames - 1 {
        let (cx, cy) = spec.center_at(t, h, w);
        for y in 0..h {
            for x in 0..w {
                if coverage(spec, cx, cy, ex, ey, x, y) >= COVER_FULL {
                    fl[(t * 2) * h * w + y * w + x] = spec.velocity.0 as f32;
                    fl[(t * 2 + 1) * h * w + y * w + x] = spec.velocity.1 as f32;
                }
            }
        }
    }
    let (spatial_tokens, _) = vocab::encode(&spec.spatial_caption());
    let (motion_tokens, _) = vocab::encode(&spec.motion_caption());
    Ok(VideoSample {
        frames: Tensor::new(alloc::vec![frames, 3, h, w], fr)?,
        spatial_tokens,
        motion_tokens,
        flow: Tensor::new(alloc::vec![frames - 1, 2, h, w], fl)?,
        spec: spec.clone(),
    })
}

/// Plan a direction-balanced dataset: sample i uses the split stream
/// `hash64(seed, i)` and is forced to direction `i % 4`, so the four motion
/// directions are balanced exactly and generation order does not matter.
pub fn plan_dataset(
    n: usize,
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::SceneGeneration("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = Rng::new(hash64(seed, i as u64));
            sample_scene(&mut rng, frames, h, w, Some(i % 4))
        })
        .collect()
}

/// Recover a `SceneSpec` from caption tokens, filling unstated attributes
/// from `seed`. Used by the CLI to render a first frame from a prompt; only
/// the starting position must fit in frame — the motion itself is the
/// model's job at sampling time.
pub fn spec_from_caption(
    spatial_tokens: &[u32],
    motion_tokens: &[u32],
    seed: u64,
    h: usize,
    w: usize,
) -> Result<SceneSpec> {
    let mut rng = Rng::new(hash64(seed, 0x5ce_ec));
    let words: Vec<&str> = spatial_tokens.iter().map(|&t| vocab::word(t)).collect();
    let mwords: Vec<&str> = motion_tokens.iter().map(|&t| vocab::word(t)).collect();

    let color = words
        .iter()
        .find_map(|w| PALETTE.iter().position(|(name, _)| name == w))
        .unwrap_or_else(|| rng.next_below(PALETTE.len()));
    let kind = words
        .iter()
        .find_map(|w| ShapeKind::ALL.iter().find(|k| k.word() == *w).copied())
        .unwrap_or(ShapeKind::Square);
    let large = match words.iter().find(|w| **w == "small" || **w == "large") {
        Some(&"large") => true,
        Some(_) => false,
        None => rng.next_bool(0.5),
    };
    let background = match words.iter().find(|w| **w == "solid" || **w == "gradient") {
        Some(&"gradient") => Background::Gradient,
        Some(_) => Background::Solid,
        None => Background::Solid,
    };
    let dir = mwords.iter().find_map(|w| match *w {
        "right" => Some((1.0, 0.0)),
        "left" => Some((-1.0, 0.0)),
        "down" => Some((0.0, 1.0)),
        "up" => Some((0.0, -1.0)),
        _ => None,
    });
    let is_static = mwords.iter().any(|w| *w == "static") || dir.is_none();
    let fast = mwords.iter().any(|w| *w == "fast");
    let speed = if is_static {
        0.0
    } else if fast {
        2.0
    } else {
        1.0
    };
    let dir = dir.unwrap_or((0.0, 0.0));
    let (lo, hi) = if large { SIZE_LARGE } else { SIZE_SMALL };

    for _ in 0..MAX_RESAMPLES {
        let spec = SceneSpec {
            seed,
            kind,
            color,
            size_frac: rng.next_range_f64(lo, hi),
            start: (rng.next_range_f64(0.3, 0.7), rng.next_range_f64(0.3, 0.7)),
            velocity: (dir.0 * speed, dir.1 * speed),
            speed_class: if fast { SpeedClass::Fast } else { SpeedClass::Slow },
            background,
        };
        if spec.fits(1, h, w) {
            return Ok(spec);
        }
    }
    Err(Error::SceneGeneration(
        "prompt admits no in-frame start position".into(),
    ))
}

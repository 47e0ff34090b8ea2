//! Procedural multi-object videos with occlusion and their on-disk format.
//!
//! Objects are flat-colored circles, rectangles and triangles moving at
//! constant integer velocity and bouncing off the frame edges. Higher object
//! indices are drawn on top. Distractors copy a labeled object's appearance
//! but stay background in the mask.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_OBJECTS: usize = 8;
pub const DATASET_VERSION: u32 = 1;
const SPAWN_ATTEMPTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat([f32; 3]),
    /// Horizontal ramp from the left color to the right color.
    Gradient([f32; 3], [f32; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_objects: usize,
    /// (H, W); both divisible by 16.
    pub frame_size: (usize, usize),
    pub num_frames: usize,
    /// Per-object shapes; drawn at random when `None`.
    pub shapes: Option<Vec<ShapeKind>>,
    /// Inclusive range of half-extents in pixels.
    pub size_range: (u32, u32),
    /// Inclusive range of per-axis speed in pixels per frame.
    pub velocity_range: (u32, u32),
    /// Per-object fill colors; drawn at random when `None`.
    pub colors: Option<Vec<[f32; 3]>>,
    pub background: Background,
    /// Uniform noise amplitude added to frames (never to masks).
    pub noise: f32,
    pub distractors: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// A 64×64 scene with defaults suited to desk-scale experiments.
    pub fn new(num_objects: usize, seed: u64) -> Self {
        Self {
            num_objects,
            frame_size: (64, 64),
            num_frames: 8,
            shapes: None,
            size_range: (8, 14),
            velocity_range: (1, 3),
            colors: None,
            background: Background::Flat([0.1, 0.1, 0.1]),
            noise: 0.0,
            distractors: 0,
            seed,
        }
    }

    /// Square `size×size` frames with object half-sizes scaled to the frame.
    pub fn with_size(num_objects: usize, size: usize, seed: u64) -> Self {
        let lo = (size / 8).max(1) as u32;
        let hi = (size * 7 / 32).max(lo as usize) as u32;
        Self {
            frame_size: (size, size),
            size_range: (lo, hi),
            ..Self::new(num_objects, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_size;
        if !(1..=MAX_OBJECTS).contains(&self.num_objects) {
            return Err(Error::Config(format!("number of objects must be 1..={MAX_OBJECTS}")));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("frame size {h}×{w} must be positive multiples of 16")));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("a video needs at least two frames".into()));
        }
        if self.size_range.0 < 1 || self.size_range.0 > self.size_range.1 || self.velocity_range.0 > self.velocity_range.1 {
            return Err(Error::Config("empty size or velocity range".into()));
        }
        if 2 * self.size_range.1 as usize >= h.min(w) {
            return Err(Error::Config(format!("objects of half-size {} cannot fit in {h}×{w}", self.size_range.1)));
        }
        if self.num_objects + self.distractors > MAX_OBJECTS * 2 {
            return Err(Error::Config("too many objects for the frame".into()));
        }
        for (what, n) in [("shapes", self.shapes.as_ref().map(Vec::len)), ("colors", self.colors.as_ref().map(Vec::len))] {
            if n.is_some_and(|n| n != self.num_objects) {
                return Err(Error::Config(format!("need one entry in {what} per object")));
            }
        }
        Ok(())
    }
}

/// One moving object. Positions and extents are in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub half: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f32; 3],
    /// Mask id; 0 for distractors.
    pub label: u8,
}

impl SceneObject {
    /// Hard-edged coverage test at pixel center (x + 0.5, y + 0.5).
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let (hx, hy) = self.half;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= hx * hx,
            ShapeKind::Rectangle => dx.abs() <= hx && dy.abs() <= hy,
            ShapeKind::Triangle => {
                // apex on top, base at the bottom
                if dy > hy || dy < -hy {
                    return false;
                }
                let t = (dy + hy) / (2.0 * hy);
                dx.abs() <= t * hx
            }
        }
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.center.0 - self.half.0,
            self.center.1 - self.half.1,
            self.center.0 + self.half.0,
            self.center.1 + self.half.1,
        )
    }

    /// Moves one frame forward, reflecting off the edges of a `w×h` frame.
    pub fn advance(&mut self, h: usize, w: usize) {
        let reflect = |p: &mut f64, v: &mut f64, lo: f64, hi: f64| {
            *p += *v;
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            } else if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
        };
        reflect(&mut self.center.0, &mut self.velocity.0, self.half.0, w as f64 - self.half.0);
        reflect(&mut self.center.1, &mut self.velocity.1, self.half.1, h as f64 - self.half.1);
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// A video with per-pixel object ids.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of labeled objects; mask ids lie in `0..=num_objects`.
    pub num_objects: usize,
    /// `[T][3][H][W]` in [0, 1].
    pub frames: Vec<f32>,
    /// `[T][H][W]`.
    pub masks: Vec<u8>,
}

impl VideoSample {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mask(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[t * n..(t + 1) * n]
    }

    /// Frame `t` as a 3×H×W tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.frame(t).iter().map(|&v| v as f64).collect()).unwrap()
    }

    fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.frames.len() != self.num_frames * 3 * hw || self.masks.len() != self.num_frames * hw {
            return Err(Error::Format("frame or mask buffer does not match the declared size".into()));
        }
        if self.masks.iter().any(|&m| m as usize > self.num_objects) {
            return Err(Error::Format(format!("mask id exceeds the object count {}", self.num_objects)));
        }
        Ok(())
    }
}

/// Renders one frame: returns the 3×H×W image and the H×W mask. Noise is not applied here.
pub fn render_frame(objects: &[SceneObject], h: usize, w: usize, background: &Background) -> (Vec<f32>, Vec<u8>) {
    let mut img = vec![0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let bg = match background {
                Background::Flat(c) => *c,
                Background::Gradient(l, r) => {
                    let t = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.0 };
                    [0, 1, 2].map(|i| l[i] * (1.0 - t) + r[i] * t)
                }
            };
            let mut color = bg;
            let mut label = 0;
            for o in objects {
                if o.covers(y, x) {
                    color = o.color;
                    label = o.label;
                }
            }
            for c in 0..3 {
                img[(c * h + y) * w + x] = color[c];
            }
            mask[y * w + x] = label;
        }
    }
    (img, mask)
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    let mut best = [0.5; 3];
    let mut best_d = -1.0;
    for _ in 0..32 {
        let c = [0, 1, 2].map(|_| rng.random_range(0.15f32..0.95));
        let d = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).powi(2)).sum::<f32>())
            .fold(f32::INFINITY, f32::min);
        if d > 0.15 {
            return c;
        }
        if d > best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn spawn(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let (h, w) = spec.frame_size;
    let kinds = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle];
    let mut avoid = match &spec.background {
        Background::Flat(c) => vec![*c],
        Background::Gradient(l, r) => vec![*l, *r],
    };
    let make = |rng: &mut ChaCha8Rng, kind: ShapeKind, color: [f32; 3], label: u8| {
        let (smin, smax) = spec.size_range;
        let hx = rng.random_range(smin..=smax) as f64;
        let hy = if kind == ShapeKind::Circle {
            hx
        } else {
            rng.random_range(smin..=smax) as f64
        };
        let cx = rng.random_range(hx as i64..=(w as f64 - hx) as i64) as f64;
        let cy = rng.random_range(hy as i64..=(h as f64 - hy) as i64) as f64;
        let (vmin, vmax) = spec.velocity_range;
        let mut vel = || {
            let s = rng.random_range(vmin..=vmax) as f64;
            if rng.random_bool(0.5) {
                -s
            } else {
                s
            }
        };
        let velocity = (vel(), vel());
        SceneObject {
            kind,
            center: (cx, cy),
            half: (hx, hy),
            velocity,
            color,
            label,
        }
    };
    let mut labeled = Vec::with_capacity(spec.num_objects);
    for i in 0..spec.num_objects {
        let kind = match &spec.shapes {
            Some(s) => s[i],
            None => kinds[rng.random_range(0..3)],
        };
        let color = match &spec.colors {
            Some(c) => c[i],
            None => random_color(rng, &avoid),
        };
        avoid.push(color);
        labeled.push(make(rng, kind, color, (i + 1) as u8));
    }
    let mut objects = Vec::with_capacity(spec.distractors + spec.num_objects);
    for _ in 0..spec.distractors {
        let target: &SceneObject = &labeled[rng.random_range(0..labeled.len())];
        let (kind, color) = (target.kind, target.color);
        objects.push(make(rng, kind, color, 0));
    }
    // distractors sit beneath every labeled object
    objects.extend(labeled);
    objects
}

/// Seed of video `index` in a dataset generated from `seed`.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer, so neighbouring indices give unrelated streams
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `count` videos from `template`, video `i` seeded with [`video_seed`]`(template.seed, i)`.
pub fn generate_dataset(template: &SceneSpec, count: usize) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| {
            generate_video(&SceneSpec {
                seed: video_seed(template.seed, i),
                ..template.clone()
            })
        })
        .collect()
}

/// Generates a video; deterministic in `spec.seed`.
pub fn generate_video(spec: &SceneSpec) -> Result<VideoSample> {
    spec.validate()?;
    let (h, w) = spec.frame_size;
    let t_len = spec.num_frames;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..SPAWN_ATTEMPTS {
        let mut objects = spawn(spec, &mut rng);
        let mut frames = Vec::with_capacity(t_len * 3 * h * w);
        let mut masks = Vec::with_capacity(t_len * h * w);
        let mut distractor_overlap = spec.distractors == 0;
        for t in 0..t_len {
            if t > 0 {
                for o in objects.iter_mut() {
                    o.advance(h, w);
                }
            }
            let (img, mask) = render_frame(&objects, h, w, &spec.background);
            frames.extend(img);
            masks.extend(mask);
            for d in objects.iter().filter(|o| o.label == 0) {
                if objects
                    .iter()
                    .filter(|o| o.label > 0 && o.color == d.color)
                    .any(|o| boxes_overlap(o.bbox(), d.bbox()))
                {
                    distractor_overlap = true;
                }
            }
        }
        let first = &masks[..h * w];
        let all_visible = (1..=spec.num_objects as u8).all(|k| first.contains(&k));
        if !all_visible || !distractor_overlap {
            continue;
        }
        if spec.noise > 0.0 {
            for v in frames.iter_mut() {
                *v = (*v + rng.random_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
            }
        }
        return Ok(VideoSample {
            num_frames: t_len,
            height: h,
            width: w,
            num_objects: spec.num_objects,
            frames,
            masks,
        });
    }
    Err(Error::Config(format!(
        "could not place {} objects and {} distractors satisfying visibility and overlap constraints",
        spec.num_objects, spec.distractors
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub frames: String,
    pub masks: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub videos: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus `frames.bin` (little-endian f32) and `masks.bin` (u8) per video.
pub fn write_dataset(samples: &[VideoSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut videos = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let id = format!("video_{i:04}");
        fs::create_dir_all(dir.join(&id))?;
        let frames = format!("{id}/frames.bin");
        let masks = format!("{id}/masks.bin");
        let bytes: Vec<u8> = s.frames.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&frames), bytes)?;
        fs::write(dir.join(&masks), &s.masks)?;
        videos.push(ManifestEntry {
            id,
            t: s.num_frames,
            h: s.height,
            w: s.width,
            k: s.num_objects,
            frames,
            masks,
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        videos,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    let raw = read_file(&dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        let frame_bytes = read_file(&dir.join(&e.frames))?;
        let masks = read_file(&dir.join(&e.masks))?;
        let hw = e.h * e.w;
        if frame_bytes.len() != e.t * 3 * hw * 4 {
            return Err(Error::Format(format!(
                "{}: frames.bin has {} bytes, manifest implies {}",
                e.id,
                frame_bytes.len(),
                e.t * 3 * hw * 4
            )));
        }
        if masks.len() != e.t * hw {
            return Err(Error::Format(format!(
                "{}: masks.bin has {} bytes, manifest implies {}",
                e.id,
                masks.len(),
                e.t * hw
            )));
        }
        let frames = frame_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let sample = VideoSample {
            num_frames: e.t,
            height: e.h,
            width: e.w,
            num_objects: e.k,
            frames,
            masks,
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

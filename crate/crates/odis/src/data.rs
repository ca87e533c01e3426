//! Synthetic multi-object scenes with exact instance masks.
//!
//! Stands in for a real detection corpus at desk scale: each scene
//! composites 1..=8 colored shapes over a background, the instance map
//! records the topmost instance per pixel, and instance 1 is the
//! designated primary object for single-label evaluation.

pub mod io;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::SceneSample;
use crate::error::{OdisError, Result};
use crate::tensor::Tensor;

/// Minimum visible pixels a placed instance must keep.
pub const MIN_VISIBLE_PIXELS: usize = 16;
const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    Gradient,
    Noise,
}

impl Background {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Background::Flat),
            "gradient" => Ok(Background::Gradient),
            "noise" => Ok(Background::Noise),
            other => Err(OdisError::config(format!(
                "unknown background '{other}' (expected flat|gradient|noise)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Background::Flat => "flat",
            Background::Gradient => "gradient",
            Background::Noise => "noise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

/// Class table: class id = index + 1 (0 is background). Eight variants
/// from five shapes crossed with distinct colors.
const CLASS_TABLE: [(Shape, [u8; 3]); 8] = [
    (Shape::Disk, [220, 60, 50]),
    (Shape::Square, [70, 200, 80]),
    (Shape::Triangle, [60, 90, 220]),
    (Shape::Ring, [230, 220, 60]),
    (Shape::Cross, [210, 70, 200]),
    (Shape::Disk, [70, 210, 210]),
    (Shape::Square, [235, 150, 40]),
    (Shape::Triangle, [240, 240, 240]),
];

pub const NUM_SHAPE_CLASSES: usize = CLASS_TABLE.len();

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub canvas_side: usize,
    pub object_count: (usize, usize),
    pub num_classes: usize,
    /// Object diameter as a fraction of the canvas side.
    pub size_range: (f64, f64),
    pub occlusion: bool,
    pub background: Background,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas_side: 32,
            object_count: (2, 4),
            num_classes: NUM_SHAPE_CLASSES,
            size_range: (0.2, 0.45),
            occlusion: true,
            background: Background::Gradient,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_count.0 < 1 || self.object_count.0 > self.object_count.1 {
            return Err(OdisError::config("object count range must satisfy 1 <= lo <= hi"));
        }
        if self.object_count.1 > 255 {
            return Err(OdisError::config("instance ids are 8-bit; at most 255 objects"));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1 && self.size_range.1 < 1.0)
        {
            return Err(OdisError::config("size range must lie within (0, 1)"));
        }
        if self.num_classes == 0 || self.num_classes > NUM_SHAPE_CLASSES {
            return Err(OdisError::config(format!(
                "num_classes must be in 1..={NUM_SHAPE_CLASSES}"
            )));
        }
        if self.canvas_side < 8 {
            return Err(OdisError::config("canvas must be at least 8 pixels"));
        }
        Ok(())
    }
}

fn raster_shape(shape: Shape, cx: f64, cy: f64, r: f64, side: usize) -> Vec<usize> {
    let mut pixels = Vec::new();
    let lo_y = ((cy - r).floor().max(0.0)) as usize;
    let hi_y = ((cy + r).ceil().min(side as f64 - 1.0)) as usize;
    let lo_x = ((cx - r).floor().max(0.0)) as usize;
    let hi_x = ((cx + r).ceil().min(side as f64 - 1.0)) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = (x as f64 + 0.5) - cx;
            let dy = (y as f64 + 0.5) - cy;
            let inside = match shape {
                Shape::Disk => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
                Shape::Triangle => {
                    // upward triangle inscribed in the radius-r circle
                    let ax = 0.0;
                    let ay = -r;
                    let bx = -0.866 * r;
                    let by = 0.5 * r;
                    let cx2 = 0.866 * r;
                    let cy2 = 0.5 * r;
                    let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                        (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2)
                    };
                    let d1 = sign(ax, ay, bx, by);
                    let d2 = sign(bx, by, cx2, cy2);
                    let d3 = sign(cx2, cy2, ax, ay);
                    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                    !(has_neg && has_pos)
                }
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    let r_in = 0.55 * r;
                    d2 <= r * r && d2 >= r_in * r_in
                }
                Shape::Cross => {
                    let arm = 0.35 * r;
                    (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
                }
            };
            if inside {
                pixels.push(y * side + x);
            }
        }
    }
    pixels
}

fn paint_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
    let s = spec.canvas_side;
    let mut px = vec![[0u8; 3]; s * s];
    match spec.background {
        Background::Flat => {
            for p in px.iter_mut() {
                *p = [40, 44, 52];
            }
        }
        Background::Gradient => {
            // ramp between two random dark corners
            let a: [u8; 3] = [rng.gen_range(15..70), rng.gen_range(15..70), rng.gen_range(15..70)];
            let b: [u8; 3] = [rng.gen_range(15..70), rng.gen_range(15..70), rng.gen_range(15..70)];
            for y in 0..s {
                for x in 0..s {
                    let t = (x + y) as f64 / (2 * (s - 1)) as f64;
                    for c in 0..3 {
                        let v = a[c] as f64 * (1.0 - t) + b[c] as f64 * t;
                        px[y * s + x][c] = v.round() as u8;
                    }
                }
            }
        }
        Background::Noise => {
            for p in px.iter_mut() {
                for c in 0..3 {
                    p[c] = rng.gen_range(20..90);
                }
            }
        }
    }
    px
}

/// Rasterize one scene. Objects are placed back-to-front; a placement
/// that would leave any instance (including itself) under
/// MIN_VISIBLE_PIXELS visible pixels is re-drawn up to 50 times and then
/// dropped. Surviving instances are re-indexed contiguously from 1.
pub fn generate_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    spec.validate()?;
    let s = spec.canvas_side;
    let mut pixels_bg = paint_background(spec, rng);
    let mut map = vec![0u16; s * s];
    let mut kept: Vec<(u8, Vec<usize>)> = Vec::new(); // (class, own raster)

    let want = rng.gen_range(spec.object_count.0..=spec.object_count.1);
    for _ in 0..want {
        let mut placed = false;
        'attempt: for _ in 0..PLACEMENT_ATTEMPTS {
            let class = rng.gen_range(1..=spec.num_classes) as u8;
            let frac = rng.gen_range(spec.size_range.0..=spec.size_range.1);
            let r = frac * s as f64 / 2.0;
            let cx = rng.gen_range(r..(s as f64 - r));
            let cy = rng.gen_range(r..(s as f64 - r));
            let shape = CLASS_TABLE[(class - 1) as usize].0;
            let raster = raster_shape(shape, cx, cy, r, s);
            if raster.len() < MIN_VISIBLE_PIXELS {
                continue;
            }
            if !spec.occlusion && raster.iter().any(|&p| map[p] != 0) {
                continue;
            }
            // placing on top must not starve any earlier instance
            let mut visible: BTreeMap<u16, usize> = BTreeMap::new();
            for &id in map.iter() {
                if id != 0 {
                    *visible.entry(id).or_insert(0) += 1;
                }
            }
            let mut stolen: BTreeMap<u16, usize> = BTreeMap::new();
            for &p in &raster {
                if map[p] != 0 {
                    *stolen.entry(map[p]).or_insert(0) += 1;
                }
            }
            for (id, taken) in &stolen {
                if visible[id] - taken < MIN_VISIBLE_PIXELS {
                    continue 'attempt;
                }
            }
            let id = (kept.len() + 1) as u16;
            let color = CLASS_TABLE[(class - 1) as usize].1;
            for &p in &raster {
                map[p] = id;
                pixels_bg[p] = color;
            }
            kept.push((class, raster));
            placed = true;
            break;
        }
        let _ = placed; // dropped after 50 attempts
    }

    if kept.is_empty() {
        return Err(OdisError::invalid(
            "scene spec unsatisfiable: no instance could be placed",
        ));
    }

    let mut labels = BTreeMap::new();
    for (i, (class, _)) in kept.iter().enumerate() {
        labels.insert((i + 1) as u16, *class);
    }

    let mut image = Tensor::zeros(vec![3, s, s]);
    for (i, p) in pixels_bg.iter().enumerate() {
        for c in 0..3 {
            image.data_mut()[c * s * s + i] = p[c] as f32 / 255.0;
        }
    }

    let sample = SceneSample { image, instance_map: map, side: s, labels };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests;

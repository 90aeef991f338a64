use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::tensor::Tensor;

pub const MIN_ROAD_FRACTION: f64 = 0.02;
pub const MAX_ROAD_FRACTION: f64 = 0.6;
const RETRIES: u64 = 10;

/// Appearance and geometry parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub background: [f32; 3],
    /// Amplitude of the value-noise texture, in `[0, 1]`.
    pub noise_amplitude: f32,
    pub road_color: [f32; 3],
    /// Per-road multiplier range applied to `road_color`.
    pub road_intensity: (f32, f32),
    /// Road width range in pixels.
    pub width: (f64, f64),
    /// Maximum heading change per polyline step, radians.
    pub curvature: f64,
    /// Occluder blobs per 1000 pixels.
    pub clutter: f64,
    pub clutter_color: [f32; 3],
    /// Added to every pixel before clamping.
    pub intensity_offset: f32,
}

impl DomainStyle {
    fn widths(size: usize) -> (f64, f64) {
        (size as f64 * 15.0 / 320.0, size as f64 * 20.0 / 320.0)
    }

    pub fn source(size: usize) -> Self {
        DomainStyle {
            background: [0.22, 0.34, 0.18],
            noise_amplitude: 0.12,
            road_color: [0.78, 0.76, 0.72],
            road_intensity: (0.85, 1.0),
            width: Self::widths(size),
            curvature: 0.35,
            clutter: 1.0,
            clutter_color: [0.10, 0.20, 0.08],
            intensity_offset: 0.0,
        }
    }

    pub fn target(size: usize) -> Self {
        DomainStyle {
            background: [0.45, 0.42, 0.30],
            noise_amplitude: 0.15,
            road_color: [0.62, 0.62, 0.66],
            road_intensity: (0.8, 1.0),
            width: Self::widths(size),
            curvature: 0.35,
            clutter: 2.0,
            clutter_color: [0.30, 0.26, 0.20],
            intensity_offset: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.0 > 0.0 && self.width.0 <= self.width.1) {
            return Err(Error::Config(format!("invalid road width range {:?}", self.width)));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(Error::Config(format!("noise amplitude {} outside [0, 1]", self.noise_amplitude)));
        }
        if self.road_intensity.0 > self.road_intensity.1 || self.clutter < 0.0 || self.curvature < 0.0 {
            return Err(Error::Config("invalid road intensity, clutter or curvature".into()));
        }
        Ok(())
    }
}

/// A polyline road: points in pixel coordinates `(x, y)` with pixel centres
/// at half-integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx * dx + dy * dy;
    let t = if len == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Binary mask of the pixels whose centre lies within half a road width of
/// any road segment.
pub fn rasterize(roads: &[Road], width: usize, height: usize) -> SegMask {
    let mut mask = SegMask::filled(width, height, 0);
    for road in roads {
        let r2 = (road.width / 2.0).powi(2);
        let pad = road.width / 2.0 + 1.0;
        for seg in road.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(width);
            let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(height);
            for y in y0..y1 {
                for x in x0..x1 {
                    if segment_distance_sq((x as f64 + 0.5, y as f64 + 0.5), a, b) <= r2 {
                        mask.labels[y * width + x] = 1;
                    }
                }
            }
        }
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadScene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// 1 on road pixels, 0 elsewhere.
    pub mask: SegMask,
    pub domain: Domain,
    pub seed: u64,
    /// Geometry used for rasterization; empty for scenes loaded from disk.
    pub roads: Vec<Road>,
}

impl RoadScene {
    pub fn size(&self) -> usize {
        self.mask.width
    }

    pub fn road_fraction(&self) -> f64 {
        self.mask.labels.iter().filter(|&&v| v == 1).count() as f64 / self.mask.len() as f64
    }
}

fn sub_seed(seed: u64, attempt: u64) -> u64 {
    if attempt == 0 {
        return seed;
    }
    // splitmix64 finalizer
    let mut z = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth value noise in `[-1, 1]` on a lattice with the given cell size.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let cells = size / cell + 2;
    let lattice: Vec<f32> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (gy, ty) = (y / cell, smooth((y % cell) as f32 / cell as f32));
        for x in 0..size {
            let (gx, tx) = (x / cell, smooth((x % cell) as f32 / cell as f32));
            let at = |i: usize, j: usize| lattice[(gy + j) * cells + gx + i];
            let top = at(0, 0) * (1.0 - tx) + at(1, 0) * tx;
            let bottom = at(0, 1) * (1.0 - tx) + at(1, 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn random_road(rng: &mut ChaCha8Rng, style: &DomainStyle, size: usize) -> Road {
    let s = size as f64;
    let edge = rng.gen_range(0..4);
    let along = rng.gen_range(0.1 * s..0.9 * s);
    let start = match edge {
        0 => (along, 0.0),
        1 => (s, along),
        2 => (along, s),
        _ => (0.0, along),
    };
    let aim = (rng.gen_range(0.3 * s..0.7 * s), rng.gen_range(0.3 * s..0.7 * s));
    let mut heading = (aim.1 - start.1).atan2(aim.0 - start.0);
    let step = s / 16.0;
    let mut points = vec![start];
    let mut p = start;
    for _ in 0..64 {
        heading += rng.gen_range(-style.curvature..=style.curvature);
        p = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
        points.push(p);
        let margin = style.width.1;
        if p.0 < -margin || p.1 < -margin || p.0 > s + margin || p.1 > s + margin {
            break;
        }
    }
    Road {
        points,
        width: rng.gen_range(style.width.0..=style.width.1),
    }
}

fn render(rng: &mut ChaCha8Rng, style: &DomainStyle, size: usize, roads: &[Road], mask: &SegMask) -> Tensor<f32> {
    let n = size * size;
    let coarse = value_noise(rng, size, (size / 8).max(2));
    let fine = value_noise(rng, size, (size / 32).max(2));
    let mut img = vec![0.0f32; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let tex = 0.7 * coarse[i] + 0.3 * fine[i];
            img[c * n + i] = style.background[c] + style.noise_amplitude * tex * (0.8 + 0.1 * c as f32);
        }
    }
    let blobs = (style.clutter * n as f64 / 1000.0).round() as usize;
    let scale = size as f64 / 64.0;
    for _ in 0..blobs {
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let (rx, ry) = (rng.gen_range(1.5..4.0) * scale, rng.gen_range(1.5..4.0) * scale);
        let alpha = rng.gen_range(0.4f32..0.8);
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(size);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    for c in 0..3 {
                        let v = &mut img[c * n + y * size + x];
                        *v = (1.0 - alpha) * *v + alpha * style.clutter_color[c];
                    }
                }
            }
        }
    }
    let intensities: Vec<f32> = roads
        .iter()
        .map(|_| rng.gen_range(style.road_intensity.0..=style.road_intensity.1))
        .collect();
    let single = rasterize_each(roads, size);
    for i in 0..n {
        if mask.labels[i] == 0 {
            continue;
        }
        let k = single.iter().position(|m| m.labels[i] == 1).unwrap_or(0);
        for c in 0..3 {
            let grain = 0.03 * fine[(i * 7 + c * 13) % n];
            img[c * n + i] = style.road_color[c] * intensities[k] + grain;
        }
    }
    for v in &mut img {
        *v = (*v + style.intensity_offset).clamp(0.0, 1.0);
    }
    Tensor::new([3, size, size], img).expect("consistent shape")
}

fn rasterize_each(roads: &[Road], size: usize) -> Vec<SegMask> {
    roads.iter().map(|r| rasterize(std::slice::from_ref(r), size, size)).collect()
}

/// Renders a scene fully determined by `(seed, style, size)`, retrying with
/// derived sub-seeds until the road fraction is in range.
pub fn generate_scene(seed: u64, domain: Domain, style: &DomainStyle, size: usize) -> Result<RoadScene> {
    if size < 32 {
        return Err(Error::Invalid(format!("scene size must be at least 32, got {size}")));
    }
    style.validate()?;
    for attempt in 0..RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, attempt));
        let count = rng.gen_range(1..=3);
        let roads: Vec<Road> = (0..count).map(|_| random_road(&mut rng, style, size)).collect();
        let mask = rasterize(&roads, size, size);
        let fraction = mask.labels.iter().filter(|&&v| v == 1).count() as f64 / mask.len() as f64;
        if !(MIN_ROAD_FRACTION..=MAX_ROAD_FRACTION).contains(&fraction) {
            continue;
        }
        let image = render(&mut rng, style, size, &roads, &mask);
        return Ok(RoadScene { image, mask, domain, seed, roads });
    }
    Err(Error::Invalid(format!(
        "seed {seed}: road fraction outside [{MIN_ROAD_FRACTION}, {MAX_ROAD_FRACTION}] after {RETRIES} attempts"
    )))
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Road, RoadScene};
use crate::metrics::SegMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Flip with probability 1/2 when enabled.
    pub flip_h: bool,
    pub flip_v: bool,
    /// Maximum absolute shift in pixels.
    pub translate: i32,
    pub scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h: true,
            flip_v: true,
            translate: 8,
            scale: (1.0, 1.5),
        }
    }
}

/// One sampled geometric transform: scale about the centre, then shift, then
/// flips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub dx: i32,
    pub dy: i32,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip_h: false,
        flip_v: false,
        dx: 0,
        dy: 0,
        scale: 1.0,
    };

    /// Maps a continuous point of the input image to the output image.
    pub fn forward(&self, p: (f64, f64), width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let mut x = cx + self.scale * (p.0 - cx) + self.dx as f64;
        let mut y = cy + self.scale * (p.1 - cy) + self.dy as f64;
        if self.flip_h {
            x = width as f64 - x;
        }
        if self.flip_v {
            y = height as f64 - y;
        }
        (x, y)
    }

    /// Maps an output point back to the input image.
    pub fn inverse(&self, p: (f64, f64), width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let x = if self.flip_h { width as f64 - p.0 } else { p.0 };
        let y = if self.flip_v { height as f64 - p.1 } else { p.1 };
        (
            cx + (x - self.dx as f64 - cx) / self.scale,
            cy + (y - self.dy as f64 - cy) / self.scale,
        )
    }

    pub fn apply_road(&self, road: &Road, width: usize, height: usize) -> Road {
        Road {
            points: road.points.iter().map(|&p| self.forward(p, width, height)).collect(),
            width: road.width * self.scale,
        }
    }

    /// Bilinear resampling for the image, nearest for the mask, both with
    /// edge replication outside the source.
    pub fn apply(&self, scene: &RoadScene) -> RoadScene {
        let (w, h) = (scene.mask.width, scene.mask.height);
        let channels = scene.image.shape()[0];
        let src = scene.image.data();
        let mut img = vec![0.0f32; channels * w * h];
        let mut labels = vec![0u32; w * h];
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = self.inverse((ox as f64 + 0.5, oy as f64 + 0.5), w, h);
                let (u, v) = (sx - 0.5, sy - 0.5);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = ((u - u0) as f32, (v - v0) as f32);
                let xi = |x: f64| x.clamp(0.0, (w - 1) as f64) as usize;
                let yi = |y: f64| y.clamp(0.0, (h - 1) as f64) as usize;
                let (x0, x1, y0, y1) = (xi(u0), xi(u0 + 1.0), yi(v0), yi(v0 + 1.0));
                for c in 0..channels {
                    let at = |y: usize, x: usize| src[(c * h + y) * w + x];
                    let top = at(y0, x0) * (1.0 - fu) + at(y0, x1) * fu;
                    let bottom = at(y1, x0) * (1.0 - fu) + at(y1, x1) * fu;
                    img[(c * h + oy) * w + ox] = top * (1.0 - fv) + bottom * fv;
                }
                labels[oy * w + ox] = scene.mask.at(yi(sy.floor()), xi(sx.floor()));
            }
        }
        RoadScene {
            image: Tensor::new([channels, h, w], img).expect("consistent shape"),
            mask: SegMask::new(w, h, labels).expect("consistent shape"),
            domain: scene.domain,
            seed: scene.seed,
            roads: scene.roads.iter().map(|r| self.apply_road(r, w, h)).collect(),
        }
    }
}

impl AugmentConfig {
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        AugmentDraw {
            flip_h: self.flip_h && rng.gen_bool(0.5),
            flip_v: self.flip_v && rng.gen_bool(0.5),
            dx: rng.gen_range(-self.translate..=self.translate),
            dy: rng.gen_range(-self.translate..=self.translate),
            scale: rng.gen_range(self.scale.0..=self.scale.1),
        }
    }
}

pub fn augment(scene: &RoadScene, cfg: &AugmentConfig, rng: &mut impl Rng) -> RoadScene {
    cfg.draw(rng).apply(scene)
}

//! Procedural talking heads.
//!
//! Each identity is an elliptical head with eyes, brows, nose and mouth, a
//! base skin colour and an identity-specific surface pattern (sinusoidal
//! waves plus a few moles) defined in head-local coordinates, so the pattern
//! moves rigidly with the head. Per-frame pose (translation, in-plane
//! rotation, mouth opening) deterministically yields the frame, its 68
//! landmarks and its head mask.

use std::f32::consts::PI;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KeypointSet, VideoSample, DEFAULT_POINTS};
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIZE: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub frames: usize,
    pub image_size: u32,
    pub n_points: usize,
    pub fps: f32,
    /// Index of the first identity; splits with non-overlapping ranges share
    /// no identities.
    pub first_identity: usize,
    /// Peak head translation, as a fraction of the frame.
    pub max_shift: f32,
    /// Peak in-plane rotation in radians.
    pub max_rotation: f32,
    pub masks: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 16,
            frames: 16,
            image_size: 64,
            n_points: DEFAULT_POINTS,
            fps: 4.0,
            first_identity: 0,
            max_shift: 0.06,
            max_rotation: 0.2,
            masks: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "synthetic image size must be at least {MIN_IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        if self.n_points != DEFAULT_POINTS {
            return Err(Error::Config(format!(
                "synthetic faces carry the {DEFAULT_POINTS}-point layout, got n_points = {}",
                self.n_points
            )));
        }
        if self.identities == 0 || self.frames == 0 {
            return Err(Error::Config("identities and frames must be positive".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }
}

/// Head pose of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub tx: f32,
    pub ty: f32,
    pub rotation: f32,
    /// Mouth opening in `[0, 1]`.
    pub mouth: f32,
}

impl HeadPose {
    pub const NEUTRAL: HeadPose = HeadPose {
        tx: 0.0,
        ty: 0.0,
        rotation: 0.0,
        mouth: 0.3,
    };
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Wave {
    ku: f32,
    kv: f32,
    phase: f32,
    amp: [f32; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Mole {
    u: f32,
    v: f32,
    radius: f32,
    strength: f32,
}

/// Appearance of one synthetic person.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    /// Head half-axes as fractions of the frame width and height.
    pub radii: [f32; 2],
    skin: [f32; 3],
    lips: [f32; 3],
    iris: [f32; 3],
    waves: Vec<Wave>,
    moles: Vec<Mole>,
}

impl Identity {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin = [
            rng.gen_range(0.45..0.9),
            rng.gen_range(0.3..0.75),
            rng.gen_range(0.2..0.65),
        ];
        let waves = (0..3)
            .map(|_| {
                let freq = rng.gen_range(1.5..3.0);
                let dir = rng.gen_range(0.0..PI);
                Wave {
                    ku: freq * dir.cos(),
                    kv: freq * dir.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: [
                        rng.gen_range(-0.07..0.07),
                        rng.gen_range(-0.07..0.07),
                        rng.gen_range(-0.07..0.07),
                    ],
                }
            })
            .collect();
        let n_moles = rng.gen_range(2..5);
        let moles = (0..n_moles)
            .map(|_| {
                let r = rng.gen_range(0.2..0.75f32).sqrt();
                let a = rng.gen_range(0.0..2.0 * PI);
                Mole {
                    u: r * a.cos(),
                    v: r * a.sin(),
                    radius: rng.gen_range(0.06..0.1),
                    strength: rng.gen_range(0.25..0.45),
                }
            })
            .collect();
        Identity {
            radii: [rng.gen_range(0.25..0.29), rng.gen_range(0.33..0.37)],
            skin,
            lips: [rng.gen_range(0.45..0.75), rng.gen_range(0.1..0.25), rng.gen_range(0.12..0.3)],
            iris: [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)],
            waves,
            moles,
        }
    }

    /// Head-local coordinates `(u, v)` of a normalized image point; the head
    /// is the unit disk.
    pub fn to_local(&self, pose: &HeadPose, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - 0.5 - pose.tx, y - 0.5 - pose.ty);
        let (s, c) = pose.rotation.sin_cos();
        // inverse rotation
        let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
        (rx / self.radii[0], ry / self.radii[1])
    }

    /// Normalized image position of a head-local point.
    pub fn to_image(&self, pose: &HeadPose, u: f32, v: f32) -> [f32; 2] {
        let (lx, ly) = (u * self.radii[0], v * self.radii[1]);
        let (s, c) = pose.rotation.sin_cos();
        [0.5 + pose.tx + (c * lx - s * ly), 0.5 + pose.ty + (s * lx + c * ly)]
    }

    /// Colour in `[0, 1]` of the head surface at a local point inside the head.
    fn shade(&self, pose: &HeadPose, u: f32, v: f32) -> [f32; 3] {
        let r2 = u * u + v * v;
        let mut col = self.skin;
        for w in &self.waves {
            let s = (2.0 * PI * (w.ku * u + w.kv * v) + w.phase).sin();
            for c in 0..3 {
                col[c] += w.amp[c] * s;
            }
        }
        let falloff = 1.0 - 0.25 * r2;
        for c in col.iter_mut() {
            *c *= falloff;
        }
        for m in &self.moles {
            let d2 = (u - m.u).powi(2) + (v - m.v).powi(2);
            let a = m.strength * (-d2 / (2.0 * m.radius * m.radius)).exp();
            for c in col.iter_mut() {
                *c *= 1.0 - a;
            }
        }

        let brow = [0.12, 0.08, 0.06];
        for side in [-1.0f32, 1.0] {
            // eye white, iris
            let (eu, ev) = (u - side * EYE_CENTER[0], v - EYE_CENTER[1]);
            let rho = ((eu / EYE_RADII[0]).powi(2) + (ev / EYE_RADII[1]).powi(2)).sqrt();
            blend(&mut col, [0.92, 0.92, 0.9], 1.0 - smoothstep(0.8, 1.2, rho));
            let iris = ((eu / (0.55 * EYE_RADII[1] * 1.4)).powi(2) + (ev / (0.8 * EYE_RADII[1])).powi(2)).sqrt();
            blend(&mut col, self.iris, 1.0 - smoothstep(0.7, 1.3, iris));
            // brow
            let (a, b) = brow_segment(side);
            let d = segment_distance([u, v], a, b);
            blend(&mut col, brow, 1.0 - smoothstep(0.045, 0.09, d));
        }
        // nose shadow
        let d = segment_distance([u, v], [0.0, -0.12], [0.0, 0.2]);
        blend(&mut col, [0.0, 0.0, 0.0], 0.25 * (1.0 - smoothstep(0.03, 0.08, d)));
        let d = segment_distance([u, v], [-0.13, 0.24], [0.13, 0.24]);
        blend(&mut col, [0.0, 0.0, 0.0], 0.3 * (1.0 - smoothstep(0.03, 0.07, d)));
        // mouth
        let h = mouth_half_height(pose.mouth);
        let rho = ((u / MOUTH_HALF_WIDTH).powi(2) + ((v - MOUTH_CENTER_V) / h).powi(2)).sqrt();
        blend(&mut col, self.lips, 1.0 - smoothstep(0.8, 1.2, rho));
        let rho = ((u / (INNER_LIP_SCALE * MOUTH_HALF_WIDTH)).powi(2)
            + ((v - MOUTH_CENTER_V) / (INNER_LIP_SCALE * h)).powi(2))
        .sqrt();
        blend(&mut col, [0.08, 0.02, 0.03], 1.0 - smoothstep(0.7, 1.2, rho));

        col.map(|c| c.clamp(0.05, 1.0))
    }

    /// Render a frame, its head mask and its landmarks.
    pub fn render(&self, pose: &HeadPose, size: u32) -> (RgbImage, GrayImage, KeypointSet) {
        let mut img = RgbImage::new(size, size);
        let mut mask = GrayImage::new(size, size);
        let n = size as f32;
        for yi in 0..size {
            for xi in 0..size {
                let (x, y) = ((xi as f32 + 0.5) / n, (yi as f32 + 0.5) / n);
                let (u, v) = self.to_local(pose, x, y);
                if u * u + v * v <= 1.0 {
                    let col = self.shade(pose, u, v);
                    img.put_pixel(xi, yi, Rgb(col.map(|c| (c * 255.0).round() as u8)));
                    mask.put_pixel(xi, yi, Luma([255]));
                }
            }
        }
        (img, mask, self.landmarks(pose))
    }

    pub fn landmarks(&self, pose: &HeadPose) -> KeypointSet {
        let pts = local_landmarks(pose.mouth)
            .into_iter()
            .map(|[u, v]| self.to_image(pose, u, v))
            .collect();
        KeypointSet::new(pts).expect("synthetic landmarks are finite")
    }
}

const EYE_CENTER: [f32; 2] = [0.38, -0.2];
const EYE_RADII: [f32; 2] = [0.2, 0.12];
const MOUTH_CENTER_V: f32 = 0.5;
const MOUTH_HALF_WIDTH: f32 = 0.32;
const INNER_LIP_SCALE: f32 = 0.65;

fn mouth_half_height(opening: f32) -> f32 {
    0.07 + 0.16 * opening.clamp(0.0, 1.0)
}

fn brow_segment(side: f32) -> ([f32; 2], [f32; 2]) {
    ([side * 0.16, -0.44], [side * 0.6, -0.42])
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(col: &mut [f32; 3], target: [f32; 3], alpha: f32) {
    for c in 0..3 {
        col[c] += alpha * (target[c] - col[c]);
    }
}

fn segment_distance(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
    ((ap[0] - t * ab[0]).powi(2) + (ap[1] - t * ab[1]).powi(2)).sqrt()
}

/// The 68 landmarks in head-local coordinates.
fn local_landmarks(mouth: f32) -> Vec<[f32; 2]> {
    let mut pts = Vec::with_capacity(DEFAULT_POINTS);
    // jaw: left ear, chin, right ear
    for i in 0..17 {
        let a = PI * i as f32 / 16.0;
        pts.push([-0.97 * a.cos(), 0.97 * a.sin()]);
    }
    for side in [-1.0f32, 1.0] {
        let (a, b) = brow_segment(side);
        let (a, b) = if side < 0.0 { (b, a) } else { (a, b) };
        for j in 0..5 {
            let t = j as f32 / 4.0;
            pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    for j in 0..4 {
        pts.push([0.0, -0.12 + 0.32 * j as f32 / 3.0]);
    }
    for j in 0..5 {
        let t = j as f32 / 4.0;
        pts.push([-0.13 + 0.26 * t, 0.24 + 0.03 * (PI * t).sin()]);
    }
    for side in [-1.0f32, 1.0] {
        for k in 0..6 {
            let a = PI - 2.0 * PI * k as f32 / 6.0;
            pts.push([
                side * EYE_CENTER[0] + EYE_RADII[0] * a.cos(),
                EYE_CENTER[1] - EYE_RADII[1] * a.sin(),
            ]);
        }
    }
    let h = mouth_half_height(mouth);
    for k in 0..12 {
        let a = PI - 2.0 * PI * k as f32 / 12.0;
        pts.push([MOUTH_HALF_WIDTH * a.cos(), MOUTH_CENTER_V - h * a.sin()]);
    }
    for k in 0..8 {
        let a = PI - 2.0 * PI * k as f32 / 8.0;
        pts.push([
            INNER_LIP_SCALE * MOUTH_HALF_WIDTH * a.cos(),
            MOUTH_CENTER_V - INNER_LIP_SCALE * h * a.sin(),
        ]);
    }
    pts
}

fn mix_seed(world: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = world ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Appearance of identity `index` in the world selected by `world_seed`.
pub fn identity(world_seed: u64, index: usize) -> Identity {
    Identity::sample(&mut ChaCha8Rng::seed_from_u64(mix_seed(world_seed, 1, index as u64)))
}

/// Smooth pose trajectory of one video.
pub fn trajectory(world_seed: u64, index: usize, cfg: &SynthConfig) -> Vec<HeadPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world_seed, 2, index as u64));
    let mut osc = || {
        let period = rng.gen_range(5.0..13.0f32);
        let phase = rng.gen_range(0.0..2.0 * PI);
        move |f: usize| (2.0 * PI * f as f32 / period + phase).sin()
    };
    let (ox, oy, or, om) = (osc(), osc(), osc(), osc());
    (0..cfg.frames)
        .map(|f| HeadPose {
            tx: cfg.max_shift * ox(f),
            ty: cfg.max_shift * oy(f),
            rotation: cfg.max_rotation * or(f),
            mouth: 0.5 + 0.5 * om(f),
        })
        .collect()
}

/// Render a dataset of `cfg.identities` videos, one identity per video.
/// The same generator state gives a bit-identical dataset.
pub fn generate_synthetic_dataset<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    let world: u64 = rng.gen();
    (cfg.first_identity..cfg.first_identity + cfg.identities)
        .map(|i| {
            let id = identity(world, i);
            let mut frames = Vec::with_capacity(cfg.frames);
            let mut masks = Vec::with_capacity(cfg.frames);
            let mut kps = Vec::with_capacity(cfg.frames);
            for pose in trajectory(world, i, cfg) {
                let (img, mask, k) = id.render(&pose, cfg.image_size);
                frames.push(img);
                masks.push(mask);
                kps.push(k);
            }
            VideoSample::new(
                format!("id{i:05}"),
                frames,
                kps,
                cfg.masks.then_some(masks),
                cfg.fps,
                cfg.n_points,
            )
        })
        .collect()
}

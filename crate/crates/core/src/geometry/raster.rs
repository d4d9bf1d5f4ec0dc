use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};

use crate::data::{KeypointSet, LandmarkSchema};
use crate::error::Result;
use crate::tensor::DEVICE;

/// Colour assigned to each landmark group by name. Groups without an entry
/// are not drawn.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
}

impl Palette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Self {
        Palette { entries }
    }

    pub fn empty() -> Self {
        Palette::default()
    }

    /// Distinct saturated colours for every group of the schema.
    pub fn for_schema(schema: &LandmarkSchema) -> Self {
        const COLORS: [[u8; 3]; 9] = [
            [255, 255, 255],
            [255, 64, 64],
            [64, 255, 64],
            [64, 64, 255],
            [255, 255, 64],
            [255, 64, 255],
            [64, 255, 255],
            [255, 160, 32],
            [160, 96, 255],
        ];
        let entries = schema
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (g.name.to_string(), COLORS[i % COLORS.len()]))
            .collect();
        Palette { entries }
    }

    pub fn color(&self, group: &str) -> Option<[u8; 3]> {
        self.entries.iter().find(|(n, _)| n == group).map(|(_, c)| *c)
    }
}

fn to_pixel(p: [f32; 2], w: u32, h: u32) -> (i64, i64) {
    let x = (p[0] * w as f32).floor() as i64;
    let y = (p[1] * h as f32).floor() as i64;
    (x.clamp(0, w as i64 - 1), y.clamp(0, h as i64 - 1))
}

/// Integer Bresenham line, both endpoints included.
pub fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.put_pixel(x as u32, y as u32, Rgb(color));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Render keypoints as 1-px polylines, one colour per landmark group.
/// Everything not on a polyline is exactly zero.
pub fn rasterize_landmarks(kps: &KeypointSet, h: u32, w: u32, palette: &Palette) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    let schema = LandmarkSchema::for_points(kps.len());
    let pts = kps.points();
    for group in &schema.groups {
        let Some(color) = palette.color(group.name) else {
            continue;
        };
        let idx: Vec<usize> = group.indices.clone().collect();
        let px: Vec<_> = idx.iter().map(|&i| to_pixel(pts[i], w, h)).collect();
        for pair in px.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        if px.len() == 1 {
            draw_line(&mut img, px[0], px[0], color);
        }
        if group.closed && px.len() > 2 {
            draw_line(&mut img, px[px.len() - 1], px[0], color);
        }
    }
    img
}

/// Landmark image as a `(3, H, W)` tensor in `[0, 1]`.
pub fn landmark_tensor(kps: &KeypointSet, h: u32, w: u32, palette: &Palette, dtype: DType) -> Result<Tensor> {
    let img = rasterize_landmarks(kps, h, w, palette);
    let (h, w) = (h as usize, w as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &DEVICE)?.to_dtype(dtype)?)
}

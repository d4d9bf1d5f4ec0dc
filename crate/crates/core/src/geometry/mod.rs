//! Warp fields, bilinear texture sampling, landmark rasterization and the
//! two-layer composite.

mod raster;

pub use raster::{draw_line, landmark_tensor, rasterize_landmarks, Palette};

use candle_core::{DType, Tensor, D};

use crate::error::{shape_err, Result};
use crate::tensor::{ensure_same_shape, DEVICE};

/// `(1, 2, H, W)` identity sampling grid in `[-1, 1]` (x in channel 0, y in
/// channel 1), corners aligned with the outermost pixel centres.
pub fn identity_grid(h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let coord = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut data = vec![0f64; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = coord(x, w);
            data[h * w + y * w + x] = coord(y, h);
        }
    }
    Ok(Tensor::from_vec(data, (1, 2, h, w), &DEVICE)?.to_dtype(dtype)?)
}

/// Sampling grid expressed as a residual over the identity.
#[derive(Debug, Clone)]
pub struct WarpField {
    identity: Tensor,
    delta: Tensor,
}

impl WarpField {
    /// Zero-residual warp for a batch of `b` frames.
    pub fn identity(b: usize, h: usize, w: usize, dtype: DType) -> Result<Self> {
        let identity = identity_grid(h, w, dtype)?;
        let delta = Tensor::zeros((b, 2, h, w), dtype, &DEVICE)?;
        Ok(WarpField { identity, delta })
    }

    /// Warp from a predicted residual of shape `(B, 2, H, W)`.
    pub fn from_delta(delta: Tensor) -> Result<Self> {
        let (_, c, h, w) = delta.dims4()?;
        if c != 2 {
            return Err(shape_err!("warp residual needs 2 channels, got {c}"));
        }
        let identity = identity_grid(h, w, delta.dtype())?;
        Ok(WarpField { identity, delta })
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    /// Absolute sampling coordinates, identity plus residual.
    pub fn grid(&self) -> Result<Tensor> {
        Ok(self.delta.broadcast_add(&self.identity)?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.delta.dims();
        (d[0], d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        WarpField {
            identity: self.identity.clone(),
            delta: self.delta.detach(),
        }
    }
}

/// Sample a `(B, C, Ht, Wt)` texture at a `(B, 2, H, W)` grid of normalized
/// coordinates. Each corner that falls outside the texture contributes zero.
/// Differentiable in both the texture and the grid.
pub fn bilinear_sample(texture: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (b, c, th, tw) = texture.dims4()?;
    let (gb, gc, h, w) = grid.dims4()?;
    if gc != 2 || (gb != b && gb != 1 && b != 1) {
        return Err(shape_err!("texture {:?} vs grid {:?}", texture.dims(), grid.dims()));
    }
    let b = b.max(gb);
    let grid = grid.broadcast_as((b, 2, h, w))?;
    let texture = texture.broadcast_as((b, c, th, tw))?;
    let n = h * w;
    let gx = grid.narrow(1, 0, 1)?.reshape((b, 1, n))?;
    let gy = grid.narrow(1, 1, 1)?.reshape((b, 1, n))?;
    let px = ((gx + 1.0)? * (0.5 * (tw - 1) as f64))?;
    let py = ((gy + 1.0)? * (0.5 * (th - 1) as f64))?;
    let (x0, fx) = split_cell(&px)?;
    let (y0, fy) = split_cell(&py)?;
    let flat = texture.reshape((b, c, th * tw))?;

    let mut out: Option<Tensor> = None;
    for (dy, wy) in [(0.0, (1.0 - &fy)?), (1.0, fy.clone())] {
        let yi = (&y0 + dy)?;
        let y_ok = yi.ge(0.0)?.mul(&yi.le((th - 1) as f64)?)?;
        let yc = yi.clamp(0.0, (th - 1) as f64)?;
        for (dx, wx) in [(0.0, (1.0 - &fx)?), (1.0, fx.clone())] {
            let xi = (&x0 + dx)?;
            let x_ok = xi.ge(0.0)?.mul(&xi.le((tw - 1) as f64)?)?;
            let xc = xi.clamp(0.0, (tw - 1) as f64)?;
            let valid = y_ok.mul(&x_ok)?.to_dtype(texture.dtype())?;
            let idx = ((&yc * tw as f64)? + xc)?
                .to_dtype(DType::U32)?
                .broadcast_as((b, c, n))?
                .contiguous()?;
            let vals = flat.contiguous()?.gather(&idx, D::Minus1)?;
            let weight = (wy.mul(&wx)? * valid)?;
            let term = vals.broadcast_mul(&weight)?;
            out = Some(match out {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
    }
    Ok(out.expect("four corners").reshape((b, c, h, w))?)
}

/// Integer cell and fractional offset of pixel coordinates. Coordinates
/// within `SNAP` of a pixel centre land exactly on it, so identity sampling is
/// exact despite rounding in the grid; the offset keeps its gradient.
fn split_cell(p: &Tensor) -> Result<(Tensor, Tensor)> {
    const SNAP: f64 = 1e-5;
    let pd = p.detach();
    let nearest = pd.round()?;
    let near = (&pd - &nearest)?.abs()?.lt(SNAP)?.to_dtype(p.dtype())?;
    let floor = pd.floor()?;
    let cell = (&near * &nearest)? + ((1.0 - &near)? * floor)?;
    let cell = cell?;
    let resid = ((&pd - &cell)? * &near)?;
    let frac = ((p - &cell)? - resid)?;
    Ok((cell, frac))
}

/// Warp a texture with a [`WarpField`].
pub fn warp(texture: &Tensor, field: &WarpField) -> Result<Tensor> {
    bilinear_sample(texture, &field.grid()?)
}

/// Bi-layer composite: coarse layer plus warped detail layer. No clamping.
pub fn composite(lf: &Tensor, hf: &Tensor) -> Result<Tensor> {
    ensure_same_shape(lf, hf, "composite")?;
    Ok((lf + hf)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn identity_grid_conventions() {
        let g = vec(&identity_grid(2, 2, DType::F64).unwrap());
        assert_eq!(g, vec![-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0]);
        let g = identity_grid(3, 3, DType::F64).unwrap();
        let c = vec(&g.narrow(2, 1, 1).unwrap().narrow(3, 1, 1).unwrap());
        assert_eq!(c, vec![0.0, 0.0]);
        assert_eq!(vec(&identity_grid(1, 1, DType::F64).unwrap()), vec![0.0, 0.0]);
    }

    #[test]
    fn warp_residual_is_recoverable() {
        let delta = (Tensor::rand(-0.1f32, 0.1, (2, 2, 5, 7), &DEVICE).unwrap()).to_dtype(DType::F64).unwrap();
        let field = WarpField::from_delta(delta.clone()).unwrap();
        let back = (field.grid().unwrap() - &delta).unwrap();
        let id = identity_grid(5, 7, DType::F64).unwrap().broadcast_as((2, 2, 5, 7)).unwrap();
        let diff = vec(&(back - id).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-15);
    }

    #[test]
    fn identity_sampling_is_exact() {
        let tex = Tensor::rand(-1f32, 1., (2, 3, 6, 9), &DEVICE).unwrap();
        let f = WarpField::identity(2, 6, 9, DType::F32).unwrap();
        assert_eq!(vec(&warp(&tex, &f).unwrap()), vec(&tex));
    }

    #[test]
    fn constant_texture_stays_constant() {
        let tex = (Tensor::ones((1, 3, 8, 8), DType::F64, &DEVICE).unwrap() * 0.7).unwrap();
        let grid = Tensor::rand(-1f64, 1., (1, 2, 5, 5), &DEVICE).unwrap();
        for v in vec(&bilinear_sample(&tex, &grid).unwrap()) {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    fn brute_force(tex: &[f64], th: usize, tw: usize, gx: f64, gy: f64) -> f64 {
        let x = (gx + 1.0) / 2.0 * (tw - 1) as f64;
        let y = (gy + 1.0) / 2.0 * (th - 1) as f64;
        let mut acc = 0.0;
        for yy in 0..th {
            for xx in 0..tw {
                let wx = (1.0 - (x - xx as f64).abs()).max(0.0);
                let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
                acc += wx * wy * tex[yy * tw + xx];
            }
        }
        acc
    }

    #[test]
    fn center_of_two_by_two() {
        let tex = Tensor::new(&[0f64, 1., 2., 3.], &DEVICE).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let grid = Tensor::zeros((1, 2, 1, 1), DType::F64, &DEVICE).unwrap();
        let v = vec(&bilinear_sample(&tex, &grid).unwrap());
        assert_eq!(v, vec![1.5]);
        assert_eq!(brute_force(&[0., 1., 2., 3.], 2, 2, 0.0, 0.0), 1.5);
    }

    #[test]
    fn matches_scalar_interpolator_including_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (th, tw) = (5, 7);
        let tex: Vec<f64> = (0..th * tw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pts: Vec<(f64, f64)> = (0..40).map(|_| (rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4))).collect();
        let mut g = vec![0.0; 2 * pts.len()];
        for (i, (x, y)) in pts.iter().enumerate() {
            g[i] = *x;
            g[pts.len() + i] = *y;
        }
        let t = Tensor::from_vec(tex.clone(), (1, 1, th, tw), &DEVICE).unwrap();
        let grid = Tensor::from_vec(g, (1, 2, 1, pts.len()), &DEVICE).unwrap();
        let out = vec(&bilinear_sample(&t, &grid).unwrap());
        for (o, (x, y)) in out.iter().zip(&pts) {
            assert!((o - brute_force(&tex, th, tw, *x, *y)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (th, tw, h, w) = (8, 8, 8, 8);
        let tex: Vec<f64> = (0..3 * th * tw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // keep samples away from cell boundaries and the padding region
        let mut grid = vec![0.0; 2 * h * w];
        for v in grid.iter_mut() {
            let cell = rng.gen_range(0..6) as f64 + rng.gen_range(0.2..0.8);
            *v = cell / 7.0 * 2.0 - 1.0;
        }
        let proj: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj_t = Tensor::from_vec(proj, (1, 3, h, w), &DEVICE).unwrap();
        let loss = |t: &Tensor, g: &Tensor| bilinear_sample(t, g).unwrap().mul(&proj_t).unwrap().sum_all().unwrap();

        let tv = Var::from_tensor(&Tensor::from_vec(tex.clone(), (1, 3, th, tw), &DEVICE).unwrap()).unwrap();
        let gv = Var::from_tensor(&Tensor::from_vec(grid.clone(), (1, 2, h, w), &DEVICE).unwrap()).unwrap();
        let grads = loss(tv.as_tensor(), gv.as_tensor()).backward().unwrap();
        let dt = vec(grads.get(tv.as_tensor()).unwrap());
        let dg = vec(grads.get(gv.as_tensor()).unwrap());

        let eps = 1e-6;
        let fd = |tex: &[f64], grid: &[f64]| {
            let t = Tensor::from_vec(tex.to_vec(), (1, 3, th, tw), &DEVICE).unwrap();
            let g = Tensor::from_vec(grid.to_vec(), (1, 2, h, w), &DEVICE).unwrap();
            loss(&t, &g).to_scalar::<f64>().unwrap()
        };
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < 1e-4, "analytic {analytic} vs numeric {numeric}");
        };
        for i in (0..tex.len()).step_by(5) {
            let (mut p, mut m) = (tex.clone(), tex.clone());
            p[i] += eps;
            m[i] -= eps;
            check(dt[i], (fd(&p, &grid) - fd(&m, &grid)) / (2.0 * eps));
        }
        for i in 0..grid.len() {
            let (mut p, mut m) = (grid.clone(), grid.clone());
            p[i] += eps;
            m[i] -= eps;
            check(dg[i], (fd(&tex, &p) - fd(&tex, &m)) / (2.0 * eps));
        }
    }

    #[test]
    fn composite_is_additive() {
        let lf = (Tensor::ones((1, 3, 4, 4), DType::F32, &DEVICE).unwrap() * 0.25).unwrap();
        let hf = (Tensor::ones((1, 3, 4, 4), DType::F32, &DEVICE).unwrap() * -0.25).unwrap();
        let zero = lf.zeros_like().unwrap();
        assert!(vec(&composite(&lf, &hf).unwrap()).iter().all(|v| *v == 0.0));
        assert_eq!(vec(&composite(&lf, &zero).unwrap()), vec(&lf));
        assert_eq!(vec(&composite(&zero, &hf).unwrap()), vec(&hf));
        assert!(composite(&lf, &zero.narrow(1, 0, 2).unwrap()).is_err());
    }

    mod props {
        use proptest::prelude::*;
        use rand::Rng;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn identity_grid_reproduces_any_texture(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let tex = Tensor::from_vec(data, (1, 3, h, w), &DEVICE).unwrap();
                let out = bilinear_sample(&tex, &identity_grid(h, w, DType::F32).unwrap()).unwrap();
                prop_assert_eq!(vec(&out), vec(&tex));
            }

            #[test]
            fn samples_stay_within_the_texture_range(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<f64> = (0..2 * 36).map(|_| rng.gen_range(0.0..1.0)).collect();
                let grid: Vec<f64> = (0..2 * 2 * 25).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let tex = Tensor::from_vec(data, (2, 1, 6, 6), &DEVICE).unwrap();
                let grid = Tensor::from_vec(grid, (2, 2, 5, 5), &DEVICE).unwrap();
                // zero padding only pulls values towards 0
                for v in vec(&bilinear_sample(&tex, &grid).unwrap()) {
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                }
            }
        }
    }
}
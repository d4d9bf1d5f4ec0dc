//! Spectral-normalized convolution and linear layers, non-affine batch norm
//! with running and standing statistics.

use candle_core::{Tensor, Var, D};

use super::store::{Init, Scope};
use super::Mode;
use crate::error::{shape_err, Result};
use crate::tensor::scalar;

const SN_EPS: f64 = 1e-12;

fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = (v.sqr()?.sum_all()?.sqrt()? + SN_EPS)?;
    Ok(v.broadcast_div(&n)?)
}

/// Power-iteration estimate of the largest singular value of a weight,
/// viewed as an `(out, rest)` matrix.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    u: Var,
    v: Var,
}

impl SpectralNorm {
    pub fn new(scope: &Scope, weight: &Var) -> Result<Self> {
        let out = weight.dim(0)?;
        let rest = weight.elem_count() / out;
        let u = scope.buffer("sn_u", (out, 1), Init::Normal(1.0))?;
        let v = scope.buffer("sn_v", (rest, 1), Init::Zeros)?;
        u.set(&l2_normalize(u.as_tensor())?)?;
        let w = weight.as_tensor().reshape((out, rest))?;
        v.set(&l2_normalize(&w.t()?.matmul(u.as_tensor())?)?)?;
        Ok(SpectralNorm { u, v })
    }

    /// Advance the power iteration by one step.
    pub fn step(&self, weight: &Tensor) -> Result<()> {
        let w = weight.detach().reshape((weight.dim(0)?, ()))?;
        let v = l2_normalize(&w.t()?.matmul(self.u.as_tensor())?)?;
        let u = l2_normalize(&w.matmul(&v)?)?;
        self.v.set(&v)?;
        self.u.set(&u)?;
        Ok(())
    }

    /// Current estimate `uᵀ W v`, differentiable in `weight`.
    pub fn sigma(&self, weight: &Tensor) -> Result<Tensor> {
        let w = weight.reshape((weight.dim(0)?, ()))?;
        Ok(self.u.as_tensor().t()?.matmul(&w.matmul(self.v.as_tensor())?)?.reshape(())?)
    }

    /// `weight / sigma`; the estimate is refined first when training.
    pub fn normalize(&self, weight: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            self.step(weight)?;
        }
        // an all-zero weight stays zero instead of turning into 0/0
        let sigma = self.sigma(weight)?.maximum(SN_EPS)?;
        Ok(weight.broadcast_div(&sigma)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    sn: Option<SpectralNorm>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Spectral-normalized `kernel`×`kernel` convolution, stride 1, same padding.
    pub fn new(scope: &Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let std = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = scope.param("weight", (out_ch, in_ch, kernel, kernel), Init::Normal(std))?;
        let bias = scope.param("bias", out_ch, Init::Zeros)?;
        let sn = Some(SpectralNorm::new(scope, &weight)?);
        Ok(Conv2d {
            weight,
            bias,
            sn,
            in_ch,
            out_ch,
            kernel,
            padding: kernel / 2,
        })
    }

    /// Zero-initialized convolution without spectral normalization, for
    /// output heads that must start as the identity of a residual.
    pub fn zeros(scope: &Scope, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = scope.param("weight", (out_ch, in_ch, kernel, kernel), Init::Zeros)?;
        let bias = scope.param("bias", out_ch, Init::Zeros)?;
        Ok(Conv2d {
            weight,
            bias,
            sn: None,
            in_ch,
            out_ch,
            kernel,
            padding: kernel / 2,
        })
    }

    pub fn effective_weight(&self, mode: Mode) -> Result<Tensor> {
        match &self.sn {
            Some(sn) => sn.normalize(self.weight.as_tensor(), mode),
            None => Ok(self.weight.as_tensor().clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        conv2d(x, &self.effective_weight(mode)?, self.bias.as_tensor(), self.padding)
    }
}

/// Stride-1 convolution with bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (_, cin, _, _) = x.dims4()?;
    if weight.dim(1)? != cin {
        return Err(shape_err!("conv expects {} input channels, got {cin}", weight.dim(1)?));
    }
    let y = x.conv2d(weight, padding, 1, 1, 1)?;
    Ok(y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
    sn: SpectralNorm,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = scope.param("weight", (out_dim, in_dim), Init::Normal(1.0 / (in_dim as f64).sqrt()))?;
        let bias = scope.param("bias", out_dim, Init::Zeros)?;
        let sn = SpectralNorm::new(scope, &weight)?;
        Ok(Linear {
            weight,
            bias,
            sn,
            in_dim,
            out_dim,
        })
    }

    pub fn effective_weight(&self, mode: Mode) -> Result<Tensor> {
        self.sn.normalize(self.weight.as_tensor(), mode)
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        linear(x, &self.effective_weight(mode)?, self.bias.as_tensor())
    }
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let y = match x.rank() {
        2 => x.matmul(&weight.t()?)?,
        _ => x.broadcast_matmul(&weight.t()?)?,
    };
    Ok(y.broadcast_add(bias)?)
}

pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch norm without learned affine terms. Training uses batch statistics
/// and tracks running averages; standing mode additionally accumulates the
/// equally weighted mean of per-batch statistics, which evaluation prefers
/// once any have been collected.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    running_mean: Var,
    running_var: Var,
    standing_mean: Var,
    standing_var: Var,
    standing_count: Var,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            running_mean: scope.buffer("running_mean", channels, Init::Zeros)?,
            running_var: scope.buffer("running_var", channels, Init::Ones)?,
            standing_mean: scope.buffer("standing_mean", channels, Init::Zeros)?,
            standing_var: scope.buffer("standing_var", channels, Init::Ones)?,
            standing_count: scope.buffer("standing_count", (), Init::Zeros)?,
            channels,
        })
    }

    /// Per-channel mean and biased variance of a `(B, C, ...)` batch.
    pub fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = x.dim(1)?;
        let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
        let mean = flat.mean(D::Minus1)?;
        let var = flat.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(D::Minus1)?;
        Ok((mean, var))
    }

    pub fn reset_standing(&self) -> Result<()> {
        self.standing_mean.set(&self.standing_mean.zeros_like()?)?;
        self.standing_var.set(&self.standing_var.zeros_like()?)?;
        self.standing_count.set(&self.standing_count.zeros_like()?)?;
        Ok(())
    }

    pub fn standing_batches(&self) -> Result<usize> {
        Ok(scalar(self.standing_count.as_tensor())? as usize)
    }

    /// Statistics used outside training.
    pub fn eval_stats(&self) -> Result<(Tensor, Tensor)> {
        if self.standing_batches()? > 0 {
            Ok((self.standing_mean.as_tensor().clone(), self.standing_var.as_tensor().clone()))
        } else {
            Ok((self.running_mean.as_tensor().clone(), self.running_var.as_tensor().clone()))
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.dim(1)? != self.channels {
            return Err(shape_err!("batch norm over {} channels got {:?}", self.channels, x.dims()));
        }
        let (mean, var) = match mode {
            Mode::Eval => self.eval_stats()?,
            Mode::Train | Mode::Standing => {
                let (mean, var) = Self::batch_stats(x)?;
                let (m, v) = (mean.detach(), var.detach());
                if mode == Mode::Train {
                    let upd = |buf: &Var, new: &Tensor| -> Result<()> {
                        buf.set(&((buf.as_tensor() * (1.0 - BN_MOMENTUM))? + (new * BN_MOMENTUM)?)?)?;
                        Ok(())
                    };
                    upd(&self.running_mean, &m)?;
                    upd(&self.running_var, &v)?;
                } else {
                    let n = scalar(self.standing_count.as_tensor())?;
                    let acc = |buf: &Var, new: &Tensor| -> Result<()> {
                        let cur = buf.as_tensor();
                        buf.set(&(cur + ((new - cur)? / (n + 1.0))?)?)?;
                        Ok(())
                    };
                    acc(&self.standing_mean, &m)?;
                    acc(&self.standing_var, &v)?;
                    self.standing_count.set(&(self.standing_count.as_tensor() + 1.0)?)?;
                }
                (mean, var)
            }
        };
        normalize(x, &mean, &var)
    }
}

/// `(x - mean) / sqrt(var + eps)` per channel of a `(B, C, ...)` tensor.
pub fn normalize(x: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1, x.dim(1)?];
    shape.extend(std::iter::repeat(1).take(x.rank() - 2));
    let mean = mean.reshape(shape.as_slice())?;
    let inv = (var + BN_EPS)?.sqrt()?.recip()?.reshape(shape.as_slice())?;
    Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?)
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::store::ParamStore;
    use candle_core::DType;
    use crate::tensor::DEVICE;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigma_after(w: Tensor, iters: usize) -> (f64, Tensor) {
        let store = ParamStore::new(0, DType::F64);
        let scope = store.root();
        let var = scope.param("w", w.dims(), Init::Zeros).unwrap();
        var.set(&w).unwrap();
        let sn = SpectralNorm::new(&scope, &var).unwrap();
        for _ in 0..iters {
            sn.step(var.as_tensor()).unwrap();
        }
        let s = scalar(&sn.sigma(var.as_tensor()).unwrap()).unwrap();
        (s, sn.normalize(var.as_tensor(), Mode::Eval).unwrap())
    }

    fn svd_max(t: &Tensor) -> f64 {
        let (r, c) = t.dims2().unwrap();
        let data = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let m = DMatrix::from_row_slice(r, c, &data);
        m.singular_values().max()
    }

    #[test]
    fn diagonal_matrix_sigma() {
        let w = Tensor::new(&[[3f64, 0.], [0., 1.]], &DEVICE).unwrap();
        let (s, _) = sigma_after(w, 50);
        assert!((s - 3.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn unit_rank_one_unchanged() {
        let a = [0.6f64, 0.8];
        let b = [1.0f64, 0.0, 0.0];
        let data: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let w = Tensor::from_vec(data.clone(), (2, 3), &DEVICE).unwrap();
        let (_, wn) = sigma_after(w, 10);
        let out = wn.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in out.iter().zip(&data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_random_weights_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(8, 5), (4, 12), (16, 16)] {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::from_vec(data, (r, c), &DEVICE).unwrap();
            let (s, wn) = sigma_after(w.clone(), 200);
            assert!((s - svd_max(&w)).abs() / s < 1e-3);
            let sn = svd_max(&wn);
            assert!((0.9..=1.1).contains(&sn), "{sn}");
        }
    }

    #[test]
    fn standing_stats_of_a_constant_stream() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm::new(&store.root(), 3).unwrap();
        let x = Tensor::rand(-2f64, 3., (4, 3, 5, 5), &DEVICE).unwrap();
        bn.reset_standing().unwrap();
        for _ in 0..7 {
            bn.forward(&x, Mode::Standing).unwrap();
        }
        let (m, v) = BatchNorm::batch_stats(&x).unwrap();
        let (sm, sv) = bn.eval_stats().unwrap();
        let d = |a: &Tensor, b: &Tensor| {
            (a - b).unwrap().abs().unwrap().max_keepdim(0).unwrap().to_vec1::<f64>().unwrap()[0]
        };
        assert!(d(&m, &sm) < 1e-12 && d(&v, &sv) < 1e-12);
        assert_eq!(bn.standing_batches().unwrap(), 7);
    }

    #[test]
    fn eval_uses_accumulated_standing_stats() {
        let store = ParamStore::new(0, DType::F64);
        let bn = BatchNorm::new(&store.root(), 2).unwrap();
        let batches: Vec<Tensor> = (0..3)
            .map(|i| (Tensor::rand(-1f64, 1., (2, 2, 3, 3), &DEVICE).unwrap() * (i + 1) as f64).unwrap())
            .collect();
        bn.reset_standing().unwrap();
        for b in &batches {
            bn.forward(b, Mode::Standing).unwrap();
        }
        // manual: average of per-batch per-channel mean and biased variance
        let mut mean = [0f64; 2];
        let mut var = [0f64; 2];
        for b in &batches {
            let d = b.transpose(0, 1).unwrap().contiguous().unwrap().flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
            for c in 0..2 {
                let m = d[c].iter().sum::<f64>() / d[c].len() as f64;
                let s = d[c].iter().map(|x| (x - m).powi(2)).sum::<f64>() / d[c].len() as f64;
                mean[c] += m / 3.0;
                var[c] += s / 3.0;
            }
        }
        let x = Tensor::rand(-1f64, 1., (1, 2, 2, 2), &DEVICE).unwrap();
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, (a, b)) in xv.iter().zip(&yv).enumerate() {
            let c = i / 4;
            let want = (a - mean[c]) / (var[c] + BN_EPS).sqrt();
            assert!((want - b).abs() < 1e-5);
        }
    }
}

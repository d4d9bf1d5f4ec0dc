use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::tensor::DEVICE;

const EPS: f64 = 1e-8;

/// Adam over a fixed list of named variables. Variables without a gradient
/// in a step keep their value and moments.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64, betas: (f64, f64)) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            step: 0,
            v: m.clone(),
            m,
            vars,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // leaf gradients still reference the forward graph; keeping them
            // in the moments would chain every step's graph together
            let g = g.detach();
            let g = &g;
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + EPS)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moments and step counter as named tensors under `prefix`.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.vars.len() + 1);
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push((format!("{prefix}/m/{name}"), self.m[i].clone()));
            out.push((format!("{prefix}/v/{name}"), self.v[i].clone()));
        }
        // f32 holds every integer up to 2^24, far beyond any desk-scale run
        let step = Tensor::new(&[self.step as f32], &DEVICE).expect("cpu tensor");
        out.push((format!("{prefix}/step"), step));
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let get = |k: String| {
            tensors
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer tensor {k}")))
        };
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let m = get(format!("{prefix}/m/{name}"))?;
            let v = get(format!("{prefix}/v/{name}"))?;
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Format(format!("optimizer state for {name} has the wrong shape")));
            }
            self.m[i] = m.to_dtype(var.dtype())?;
            self.v[i] = v.to_dtype(var.dtype())?;
        }
        self.step = get(format!("{prefix}/step"))?.flatten_all()?.to_vec1::<f32>()?[0] as u64;
        Ok(())
    }
}

use crate::container::{Container, DType, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Mat;

use super::ParamStore;

/// Cosine decay from `base` to 0 over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step (frozen or unused) are left untouched, including decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.params().iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let decay = store.params()[i].decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                if decay {
                    *pv -= lr * self.weight_decay * *pv;
                }
                *pv -= lr * update;
            }
        }
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str, store: &ParamStore) {
        for (i, p) in store.params().iter().enumerate() {
            c.insert(format!("{prefix}m.{}", p.name), Tensor::from_mat(&self.m[i], DType::F64));
            c.insert(format!("{prefix}v.{}", p.name), Tensor::from_mat(&self.v[i], DType::F64));
        }
        c.insert(format!("{prefix}step"), Tensor::f64(vec![1], vec![self.step as f64]));
        c.insert(
            format!("{prefix}hyper"),
            Tensor::f64(vec![4], vec![self.beta1, self.beta2, self.eps, self.weight_decay]),
        );
    }

    pub fn read_from(c: &Container, prefix: &str, store: &ParamStore) -> Result<Self> {
        let h = &c.require(&format!("{prefix}hyper"))?.data;
        if h.len() != 4 {
            return Err(Error::shape("optimizer hyperparameter record must hold 4 values"));
        }
        let mut opt = AdamW::new(store, h[3]);
        (opt.beta1, opt.beta2, opt.eps) = (h[0], h[1], h[2]);
        opt.step = c.require(&format!("{prefix}step"))?.data[0] as u64;
        for (i, p) in store.params().iter().enumerate() {
            opt.m[i] = c.require(&format!("{prefix}m.{}", p.name))?.to_mat()?;
            opt.v[i] = c.require(&format!("{prefix}v.{}", p.name))?.to_mat()?;
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!((cosine_lr(1.0, 5, 10, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0, 10, 2) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 2, 10, 2), 1.0);
    }
}

//! Adam with serializable moments.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveTensor, WeightArchive};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid Adam betas or eps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = (&'a str, &'a Var)>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.to_string(),
                    var: var.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            slots,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Variable gradients can reference the forward graph; the moments must not.
            let g = g.detach();
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (delta * learning_rate)?)?;
            slot.var.set(&next.detach())?;
        }
        Ok(())
    }

    /// Moments as `adam.m.{name}` / `adam.v.{name}` entries.
    pub fn write_moments(&self, archive: &mut WeightArchive) -> Result<()> {
        for s in &self.slots {
            archive.insert(format!("adam.m.{}", s.name), ArchiveTensor::from_tensor(&s.m)?);
            archive.insert(format!("adam.v.{}", s.name), ArchiveTensor::from_tensor(&s.v)?);
        }
        archive.set_meta("adam.step", self.step.to_string());
        Ok(())
    }

    pub fn read_moments(&mut self, archive: &WeightArchive) -> Result<()> {
        for s in &mut self.slots {
            for (key, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let name = format!("adam.{key}.{}", s.name);
                let t = archive.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
                if t.shape != dst.dims() {
                    return Err(Error::ShapeMismatch {
                        path: name,
                        expected: dst.dims().to_vec(),
                        actual: t.shape.clone(),
                    });
                }
                *dst = t.to_tensor(dst.device(), dst.dtype())?;
            }
        }
        self.step = archive.meta_parsed("adam.step")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g) (up to eps).
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new([("x", &x)], AdamConfig { learning_rate: 0.1, ..Default::default() }).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64, -4.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new([("x", &x)], AdamConfig { learning_rate: 0.05, ..Default::default() }).unwrap();
        for _ in 0..500 {
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        for v in x.as_tensor().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn moments_hold_no_graph() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        let y = Var::from_tensor(&Tensor::new(&[3.0f32, -1.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new([("x", &x)], AdamConfig::default()).unwrap();
        // d/dx of x·y is y, a tracked variable.
        let loss = (x.as_tensor() * y.as_tensor()).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert!(opt.slots.iter().all(|s| !s.m.track_op() && !s.v.track_op()));
    }

    #[test]
    fn moments_round_trip() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new([("x", &x)], AdamConfig::default()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let mut a = WeightArchive::new();
        opt.write_moments(&mut a).unwrap();
        let y = Var::zeros(2, DType::F32, &Device::Cpu).unwrap();
        let mut fresh = Adam::new([("x", &y)], AdamConfig::default()).unwrap();
        fresh.read_moments(&a).unwrap();
        assert_eq!(fresh.step_count(), 1);
        assert_eq!(fresh.slots[0].m.to_vec1::<f32>().unwrap(), opt.slots[0].m.to_vec1::<f32>().unwrap());
        assert!(Adam::new([("x", &x)], AdamConfig { learning_rate: 0.0, ..Default::default() }).is_err());
    }
}

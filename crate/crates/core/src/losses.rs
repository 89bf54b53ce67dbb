//! Transfer objective: appearance, structure and identity terms.
//!
//! All terms are raw norms with no normalization by element count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Structure weight.
    pub alpha: f64,
    /// Identity weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Coefficients actually applied to each term after ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub app: f64,
    pub structure: f64,
    pub id: f64,
}

impl TermWeights {
    pub fn new(w: LossWeights, ablate: Ablation) -> Self {
        Self {
            app: if ablate.app { 0.0 } else { 1.0 },
            structure: if ablate.structure { 0.0 } else { w.alpha },
            id: if ablate.id { 0.0 } else { w.beta },
        }
    }

    pub fn combine(&self, app: f64, structure: f64, id: f64) -> f64 {
        self.app * app + self.structure * structure + self.id * id
    }
}

/// Loss terms removed from the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub app: bool,
    #[serde(default)]
    pub structure: bool,
    #[serde(default)]
    pub id: bool,
}

impl Ablation {
    pub fn flags(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.app {
            v.push("app");
        }
        if self.structure {
            v.push("structure");
        }
        if self.id {
            v.push("id");
        }
        v
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub app: f64,
    pub structure: f64,
    pub id: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recompute(&self, w: &TermWeights) -> f64 {
        w.combine(self.app, self.structure, self.id)
    }

    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn from_log_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::InvalidArgument(format!("bad loss record: {e}")))
    }
}

fn frobenius(diff: &Tensor) -> Result<Tensor> {
    Ok(diff.sqr()?.sum_all()?.sqrt()?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str, hint: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}{hint}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `‖cls_target − cls_output‖₂` as a scalar tensor.
pub fn appearance_loss(cls_target: &Tensor, cls_output: &Tensor) -> Result<Tensor> {
    same_shape(cls_target, cls_output, "appearance loss dimension mismatch", "")?;
    frobenius(&(cls_target - cls_output)?)
}

/// `‖S_source − S_output‖_F`.
pub fn structure_loss(s_source: &Tensor, s_output: &Tensor) -> Result<Tensor> {
    same_shape(
        s_source,
        s_output,
        "structure loss shape mismatch",
        "; process both images at the same size so their patch grids align",
    )?;
    frobenius(&(s_source - s_output)?)
}

/// `‖K_target − K_regen‖_F`.
pub fn identity_loss(keys_target: &Tensor, keys_regen: &Tensor) -> Result<Tensor> {
    same_shape(keys_target, keys_regen, "identity loss shape mismatch", "")?;
    frobenius(&(keys_target - keys_regen)?)
}

/// Weighted sum of already evaluated terms.
pub fn splice_loss(app: f64, structure: f64, id: f64, w: LossWeights) -> Result<f64> {
    for (name, v) in [("app", app), ("structure", structure), ("id", id)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                iteration: 0,
                diagnostic: None,
            });
        }
    }
    w.validate()?;
    Ok(app + w.alpha * structure + w.beta * id)
}

/// Differentiable weighted sum; terms with a zero coefficient are left out of the graph.
pub fn splice_loss_tensor(app: &Tensor, structure: &Tensor, id: &Tensor, w: &TermWeights) -> Result<Tensor> {
    let mut total = (app.zeros_like()?).detach();
    for (t, c) in [(app, w.app), (structure, w.structure), (id, w.id)] {
        if c != 0.0 {
            total = (total + (t * c)?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_slice(x, x.len(), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn appearance_cases() {
        assert_eq!(scalar(appearance_loss(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap()), 0.0);
        let u = [0.6, 0.8];
        let neg = [-0.6, -0.8];
        assert!((scalar(appearance_loss(&v(&u), &v(&neg)).unwrap()) - 2.0).abs() < 1e-12);
        assert!(appearance_loss(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn structure_single_symmetric_pair() {
        let s = Tensor::eye(4, candle_core::DType::F64, &Device::Cpu).unwrap();
        let mut e = vec![0.0; 16];
        e[1] = 0.1;
        e[4] = 0.1;
        let e = Tensor::from_vec(e, (4, 4), &Device::Cpu).unwrap();
        let l = scalar(structure_loss(&s, &(&s + &e).unwrap()).unwrap());
        assert!((l - 0.02f64.sqrt()).abs() < 1e-12);
        let err = structure_loss(&s, &s.narrow(0, 0, 3).unwrap()).unwrap_err();
        assert!(err.to_string().contains("same size"));
    }

    #[test]
    fn identity_unit_shift() {
        let k = Tensor::from_vec((0..12).map(|i| i as f64).collect(), (3, 4), &Device::Cpu).unwrap();
        let shifted = (&k + 1.0).unwrap();
        assert!((scalar(identity_loss(&k, &shifted).unwrap()) - 12f64.sqrt()).abs() < 1e-12);
        assert_eq!(scalar(identity_loss(&k, &k).unwrap()), 0.0);
        assert!(identity_loss(&k, &k.t().unwrap()).is_err());
    }

    #[test]
    fn splice_arithmetic() {
        let w = LossWeights::default();
        assert!((splice_loss(1.0, 2.0, 3.0, w).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(splice_loss(4.5, 0.0, 0.0, LossWeights { alpha: 7.0, beta: 3.0 }).unwrap(), 4.5);
        match splice_loss(1.0, f64::NAN, 0.0, w) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "structure"),
            other => panic!("{other:?}"),
        }
        assert!(splice_loss(1.0, 1.0, 1.0, LossWeights { alpha: -1.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn zero_alpha_equals_structure_ablation() {
        let w0 = TermWeights::new(LossWeights { alpha: 0.0, beta: 0.1 }, Ablation::default());
        let ab = TermWeights::new(
            LossWeights::default(),
            Ablation {
                structure: true,
                ..Default::default()
            },
        );
        assert_eq!(w0.combine(1.0, 2.0, 3.0), ab.combine(1.0, 2.0, 3.0));
        assert!((w0.combine(1.0, 2.0, 3.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn tensor_sum_matches_host_sum() {
        let w = TermWeights::new(LossWeights::default(), Ablation::default());
        let t = splice_loss_tensor(&v(&[1.0]), &v(&[2.0]), &v(&[3.0]), &w).unwrap();
        assert!((t.to_vec1::<f64>().unwrap()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn log_line_round_trip() {
        let r = LossReport {
            iteration: 17,
            app: 0.1 + 0.2,
            structure: 1e-300,
            id: 12345.678901234567,
            total: 3.0,
        };
        assert_eq!(LossReport::from_log_line(&r.to_log_line()).unwrap(), r);
    }
}

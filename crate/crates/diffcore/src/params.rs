use indexmap::IndexMap;

use crate::error::{DiffError, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

/// One trainable array with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable parameters in insertion order, plus optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    /// Insert a parameter with restored optimizer state.
    pub fn insert_with_state(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        m: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        if m.len() != value.len() || v.len() != value.len() {
            return Err(DiffError::ParamShape {
                name,
                expected: value.shape().to_vec(),
                found: vec![m.len().min(v.len())],
            });
        }
        self.insert(name.clone(), value)?;
        let p = self.params.get_mut(&name).expect("just inserted");
        p.m = m;
        p.v = v;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)?.grad.as_ref()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(DiffError::ParamShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Reset every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    /// Drop every gradient.
    pub fn clear_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Add the gradients of every parameter node of `graph` into the store.
    /// Parameters the loss did not reach are left untouched.
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (name, var) in graph.param_nodes() {
            let Some(g) = grads.raw(var) else { continue };
            let p = self.get_mut(name)?;
            match &mut p.grad {
                Some(existing) => {
                    for (e, v) in existing.values_mut().iter_mut().zip(g) {
                        *e += v;
                    }
                }
                None => {
                    p.grad = Some(Tensor::from_vec(p.value.shape().to_vec(), g.to_vec())?);
                }
            }
        }
        Ok(())
    }

    /// Add `values` into the gradient of `name`, creating it if absent.
    pub fn add_grad(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if values.len() != p.value.len() {
            return Err(DiffError::ParamShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: vec![values.len()],
            });
        }
        match &mut p.grad {
            Some(existing) => {
                for (e, v) in existing.values_mut().iter_mut().zip(values) {
                    *e += v;
                }
            }
            None => p.grad = Some(Tensor::from_vec(p.value.shape().to_vec(), values.to_vec())?),
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let missing: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.grad.is_none())
            .map(|(k, _)| k.clone())
            .collect();
        if !missing.is_empty() {
            return Err(DiffError::MissingGrads(missing));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.as_ref().expect("checked above").values();
            let w = p.value.values_mut();
            for i in 0..w.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Check that every `(name, shape)` exists with that shape, in order.
    /// Reports the first offending tensor.
    pub fn check_layout(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let p = self.get(name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(DiffError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self
            .names()
            .find(|n| !expected.iter().any(|(e, _)| e == n))
        {
            return Err(DiffError::UnknownParam(extra.to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec(vec![1], vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = quadratic_store(1.0);
        assert_eq!(
            s.insert("x", Tensor::zeros(&[1])).unwrap_err(),
            DiffError::DuplicateParam("x".into())
        );
    }

    #[test]
    fn adam_without_grads_lists_missing_names() {
        let mut s = quadratic_store(1.0);
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert_eq!(err, DiffError::MissingGrads(vec!["x".into(), "w".into()]));
    }

    #[test]
    fn adam_single_step_on_quadratic_matches_hand_computation() {
        // f(x) = (x - 3)^2 at x = 1: grad = -4.
        // m = 0.1 * -4 = -0.4, v = 0.001 * 16 = 0.016
        // m_hat = -4, v_hat = 16, update = lr * -4 / (4 + eps)
        let mut s = quadratic_store(1.0);
        s.get_mut("x").unwrap().grad = Some(Tensor::from_vec(vec![1], vec![-4.0]).unwrap());
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        s.adam_step(&cfg).unwrap();
        let expected = 1.0 - 0.1 * (-4.0) / (4.0 + 1e-8);
        let p = s.get("x").unwrap();
        assert!((p.value.values()[0] - expected).abs() < 1e-15);
        assert!((p.m[0] + 0.4).abs() < 1e-15);
        assert!((p.v[0] - 0.016).abs() < 1e-15);
        assert_eq!(s.step(), 1);

        // second step from the known state, grad at the new point
        let x1 = p.value.values()[0];
        let g1 = 2.0 * (x1 - 3.0);
        s.get_mut("x").unwrap().grad = Some(Tensor::from_vec(vec![1], vec![g1]).unwrap());
        s.adam_step(&cfg).unwrap();
        let m2 = 0.9 * -0.4 + 0.1 * g1;
        let v2 = 0.999 * 0.016 + 0.001 * g1 * g1;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let x2 = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((s.value("x").unwrap().values()[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn zero_grads_keep_fresh_params_and_decay_moments() {
        let mut s = quadratic_store(2.0);
        s.zero_grad();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value("x").unwrap().values(), &[2.0]);

        let p = s.get_mut("x").unwrap();
        p.m = vec![0.5];
        p.v = vec![0.25];
        s.zero_grad();
        s.adam_step(&AdamConfig::default()).unwrap();
        let p = s.get("x").unwrap();
        assert!((p.m[0] - 0.45).abs() < 1e-15);
        assert!((p.v[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op_on_values() {
        let mut s = quadratic_store(-1.5);
        s.get_mut("x").unwrap().grad = Some(Tensor::from_vec(vec![1], vec![7.0]).unwrap());
        s.adam_step(&AdamConfig { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(s.value("x").unwrap().values(), &[-1.5]);
    }

    #[test]
    fn check_layout_names_first_offender() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("b", Tensor::zeros(&[3, 1])).unwrap();
        let want = vec![("a".to_string(), vec![2]), ("b".to_string(), vec![3])];
        match s.check_layout(&want).unwrap_err() {
            DiffError::ParamShape { name, .. } => assert_eq!(name, "b"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn taken_grads_match_accumulated_grads() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.insert("b", Tensor::from_vec(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let a = g.param(&s, "a").unwrap();
        let b = g.param(&s, "b").unwrap();
        let y = g.mul(a, b).unwrap();
        let y = g.mul(y, y).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();

        let mut direct = s.clone();
        direct.accumulate_grads(&g, &grads).unwrap();
        let mut taken = s.clone();
        let pairs = grads.into_param_grads(&g);
        assert_eq!(pairs.iter().map(|p| p.0.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        for (name, v) in &pairs {
            taken.add_grad(name, v).unwrap();
        }
        assert_eq!(direct, taken);
        assert!(taken.add_grad("b", &[1.0, 2.0]).is_err());
    }
}

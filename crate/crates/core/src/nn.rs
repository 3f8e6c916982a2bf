//! Layer helpers shared by both estimators.

use diffcore::{Graph, Init, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::seed::{derive_seed, rng};

pub const LN_EPS: f64 = 1e-5;

/// Declared shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight `[d_in, d_out]` with fan-in init and a zero bias.
pub fn linear_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.weight"), &[d_in, d_out], Init::FanIn(d_in)));
    specs.push(ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros));
}

pub fn layer_norm_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones));
    specs.push(ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros));
}

/// Two linear layers with a GELU in between.
pub fn mlp_specs(specs: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_mid: usize, d_out: usize) {
    linear_specs(specs, &format!("{prefix}.fc1"), d_in, d_mid);
    linear_specs(specs, &format!("{prefix}.fc2"), d_mid, d_out);
}

/// Initialize every spec. Each tensor draws from its own stream keyed by its
/// position in the list.
pub fn build_store(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (i, s) in specs.iter().enumerate() {
        let mut r = rng(derive_seed(seed, i as u64));
        store.insert(s.name.clone(), s.init.sample(&s.shape, &mut r))?;
    }
    Ok(store)
}

pub fn layout(specs: &[ParamSpec]) -> Vec<(String, Vec<usize>)> {
    specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect()
}

/// `x W + b` over the last axis.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    let y = g.layer_norm(x, LN_EPS)?;
    let y = g.mul(y, gamma)?;
    Ok(g.add(y, beta)?)
}

pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Batched model inputs: positions `B x N x 1` and lifted pilots `B x N x 2T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub positions: Tensor,
    pub signals: Tensor,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn num_pas(&self) -> usize {
        self.positions.shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_specs_count() {
        let mut specs = Vec::new();
        linear_specs(&mut specs, "head", 64, 2);
        assert_eq!(specs.iter().map(ParamSpec::numel).sum::<usize>(), 130);
    }

    #[test]
    fn store_is_seeded() {
        let mut specs = Vec::new();
        mlp_specs(&mut specs, "m", 3, 5, 2);
        layer_norm_specs(&mut specs, "ln", 2);
        let a = build_store(&specs, 1).unwrap();
        assert_eq!(a, build_store(&specs, 1).unwrap());
        assert_ne!(a, build_store(&specs, 2).unwrap());
        assert_eq!(a.value("ln.gamma").unwrap().values(), &[1.0, 1.0]);
        assert!(a.value("m.fc1.bias").unwrap().values().iter().all(|v| *v == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.value("m.fc1.weight").unwrap().values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn linear_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        store.insert("l.weight", Tensor::from_vec(vec![2, 1], vec![2.0, -1.0]).unwrap()).unwrap();
        store.insert("l.bias", Tensor::from_vec(vec![1], vec![0.5]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap());
        let y = linear(&mut g, &store, "l", x).unwrap();
        assert_eq!(g.value(y).values(), &[2.0 - 3.0 + 0.5, -4.0 - 4.0 + 0.5]);
        assert_eq!(g.macs(), 4);
    }
}

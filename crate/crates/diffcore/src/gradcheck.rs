use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub step: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    /// One `name,max_rel_err,max_abs_err,worst_index` line per parameter.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("param,max_rel_err,max_abs_err,worst_index\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:e},{:e},{}\n",
                e.name, e.max_rel_err, e.max_abs_err, e.worst_index
            ));
        }
        s
    }
}

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// finite differences with step `step`, for every entry of every parameter.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn gradcheck<F>(f: F, store: &ParamStore, step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.clear_grad();
    analytic.accumulate_grads(&g, &grads)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).values()[0])
    };

    let mut entries = Vec::new();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.len();
        let a_grad = analytic.grad(&name).map(|t| t.values().to_vec());
        let mut entry = GradcheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..n {
            let orig = probe.value(&name)?.values()[i];
            probe.get_mut(&name)?.value.values_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.values_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = a_grad.as_ref().map_or(0.0, |v| v[i]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
            entry.max_abs_err = entry.max_abs_err.max(abs);
        }
        entries.push(entry);
    }
    Ok(GradcheckReport { step, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn linear_layer_passes() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.7).sin()))
            .unwrap();
        store.insert("b", Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap()).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos());
        let report = gradcheck(
            |g, s| {
                let xi = g.input(x.clone());
                let w = g.param(s, "w")?;
                let b = g.param(s, "b")?;
                let y = g.matmul(xi, w)?;
                let y = g.add(y, b)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{}", report.to_csv());
        assert_eq!(report.entries.len(), 2);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has a kink at 0; probing exactly at the kink exposes the mismatch
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1])).unwrap();
        let report = gradcheck(
            |g, s| {
                let x = g.param(s, "x")?;
                let a = g.abs(x);
                Ok(g.sum_all(a))
            },
            &store,
            1e-6,
        )
        .unwrap();
        // numeric derivative of |x| at 0 is 0, analytic is 0: agrees
        assert!(report.passed(1e-4));
        store.set_value("x", Tensor::from_vec(vec![1], vec![1e-7]).unwrap()).unwrap();
        let report = gradcheck(
            |g, s| {
                let x = g.param(s, "x")?;
                let a = g.abs(x);
                Ok(g.sum_all(a))
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed(1e-4));
    }
}

//! Loss, metrics, the training loop and zero-shot evaluation over antenna
//! counts.

use std::time::Instant;

use diffcore::{AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PassError, Result};
use crate::model::{infer, make_batch, Estimator};
use crate::pilots::{generate_records, DatasetRecord, SnrPolicy};
use crate::scene::SystemConfig;
use crate::seed::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub model: String,
    pub eval_n: Vec<usize>,
    /// Samples per gradient shard. A batch is split into shards whose
    /// gradients are summed in shard order, so results do not depend on the
    /// number of worker threads.
    pub shard_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 50,
            lr: 1e-3,
            train_fraction: 0.9,
            seed: 0,
            snr_min_db: -10.0,
            snr_max_db: 20.0,
            model: "pamoe-v1".into(),
            eval_n: (8..=32).step_by(4).collect(),
            shard_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(PassError::Config("batch_size and shard_size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PassError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PassError::Config(format!("invalid learning rate {}", self.lr)));
        }
        self.snr_policy().validate()
    }

    pub fn snr_policy(&self) -> SnrPolicy {
        SnrPolicy::Uniform { min_db: self.snr_min_db, max_db: self.snr_max_db }
    }
}

/// Sum of absolute errors over all entries, divided by the batch size.
pub fn l1_loss(g: &mut Graph, pred: Var, label: Var) -> Result<Var> {
    l1_loss_over(g, pred, label, g.shape(pred).first().copied().unwrap_or(1))
}

fn l1_loss_over(g: &mut Graph, pred: Var, label: Var, batch: usize) -> Result<Var> {
    if g.shape(pred) != g.shape(label) {
        return Err(PassError::Shape(format!(
            "prediction {:?} vs label {:?}",
            g.shape(pred),
            g.shape(label)
        )));
    }
    let d = g.sub(pred, label)?;
    let a = g.abs(d);
    let s = g.sum_all(a);
    Ok(g.scale(s, 1.0 / batch as f64))
}

/// Running NMSE over samples. Samples with an all-zero label are skipped and
/// counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NmseSummary {
    pub sum: f64,
    pub count: usize,
    pub excluded: usize,
}

impl NmseSummary {
    pub fn push(&mut self, err_sq: f64, label_sq: f64) {
        if label_sq == 0.0 {
            self.excluded += 1;
        } else {
            self.sum += err_sq / label_sq;
            self.count += 1;
        }
    }

    pub fn merge(&mut self, other: NmseSummary) {
        self.sum += other.sum;
        self.count += other.count;
        self.excluded += other.excluded;
    }

    /// Mean over the counted samples; NaN when nothing was counted.
    pub fn value(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

/// NMSE of `B x ...` predictions against labels, per sample along axis 0.
pub fn nmse(pred: &Tensor, label: &Tensor) -> Result<NmseSummary> {
    if pred.shape() != label.shape() || pred.shape().is_empty() {
        return Err(PassError::Shape(format!(
            "prediction {:?} vs label {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    let b = pred.shape()[0];
    let per = if b == 0 { 0 } else { pred.len() / b };
    let mut out = NmseSummary::default();
    for (p, l) in pred.values().chunks(per.max(1)).zip(label.values().chunks(per.max(1))) {
        let err: f64 = p.iter().zip(l).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = l.iter().map(|v| v * v).sum();
        out.push(err, norm);
    }
    Ok(out)
}

/// NMSE of the estimator over `records`, evaluated in parallel chunks.
pub fn evaluate(model: &dyn Estimator, store: &ParamStore, records: &[DatasetRecord], batch_size: usize) -> Result<NmseSummary> {
    let parts: Vec<NmseSummary> = records
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&DatasetRecord> = chunk.iter().collect();
            let (batch, labels) = make_batch(&refs)?;
            nmse(&infer(model, store, &batch)?, &labels)
        })
        .collect::<Result<_>>()?;
    let mut total = NmseSummary::default();
    for p in parts {
        total.merge(p);
    }
    Ok(total)
}

/// Channel estimates for every record, as `N x 2` tensors.
pub fn predict(model: &dyn Estimator, store: &ParamStore, records: &[DatasetRecord], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let (batch, _) = make_batch(&refs)?;
        let h = infer(model, store, &batch)?;
        let per = h.len() / chunk.len();
        for (i, r) in chunk.iter().enumerate() {
            out.push(Tensor::from_vec(vec![r.n, 2], h.values()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters and optimizer state at the best validation epoch.
    pub best: ParamStore,
    pub last: ParamStore,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub log: Vec<EpochLog>,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Check that the records can be fed to `model` and share one shape.
pub fn check_compatible(model: &dyn Estimator, records: &[DatasetRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| PassError::Config("dataset is empty".into()))?;
    let (n, t) = (first.n, first.t);
    if let Some(r) = records.iter().find(|r| r.n != n || r.t != t) {
        return Err(PassError::Shape(format!(
            "dataset mixes N = {n}, T = {t} with N = {}, T = {}",
            r.n, r.t
        )));
    }
    if t != model.pilot_slots() {
        return Err(PassError::Shape(format!(
            "dataset has T = {t} pilot slots, {} expects {}",
            model.id(),
            model.pilot_slots()
        )));
    }
    model.check_antennas(n)?;
    Ok((n, t))
}

/// Train with Adam on shuffled mini-batches, validating after every epoch.
/// `on_epoch` sees each log entry as it is produced.
pub fn train(
    model: &dyn Estimator,
    records: &[DatasetRecord],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    tc.validate()?;
    check_compatible(model, records)?;
    let n_train = ((records.len() as f64 * tc.train_fraction).round() as usize).clamp(1, records.len());
    let (train_set, val_set) = records.split_at(n_train);
    // a dataset too small to split validates on its training part
    let val_set = if val_set.is_empty() { train_set } else { val_set };

    let adam = AdamConfig { lr: tc.lr, ..Default::default() };
    let mut store = model.init_store(derive_seed(tc.seed, INIT_STREAM))?;
    let mut best = store.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(tc.epochs);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tc.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(derive_seed(derive_seed(tc.seed, SHUFFLE_STREAM), epoch as u64)));
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(tc.batch_size) {
            store.zero_grad();
            let shards: Vec<(f64, Vec<(String, Vec<f64>)>)> = batch_idx
                .par_chunks(tc.shard_size)
                .map(|shard| shard_gradients(model, &store, train_set, shard, batch_idx.len()))
                .collect::<Result<_>>()?;
            for (loss, grads) in shards {
                loss_sum += loss * batch_idx.len() as f64;
                for (name, g) in grads {
                    store.add_grad(&name, &g)?;
                }
            }
            store.adam_step(&adam)?;
        }
        let val = evaluate(model, &store, val_set, tc.batch_size)?.value();
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_nmse: val,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if val < best_val || best_epoch == 0 {
            best_val = val;
            best_epoch = epoch;
            best = store.clone();
        }
    }
    if tc.epochs == 0 {
        best_val = evaluate(model, &store, val_set, tc.batch_size)?.value();
    }
    best.clear_grad();
    store.clear_grad();
    Ok(TrainOutcome { best, last: store, best_epoch, best_val_nmse: best_val, log })
}

/// Loss contribution and parameter gradients of one shard of a batch of
/// `batch_len` samples.
fn shard_gradients(
    model: &dyn Estimator,
    store: &ParamStore,
    records: &[DatasetRecord],
    shard: &[usize],
    batch_len: usize,
) -> Result<(f64, Vec<(String, Vec<f64>)>)> {
    let refs: Vec<&DatasetRecord> = shard.iter().map(|&i| &records[i]).collect();
    let (batch, labels) = make_batch(&refs)?;
    let mut g = Graph::new();
    let p = g.input(batch.positions);
    let s = g.input(batch.signals);
    let pred = model.forward(&mut g, store, p, s)?;
    let label = g.input(labels);
    let loss = l1_loss_over(&mut g, pred, label, batch_len)?;
    let value = g.value(loss).values()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.into_param_grads(&g)))
}

/// One evaluation result. `nmse` is `None` for a cell the estimator could
/// not run; `seed` is `None` on aggregated rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub n: usize,
    pub t: usize,
    pub snr_db: f64,
    pub nmse: Option<f64>,
    pub flops: u64,
    pub params: usize,
    pub seed: Option<u64>,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn nmse_db(&self) -> Option<f64> {
        self.nmse.map(|v| 10.0 * v.log10())
    }

    pub fn failed(&self) -> bool {
        self.nmse.is_none()
    }
}

/// Base seed of the test set for one evaluation cell. Every estimator in the
/// cell sees the same records.
pub fn cell_seed(seed: u64, n: usize, snr_db: f64) -> u64 {
    derive_seed(derive_seed(seed, n as u64), snr_db.to_bits())
}

/// Evaluate a trained model on fresh test sets with each antenna count in
/// `n_list`, one row per `(N, seed)`. A count beyond the model's capacity
/// gives a failed row.
pub fn zero_shot_eval(
    model: &dyn Estimator,
    store: &ParamStore,
    cfg: &SystemConfig,
    n_list: &[usize],
    snr_db: f64,
    seeds: &[u64],
    records_per_cell: usize,
) -> Result<Vec<MetricsRow>> {
    model.check_store(store)?;
    let mut rows = Vec::new();
    for &n in n_list {
        for &seed in seeds {
            let start = Instant::now();
            let mut row = MetricsRow {
                estimator: model.id().to_string(),
                n,
                t: model.pilot_slots(),
                snr_db,
                nmse: None,
                flops: model.flops(n),
                params: model.num_params(),
                seed: Some(seed),
                wallclock_s: 0.0,
            };
            if model.check_antennas(n).is_ok() {
                let cell_cfg = SystemConfig { pilot_slots: model.pilot_slots(), ..cfg.with_num_pas(n) };
                let records = generate_records(
                    &cell_cfg,
                    cell_seed(seed, n, snr_db),
                    0..records_per_cell,
                    SnrPolicy::Fixed { snr_db },
                )?;
                row.nmse = Some(evaluate(model, store, &records, 256)?.value());
            }
            row.wallclock_s = start.elapsed().as_secs_f64();
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::{gradcheck, DiffError};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn l1_counts_every_entry() {
        let mut g = Graph::new();
        let label = Tensor::from_fn(&[1, 16, 2], |i| i as f64 * 0.1);
        let pred = Tensor::from_fn(&[1, 16, 2], |i| i as f64 * 0.1 + 1.0);
        let (p, l) = (g.input(pred), g.input(label.clone()));
        let loss = l1_loss(&mut g, p, l).unwrap();
        assert!((g.value(loss).values()[0] - 32.0).abs() < 1e-12);
        let same = g.input(label);
        let zero = l1_loss(&mut g, same, l).unwrap();
        assert_eq!(g.value(zero).values()[0], 0.0);
    }

    #[test]
    fn l1_gradient_is_sign_over_batch() {
        let mut store = ParamStore::new();
        store.insert("p", t(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7])).unwrap();
        let label = t(&[2, 3], &[0.0, 0.0, 1.0, 1.0, -1.0, 0.0]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let l = g.input(label.clone());
        let loss = l1_loss(&mut g, p, l).unwrap();
        let grad = g.backward(loss).unwrap().get(&g, p).unwrap();
        for i in 0..6 {
            let sign = (store.value("p").unwrap().values()[i] - label.values()[i]).signum();
            assert_eq!(grad.values()[i], sign / 2.0);
        }
        let report = gradcheck(
            |g, s| {
                let p = g.param(s, "p")?;
                let l = g.input(label.clone());
                l1_loss(g, p, l).map_err(|e| DiffError::InvalidArgument { op: "l1", msg: e.to_string() })
            },
            &store,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(1e-4));
    }

    #[test]
    fn l1_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 3, 2]));
        assert!(l1_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn nmse_reference_points() {
        let label = t(&[2, 2, 2], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 4.0, -1.0]);
        assert_eq!(nmse(&label, &label).unwrap().value(), 0.0);
        assert_eq!(nmse(&Tensor::zeros(&[2, 2, 2]), &label).unwrap().value(), 1.0);
        let doubled = Tensor::from_fn(&[2, 2, 2], |i| 2.0 * label.values()[i]);
        assert_eq!(nmse(&doubled, &label).unwrap().value(), 1.0);
    }

    #[test]
    fn zero_labels_are_excluded() {
        let label = t(&[2, 1, 2], &[0.0, 0.0, 1.0, 1.0]);
        let pred = t(&[2, 1, 2], &[5.0, 5.0, 1.0, 0.0]);
        let s = nmse(&pred, &label).unwrap();
        assert_eq!((s.count, s.excluded), (1, 1));
        assert_eq!(s.value(), 0.5);
    }

    #[test]
    fn invalid_train_config() {
        for tc in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { train_fraction: 1.0, ..Default::default() },
            TrainConfig { snr_min_db: 5.0, snr_max_db: 0.0, ..Default::default() },
        ] {
            assert!(matches!(tc.validate(), Err(PassError::Config(_))));
        }
    }
}

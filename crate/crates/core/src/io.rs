//! Binary dataset and checkpoint containers and the metrics CSV.
//!
//! Both containers start with magic bytes and a little-endian `u32` format
//! version. A dataset continues with `N_s`, `N`, `T` and the base seed as
//! `u64`, a length-prefixed TOML system configuration, then fixed-stride
//! records of little-endian `f64` laid out as
//! `pa_x[N] | y_bar[N*2T] | h_bar[N*2] | snr_db | N | T | seed bits`.
//! A checkpoint continues with a length-prefixed JSON header describing the
//! model, the system and training configurations and the tensor layout,
//! followed by each tensor's values and Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use diffcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, PassError, Result};
use crate::model::{Estimator, ModelConfig};
use crate::pilots::{DatasetMeta, DatasetRecord, RealMatrix, DATASET_FORMAT_VERSION};
use crate::scene::SystemConfig;
use crate::trainer::{MetricsRow, TrainConfig};

pub const DATASET_MAGIC: &[u8; 6] = b"PASSDS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PASSCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Header blobs larger than this are treated as corruption.
const MAX_BLOB: u64 = 1 << 26;

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PassError::Format(FormatError::Truncated(format!("while reading {what}"))),
        _ => PassError::Io { path: what.to_string(), source: e },
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_magic(r: &mut impl Read, expected: &[u8]) -> Result<()> {
    let mut found = vec![0u8; expected.len()];
    read_exact_or_truncated(r, &mut found, "magic bytes")?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        }
        .into());
    }
    Ok(())
}

fn read_version(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "format version")?;
    if found != expected {
        return Err(FormatError::VersionMismatch { expected, found }.into());
    }
    Ok(())
}

fn read_blob(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u64(r, what)?;
    if len > MAX_BLOB {
        return Err(FormatError::Malformed(format!("{what} claims {len} bytes")).into());
    }
    let mut buf = vec![0u8; len as usize];
    read_exact_or_truncated(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| FormatError::Malformed(format!("{what} is not UTF-8")).into())
}

fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact_or_truncated(r, &mut buf, what)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| PassError::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| PassError::io(path, e))
}

/// Number of `f64` values in one record with `n` antennas and `t` slots.
pub fn record_width(n: usize, t: usize) -> usize {
    n + 2 * n * t + 2 * n + 4
}

/// Streams records to a dataset file in index order.
pub struct DatasetWriter {
    out: BufWriter<File>,
    path: PathBuf,
    meta: DatasetMeta,
    written: usize,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, meta: &DatasetMeta) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if meta.num_samples == 0 {
            return Err(PassError::Config("dataset needs at least one sample".into()));
        }
        let mut out = create(&path)?;
        let cfg = meta.cfg.to_toml();
        let header = (|| -> std::io::Result<()> {
            out.write_all(DATASET_MAGIC)?;
            out.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
            for v in [meta.num_samples as u64, meta.cfg.num_pas as u64, meta.cfg.pilot_slots as u64, meta.seed] {
                out.write_all(&v.to_le_bytes())?;
            }
            out.write_all(&(cfg.len() as u64).to_le_bytes())?;
            out.write_all(cfg.as_bytes())
        })();
        header.map_err(|e| PassError::io(&path, e))?;
        Ok(Self { out, path, meta: meta.clone(), written: 0 })
    }

    pub fn write(&mut self, record: &DatasetRecord) -> Result<()> {
        let index = self.written;
        let (n, t) = (self.meta.cfg.num_pas, self.meta.cfg.pilot_slots);
        if record.n != n || record.t != t {
            return Err(PassError::Shape(format!(
                "record {index} has N = {}, T = {} but the file holds N = {n}, T = {t}",
                record.n, record.t
            )));
        }
        if index >= self.meta.num_samples {
            return Err(PassError::Shape(format!("record {index} exceeds the declared {} samples", self.meta.num_samples)));
        }
        let tail = [record.snr_db, n as f64, t as f64, f64::from_bits(record.seed)];
        let res = write_f64s(&mut self.out, &record.pa_x)
            .and_then(|_| write_f64s(&mut self.out, &record.y_bar.data))
            .and_then(|_| write_f64s(&mut self.out, &record.h_bar.data))
            .and_then(|_| write_f64s(&mut self.out, &tail));
        res.map_err(|source| PassError::RecordWrite { index, source })?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.meta.num_samples {
            return Err(PassError::Shape(format!(
                "wrote {} of {} declared records",
                self.written, self.meta.num_samples
            )));
        }
        self.out.flush().map_err(|e| PassError::io(&self.path, e))
    }
}

pub fn save_dataset(path: impl AsRef<Path>, meta: &DatasetMeta, records: &[DatasetRecord]) -> Result<()> {
    if records.len() != meta.num_samples {
        return Err(PassError::Shape(format!(
            "{} records for a dataset declaring {}",
            records.len(),
            meta.num_samples
        )));
    }
    let mut w = DatasetWriter::create(path, meta)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Random-access reader. Open one per thread for concurrent reads.
pub struct DatasetReader {
    file: File,
    meta: DatasetMeta,
    data_start: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = open(path)?;
        let file_len = file.metadata().map_err(|e| PassError::io(path, e))?.len();
        let mut r = BufReader::new(file);
        read_magic(&mut r, DATASET_MAGIC)?;
        read_version(&mut r, DATASET_FORMAT_VERSION)?;
        let num_samples = read_u64(&mut r, "sample count")? as usize;
        let n = read_u64(&mut r, "antenna count")? as usize;
        let t = read_u64(&mut r, "pilot slots")? as usize;
        let seed = read_u64(&mut r, "base seed")?;
        let cfg_text = read_blob(&mut r, "system configuration")?;
        let cfg = SystemConfig::from_toml(&cfg_text)
            .map_err(|e| FormatError::Malformed(format!("embedded configuration: {e}")))?;
        if cfg.num_pas != n || cfg.pilot_slots != t {
            return Err(FormatError::Malformed(format!(
                "header says N = {n}, T = {t}, embedded configuration says N = {}, T = {}",
                cfg.num_pas, cfg.pilot_slots
            ))
            .into());
        }
        if num_samples == 0 {
            return Err(FormatError::Malformed("zero samples".into()).into());
        }
        let data_start = (DATASET_MAGIC.len() + 4 + 5 * 8 + cfg_text.len()) as u64;
        let expected = data_start + (num_samples * record_width(n, t) * 8) as u64;
        if file_len < expected {
            return Err(FormatError::Truncated(format!(
                "{} bytes of records, {} expected",
                file_len.saturating_sub(data_start),
                expected - data_start
            ))
            .into());
        }
        if file_len > expected {
            return Err(FormatError::Malformed(format!("{} trailing bytes", file_len - expected)).into());
        }
        let meta = DatasetMeta { num_samples, cfg, format_version: DATASET_FORMAT_VERSION, seed };
        Ok(Self { file: r.into_inner(), meta, data_start })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.meta.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.meta.num_samples == 0
    }

    pub fn read(&mut self, index: usize) -> Result<DatasetRecord> {
        if index >= self.len() {
            return Err(PassError::Shape(format!("record {index} of a {}-record dataset", self.len())));
        }
        let (n, t) = (self.meta.cfg.num_pas, self.meta.cfg.pilot_slots);
        let width = record_width(n, t);
        let offset = self.data_start + (index * width * 8) as u64;
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(|e| PassError::Io { path: format!("record {index}"), source: e })?;
        let v = read_f64s(&mut self.file, width, &format!("record {index}"))?;
        decode_record(&v, n, t, index)
    }

    pub fn read_all(&mut self) -> Result<Vec<DatasetRecord>> {
        let (n, t) = (self.meta.cfg.num_pas, self.meta.cfg.pilot_slots);
        let width = record_width(n, t);
        self.file
            .seek(SeekFrom::Start(self.data_start))
            .map_err(|e| PassError::Io { path: "records".into(), source: e })?;
        let mut r = BufReader::new(&mut self.file);
        (0..self.meta.num_samples)
            .map(|i| decode_record(&read_f64s(&mut r, width, &format!("record {i}"))?, n, t, i))
            .collect()
    }
}

fn decode_record(v: &[f64], n: usize, t: usize, index: usize) -> Result<DatasetRecord> {
    let (pa_x, rest) = v.split_at(n);
    let (y, rest) = rest.split_at(2 * n * t);
    let (h, tail) = rest.split_at(2 * n);
    if tail[1] != n as f64 || tail[2] != t as f64 {
        return Err(FormatError::Malformed(format!("record {index} declares N = {}, T = {}", tail[1], tail[2])).into());
    }
    Ok(DatasetRecord {
        pa_x: pa_x.to_vec(),
        y_bar: RealMatrix { rows: n, cols: 2 * t, data: y.to_vec() },
        h_bar: RealMatrix { rows: n, cols: 2, data: h.to_vec() },
        snr_db: tail[0],
        n,
        t,
        seed: tail[3].to_bits(),
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<DatasetRecord>)> {
    let mut r = DatasetReader::open(path)?;
    let records = r.read_all()?;
    Ok((r.meta, records))
}

/// Trained parameters with everything needed to rebuild and describe them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub val_nmse: f64,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    system: SystemConfig,
    train: TrainConfig,
    best_epoch: usize,
    val_nmse: f64,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    /// Build the estimator this checkpoint was trained for and check the
    /// stored tensors against it.
    pub fn estimator(&self) -> Result<Box<dyn Estimator>> {
        let model = self.model.build()?;
        model.check_store(&self.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            model: self.model.clone(),
            system: self.system.clone(),
            train: self.train.clone(),
            best_epoch: self.best_epoch,
            val_nmse: self.val_nmse,
            step: self.store.step(),
            tensors: self.store.iter().map(|(n, p)| (n.to_string(), p.value.shape().to_vec())).collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| PassError::Config(e.to_string()))?;
        let mut out = create(path)?;
        let res = (|| -> std::io::Result<()> {
            out.write_all(CHECKPOINT_MAGIC)?;
            out.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
            out.write_all(&(json.len() as u64).to_le_bytes())?;
            out.write_all(json.as_bytes())?;
            for (_, p) in self.store.iter() {
                write_f64s(&mut out, p.value.values())?;
                write_f64s(&mut out, &p.m)?;
                write_f64s(&mut out, &p.v)?;
            }
            out.flush()
        })();
        res.map_err(|e| PassError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(open(path)?);
        read_magic(&mut r, CHECKPOINT_MAGIC)?;
        read_version(&mut r, CHECKPOINT_FORMAT_VERSION)?;
        let json = read_blob(&mut r, "checkpoint header")?;
        let header: CheckpointHeader =
            serde_json::from_str(&json).map_err(|e| FormatError::Malformed(format!("checkpoint header: {e}")))?;
        let mut store = ParamStore::new();
        for (name, shape) in &header.tensors {
            let len: usize = shape.iter().product();
            let values = read_f64s(&mut r, len, name)?;
            let m = read_f64s(&mut r, len, name)?;
            let v = read_f64s(&mut r, len, name)?;
            store.insert_with_state(name.clone(), Tensor::from_vec(shape.clone(), values)?, m, v)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| PassError::io(path, e))? != 0 {
            return Err(FormatError::Malformed("trailing bytes after the last tensor".into()).into());
        }
        store.set_step(header.step);
        Ok(Self {
            model: header.model,
            system: header.system,
            train: header.train,
            best_epoch: header.best_epoch,
            val_nmse: header.val_nmse,
            store,
        })
    }
}

pub const METRICS_HEADER: [&str; 10] =
    ["estimator", "N", "T", "snr_db", "nmse", "nmse_db", "flops", "params", "seed", "wallclock_s"];

/// Marker written in the nmse columns of a cell the estimator could not run.
pub const FAILED: &str = "failed";
/// Marker written in the seed column of an aggregated row.
pub const MEAN: &str = "mean";

/// Write rows as CSV. Each `preamble` line is emitted first as a `#` comment.
pub fn write_metrics(out: impl Write, preamble: &[String], rows: &[MetricsRow]) -> Result<()> {
    let mut out = out;
    let io_err = |e: std::io::Error| PassError::Io { path: "metrics".into(), source: e };
    for line in preamble {
        writeln!(out, "# {line}").map_err(io_err)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| PassError::Io { path: "metrics".into(), source: e.into() };
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| FAILED.to_string(), |x| format!("{x:e}"));
        w.write_record([
            r.estimator.clone(),
            r.n.to_string(),
            r.t.to_string(),
            r.snr_db.to_string(),
            fmt_opt(r.nmse),
            fmt_opt(r.nmse_db()),
            r.flops.to_string(),
            r.params.to_string(),
            r.seed.map_or_else(|| MEAN.to_string(), |s| s.to_string()),
            format!("{:.3}", r.wallclock_s),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn save_metrics(path: impl AsRef<Path>, preamble: &[String], rows: &[MetricsRow]) -> Result<()> {
    write_metrics(create(path.as_ref())?, preamble, rows)
}

pub fn read_metrics(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let bad = |msg: String| PassError::Format(FormatError::Malformed(msg));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(METRICS_HEADER) {
        return Err(bad(format!("unexpected metrics header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or_default();
        let parse_err = |k: usize| bad(format!("row {}: bad {} {:?}", i + 1, METRICS_HEADER[k], field(k)));
        let num = |k: usize| field(k).parse::<f64>().map_err(|_| parse_err(k));
        let int = |k: usize| field(k).parse::<u64>().map_err(|_| parse_err(k));
        rows.push(MetricsRow {
            estimator: field(0).to_string(),
            n: int(1)? as usize,
            t: int(2)? as usize,
            snr_db: num(3)?,
            nmse: if field(4) == FAILED { None } else { Some(num(4)?) },
            flops: int(6)?,
            params: int(7)? as usize,
            seed: if field(8) == MEAN { None } else { Some(int(8)?) },
            wallclock_s: num(9)?,
        });
    }
    Ok(rows)
}

pub fn load_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    read_metrics(open(path.as_ref())?)
}

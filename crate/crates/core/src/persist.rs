//! On-disk formats.
//!
//! Container layout: magic `TDAC`, a little-endian `u32` header length, a JSON
//! header, then each declared array as little-endian `f64` in header order.
//! Score CSVs start with a `# config_digest=` comment line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionMatrix;
use crate::error::{Result, TdaError};
use crate::linalg::Mat;
use crate::model::{Arch, ModelState};
use crate::train::TrainingTrajectory;

pub const MAGIC: &[u8; 4] = b"TDAC";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the value's JSON form; object keys are sorted, so the digest
/// does not depend on field order.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| TdaError::Format(e.to_string()))?;
    let text = serde_json::to_string(&v).map_err(|e| TdaError::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: String,
    pub arch: Option<Arch>,
    pub step: Option<usize>,
    pub config_digest: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    /// `(name, length)` of each array, in storage order.
    pub arrays: Vec<(String, usize)>,
}

impl ContainerHeader {
    pub fn new(kind: &str, config_digest: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            arch: None,
            step: None,
            config_digest: config_digest.to_string(),
            meta: serde_json::Value::Null,
            arrays: Vec::new(),
        }
    }
}

pub fn write_container(path: &Path, mut header: ContainerHeader, arrays: &[(&str, &[f64])]) -> Result<()> {
    header.arrays = arrays.iter().map(|(n, a)| (n.to_string(), a.len())).collect();
    let json = serde_json::to_vec(&header).map_err(|e| TdaError::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| TdaError::Format("container header too large".into()))?;
    let file = File::create(path).map_err(|e| TdaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| TdaError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&len.to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, a) in arrays {
        for v in *a {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| TdaError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| TdaError::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(TdaError::Format(format!("{} is not a TDAC container", path.display())));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: ContainerHeader = serde_json::from_slice(&json).map_err(|e| TdaError::Format(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(TdaError::Format(format!("unsupported container version {}", header.format_version)));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut buf = [0u8; 8];
    for (_, n) in &header.arrays {
        let mut a = Vec::with_capacity(*n);
        for _ in 0..*n {
            r.read_exact(&mut buf).map_err(io)?;
            a.push(f64::from_le_bytes(buf));
        }
        arrays.push(a);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(TdaError::Format(format!("{} trailing bytes in container", rest.len())));
    }
    Ok((header, arrays))
}

pub fn save_checkpoint(path: &Path, state: &ModelState, step: usize, digest: &str) -> Result<()> {
    let mut h = ContainerHeader::new("checkpoint", digest);
    h.arch = Some(state.arch.clone());
    h.step = Some(step);
    write_container(path, h, &[("params", &state.params)])
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, usize, String)> {
    let (h, mut arrays) = read_container(path)?;
    let arch = match (h.kind.as_str(), h.arch) {
        ("checkpoint", Some(a)) => a,
        _ => return Err(TdaError::Format(format!("{} is not a checkpoint", path.display()))),
    };
    let params = arrays.pop().ok_or_else(|| TdaError::Format("checkpoint without parameters".into()))?;
    Ok((ModelState::new(arch, params)?, h.step.unwrap_or(0), h.config_digest))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    config_digest: String,
    trajectory: TrainingTrajectory,
}

/// Writes `trajectory.json` (logs and parameters) plus one checkpoint container per saved step.
pub fn save_trajectory(dir: &Path, traj: &TrainingTrajectory, digest: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TdaError::io(dir, e))?;
    for c in &traj.checkpoints {
        save_checkpoint(&dir.join(format!("ckpt_{:06}.tdac", c.step)), &traj.state_from(&c.params), c.step, digest)?;
    }
    let path = dir.join("trajectory.json");
    let file = File::create(&path).map_err(|e| TdaError::io(&path, e))?;
    let body = TrajectoryFile {
        config_digest: digest.to_string(),
        trajectory: traj.clone(),
    };
    serde_json::to_writer(BufWriter::new(file), &body).map_err(|e| TdaError::Format(e.to_string()))
}

pub fn load_trajectory(dir: &Path) -> Result<(TrainingTrajectory, String)> {
    let path = dir.join("trajectory.json");
    let file = File::open(&path).map_err(|e| TdaError::io(&path, e))?;
    let body: TrajectoryFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| TdaError::Format(format!("{}: {e}", path.display())))?;
    Ok((body.trajectory, body.config_digest))
}

/// Long-format CSV `query_id,train_id,score` with full round-trip precision.
pub fn write_scores_csv(path: &Path, m: &AttributionMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| TdaError::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# config_digest={} method={}", m.config_digest, m.method).map_err(|e| TdaError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| TdaError::Format(e.to_string());
    w.write_record(["query_id", "train_id", "score"]).map_err(csv_err)?;
    for q in 0..m.queries() {
        for (t, v) in m.row(q).iter().enumerate() {
            w.write_record([q.to_string(), t.to_string(), format!("{v:.17e}")]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| TdaError::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Mat> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| TdaError::Format(e.to_string()))?;
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| TdaError::Format(e.to_string()))?;
        let field = |c: usize, name: &str| -> Result<&str> {
            rec.get(c).ok_or_else(|| TdaError::Parse {
                row: i + 2,
                column: name.into(),
                message: "missing field".into(),
            })
        };
        let parse_err = |name: &str, e: String| TdaError::Parse {
            row: i + 2,
            column: name.into(),
            message: e,
        };
        let q: usize = field(0, "query_id")?.parse().map_err(|e: std::num::ParseIntError| parse_err("query_id", e.to_string()))?;
        let t: usize = field(1, "train_id")?.parse().map_err(|e: std::num::ParseIntError| parse_err("train_id", e.to_string()))?;
        let v: f64 = field(2, "score")?.parse().map_err(|e: std::num::ParseFloatError| parse_err("score", e.to_string()))?;
        cells.push((q, t, v));
    }
    let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let mut m = Mat::zeros(rows, cols);
    for (q, t, v) in cells {
        m[(q, t)] = v;
    }
    Ok(m)
}

pub fn save_scores(path: &Path, m: &AttributionMatrix) -> Result<()> {
    let mut h = ContainerHeader::new("scores", &m.config_digest);
    h.meta = serde_json::json!({
        "method": m.method,
        "ensemble_size": m.ensemble_size,
        "rows": m.queries(),
        "cols": m.train_len(),
    });
    write_container(path, h, &[("scores", m.scores.as_slice())])
}

pub fn load_scores(path: &Path) -> Result<AttributionMatrix> {
    let (h, mut arrays) = read_container(path)?;
    if h.kind != "scores" {
        return Err(TdaError::Format(format!("{} holds '{}', not scores", path.display(), h.kind)));
    }
    let get = |k: &str| h.meta.get(k).and_then(serde_json::Value::as_u64).map(|v| v as usize);
    let (rows, cols) = get("rows").zip(get("cols")).ok_or_else(|| TdaError::Format("score container without shape".into()))?;
    let data = arrays.pop().ok_or_else(|| TdaError::Format("score container without data".into()))?;
    Ok(AttributionMatrix {
        scores: Mat::from_vec(rows, cols, data)?,
        method: h.meta.get("method").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
        config_digest: h.config_digest,
        ensemble_size: get("ensemble_size").unwrap_or(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use crate::train::{run, Checkpoints, Length, Sampling, TrainConfig};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Arch::mlp(2, vec![3], Head::Classification { classes: 2 });
        let state = ModelState::init(arch, crate::model::Init::Normal { scale: 1.0 }, 4).unwrap();
        let p = dir.path().join("c.tdac");
        save_checkpoint(&p, &state, 17, "abc").unwrap();
        let (back, step, digest) = load_checkpoint(&p).unwrap();
        assert_eq!(back, state);
        assert_eq!((step, digest.as_str()), (17, "abc"));
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tdac");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(read_container(&p).unwrap_err(), TdaError::Format(_)));
        let good = dir.path().join("good.tdac");
        write_container(&good, ContainerHeader::new("x", ""), &[("a", &[1.0, 2.0])]).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_container(&p).unwrap_err().is_io());
        assert!(load_checkpoint(&good).is_err());
    }

    #[test]
    fn scores_round_trip_through_csv_and_container() {
        let dir = tempfile::tempdir().unwrap();
        let m = AttributionMatrix::new("source", Mat::from_rows(&[vec![0.1, -1.0 / 3.0, 1e-300], vec![2.5e10, 0.0, -7.0]])).with_digest("d1");
        let csv_path = dir.path().join("s.csv");
        write_scores_csv(&csv_path, &m).unwrap();
        assert_eq!(read_scores_csv(&csv_path).unwrap(), m.scores);
        assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with("# config_digest=d1"));
        let bin = dir.path().join("s.tdac");
        save_scores(&bin, &m).unwrap();
        assert_eq!(load_scores(&bin).unwrap(), m);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth(crate::data::SynthKind::TwoGaussians, 12, 0).unwrap();
        let arch = Arch::linear(2, Head::Classification { classes: 2 }, true);
        let mut cfg = TrainConfig::sgd(Length::Epochs(2), 4, 0.1, Sampling::EpochShuffle, 1);
        cfg.checkpoints = Checkpoints::EveryEpoch;
        let traj = run(&arch, &ds, &cfg).unwrap();
        save_trajectory(dir.path(), &traj, "dg").unwrap();
        let (back, digest) = load_trajectory(dir.path()).unwrap();
        assert_eq!(back, traj);
        assert_eq!(digest, "dg");
        assert!(dir.path().join("ckpt_000006.tdac").exists());
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2], "c": {"y": 1, "x": 2}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"c": {"x": 2, "y": 1}, "a": [1, 2], "b": 1}"#).unwrap();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        assert_ne!(config_digest(&a).unwrap(), config_digest(&serde_json::json!({"b": 2})).unwrap());
    }
}

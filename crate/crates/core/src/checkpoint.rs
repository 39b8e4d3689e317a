//! Step-addressed parameter checkpoints.
//!
//! Layout: `<run-root>/<run-id>/ckpt_<step>.bin`. File format, little-endian:
//!
//! ```text
//! "DDCK" | format_version u32 | step u64
//! per tensor: name_len u16 | name | rank u8 | dims u32 × rank | f64 × Π dims
//! crc32 u32 over every preceding byte
//! ```
//!
//! Tensors are `layers.<l>.weight` (rank 2), `layers.<l>.bias` (rank 1, length
//! zero for bias-free layers) and a rank-0 `activation` scalar.
//!
//! [`CheckpointStore::restore`] takes an `Option<u64>`: `Some(0)` is a real
//! request for step 0 and is never treated as "no step given".

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Params, Tensor2};

pub const MAGIC: &[u8; 4] = b"DDCK";
pub const FORMAT_VERSION: u32 = 1;

const ACTIVATION_TENSOR: &str = "activation";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub params: Params,
    pub format_version: u32,
}

/// A directory of checkpoints for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointStore {
    dir: PathBuf,
}

impl CheckpointStore {
    /// Opens (creating if needed) the store at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CheckpointStore { dir })
    }

    /// `<run_root>/<run_id>`.
    pub fn for_run(run_root: &Path, run_id: &str) -> Result<Self> {
        Self::open(run_root.join(run_id))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step}.bin"))
    }

    /// Writes the checkpoint to a temporary file without publishing it.
    pub fn stage(&self, step: u64, params: &Params) -> Result<StagedCheckpoint> {
        let target = self.path_for(step);
        if target.exists() {
            return Err(Error::DuplicateStep {
                dir: self.dir.clone(),
                step,
            });
        }
        let temp = self.dir.join(format!(
            ".ckpt_{step}.bin.{}.{}.tmp",
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let bytes = encode(step, params);
        let write = || -> io::Result<()> {
            let mut f = File::create(&temp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&temp, e))?;
        Ok(StagedCheckpoint {
            temp,
            target,
            dir: self.dir.clone(),
            step,
            committed: false,
        })
    }

    /// Atomically persists `params` as `step`. Saving an existing step fails.
    pub fn save(&self, step: u64, params: &Params) -> Result<()> {
        self.stage(step, params)?.commit()
    }

    /// Loads exactly `step` when one is given; loads the highest step when
    /// `step` is `None`.
    pub fn restore(&self, step: Option<u64>) -> Result<Params> {
        Ok(self.restore_record(step)?.params)
    }

    pub fn restore_record(&self, step: Option<u64>) -> Result<CheckpointRecord> {
        let step = match step {
            Some(s) => s,
            None => *self
                .list_steps()?
                .last()
                .ok_or_else(|| Error::EmptyStore(self.dir.clone()))?,
        };
        let path = self.path_for(step);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::StepNotFound {
                    dir: self.dir.clone(),
                    step,
                })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let record = decode(&bytes).map_err(|detail| Error::CorruptCheckpoint {
            path: path.clone(),
            detail,
        })?;
        if record.step != step {
            return Err(Error::CorruptCheckpoint {
                path,
                detail: format!("file holds step {}", record.step),
            });
        }
        Ok(record)
    }

    /// Steps present in the store, ascending. Files not named
    /// `ckpt_<u64>.bin` are ignored.
    pub fn list_steps(&self) -> Result<Vec<u64>> {
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut steps = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            if let Some(step) = entry.file_name().to_str().and_then(parse_step) {
                steps.push(step);
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }
}

fn parse_step(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("ckpt_")?.strip_suffix(".bin")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// A fully written but unpublished checkpoint. Dropping it without calling
/// [`commit`](Self::commit) discards the temp file and leaves the store as it
/// was.
#[derive(Debug)]
pub struct StagedCheckpoint {
    temp: PathBuf,
    target: PathBuf,
    dir: PathBuf,
    step: u64,
    committed: bool,
}

impl StagedCheckpoint {
    pub fn temp_path(&self) -> &Path {
        &self.temp
    }

    /// Publishes the checkpoint. Linking fails if the target exists, so of two
    /// concurrent saves of the same step exactly one succeeds.
    pub fn commit(mut self) -> Result<()> {
        let linked = fs::hard_link(&self.temp, &self.target);
        let _ = fs::remove_file(&self.temp);
        self.committed = true;
        match linked {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::DuplicateStep {
                dir: self.dir.clone(),
                step: self.step,
            }),
            Err(e) => Err(Error::io(&self.target, e)),
        }
    }
}

impl Drop for StagedCheckpoint {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.temp);
        }
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(step: u64, params: &Params) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    for (l, layer) in params.layers.iter().enumerate() {
        let w = &layer.weight;
        put_tensor(
            &mut buf,
            &format!("layers.{l}.weight"),
            &[w.rows(), w.cols()],
            w.data(),
        );
        put_tensor(
            &mut buf,
            &format!("layers.{l}.bias"),
            &[layer.bias.len()],
            &layer.bias,
        );
    }
    let act = match params.activation {
        Activation::Relu => 0.0,
        Activation::Identity => 1.0,
    };
    put_tensor(&mut buf, ACTIVATION_TENSOR, &[], &[act]);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointRecord, String> {
    if bytes.len() < 4 + 4 + 8 + 4 {
        return Err(format!("file too short ({} bytes)", bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        ));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(format!("unsupported format version {format_version}"));
    }
    let step = r.u64()?;

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    while r.pos < body.len() {
        let name_len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| "tensor name is not utf-8".to_string())?
            .to_string();
        let rank = usize::from(r.u8()?);
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or("tensor too large")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (dims, values)).is_some() {
            return Err(format!("duplicate tensor {name}"));
        }
    }

    let activation = match tensors.remove(ACTIVATION_TENSOR) {
        Some((dims, v)) if dims.is_empty() && v == [0.0] => Activation::Relu,
        Some((dims, v)) if dims.is_empty() && v == [1.0] => Activation::Identity,
        _ => return Err("missing or invalid activation tensor".into()),
    };
    let mut layers = Vec::new();
    while let Some((wdims, wdata)) = tensors.remove(&format!("layers.{}.weight", layers.len())) {
        let l = layers.len();
        let (bdims, bias) = tensors
            .remove(&format!("layers.{l}.bias"))
            .ok_or_else(|| format!("missing bias for layer {l}"))?;
        if wdims.len() != 2 || bdims.len() != 1 {
            return Err(format!("bad tensor rank in layer {l}"));
        }
        if !bias.is_empty() && bias.len() != wdims[0] {
            return Err(format!("bias length mismatch in layer {l}"));
        }
        let weight = Tensor2::from_vec(wdims[0], wdims[1], wdata).map_err(|e| e.to_string())?;
        layers.push(Layer { weight, bias });
    }
    if layers.is_empty() {
        return Err("no layers".into());
    }
    if let Some(name) = tensors.keys().next() {
        return Err(format!("unexpected tensor {name}"));
    }
    for pair in layers.windows(2) {
        if pair[0].weight.rows() != pair[1].weight.cols() {
            return Err("layer shapes do not chain".into());
        }
    }
    Ok(CheckpointRecord {
        step,
        params: Params { layers, activation },
        format_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelSpec};

    fn params(seed: u64) -> Params {
        init_params(&ModelSpec::mlp(vec![3, 4, 2]), seed).unwrap()
    }

    fn store() -> (tempfile::TempDir, CheckpointStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = CheckpointStore::open(dir.path().join("run_0")).unwrap();
        (dir, s)
    }

    fn bits(p: &Params) -> Vec<u64> {
        p.iter_flat().map(f64::to_bits).collect()
    }

    #[test]
    fn save_then_list() {
        let (_d, s) = store();
        assert_eq!(s.list_steps().unwrap(), Vec::<u64>::new());
        s.save(0, &params(0)).unwrap();
        assert_eq!(s.list_steps().unwrap(), vec![0]);
    }

    #[test]
    fn duplicate_step_is_an_error() {
        let (_d, s) = store();
        s.save(0, &params(0)).unwrap();
        let err = s.save(0, &params(1)).unwrap_err();
        assert!(err.to_string().contains("duplicate step"), "{err}");
        // the original survives
        assert_eq!(bits(&s.restore(Some(0)).unwrap()), bits(&params(0)));
    }

    #[test]
    fn file_names_follow_step() {
        let (_d, s) = store();
        for step in [0, 5, 20] {
            s.save(step, &params(step)).unwrap();
        }
        for name in ["ckpt_0.bin", "ckpt_5.bin", "ckpt_20.bin"] {
            assert!(s.dir().join(name).is_file(), "{name}");
        }
        assert_eq!(s.list_steps().unwrap(), vec![0, 5, 20]);
    }

    #[test]
    fn listing_sorts_numerically_and_skips_strays() {
        let (_d, s) = store();
        s.save(20, &params(2)).unwrap();
        s.save(0, &params(0)).unwrap();
        fs::write(s.dir().join("notes.txt"), "hi").unwrap();
        fs::write(s.dir().join("ckpt_x.bin"), "hi").unwrap();
        fs::write(s.dir().join("ckpt_.bin"), "hi").unwrap();
        assert_eq!(s.list_steps().unwrap(), vec![0, 20]);
    }

    #[test]
    fn restore_semantics() {
        let (_d, s) = store();
        s.save(0, &params(10)).unwrap();
        s.save(5, &params(15)).unwrap();
        assert_eq!(bits(&s.restore(Some(0)).unwrap()), bits(&params(10)));
        assert_eq!(bits(&s.restore(None).unwrap()), bits(&params(15)));
        let err = s.restore(Some(3)).unwrap_err();
        assert_eq!(err.to_string().split(" in ").next().unwrap(), "step 3 not found");
    }

    #[test]
    fn empty_store_without_step_fails() {
        let (_d, s) = store();
        assert!(matches!(s.restore(None), Err(Error::EmptyStore(_))));
        assert!(matches!(s.restore(Some(0)), Err(Error::StepNotFound { step: 0, .. })));
    }

    #[test]
    fn corruption_is_detected() {
        let (_d, s) = store();
        s.save(1, &params(1)).unwrap();
        let path = s.path_for(1);
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            s.restore(Some(1)),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn bias_free_and_identity_roundtrip() {
        let p = init_params(&ModelSpec::linear_softmax(6, 3), 4).unwrap();
        let rec = decode(&encode(9, &p)).unwrap();
        assert_eq!(rec.step, 9);
        assert_eq!(rec.format_version, FORMAT_VERSION);
        assert_eq!(rec.params, p);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(0x0102, &params(0));
        assert_eq!(&bytes[..4], b"DDCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &0x0102u64.to_le_bytes());
        // first tensor name
        assert_eq!(&bytes[16..18], &15u16.to_le_bytes());
        assert_eq!(&bytes[18..33], b"layers.0.weight");
        assert_eq!(bytes[33], 2);
    }

    #[test]
    fn dropped_stage_leaves_store_untouched() {
        let (_d, s) = store();
        s.save(0, &params(0)).unwrap();
        let staged = s.stage(1, &params(1)).unwrap();
        let temp = staged.temp_path().to_path_buf();
        assert!(temp.is_file());
        // crash between temp-write and rename
        assert_eq!(s.list_steps().unwrap(), vec![0]);
        assert_eq!(bits(&s.restore(None).unwrap()), bits(&params(0)));
        drop(staged);
        assert!(!temp.exists());
        s.save(1, &params(1)).unwrap();
        assert_eq!(s.list_steps().unwrap(), vec![0, 1]);
    }

    #[test]
    fn concurrent_same_step_saves_one_wins() {
        let (_d, s) = store();
        let a = s.stage(7, &params(1)).unwrap();
        let b = s.stage(7, &params(2)).unwrap();
        let results = std::thread::scope(|scope| {
            let ha = scope.spawn(|| a.commit());
            let hb = scope.spawn(|| b.commit());
            [ha.join().unwrap(), hb.join().unwrap()]
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .any(|r| matches!(r, Err(Error::DuplicateStep { step: 7, .. }))));
        assert_eq!(s.list_steps().unwrap(), vec![7]);
    }

    #[test]
    fn concurrent_distinct_steps() {
        let (_d, s) = store();
        std::thread::scope(|scope| {
            for step in 0..8u64 {
                let s = &s;
                scope.spawn(move || s.save(step, &params(step)).unwrap());
            }
        });
        assert_eq!(s.list_steps().unwrap(), (0..8).collect::<Vec<_>>());
        for step in 0..8 {
            assert_eq!(bits(&s.restore(Some(step)).unwrap()), bits(&params(step)));
        }
    }
}

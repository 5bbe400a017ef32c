use std::path::Path;

use sha2::{Digest, Sha256};

use super::{io_err, DataError};

/// Magic prefix plus two-digit format version.
const MAGIC: &[u8; 8] = b"UMCKPT01";

/// One named tensor in the checkpoint, shape header included.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub values: Vec<f64>,
}

/// Format-level view of a training state: everything needed to resume
/// bitwise-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    /// JSON blob describing the run (categories, network config, schedule,
    /// weights, seed). Interpreted by the training layer.
    pub setup_json: String,
    pub params: Vec<NamedTensor>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Integrity {
                path: self.path.clone(),
                reason: format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, DataError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
    fn str(&mut self) -> Result<String, DataError> {
        let n = self.u64()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DataError::Integrity {
            path: self.path.clone(),
            reason: "invalid utf-8 in string field".into(),
        })
    }
}

/// Serializes a checkpoint: versioned header, per-tensor shape headers,
/// optimizer state, counters, RNG state, SHA-256 trailer.
pub fn save_checkpoint(data: &CheckpointData, path: &Path) -> Result<(), DataError> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.str(&data.setup_json);
    w.u64(data.params.len() as u64);
    for p in &data.params {
        w.str(&p.name);
        w.u64(p.rows);
        w.u64(p.cols);
        w.f64s(&p.values);
    }
    w.u64(data.adam_step);
    for m in &data.adam_m {
        w.f64s(m);
    }
    for v in &data.adam_v {
        w.f64s(v);
    }
    w.u64(data.iteration);
    w.bytes(&data.rng_seed);
    w.u64(data.rng_stream);
    w.u128(data.rng_word_pos);

    let digest = Sha256::digest(&w.buf);
    w.bytes(&digest);
    std::fs::write(path, &w.buf).map_err(|e| io_err(path, e))
}

/// Reads and verifies a checkpoint. Rejects wrong versions explicitly and
/// truncated or bit-flipped files via the length and checksum checks.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, DataError> {
    let raw = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    if raw.len() < MAGIC.len() + 32 {
        return Err(DataError::Integrity {
            path: display,
            reason: "file too short for header and checksum".into(),
        });
    }
    let (body, trailer) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(DataError::Integrity {
            path: display,
            reason: "checksum mismatch".into(),
        });
    }
    if &body[..6] != &MAGIC[..6] {
        return Err(DataError::Integrity {
            path: display,
            reason: "not a checkpoint file".into(),
        });
    }
    if &body[..8] != MAGIC {
        return Err(DataError::VersionMismatch {
            found: String::from_utf8_lossy(&body[6..8]).into_owned(),
            supported: String::from_utf8_lossy(&MAGIC[6..8]).into_owned(),
        });
    }

    let mut r = Reader {
        buf: body,
        pos: 8,
        path: display,
    };
    let setup_json = r.str()?;
    let n_params = r.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        let values = r.f64s((rows * cols) as usize)?;
        params.push(NamedTensor {
            name,
            rows,
            cols,
            values,
        });
    }
    let adam_step = r.u64()?;
    let mut adam_m = Vec::with_capacity(n_params);
    for p in &params {
        adam_m.push(r.f64s(p.values.len())?);
    }
    let mut adam_v = Vec::with_capacity(n_params);
    for p in &params {
        adam_v.push(r.f64s(p.values.len())?);
    }
    let iteration = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_stream = r.u64()?;
    let rng_word_pos = r.u128()?;
    if r.pos != body.len() {
        return Err(DataError::Integrity {
            path: r.path,
            reason: format!("{} trailing bytes", body.len() - r.pos),
        });
    }

    Ok(CheckpointData {
        setup_json,
        params,
        adam_step,
        adam_m,
        adam_v,
        iteration,
        rng_seed,
        rng_stream,
        rng_word_pos,
    })
}

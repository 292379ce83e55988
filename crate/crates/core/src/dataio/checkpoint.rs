//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "HSPLATCK"
//! version  u32
//! sections repeated: tag [u8; 4], length u64, payload
//! crc32    u32 over every preceding byte
//! ```
//!
//! Sections: `META` (iteration, rng seed/stream/word position), `CONF`
//! (training configuration JSON), `CLUD` (surfel arrays), `GRID` (hash grid),
//! `DECO` (decoder), `ADAM` (named optimizer states). Floats are stored as
//! raw `f64` bits, so a round trip is exact.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::field::{Adam, Decoder, HashGrid};
use crate::geometry::SurfelCloud;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSPLATCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iter: u64,
    pub config_json: String,
    pub cloud: SurfelCloud,
    pub grid: HashGrid,
    pub decoder: Decoder,
    pub optimizers: Vec<(String, Adam)>,
    pub rng: RngState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.bytes(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!("section {} is truncated", self.what)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() as u64 {
            return Err(Error::Checkpoint(format!("section {} declares {n} items past its end", self.what)));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} trailing bytes in section {}", self.buf.len(), self.what)))
        }
    }
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Writer::default();
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);

    let mut meta = Writer::default();
    meta.u64(ck.iter);
    meta.0.extend_from_slice(&ck.rng.seed);
    meta.u64(ck.rng.stream);
    meta.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    out.section(b"META", meta);

    let mut conf = Writer::default();
    conf.0.extend_from_slice(ck.config_json.as_bytes());
    out.section(b"CONF", conf);

    let c = &ck.cloud;
    let mut cloud = Writer::default();
    cloud.u64(c.latent_dim as u64);
    for v in [&c.positions, &c.rotations, &c.log_scales, &c.opacity_logits, &c.betas, &c.latents] {
        cloud.f64s(v);
    }
    out.section(b"CLUD", cloud);

    let g = &ck.grid;
    let mut grid = Writer::default();
    grid.u64(g.resolutions.len() as u64);
    g.resolutions.iter().for_each(|&r| grid.u32(r));
    grid.u64(g.table_size as u64);
    grid.u64(g.feat_dim as u64);
    for k in 0..3 {
        grid.f64(g.aabb_min[k]);
        grid.f64(g.aabb_max[k]);
    }
    grid.f64s(&g.table);
    out.section(b"GRID", grid);

    let mut deco = Writer::default();
    deco.u64(ck.decoder.widths().len() as u64);
    ck.decoder.widths().iter().for_each(|&w| deco.u64(w as u64));
    deco.f64s(&ck.decoder.params);
    out.section(b"DECO", deco);

    let mut adam = Writer::default();
    adam.u64(ck.optimizers.len() as u64);
    for (name, a) in &ck.optimizers {
        adam.bytes(name.as_bytes());
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            adam.f64(v);
        }
        adam.u64(a.step);
        adam.f64s(&a.m);
        adam.f64s(&a.v);
    }
    out.section(b"ADAM", adam);

    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    if crc32fast::hash(body) != u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes")) {
        return Err(Error::Checksum);
    }

    let mut top = Reader { buf: &body[12..], what: "header" };
    let mut sections = std::collections::HashMap::new();
    while !top.buf.is_empty() {
        let tag: [u8; 4] = top.take(4)?.try_into().expect("4 bytes");
        let payload = top.bytes()?;
        sections.insert(tag, payload);
    }
    let section = |tag: &[u8; 4], what: &'static str| -> Result<Reader> {
        sections
            .get(tag)
            .map(|buf| Reader { buf, what })
            .ok_or_else(|| Error::Checkpoint(format!("missing section {what}")))
    };

    let mut r = section(b"META", "META")?;
    let iter = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.finish()?;

    let r = section(b"CONF", "CONF")?;
    let config_json = String::from_utf8(r.buf.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;

    let mut r = section(b"CLUD", "CLUD")?;
    let latent_dim = r.u64()? as usize;
    let cloud = SurfelCloud {
        latent_dim,
        positions: r.f64s()?,
        rotations: r.f64s()?,
        log_scales: r.f64s()?,
        opacity_logits: r.f64s()?,
        betas: r.f64s()?,
        latents: r.f64s()?,
    };
    r.finish()?;
    cloud.validate()?;

    let mut r = section(b"GRID", "GRID")?;
    let levels = r.len()?;
    let resolutions = (0..levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let table_size = r.u64()? as usize;
    let feat_dim = r.u64()? as usize;
    let (mut lo, mut hi) = (Vector3::zeros(), Vector3::zeros());
    for k in 0..3 {
        lo[k] = r.f64()?;
        hi[k] = r.f64()?;
    }
    let grid = HashGrid { resolutions, table_size, feat_dim, table: r.f64s()?, aabb_min: lo, aabb_max: hi };
    r.finish()?;
    grid.validate()?;

    let mut r = section(b"DECO", "DECO")?;
    let n = r.len()?;
    let widths = (0..n).map(|_| r.u64().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let decoder = Decoder::from_params(&widths, r.f64s()?)?;
    r.finish()?;

    let mut r = section(b"ADAM", "ADAM")?;
    let n = r.len()?;
    let mut optimizers = Vec::with_capacity(n);
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("bad optimizer name".into()))?;
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() {
            return Err(Error::Checkpoint(format!("optimizer {name} has mismatched moments")));
        }
        optimizers.push((name, Adam { lr, beta1, beta2, eps, m, v, step }));
    }
    r.finish()?;

    Ok(Checkpoint { iter, config_json, cloud, grid, decoder, optimizers, rng: RngState { seed, stream, word_pos } })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

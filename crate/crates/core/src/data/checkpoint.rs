//! Binary checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, arch TOML, width-config TOML,
//! `u64` seed, parameter blobs in declaration order (`name`, `u32` count,
//! `f32` values), per-layer BN statistics keyed by width, then the training
//! log tail. Strings are `u32` length + UTF-8.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchSpec;
use crate::nn::{RunningStats, SlimmableNet};
use crate::width::WidthConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"USNETCKP";
pub const VERSION: u32 = 1;

/// Everything in a checkpoint besides the network itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub log_tail: Vec<String>,
}

type Le = LittleEndian;

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<Le>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_f32::<Le>(*x)?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, net: &SlimmableNet, meta: &CheckpointMeta) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<Le>(VERSION)?;
    put_str(w, &net.arch().to_toml())?;
    let cfg = toml::to_string(net.width_config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_str(w, &cfg)?;
    w.write_u64::<Le>(meta.seed)?;

    let params = net.parameters();
    w.write_u32::<Le>(params.len() as u32)?;
    for p in &params {
        put_str(w, p.name().unwrap_or(""))?;
        w.write_u32::<Le>(p.numel() as u32)?;
        put_f32s(w, &p.data())?;
    }

    let bns: Vec<_> = net.batch_norms().collect();
    w.write_u32::<Le>(bns.len() as u32)?;
    for (_, bn) in bns {
        put_str(w, &bn.name)?;
        w.write_u32::<Le>(bn.all_stats().len() as u32)?;
        for (&width, s) in bn.all_stats() {
            w.write_u32::<Le>(width as u32)?;
            put_f32s(w, &s.mean)?;
            put_f32s(w, &s.var)?;
        }
    }

    w.write_u32::<Le>(meta.log_tail.len() as u32)?;
    for line in &meta.log_tail {
        put_str(w, line)?;
    }
    Ok(())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn truncated(&self, what: &str) -> Error {
        Error::Checkpoint(format!(
            "truncated while reading {what} at byte {}",
            self.cur.position()
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.cur.read_u32::<Le>().map_err(|_| self.truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.cur.read_u64::<Le>().map_err(|_| self.truncated(what))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64) * 4 > remaining {
            return Err(self.truncated(what));
        }
        let mut v = vec![0.0f32; n];
        self.cur.read_f32_into::<Le>(&mut v).map_err(|_| self.truncated(what))?;
        Ok(v)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n as u64 > remaining {
            return Err(self.truncated(what));
        }
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.truncated(what))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every section is intact.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(SlimmableNet, CheckpointMeta)> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    let mut magic = [0u8; 8];
    r.cur.read_exact(&mut magic).map_err(|_| r.truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let arch = ArchSpec::from_toml(&r.string("architecture")?)?;
    let cfg: WidthConfig =
        toml::from_str(&r.string("width config")?).map_err(|e| Error::Checkpoint(format!("width config: {e}")))?;
    let seed = r.u64("seed")?;

    // weights are overwritten below; the init stream does not matter
    let mut net = SlimmableNet::new(arch, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = net.parameters();
    let n = r.u32("parameter count")? as usize;
    if n != params.len() {
        return Err(Error::Checkpoint(format!(
            "{n} parameter blobs for {} parameters",
            params.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for p in &params {
        let expected = p.name().unwrap_or("").to_string();
        let name = r.string("parameter name")?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "blob `{name}` where `{expected}` was expected"
            )));
        }
        let len = r.u32(&name)? as usize;
        if len != p.numel() {
            return Err(Error::Checkpoint(format!(
                "blob for `{name}` holds {len} values, architecture needs {}",
                p.numel()
            )));
        }
        values.push(r.f32s(len, &name)?);
    }

    let bn_names: Vec<String> = net.batch_norms().map(|(_, bn)| bn.name.clone()).collect();
    let nb = r.u32("batch-norm count")? as usize;
    if nb != bn_names.len() {
        return Err(Error::Checkpoint(format!(
            "{nb} statistics blocks for {} batch norms",
            bn_names.len()
        )));
    }
    let mut stats = Vec::with_capacity(nb);
    for expected in &bn_names {
        let name = r.string("batch-norm name")?;
        if &name != expected {
            return Err(Error::Checkpoint(format!(
                "statistics for `{name}` where `{expected}` was expected"
            )));
        }
        let widths = r.u32(&name)? as usize;
        let mut per = Vec::with_capacity(widths);
        for _ in 0..widths {
            let w = r.u32(&name)? as usize;
            let mean = r.f32s(w, &name)?;
            let var = r.f32s(w, &name)?;
            per.push((w, RunningStats { mean, var }));
        }
        stats.push(per);
    }

    let lines = r.u32("log tail")? as usize;
    let log_tail = (0..lines).map(|_| r.string("log line")).collect::<Result<Vec<_>>>()?;
    if r.cur.position() != bytes.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the log tail",
            bytes.len() as u64 - r.cur.position()
        )));
    }

    for (p, v) in params.iter().zip(values) {
        p.data_mut().copy_from_slice(&v);
    }
    for ((_, bn), per) in net.batch_norms_mut().zip(stats) {
        for (w, s) in per {
            bn.set_stats(w, s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
    }
    Ok((net, CheckpointMeta { seed, log_tail }))
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &SlimmableNet, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net, meta)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SlimmableNet, CheckpointMeta)> {
    read_checkpoint(&fs::read(path)?)
}

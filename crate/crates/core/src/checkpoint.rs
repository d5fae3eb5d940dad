//! Single-file checkpoints of an [`EngineState`].
//!
//! Layout: magic `UCCK`, `u32` version, `u32` section count, then named
//! sections (`u32` name length, name, `u64` payload length, payload), then an
//! FNV-1a 64 checksum of everything before it. All integers and floats are
//! little-endian; parameters are stored as `f64` so a reload continues
//! bit-identically. The config section holds canonical TOML, the history and
//! report sections JSON, the rest binary arrays.
//!
//! No generator state is stored: every random draw is keyed by the run seed
//! and its position (task, epoch, batch), which the state already encodes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassCenters, Mlp, Projector};
use crate::config::{MemoryStrategy, TrainConfig};
use crate::error::{Error, Result};
use crate::memory::{ExemplarMemory, Memory, PrototypeMemory, ProtoStat};
use crate::optim::AdamState;
use crate::trainer::{EngineState, EpochRecord};
use crate::eval::SessionReport;

pub const MAGIC: [u8; 4] = *b"UCCK";
pub const VERSION: u32 = 1;

const RNG_SCHEME: &str = "chacha8, seeds derived from (run seed, stream tag, task, epoch, batch)";

#[derive(Serialize, Deserialize)]
struct Meta {
    dim: usize,
    sessions: usize,
    rng: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.write_u64::<LE>(x).expect("vec write");
    }
    fn f64(&mut self, x: f64) {
        self.0.write_f64::<LE>(x).expect("vec write");
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
    fn mat(&mut self, a: &Array2<f64>) {
        self.u64(a.nrows() as u64);
        self.u64(a.ncols() as u64);
        for &x in a {
            self.f64(x);
        }
    }
    fn adam(&mut self, s: &AdamState) {
        self.f64s(&s.m);
        self.f64s(&s.v);
        self.u64(s.step);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    section: &'static str,
}

impl Dec<'_> {
    fn bad(&self, what: &str) -> String {
        format!("section `{}`: {what}", self.section)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        self.buf.read_u8().map_err(|_| self.bad("unexpected end"))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        self.buf.read_u64::<LE>().map_err(|_| self.bad("unexpected end"))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        // Each element needs at least 8 bytes; reject absurd lengths before allocating.
        if n > (self.buf.len() / 8) as u64 {
            return Err(self.bad("length exceeds payload"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        self.buf.read_f64::<LE>().map_err(|_| self.bad("unexpected end"))
    }
    fn f64s(&mut self) -> std::result::Result<Vec<f64>, String> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn mat(&mut self) -> std::result::Result<Array2<f64>, String> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let count = r.checked_mul(c).filter(|&k| k <= self.buf.len() / 8);
        let Some(count) = count else {
            return Err(self.bad("matrix shape exceeds payload"));
        };
        let data = (0..count).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
    }
    fn adam(&mut self) -> std::result::Result<AdamState, String> {
        let m = self.f64s()?;
        let v = self.f64s()?;
        let step = self.u64()?;
        if m.len() != v.len() {
            return Err(self.bad("moment lengths differ"));
        }
        Ok(AdamState { m, v, step })
    }
    fn finish(&self) -> std::result::Result<(), String> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.bad("trailing bytes"))
        }
    }
}

fn encode_projector(p: &Projector) -> Vec<u8> {
    let mut e = Enc::default();
    match p {
        Projector::Identity { dim } => {
            e.u8(0);
            e.u64(*dim as u64);
        }
        Projector::Mlp(m) => {
            e.u8(1);
            e.mat(&m.w1);
            e.f64s(m.b1.as_slice().expect("standard layout"));
            e.mat(&m.w2);
            e.f64s(m.b2.as_slice().expect("standard layout"));
        }
    }
    e.0
}

fn decode_projector(mut d: Dec<'_>) -> std::result::Result<Projector, String> {
    let p = match d.u8()? {
        0 => Projector::Identity { dim: d.u64()? as usize },
        1 => {
            let w1 = d.mat()?;
            let b1 = Array1::from(d.f64s()?);
            let w2 = d.mat()?;
            let b2 = Array1::from(d.f64s()?);
            if b1.len() != w1.nrows() || w2.ncols() != w1.nrows() || b2.len() != w2.nrows() {
                return Err(d.bad("inconsistent layer shapes"));
            }
            Projector::Mlp(Mlp { w1, b1, w2, b2 })
        }
        k => return Err(d.bad(&format!("unknown projector kind {k}"))),
    };
    d.finish()?;
    Ok(p)
}

fn encode_centers(c: &ClassCenters) -> Vec<u8> {
    let mut e = Enc::default();
    e.f64(c.tau);
    e.u64(c.blocks.len() as u64);
    for b in &c.blocks {
        e.mat(b);
    }
    e.0
}

fn decode_centers(mut d: Dec<'_>) -> std::result::Result<ClassCenters, String> {
    let tau = d.f64()?;
    let n = d.len()?;
    let blocks = (0..n).map(|_| d.mat()).collect::<std::result::Result<Vec<_>, _>>()?;
    d.finish()?;
    Ok(ClassCenters { blocks, tau })
}

fn encode_memory(m: &Memory) -> Vec<u8> {
    let mut e = Enc::default();
    match m {
        Memory::Prototypes(p) => {
            e.u8(0);
            e.u64(p.stats.len() as u64);
            for s in &p.stats {
                e.u64(s.task as u64);
                e.u64(s.class as u64);
                e.u64(s.count);
                e.f64(s.purity);
                e.f64s(&s.mean);
                e.f64s(&s.var);
            }
        }
        Memory::Exemplars(x) => {
            e.u8(1);
            e.u64(x.per_class as u64);
            e.u64(x.classes.len() as u64);
            for (&class, a) in &x.classes {
                e.u64(class as u64);
                e.mat(a);
            }
        }
    }
    e.0
}

fn decode_memory(mut d: Dec<'_>) -> std::result::Result<Memory, String> {
    let m = match d.u8()? {
        0 => {
            let n = d.len()?;
            let mut stats = Vec::with_capacity(n);
            for _ in 0..n {
                let task = d.u64()? as usize;
                let class = d.u64()? as usize;
                let count = d.u64()?;
                let purity = d.f64()?;
                let mean = d.f64s()?;
                let var = d.f64s()?;
                if !(0.0..=1.0).contains(&purity) || count == 0 {
                    return Err(d.bad("prototype record out of range"));
                }
                stats.push(ProtoStat {
                    task,
                    class,
                    count,
                    purity,
                    mean,
                    var,
                });
            }
            Memory::Prototypes(PrototypeMemory { stats })
        }
        1 => {
            let per_class = d.u64()? as usize;
            let n = d.len()?;
            let mut classes = BTreeMap::new();
            for _ in 0..n {
                let class = d.u64()? as usize;
                classes.insert(class, d.mat()?);
            }
            Memory::Exemplars(ExemplarMemory { per_class, classes })
        }
        k => return Err(d.bad(&format!("unknown memory kind {k}"))),
    };
    d.finish()?;
    Ok(m)
}

fn encode_moments(s: &EngineState) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(s.projector_moments.len() as u64);
    for m in &s.projector_moments {
        e.adam(m);
    }
    e.u64(s.center_moments.len() as u64);
    for m in &s.center_moments {
        e.adam(m);
    }
    e.0
}

fn decode_moments(mut d: Dec<'_>) -> std::result::Result<(Vec<AdamState>, Vec<AdamState>), String> {
    let np = d.len()?;
    let proj = (0..np).map(|_| d.adam()).collect::<std::result::Result<Vec<_>, _>>()?;
    let nc = d.len()?;
    let cen = (0..nc).map(|_| d.adam()).collect::<std::result::Result<Vec<_>, _>>()?;
    d.finish()?;
    Ok((proj, cen))
}

/// Serializes `state` into the container format.
pub fn encode(state: &EngineState) -> Vec<u8> {
    let meta = Meta {
        dim: state.dim,
        sessions: state.sessions(),
        rng: RNG_SCHEME.to_string(),
    };
    let sections: Vec<(&str, Vec<u8>)> = vec![
        ("config", state.config.to_toml().into_bytes()),
        ("meta", serde_json::to_vec(&meta).expect("meta serializes")),
        ("projector", encode_projector(&state.projector)),
        ("centers", encode_centers(&state.centers)),
        ("memory", encode_memory(&state.memory)),
        ("moments", encode_moments(state)),
        ("history", serde_json::to_vec(&state.history).expect("history serializes")),
        ("reports", serde_json::to_vec(&state.reports).expect("reports serialize")),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LE>(VERSION).expect("vec write");
    out.write_u32::<LE>(sections.len() as u32).expect("vec write");
    for (name, payload) in &sections {
        out.write_u32::<LE>(name.len() as u32).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        out.write_u64::<LE>(payload.len() as u64).expect("vec write");
        out.extend_from_slice(payload);
    }
    let sum = fnv1a(&out);
    out.write_u64::<LE>(sum).expect("vec write");
    out
}

/// Parses a container produced by [`encode`]; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<EngineState> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let k = bytes.len().min(4);
        found[..k].copy_from_slice(&bytes[..k]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: MAGIC,
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 20,
            actual: bytes.len() as u64,
        });
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LE>().expect("length checked");
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = (&tail[..]).read_u64::<LE>().expect("eight bytes");
    if stored != fnv1a(body) {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut r = &body[8..];
    let count = r.read_u32::<LE>().map_err(|_| corrupt("missing section count".into()))?;
    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.read_u32::<LE>().map_err(|_| corrupt("truncated section header".into()))? as usize;
        if r.len() < nlen {
            return Err(corrupt("truncated section name".into()));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).expect("length checked");
        let name = String::from_utf8(name).map_err(|_| corrupt("section name is not UTF-8".into()))?;
        let plen = r.read_u64::<LE>().map_err(|_| corrupt("truncated section header".into()))?;
        if (r.len() as u64) < plen {
            return Err(corrupt(format!("section `{name}` truncated")));
        }
        let (payload, rest) = r.split_at(plen as usize);
        r = rest;
        sections.insert(name, payload);
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes after sections".into()));
    }
    let get = |name: &'static str| {
        sections
            .get(name)
            .copied()
            .ok_or_else(|| corrupt(format!("missing section `{name}`")))
    };
    let dec = |name: &'static str| get(name).map(|buf| Dec { buf, section: name });

    let config_text = std::str::from_utf8(get("config")?).map_err(|_| corrupt("config is not UTF-8".into()))?;
    let config = TrainConfig::from_toml(config_text).map_err(|e| corrupt(e.to_string()))?;
    let meta: Meta = serde_json::from_slice(get("meta")?).map_err(|e| corrupt(format!("meta: {e}")))?;
    let projector = decode_projector(dec("projector")?).map_err(corrupt)?;
    let centers = decode_centers(dec("centers")?).map_err(corrupt)?;
    let memory = decode_memory(dec("memory")?).map_err(corrupt)?;
    let (projector_moments, center_moments) = decode_moments(dec("moments")?).map_err(corrupt)?;
    let history: Vec<EpochRecord> =
        serde_json::from_slice(get("history")?).map_err(|e| corrupt(format!("history: {e}")))?;
    let reports: Vec<SessionReport> =
        serde_json::from_slice(get("reports")?).map_err(|e| corrupt(format!("reports: {e}")))?;

    let state = EngineState {
        config,
        dim: meta.dim,
        projector,
        centers,
        memory,
        projector_moments,
        center_moments,
        history,
        reports,
    };
    check_consistency(&state, meta.sessions).map_err(corrupt)?;
    Ok(state)
}

fn check_consistency(s: &EngineState, sessions: usize) -> std::result::Result<(), String> {
    let cfg = &s.config;
    if s.sessions() != sessions || s.reports.len() != sessions {
        return Err(format!(
            "session count disagrees: meta {sessions}, centers {}, reports {}",
            s.sessions(),
            s.reports.len()
        ));
    }
    if s.projector.input_dim() != s.dim {
        return Err("projector input does not match feature dimension".into());
    }
    match (&s.projector, cfg.use_projector) {
        (Projector::Mlp(m), true) => {
            let want = [m.w1.len(), m.b1.len(), m.w2.len(), m.b2.len()];
            let got: Vec<usize> = s.projector_moments.iter().map(AdamState::len).collect();
            if got != want {
                return Err("projector moments do not match projector".into());
            }
        }
        (Projector::Identity { .. }, false) if s.projector_moments.is_empty() => {}
        _ => return Err("projector kind does not match config".into()),
    }
    let m = s.projector.output_dim();
    if s.centers.blocks.iter().any(|b| b.ncols() != m) {
        return Err("center width does not match projector output".into());
    }
    if s.center_moments.len() != s.centers.blocks.len()
        || s.center_moments.iter().zip(&s.centers.blocks).any(|(a, b)| a.len() != b.len())
    {
        return Err("center moments do not match centers".into());
    }
    let total = s.centers.total();
    match (&s.memory, cfg.memory) {
        (Memory::Prototypes(p), MemoryStrategy::Proto) => {
            for st in &p.stats {
                let var_ok = st.var.len() == s.dim || st.var.len() == 1;
                if st.mean.len() != s.dim || !var_ok || st.class >= total {
                    return Err("prototype record does not fit the model".into());
                }
            }
        }
        (Memory::Exemplars(x), MemoryStrategy::Exemplar(k)) if x.per_class == k => {
            if x.classes.iter().any(|(&c, a)| c >= total || a.ncols() != s.dim) {
                return Err("exemplar record does not fit the model".into());
            }
        }
        _ => return Err("memory kind does not match config".into()),
    }
    Ok(())
}

/// Writes `state` to `path` atomically (temporary file, then rename).
pub fn save(state: &EngineState, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<EngineState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

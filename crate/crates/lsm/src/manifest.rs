//! Log of version edits. Each reopen writes a fresh manifest whose first
//! record is a snapshot of the whole file set.

use std::collections::BTreeMap;
use std::sync::Arc;

use tierkv_core::{IoContext, OpenFlags, TieredFs};

use crate::error::{Error, Result};
use crate::format::{frame, put_bytes, put_u32, put_u64, unframe, Decoder};
use crate::sst::SstMeta;

pub const MANIFEST_PREFIX: &str = "MANIFEST-";

pub fn manifest_name(number: u64) -> String {
    format!("{MANIFEST_PREFIX}{number:06}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Edit {
    pub log_number: Option<u64>,
    pub next_file: Option<u64>,
    pub last_seq: Option<u64>,
    pub deleted: Vec<(u32, u64)>,
    pub added: Vec<SstMeta>,
}

fn put_opt(out: &mut Vec<u8>, v: Option<u64>) {
    match v {
        Some(v) => {
            out.push(1);
            put_u64(out, v);
        }
        None => out.push(0),
    }
}

fn get_opt(d: &mut Decoder<'_>) -> Option<Option<u64>> {
    match d.u8()? {
        0 => Some(None),
        1 => Some(Some(d.u64()?)),
        _ => None,
    }
}

impl Edit {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        put_opt(&mut b, self.log_number);
        put_opt(&mut b, self.next_file);
        put_opt(&mut b, self.last_seq);
        put_u32(&mut b, self.deleted.len() as u32);
        for (l, n) in &self.deleted {
            put_u32(&mut b, *l);
            put_u64(&mut b, *n);
        }
        put_u32(&mut b, self.added.len() as u32);
        for m in &self.added {
            put_u64(&mut b, m.number);
            put_u32(&mut b, m.level);
            put_bytes(&mut b, &m.min_key);
            put_bytes(&mut b, &m.max_key);
            put_u64(&mut b, m.entries);
            put_u64(&mut b, m.size);
        }
        b
    }

    pub fn decode(buf: &[u8]) -> Option<Self> {
        let mut d = Decoder::new(buf);
        let mut e = Edit {
            log_number: get_opt(&mut d)?,
            next_file: get_opt(&mut d)?,
            last_seq: get_opt(&mut d)?,
            ..Default::default()
        };
        for _ in 0..d.u32()? {
            e.deleted.push((d.u32()?, d.u64()?));
        }
        for _ in 0..d.u32()? {
            e.added.push(SstMeta {
                number: d.u64()?,
                level: d.u32()?,
                min_key: d.bytes()?.to_vec(),
                max_key: d.bytes()?.to_vec(),
                entries: d.u64()?,
                size: d.u64()?,
            });
        }
        d.is_empty().then_some(e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestState {
    pub log_number: u64,
    pub next_file: u64,
    pub last_seq: u64,
    pub files: BTreeMap<u64, SstMeta>,
}

impl ManifestState {
    pub fn apply(&mut self, e: &Edit) {
        if let Some(v) = e.log_number {
            self.log_number = self.log_number.max(v);
        }
        if let Some(v) = e.next_file {
            self.next_file = self.next_file.max(v);
        }
        if let Some(v) = e.last_seq {
            self.last_seq = self.last_seq.max(v);
        }
        for (_, n) in &e.deleted {
            self.files.remove(n);
        }
        for m in &e.added {
            self.files.insert(m.number, m.clone());
        }
    }

    fn snapshot(&self) -> Edit {
        Edit {
            log_number: Some(self.log_number),
            next_file: Some(self.next_file),
            last_seq: Some(self.last_seq),
            deleted: Vec::new(),
            added: self.files.values().cloned().collect(),
        }
    }
}

pub struct Manifest {
    fs: Arc<TieredFs>,
    fd: u64,
}

impl Manifest {
    /// Writes a new manifest holding `state` and syncs it.
    pub fn create(fs: Arc<TieredFs>, number: u64, state: &ManifestState) -> Result<Self> {
        let fd = fs.open(&manifest_name(number), OpenFlags::CREATE, Some(IoContext::WalWrite))?;
        let m = Manifest { fs, fd };
        m.append(&state.snapshot())?;
        Ok(m)
    }

    pub fn append(&self, edit: &Edit) -> Result<()> {
        let _ctx = tierkv_core::scoped(IoContext::WalWrite);
        self.fs.append(self.fd, &frame(&edit.encode()))?;
        self.fs.fsync(self.fd)?;
        Ok(())
    }

    /// Newest manifest whose snapshot record is intact. Edits after a torn
    /// record are ignored.
    pub fn load(fs: &TieredFs) -> Result<Option<(u64, ManifestState)>> {
        let mut numbers: Vec<u64> = fs
            .list()
            .iter()
            .filter_map(|n| n.strip_prefix(MANIFEST_PREFIX)?.parse().ok())
            .collect();
        numbers.sort_unstable_by(|a, b| b.cmp(a));
        for n in numbers {
            let name = manifest_name(n);
            let buf = read_file(fs, &name)?;
            let (recs, clean) = unframe(&buf);
            let mut edits = recs.iter().map(|r| Edit::decode(r));
            let Some(Some(first)) = edits.next() else {
                tracing::warn!(%name, "manifest has no intact snapshot");
                continue;
            };
            let mut st = ManifestState::default();
            st.apply(&first);
            for e in edits {
                match e {
                    Some(e) => st.apply(&e),
                    None => return Err(Error::corrupt(&name, "undecodable edit")),
                }
            }
            if !clean {
                tracing::warn!(%name, "ignoring torn manifest tail");
            }
            return Ok(Some((n, st)));
        }
        Ok(None)
    }
}

impl Drop for Manifest {
    fn drop(&mut self) {
        let _ = self.fs.close(self.fd);
    }
}

pub(crate) fn read_file(fs: &TieredFs, name: &str) -> Result<Vec<u8>> {
    let fd = fs.open(name, OpenFlags::READ, None)?;
    let r = fs.size(name).and_then(|n| fs.read(fd, 0, n as usize));
    let _ = fs.close(fd);
    Ok(r?)
}

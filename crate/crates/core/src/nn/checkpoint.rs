//! `GMVC` checkpoint archive.
//!
//! Layout (all integers little-endian):
//! `"GMVC"`, u32 version, u32 record count, then per record
//! u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f32 payload.
//! Optimizer moments live under `adam.m/<param>` and `adam.v/<param>`; the
//! step counter is the single-element record `adam.t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::adam::Adam;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GMVC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: IndexMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_state(store: &ParamStore<f32>, opt: Option<&Adam<f32>>) -> Self {
        let mut records = IndexMap::new();
        for (name, p) in store.iter() {
            records.insert(name.to_string(), (p.shape.clone(), p.value.clone()));
        }
        if let Some(opt) = opt {
            for (name, m) in &opt.m {
                let shape = store.get(name).map(|p| p.shape.clone()).unwrap_or(vec![m.len()]);
                records.insert(format!("adam.m/{name}"), (shape.clone(), m.clone()));
                if let Some(v) = opt.v.get(name) {
                    records.insert(format!("adam.v/{name}"), (shape, v.clone()));
                }
            }
            records.insert("adam.t".into(), (vec![1], vec![opt.t as f32]));
        }
        Self { records }
    }

    /// Copy stored values into `store` (names and shapes must match exactly)
    /// and, when present, restore optimizer state into `opt`.
    pub fn restore(&self, store: &mut ParamStore<f32>, opt: Option<&mut Adam<f32>>) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            let (shape, data) = self
                .records
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks `{name}`")))?;
            let p = store.get_mut(name).expect("name from store");
            if &p.shape != shape {
                return Err(Error::InvalidInput(format!(
                    "checkpoint shape {shape:?} for `{name}` does not match model {:?}",
                    p.shape
                )));
            }
            p.value.copy_from_slice(data);
        }
        if let Some(opt) = opt {
            opt.m.clear();
            opt.v.clear();
            for name in &names {
                if let Some((_, m)) = self.records.get(&format!("adam.m/{name}")) {
                    opt.m.insert(name.clone(), m.clone());
                }
                if let Some((_, v)) = self.records.get(&format!("adam.v/{name}")) {
                    opt.v.insert(name.clone(), v.clone());
                }
            }
            opt.t = self.records.get("adam.t").map(|(_, d)| d[0] as u64).unwrap_or(0);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))?;
        let mut records = IndexMap::new();
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { records })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Write through a temporary sibling file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{xavier_init, Init};

    #[test]
    fn roundtrip_is_bit_exact_with_optimizer_state() {
        let mut s = ParamStore::<f32>::new(5);
        s.register("a.w", &[3, 2], Init::Xavier { fan_in: 3, fan_out: 2 }, true).unwrap();
        s.register("a.running_var", &[2], Init::Const(1.0), false).unwrap();
        xavier_init(&mut s);
        let mut opt = Adam::new(1e-3);
        s.get_mut("a.w").unwrap().grad = vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0];
        opt.step(&mut s);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gmvc");
        let ck = Checkpoint::from_state(&s, Some(&opt));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);

        let mut s2 = ParamStore::<f32>::new(99);
        s2.register("a.w", &[3, 2], Init::Xavier { fan_in: 3, fan_out: 2 }, true).unwrap();
        s2.register("a.running_var", &[2], Init::Const(1.0), false).unwrap();
        let mut opt2 = Adam::new(1e-3);
        back.restore(&mut s2, Some(&mut opt2)).unwrap();
        for ((_, p), (_, q)) in s.iter().zip(s2.iter()) {
            let a: Vec<u32> = p.value.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(opt2.t, 1);
        assert_eq!(opt2.first_moment("a.w"), opt.first_moment("a.w"));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0", p).is_err());
        let mut ck = Checkpoint::default();
        ck.records.insert("w".into(), (vec![2], vec![1.0, 2.0]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), ck);
    }
}

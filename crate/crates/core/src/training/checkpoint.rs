//! Binary checkpoint container.
//!
//! ```text
//! "CCKP"  version:u32  count:u32
//! count x { name_len:u32 name:utf8  dtype:u8  rank:u8  dims:u32 x rank  payload }
//! echo_len:u32 echo:utf8
//! ```
//!
//! All integers are little endian. `dtype` 0 is `f32` and 1 is `f64`. Model
//! weights are stored as `f32`; the optional resume state (exact weights,
//! optimizer moments, log history) is stored as `f64` under [`RESUME_PREFIX`].
//! The echo starts with `phase`, `epoch` and `rng_state` lines followed by the
//! run configuration.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use crate::autodiff::{Array, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const RESUME_PREFIX: &str = "@resume/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// State needed to continue a phase exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    /// Full-precision weights.
    pub params: ParamSet,
    pub adam: AdamState,
    /// Logged rows so far, one numeric row per epoch.
    pub log: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    /// Epochs completed.
    pub epoch: usize,
    pub rng_state: u64,
    /// Run configuration text (`key=value` lines).
    pub config: String,
    /// Weights as stored, i.e. rounded to `f32`.
    pub params: ParamSet,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn new(phase: impl Into<String>, epoch: usize, rng_state: u64, config: impl Into<String>, params: &ParamSet) -> Self {
        Self { phase: phase.into(), epoch, rng_state, config: config.into(), params: params.to_f32_precision(), resume: None }
    }

    fn echo(&self) -> String {
        format!("phase={}\nepoch={}\nrng_state={}\n{}", self.phase, self.epoch, self.rng_state, self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Array, DType)> = self.params.iter().map(|(k, v)| (k.to_string(), v, DType::F32)).collect();
        if let Some(r) = &self.resume {
            for (k, v) in r.params.iter() {
                entries.push((format!("{RESUME_PREFIX}param/{k}"), v, DType::F64));
            }
            for (k, v) in r.adam.m.iter() {
                entries.push((format!("{RESUME_PREFIX}adam_m/{k}"), v, DType::F64));
            }
            for (k, v) in r.adam.v.iter() {
                entries.push((format!("{RESUME_PREFIX}adam_v/{k}"), v, DType::F64));
            }
            entries.push((format!("{RESUME_PREFIX}log"), &r.log, DType::F64));
        }
        let t = self.resume.as_ref().map(|r| Array::scalar(r.adam.t as f64));
        if let Some(t) = &t {
            entries.push((format!("{RESUME_PREFIX}adam_t"), t, DType::F64));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, a, dt) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dt as u8);
            out.push(a.rank() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match dt {
                DType::F32 => a.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => a.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let echo = self.echo();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::parse("byte 0", "bad magic (not a checkpoint)"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(format!("byte {at}"), format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut extra = ParamSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::parse(format!("byte {}", at + 4), "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let dt = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::parse(format!("byte {at}"), format!("unknown dtype {d}"))),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data: Vec<f64> = match dt {
                DType::F32 => r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let a = Array::new(shape, data).map_err(|e| Error::parse(format!("byte {at}"), e.to_string()))?;
            if name.starts_with(RESUME_PREFIX) {
                extra.insert(name, a);
            } else {
                params.insert(name, a);
            }
        }
        let at = r.pos;
        let len = r.u32()? as usize;
        let echo = std::str::from_utf8(r.take(len)?).map_err(|_| Error::parse(format!("byte {}", at + 4), "echo is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::parse(format!("byte {}", r.pos), "trailing bytes after echo"));
        }
        let (phase, epoch, rng_state, config) = parse_echo(echo).map_err(|m| Error::parse(format!("byte {}", at + 4), m))?;
        let resume = if extra.is_empty() { None } else { Some(split_resume(extra)?) };
        Ok(Checkpoint { phase, epoch, rng_state, config, params, resume })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_echo(echo: &str) -> std::result::Result<(String, usize, u64, String), String> {
    let mut lines = echo.splitn(4, '\n');
    let mut field = |key: &str| -> std::result::Result<String, String> {
        let line = lines.next().ok_or_else(|| format!("echo is missing `{key}`"))?;
        line.strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .map(String::from)
            .ok_or_else(|| format!("echo expected `{key}=`, found `{line}`"))
    };
    let phase = field("phase")?;
    let epoch = field("epoch")?.parse().map_err(|_| "echo has an invalid epoch".to_string())?;
    let rng = field("rng_state")?.parse().map_err(|_| "echo has an invalid rng_state".to_string())?;
    Ok((phase, epoch, rng, lines.next().unwrap_or("").to_string()))
}

fn split_resume(extra: ParamSet) -> Result<ResumeState> {
    let mut params = ParamSet::new();
    let mut adam = AdamState::default();
    let mut log = None;
    for (k, v) in extra.iter() {
        let rest = &k[RESUME_PREFIX.len()..];
        if let Some(n) = rest.strip_prefix("param/") {
            params.insert(n, v.clone());
        } else if let Some(n) = rest.strip_prefix("adam_m/") {
            adam.m.insert(n, v.clone());
        } else if let Some(n) = rest.strip_prefix("adam_v/") {
            adam.v.insert(n, v.clone());
        } else if rest == "adam_t" {
            adam.t = v.item() as u64;
        } else if rest == "log" {
            log = Some(v.clone());
        } else {
            return Err(Error::parse("resume state", format!("unknown entry `{k}`")));
        }
    }
    let log = log.ok_or_else(|| Error::parse("resume state", "missing log history"))?;
    Ok(ResumeState { params, adam, log })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(format!("byte {}", self.pos), format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.insert("main.a", Array::matrix(2, 3, vec![0.1, -2.5, 3.0, 1e-9, 7.25, -0.3333]).unwrap());
        ps.insert("main.b", Array::scalar(std::f64::consts::PI));
        Checkpoint::new("baseline", 3, 42, "epochs=5\n", &ps)
    }

    #[test]
    fn round_trip_is_exact_in_f32() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.get("main.b").unwrap().item(), std::f32::consts::PI as f64);
    }

    #[test]
    fn resume_state_keeps_f64() {
        let mut c = sample();
        let mut exact = ParamSet::new();
        exact.insert("main.b", Array::scalar(std::f64::consts::PI));
        let mut adam = AdamState::zeros_like(&exact);
        adam.t = 17;
        adam.v.get_mut("main.b").unwrap().data_mut()[0] = 1e-300;
        c.resume = Some(ResumeState { params: exact, adam, log: Array::matrix(1, 2, vec![0.5, 1.0 / 3.0]).unwrap() });
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        let e = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("byte 0") && e.contains("magic"), "{e}");

        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("byte 4"));

        let b = sample().to_bytes();
        for cut in [3, 10, 20, b.len() - 1] {
            let e = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(e, Error::Parse { .. }), "{cut}: {e}");
            assert!(e.to_string().contains("truncated") || e.to_string().contains("magic"), "{e}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}

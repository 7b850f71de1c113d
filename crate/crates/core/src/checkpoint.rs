//! Checkpoint file format and run manifests.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "DCKP"
//! version      u32      CHECKPOINT_FORMAT_VERSION
//! config_len   u64
//! config       UTF-8    TrainConfig::to_text()
//! n_params     u64
//! n_params × { name_len u32, name UTF-8, ndim u32, dims ndim × u64,
//!              data product(dims) × f64 }
//! ```
//!
//! Parameters are written in sorted name order, so equal checkpoints are
//! byte-identical.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};

const MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Parameter values; gradients and momentum are not stored.
    pub params: ParameterStore,
}

/// Copies the values of `params` into a fresh sealed store with zeroed
/// gradients and momentum.
pub fn values_only(params: &ParameterStore) -> Result<ParameterStore> {
    let mut out = ParameterStore::new();
    for (name, p) in params.iter() {
        out.insert(name, p.value().clone())?;
    }
    out.seal();
    Ok(out)
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: &ParameterStore) -> Result<Self> {
        Ok(Self {
            config,
            params: values_only(params)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        b.extend_from_slice(&(text.len() as u64).to_le_bytes());
        b.extend_from_slice(text.as_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            let shape = p.value().shape();
            b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value().data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::malformed("checkpoint", "bad magic"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let len = c.u64()? as usize;
        let text = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::malformed("checkpoint", "config is not UTF-8"))?;
        let mut config = TrainConfig::from_text(text)?;
        config.resolve()?;
        let n = c.u64()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..n {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::malformed("checkpoint", "parameter name is not UTF-8"))?
                .to_string();
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&k| k <= (bytes.len() - c.pos) / 8)
                .ok_or_else(|| Error::malformed("checkpoint", format!("`{name}` overruns the file")))?;
            let data = (0..count).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if c.pos != bytes.len() {
            return Err(Error::malformed("checkpoint", "trailing bytes"));
        }
        params.seal();
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::malformed("checkpoint", "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Record of one command invocation. The config lines are the resolved
/// config, so the run can be repeated from this file alone.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub git_describe: Option<String>,
    pub duration_secs: f64,
    pub config: TrainConfig,
}

const MANIFEST_KEYS: [&str; 5] = ["run.command", "run.args", "run.seed", "run.git_describe", "run.duration_secs"];

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let args: Vec<String> = self.args.iter().map(|a| quote(a)).collect();
        let mut s = format!(
            "run.command = {}\nrun.args = [{}]\nrun.seed = {}\n",
            quote(&self.command),
            args.join(", "),
            self.seed
        );
        if let Some(g) = &self.git_describe {
            s.push_str(&format!("run.git_describe = {}\n", quote(g)));
        }
        s.push_str(&format!("run.duration_secs = {:?}\n", self.duration_secs));
        s.push_str(&self.config.to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = crate::config::parse_pairs(text)?;
        let get = |k: &str| pairs.iter().find(|(n, _)| n == k).map(|(_, v)| v);
        let missing = |k: &str| Error::malformed("manifest", format!("missing `{k}`"));
        let command = get("run.command")
            .and_then(|v| v.as_str())
            .ok_or_else(|| missing("run.command"))?
            .to_string();
        let args = get("run.args")
            .and_then(|v| v.as_array())
            .ok_or_else(|| missing("run.args"))?
            .iter()
            .map(|a| a.as_str().map(str::to_string).ok_or_else(|| missing("run.args")))
            .collect::<Result<Vec<_>>>()?;
        let seed = get("run.seed")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| missing("run.seed"))? as u64;
        let git_describe = get("run.git_describe").and_then(|v| v.as_str()).map(str::to_string);
        let duration_secs = get("run.duration_secs")
            .and_then(|v| v.as_float())
            .ok_or_else(|| missing("run.duration_secs"))?;
        let mut config = TrainConfig::default();
        let mut rest: Vec<_> = pairs.iter().filter(|(k, _)| !MANIFEST_KEYS.contains(&k.as_str())).collect();
        rest.sort_by_key(|(k, _)| k != "filter.preset");
        for (k, v) in rest {
            config.set(k, v)?;
        }
        config.resolve()?;
        Ok(Self {
            command,
            args,
            seed,
            git_describe,
            duration_secs,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// `git describe --always --dirty` in the current directory, if available.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

//! Text checkpoint format.
//!
//! ```text
//! dstgcn-checkpoint 1
//! fingerprint <hex>
//! entries <count>
//! param <path> <rank> <dim>...
//! <row-major values, space separated>
//! buffer static_affinity 2 <N> <N>
//! <values>
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{DstGcnn, ModelConfig};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "dstgcn-checkpoint 1";

fn write_entry<S: Scalar>(out: &mut String, kind: &str, name: &str, t: &Tensor<S>) {
    let _ = write!(out, "{kind} {name} {}", t.rank());
    for d in t.shape() {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    let mut first = true;
    for v in t.data() {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<S: Scalar> DstGcnn<S> {
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let buffers = usize::from(self.static_affinity.is_some());
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "fingerprint {}", self.config.fingerprint());
        let _ = writeln!(out, "entries {}", self.params.len() + buffers);
        for (_, name, t) in self.params.iter() {
            write_entry(&mut out, "param", name, t);
        }
        if let Some(a) = &self.static_affinity {
            write_entry(&mut out, "buffer", "static_affinity", a);
        }
        out
    }

    /// Rebuilds a model for `config` and overwrites every tensor from `text`.
    pub fn from_checkpoint_str(config: ModelConfig, text: &str) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported checkpoint header"));
        }
        let found = lines
            .next()
            .and_then(|l| l.strip_prefix("fingerprint "))
            .ok_or_else(|| bad("missing fingerprint line"))?
            .trim()
            .to_string();
        let expected = model.config.fingerprint();
        if found != expected {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("entries "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing entries line"))?;
        let mut seen = vec![false; model.params.len()];
        for _ in 0..count {
            let head = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
            let body = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
            let mut fields = head.split_whitespace();
            let kind = fields.next().unwrap_or_default();
            let name = fields.next().ok_or_else(|| bad(format!("malformed entry header '{head}'")))?;
            let rank: usize = fields
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| bad(format!("bad rank in '{head}'")))?;
            let shape: Vec<usize> = fields
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in '{head}'"))))
                .collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(bad(format!("rank {rank} does not match dims in '{head}'")));
            }
            let data: Vec<S> = body
                .split_whitespace()
                .map(|v| v.parse::<S>().map_err(|_| bad(format!("bad value '{v}' for {name}"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            match kind {
                "param" => {
                    let id = model.params.id(name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
                    model.params.set(id, t).map_err(|e| bad(format!("{name}: {e}")))?;
                    seen[id.index()] = true;
                }
                "buffer" if name == "static_affinity" => model.set_static_tensor(t),
                _ => return Err(bad(format!("unknown entry '{head}'"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.params.ids().nth(i).expect("index in range");
            return Err(bad(format!("parameter {} missing from checkpoint", model.params.name(id))));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(config, &text)
    }
}

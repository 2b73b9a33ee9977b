//! Checkpoint container: a text header (step counters plus the canonical
//! config, FNV-1a-hashed against corruption) followed by one named binary
//! tensor record per model parameter and optimizer accumulator.
//!
//! ```text
//! TCDCKPT v1
//! step <n>
//! optim_steps <n>
//! config_hash <16 hex digits>
//! config_begin
//! <canonical config text>
//! config_end
//! tensors <count>
//! tensor <name>      (then one binary tensor blob, repeated)
//! ```
//!
//! Optimizer entries reuse the `optim.m.` / `optim.v.` name prefixes, so a
//! restored run continues bit-for-bit where the saved one stopped.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::optim::Optimizer;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Scalar, Tensor};

const MAGIC_LINE: &str = "TCDCKPT v1";

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A parsed checkpoint, not yet bound to a model.
pub struct Checkpoint<T: Scalar> {
    pub config_text: String,
    pub step: usize,
    pub optim_steps: usize,
    pub params: Vec<(String, Tensor<T>)>,
    pub optim: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config_text)
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    cfg: &Config,
    step: usize,
    model: &mut Model<T>,
    optim: &Optimizer<T>,
) -> Result<()> {
    let text = cfg.to_text();
    let params = model.state();
    let ostate = optim.state_tensors();
    let file = File::create(path).map_err(|e| Error::Io(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "{MAGIC_LINE}\nstep {step}\noptim_steps {}\nconfig_hash {:016x}\nconfig_begin\n{text}config_end\ntensors {}\n",
        optim.step_count,
        fnv1a64(text.as_bytes()),
        params.len() + ostate.len(),
    )?;
    for (name, t) in params.iter().chain(ostate.iter()) {
        writeln!(w, "tensor {name}")?;
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

fn read_line(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::Io(format!("{}: truncated checkpoint", path.display())))?;
        if byte[0] == b'\n' {
            break;
        }
        buf.push(byte[0]);
        if buf.len() > 1 << 16 {
            return Err(Error::Io(format!("{}: header line too long", path.display())));
        }
    }
    String::from_utf8(buf).map_err(|_| Error::Io(format!("{}: non-utf8 header", path.display())))
}

fn field<'l>(line: &'l str, key: &str, path: &Path) -> Result<&'l str> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| Error::Io(format!("{}: expected `{key} ...`, got {line:?}", path.display())))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = File::open(path).map_err(|e| Error::Io(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);

    if read_line(&mut r, path)? != MAGIC_LINE {
        return Err(Error::Io(format!("{}: not a checkpoint file", path.display())));
    }
    let step: usize = field(&read_line(&mut r, path)?, "step", path)?
        .parse()
        .map_err(|_| Error::Io(format!("{}: bad step count", path.display())))?;
    let optim_steps: usize = field(&read_line(&mut r, path)?, "optim_steps", path)?
        .parse()
        .map_err(|_| Error::Io(format!("{}: bad optimizer step count", path.display())))?;
    let declared = u64::from_str_radix(field(&read_line(&mut r, path)?, "config_hash", path)?, 16)
        .map_err(|_| Error::Io(format!("{}: bad config hash", path.display())))?;
    if read_line(&mut r, path)? != "config_begin" {
        return Err(Error::Io(format!("{}: missing config block", path.display())));
    }
    let mut config_text = String::new();
    loop {
        let line = read_line(&mut r, path)?;
        if line == "config_end" {
            break;
        }
        config_text.push_str(&line);
        config_text.push('\n');
    }
    if fnv1a64(config_text.as_bytes()) != declared {
        return Err(Error::Io(format!(
            "{}: config hash mismatch — corrupted checkpoint",
            path.display()
        )));
    }

    let count: usize = field(&read_line(&mut r, path)?, "tensors", path)?
        .parse()
        .map_err(|_| Error::Io(format!("{}: bad tensor count", path.display())))?;
    let mut params = Vec::new();
    let mut optim = Vec::new();
    for _ in 0..count {
        let name = field(&read_line(&mut r, path)?, "tensor", path)?.to_string();
        let t = read_tensor::<T>(&mut r)?;
        if name.starts_with("optim.") {
            optim.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    Ok(Checkpoint { config_text, step, optim_steps, params, optim })
}

/// Rebuilds a ready-to-run model and optimizer from a parsed checkpoint.
pub fn restore<T: Scalar>(ck: &Checkpoint<T>) -> Result<(Config, Model<T>, Optimizer<T>)> {
    let cfg = ck.config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&cfg, &mut rng)?;
    let map: HashMap<String, Tensor<T>> = ck.params.iter().cloned().collect();
    model.load_state(&map)?;
    let mut optim = Optimizer::new(&cfg);
    optim.load_state_tensors(ck.optim_steps, &ck.optim)?;
    Ok((cfg, model, optim))
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::kernel::{RunningStats, Tensor};
use crate::{Error, Real, Result};

const MAGIC: &[u8; 4] = b"CVCK";
const VERSION: u32 = 1;

/// SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
    pub first: Vec<Real>,
    pub second: Vec<Real>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub adam_step: u64,
    pub params: Vec<SavedParam>,
    /// Running statistics of every normalisation layer in model order.
    pub running: Vec<Option<RunningStats>>,
}

fn write_reals<W: Write>(w: &mut W, xs: &[Real]) -> std::io::Result<()> {
    w.write_u64::<LE>(xs.len() as u64)?;
    xs.iter().try_for_each(|&x| w.write_f64::<LE>(x as f64))
}

fn read_reals<R: Read>(r: &mut R) -> std::io::Result<Vec<Real>> {
    let n = r.read_u64::<LE>()? as usize;
    if n > 1 << 32 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "array too long"));
    }
    (0..n).map(|_| r.read_f64::<LE>().map(|x| x as Real)).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let io = |e| Error::io(&tmp, e);
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        self.write(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_all(&self.config_hash)?;
        w.write_u64::<LE>(self.iteration)?;
        w.write_u64::<LE>(self.adam_step)?;
        w.write_u32::<LE>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LE>(p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            w.write_u32::<LE>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            write_reals(w, p.value.data())?;
            write_reals(w, &p.first)?;
            write_reals(w, &p.second)?;
        }
        w.write_u32::<LE>(self.running.len() as u32)?;
        for r in &self.running {
            match r {
                Some(s) => {
                    w.write_u8(1)?;
                    write_reals(w, &s.mean)?;
                    write_reals(w, &s.var)?;
                }
                None => w.write_u8(0)?,
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, refusing one written under a different
    /// configuration unless `force` is set.
    pub fn load(path: &Path, expected: Option<&[u8; 32]>, force: bool) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let ck = Self::read(&mut r).map_err(|e| Error::format(path, &e.to_string()))?;
        if let Some(h) = expected {
            if *h != ck.config_hash && !force {
                return Err(Error::ConfigHash {
                    expected: hex(h),
                    found: hex(&ck.config_hash),
                });
            }
        }
        Ok(ck)
    }

    fn read<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        if r.read_u32::<LE>()? != VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let iteration = r.read_u64::<LE>()?;
        let adam_step = r.read_u64::<LE>()?;
        let n = r.read_u32::<LE>()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.read_u32::<LE>()? as usize;
            let mut name = vec![0u8; len.min(1 << 16)];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = r.read_u32::<LE>()? as usize;
            if rank > 8 {
                return Err(bad("parameter rank too large"));
            }
            let shape = (0..rank).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
            let value = Tensor::from_vec(&shape, read_reals(r)?).map_err(|e| bad(&e.to_string()))?;
            let first = read_reals(r)?;
            let second = read_reals(r)?;
            if first.len() != value.len() || second.len() != value.len() {
                return Err(bad("optimizer moments do not match parameter size"));
            }
            params.push(SavedParam { name, value, first, second });
        }
        let m = r.read_u32::<LE>()? as usize;
        let mut running = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            running.push(match r.read_u8()? {
                0 => None,
                1 => {
                    let mean = read_reals(r)?;
                    let var = read_reals(r)?;
                    if mean.len() != var.len() {
                        return Err(bad("running statistics lengths differ"));
                    }
                    Some(RunningStats { mean, var })
                }
                _ => return Err(bad("bad running-statistics flag")),
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config_hash,
            iteration,
            adam_step,
            params,
            running,
        })
    }
}

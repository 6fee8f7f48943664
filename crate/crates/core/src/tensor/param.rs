use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"ADP2";
const VERSION: u16 = 1;

/// Ordered, uniquely named collection of parameter tensors.
///
/// Two vectors combine (add, scale, optimizer steps) only when names and
/// shapes match pairwise in the same order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.entries.push((name, tensor.with_requires_grad(false)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Entries whose name starts with `prefix`, order preserved.
    pub fn with_prefix(&self, prefix: &str) -> ParamVector {
        self.filter(|n| n.starts_with(prefix))
    }

    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| keep(n))
                .cloned()
                .collect(),
        }
    }

    /// Appends all entries of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamVector) -> Result<()> {
        for (n, t) in other.entries {
            self.push(n, t)?;
        }
        Ok(())
    }

    /// Replaces the tensors of every entry named in `update`. Shapes must match.
    pub fn overwrite(&mut self, update: &ParamVector) -> Result<()> {
        for (name, t) in update.iter() {
            let slot = self
                .entries
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
            if slot.1.shape() != t.shape() {
                return Err(TensorError::Misaligned(format!(
                    "`{name}`: {:?} vs {:?}",
                    slot.1.shape(),
                    t.shape()
                )));
            }
            slot.1 = t.clone();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn check_aligned(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(TensorError::Misaligned(format!(
                "{} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(TensorError::Misaligned(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Combines two aligned vectors value by value.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f32, f32) -> f32) -> Result<ParamVector> {
        self.check_aligned(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (
                    n.clone(),
                    Tensor::new(a.shape().to_vec(), data).expect("aligned shapes"),
                )
            })
            .collect();
        Ok(ParamVector { entries })
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f32) -> ParamVector {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(|v| v * s)))
                .collect(),
        }
    }

    /// Largest absolute difference over all values of two aligned vectors.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f32> {
        self.check_aligned(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f32::max))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| invalid(format!("name `{name}` too long")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let ndim = u8::try_from(t.ndim())
                .map_err(|_| invalid(format!("`{name}` has too many axes")))?;
            w.write_all(&[ndim])?;
            for &d in t.shape() {
                let d =
                    u32::try_from(d).map_err(|_| invalid(format!("`{name}` extent too large")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<ParamVector> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(invalid(format!("bad magic {magic:?}, expected ADP2")));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(invalid(format!(
                "unsupported parameter file version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        let mut out = ParamVector::new();
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| invalid(e.to_string()))?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let shape = (0..ndim[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
            out.push(name, t).map_err(|e| invalid(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<ParamVector> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

//! Named parameter storage and the on-disk array format.
//!
//! A checkpoint directory holds `arrays.bin` (every array's f64 values,
//! little-endian, back to back) and `manifest.txt`:
//!
//! ```text
//! lance-arrays 1 sha256=<hex digest of arrays.bin>
//! <name> <dim>x<dim>... <byte offset>
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ARRAYS_FILE: &str = "arrays.bin";
const MAGIC: &str = "lance-arrays 1";

#[derive(Debug, Error)]
pub enum ArrayFileError {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("checksum mismatch: manifest says {expected}, data hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("array data is {actual} bytes, manifest covers {expected}")]
    Size { expected: usize, actual: usize },
    #[error("missing array {0:?}")]
    Missing(String),
    #[error("array {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its id. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        let id = self.names.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with the same-named array from `arrays`,
    /// checking shapes. Extra arrays are ignored.
    pub fn assign(&mut self, arrays: &[(String, Tensor)]) -> Result<(), ArrayFileError> {
        let found: HashMap<&str, &Tensor> = arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut staged = Vec::with_capacity(self.len());
        for (name, current) in self.iter() {
            let Some(&t) = found.get(name) else {
                return Err(ArrayFileError::Missing(name.to_string()));
            };
            if t.shape() != current.shape() {
                return Err(ArrayFileError::Shape {
                    name: name.to_string(),
                    expected: current.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            staged.push(t.clone());
        }
        self.tensors = staged;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes `arrays` into `dir` (created if needed).
pub fn write_arrays<'a, I>(dir: &Path, arrays: I) -> Result<(), ArrayFileError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    fs::create_dir_all(dir)?;
    let mut data = Vec::new();
    let mut lines = String::new();
    for (name, t) in arrays {
        assert!(!name.is_empty() && !name.contains(char::is_whitespace), "bad array name {name:?}");
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        let _ = writeln!(lines, "{name} {dims} {}", data.len());
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = hex(&Sha256::digest(&data));
    fs::write(dir.join(ARRAYS_FILE), &data)?;
    fs::write(dir.join(MANIFEST_FILE), format!("{MAGIC} sha256={digest}\n{lines}"))?;
    Ok(())
}

/// Reads every array in `dir`, verifying the checksum before decoding.
pub fn read_arrays(dir: &Path) -> Result<Vec<(String, Tensor)>, ArrayFileError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let data = fs::read(dir.join(ARRAYS_FILE))?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    let expected = header
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("sha256="))
        .ok_or_else(|| ArrayFileError::Manifest {
            line: 1,
            msg: format!("bad header {header:?}"),
        })?;
    let actual = hex(&Sha256::digest(&data));
    if actual != expected {
        return Err(ArrayFileError::Checksum {
            expected: expected.to_string(),
            actual,
        });
    }
    let mut out = Vec::new();
    let mut next = 0;
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| ArrayFileError::Manifest { line: i + 2, msg };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, offset] = parts[..] else {
            return Err(bad(format!("expected 3 fields, got {line:?}")));
        };
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {dims:?}"))))
                .collect::<Result<_, _>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
        if offset != next {
            return Err(bad(format!("offset {offset}, expected {next}")));
        }
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if end > data.len() {
            return Err(ArrayFileError::Size {
                expected: end,
                actual: data.len(),
            });
        }
        let values = data[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| bad(e.to_string()))?;
        out.push((name.to_string(), t));
        next = end;
    }
    if next != data.len() {
        return Err(ArrayFileError::Size {
            expected: next,
            actual: data.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push("a", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap());
        s.push("b.gain", Tensor::ones(&[4]));
        s.push("step", Tensor::scalar(7.0));
        s
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample_store();
        write_arrays(dir.path(), s.iter()).unwrap();
        let back = read_arrays(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n, t), (m, u)) in back.iter().zip(s.iter()) {
            assert_eq!(n, m);
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut fresh = sample_store();
        fresh.get_mut(0).data_mut()[0] = 99.0;
        fresh.assign(&back).unwrap();
        assert_eq!(fresh, s);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_arrays(dir.path(), sample_store().iter()).unwrap();
        let path = dir.path().join(ARRAYS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_arrays(dir.path()), Err(ArrayFileError::Checksum { .. })));
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut s = sample_store();
        let wrong = vec![("zzz".to_string(), Tensor::zeros(&[3, 2]))];
        assert!(matches!(s.assign(&wrong), Err(ArrayFileError::Missing(_))));
        let mut arrays: Vec<(String, Tensor)> = s.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        arrays[1].1 = Tensor::ones(&[5]);
        assert!(matches!(s.assign(&arrays), Err(ArrayFileError::Shape { .. })));
    }
}

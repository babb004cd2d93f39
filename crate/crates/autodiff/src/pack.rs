//! Named-tensor container: a text manifest followed by raw little-endian
//! arrays.
//!
//! ```text
//! SELDPACK 1
//! meta <key> <value...>
//! tensor <name> <dtype> <d0>x<d1>x... <offset> <nbytes>
//! end
//! <blob>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line. `dtype` is
//! `f64` or `f32`; writing always uses `f64`, so a write/read round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "SELDPACK 1";

/// Manifest entry describing one stored array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pack {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Pack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    /// Inserts or replaces a tensor. Names may not contain whitespace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn manifest(&self) -> Vec<Entry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let nbytes = t.numel() * 8;
                let e = Entry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            if k.is_empty() || k.chars().any(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Format(format!("invalid meta entry {k:?}")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for e in self.manifest() {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            head.push_str(&format!(
                "tensor {} {} {} {} {}\n",
                e.name,
                e.dtype,
                dims.join("x"),
                e.offset,
                e.nbytes
            ));
        }
        head.push_str("end\n");
        w.write_all(head.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            self.write_to(std::io::BufWriter::new(f))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Format("unexpected end of manifest".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(Error::Format(format!("bad magic {line:?}")));
        }
        let mut pack = Pack::new();
        let mut entries = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    pack.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => entries.push(parse_entry(rest)?),
                _ => return Err(Error::Format(format!("unknown manifest line {line:?}"))),
            }
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        for e in entries {
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= blob.len());
            let Some(end) = end else {
                return Err(Error::Format(format!("tensor {} overruns the data section", e.name)));
            };
            let bytes = &blob[e.offset..end];
            let data: Vec<f64> = match e.dtype.as_str() {
                "f64" => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                "f32" => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                other => return Err(Error::Format(format!("unsupported dtype {other}"))),
            };
            let t = Tensor::new(&e.shape, data)
                .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
            pack.insert(e.name, t)?;
        }
        Ok(pack)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(f)
    }
}

fn parse_entry(rest: &str) -> Result<Entry> {
    let f: Vec<&str> = rest.split_whitespace().collect();
    let bad = || Error::Format(format!("malformed tensor line {rest:?}"));
    if f.len() != 5 {
        return Err(bad());
    }
    let shape = f[2]
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let width = match f[1] {
        "f64" => 8,
        "f32" => 4,
        _ => return Err(bad()),
    };
    let nbytes: usize = f[4].parse().map_err(|_| bad())?;
    if shape.iter().product::<usize>() * width != nbytes {
        return Err(bad());
    }
    Ok(Entry {
        name: f[0].to_string(),
        dtype: f[1].to_string(),
        shape,
        offset: f[3].parse().map_err(|_| bad())?,
        nbytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = Pack::new();
        p.set_meta("sample_rate", "24000");
        p.set_meta("note", "two words");
        let weird = vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, f64::MAX, -1e-300, 7.0];
        p.insert("a.weight", Tensor::new(&[2, 3], weird).unwrap()).unwrap();
        p.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = Pack::read_from(&buf[..]).unwrap();
        assert_eq!(q.meta, p.meta);
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn reads_f32_arrays() {
        let mut bytes = b"SELDPACK 1\ntensor x f32 2 0 8\nend\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let p = Pack::read_from(&bytes[..]).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_truncated_and_garbage() {
        assert!(Pack::read_from(&b"NOPE\n"[..]).is_err());
        let bytes = b"SELDPACK 1\ntensor x f64 2 0 16\nend\n\0\0\0".to_vec();
        assert!(Pack::read_from(&bytes[..]).is_err());
        assert!(Pack::read_from(&b"SELDPACK 1\nbogus\nend\n"[..]).is_err());
        assert!(Pack::new().insert("has space", Tensor::scalar(1.0)).is_err());
    }
}

//! Checkpoint container.
//!
//! ```text
//! MAKD-CHECKPOINT 1\n
//! <key> = <value>\n            zero or more metadata lines
//! tensor <name> <d0>x<d1>...\n one line per tensor, in payload order
//! end\n
//! <payload>                    each tensor's values as little-endian f64,
//!                              row-major, concatenated in manifest order
//! ```
//!
//! Keys and tensor names contain no whitespace or `=`; values contain no
//! newline. Files are written to a sibling temporary and renamed into place.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{MakdError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "MAKD-CHECKPOINT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Header-only view: metadata plus `(name, shape)` per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            if !valid_name(k) || v.contains('\n') {
                return Err(MakdError::invalid(format!("unstorable metadata entry {k:?}")));
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (name, shape) in &self.entries {
            if !valid_name(name) {
                return Err(MakdError::invalid(format!("unstorable tensor name {name:?}")));
            }
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            out.push_str(&format!("tensor {name} {dims}\n"));
        }
        out.push_str("end\n");
        Ok(out)
    }

    /// Parses a header from `reader`, leaving it positioned at the payload.
    pub fn parse(reader: &mut impl BufRead, path: &Path) -> Result<Self> {
        let bad = |msg: String| MakdError::Checkpoint { path: path.to_path_buf(), msg };
        let mut line = String::new();
        let mut read_line = |line: &mut String| -> Result<bool> {
            line.clear();
            let n = reader.read_line(line).map_err(|e| MakdError::io(path, e))?;
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(n > 0)
        };
        if !read_line(&mut line)? || line != MAGIC {
            return Err(bad(format!("bad magic line {line:?}")));
        }
        let mut manifest = Manifest::default();
        loop {
            if !read_line(&mut line)? {
                return Err(bad("header ends without `end`".into()));
            }
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(bad(format!("bad tensor line {line:?}")));
                };
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("bad shape in {line:?}")))?
                };
                manifest.entries.push((name.to_string(), shape));
            } else if let Some((k, v)) = line.split_once(" = ") {
                manifest.meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(bad(format!("unrecognized header line {line:?}")));
            }
        }
        Ok(manifest)
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=')
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            meta: self.meta.clone(),
            entries: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = self.manifest().render()?;
        let tmp = temp_sibling(path);
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(header.as_bytes())?;
            for (_, t) in &self.tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            Ok(())
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&tmp);
            return Err(MakdError::io(path, e));
        }
        std::fs::rename(&tmp, path).map_err(|e| MakdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| MakdError::io(path, e))?;
        let mut reader = BufReader::new(file);
        let manifest = Manifest::parse(&mut reader, path)?;
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        let mut buf = [0u8; 8];
        for (name, shape) in manifest.entries {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                reader.read_exact(&mut buf).map_err(|_| MakdError::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("payload truncated in tensor {name}"),
                })?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| MakdError::io(path, e))?;
        if !rest.is_empty() {
            return Err(MakdError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes after payload", rest.len()),
            });
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }
}

/// Reads only the header of a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| MakdError::io(path, e))?;
    Manifest::parse(&mut BufReader::new(file), path)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("config.layers".to_string(), "2".to_string());
        meta.insert("note".to_string(), "hello world".to_string());
        Checkpoint {
            meta,
            tensors: vec![
                ("a.weight".into(), Tensor::from_rows(&[[1.0, -0.0], [f64::MIN_POSITIVE, 3.5]]).unwrap()),
                ("b".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(read_manifest(&path).unwrap(), ck.manifest());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(MakdError::Checkpoint { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, "NOT A CHECKPOINT\nend\n").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn names_with_spaces_are_refused() {
        let mut ck = sample();
        ck.tensors[0].0 = "has space".into();
        assert!(ck.manifest().render().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_values_round_trip(bits in proptest::collection::vec(any::<u64>(), 1..40)) {
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::new(vec![data.len()], data).unwrap();
            let ck = Checkpoint { meta: BTreeMap::new(), tensors: vec![("t".into(), t.clone())] };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.ckpt");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let got: Vec<u64> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
        }
    }
}

//! Flat binary tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FDETCKPT"
//! version  u32      1
//! count    u64      number of entries
//! entry*   name_len u64, name (UTF-8), rank u64, extents u64 × rank,
//!          data f32 × product(extents)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"FDETCKPT";
pub const VERSION: u32 = 1;

/// Byte length of an archive holding entries with these names and shapes.
pub fn encoded_len<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> u64 {
    let mut len = (MAGIC.len() + 4 + 8) as u64;
    for (name, shape) in entries {
        len += 8 + name.len() as u64 + 8 + 8 * shape.len() as u64;
        len += 4 * shape.iter().product::<usize>() as u64;
    }
    len
}

pub fn write_entries<'a, T: Element, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> io::Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_entries<T: Element, R: Read>(mut r: R) -> io::Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(bad("entry name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(bad(format!("entry `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("entry `{name}`: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save<'a, T: Element>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = io::BufWriter::new(file);
    write_entries(&mut w, entries).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(io::BufReader::new(file)).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData | io::ErrorKind::UnexpectedEof => {
            Error::format(path, e.to_string())
        }
        _ => Error::io(path, e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_entries(&mut buf, [("ab", &t)]).unwrap();
        let mut expect = b"FDETCKPT".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(encoded_len([("ab", &[2usize][..])]), buf.len() as u64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_entries::<f32, _>(&b"NOTACKPTxxxxxxxxxxxx"[..]).is_err());
        let t = Tensor::<f32>::zeros(vec![3]).unwrap();
        let mut buf = Vec::new();
        write_entries(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_entries::<f32, _>(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..5),
            seed in any::<u32>(),
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|j| ((seed as usize + i * 31 + j) as f32).sin()).collect();
                    (format!("t{i}.weight"), Tensor::new(s.clone(), data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_entries(&mut buf, tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            prop_assert_eq!(
                buf.len() as u64,
                encoded_len(tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
            );
            let back: Vec<(String, Tensor<f32>)> = read_entries(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                prop_assert_eq!(t1.data(), t2.data());
            }
        }
    }
}

//! Parameter checkpoint file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    6 bytes  "LPCKPT"
//! version  u8       = 1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u16, name (UTF-8, name_len bytes)
//!   rank     u8,  dims (rank x u32)
//!   data     product(dims) x f64
//! ```

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LPCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u8(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(t.shape().len() as u8)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

//! `MVOL` volume files.
//!
//! ```text
//! "MVOL"                 4 bytes
//! version                u8 (= 1)
//! dtype                  u8 (1 = f32, 2 = u8)
//! C, D, H, W             u32 little-endian each
//! payload                row-major, little-endian
//! ```
//!
//! Real volumes are `[C, D, H, W]` and are narrowed to f32 on write. Label
//! volumes are `[D, H, W]` with `C = 1` in the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segloss::LabelVolume;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::U8),
            t => Err(Error::parse(format!("unknown volume dtype tag {t}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

pub fn encode_volume(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let extents: [usize; 4] = match (dtype, t.shape()) {
        (Dtype::F32, &[c, d, h, w]) => [c, d, h, w],
        (Dtype::U8, &[d, h, w]) => [1, d, h, w],
        (_, s) => {
            return Err(Error::shape(format!(
                "{dtype:?} volumes need {} axes, got {s:?}",
                if dtype == Dtype::F32 { 4 } else { 3 }
            )))
        }
    };
    let mut out = Vec::with_capacity(HEADER_LEN + t.numel() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.tag());
    for e in extents {
        let e = u32::try_from(e).map_err(|_| Error::shape(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::U8 => {
            for &v in t.data() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Domain {
                        op: "write_volume",
                        detail: format!("{v} is not a u8 label"),
                    });
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(format!(
            "volume header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(format!(
            "bad volume magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::parse(format!("unsupported volume version {}", bytes[4])));
    }
    let dtype = Dtype::from_tag(bytes[5])?;
    let ext: Vec<usize> = bytes[6..HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = ext
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::parse("volume extents overflow"))?;
    let expected = n
        .checked_mul(dtype.width())
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::parse("volume extents overflow"))?;
    if bytes.len() != expected {
        return Err(Error::parse(format!(
            "volume {ext:?} of {dtype:?} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    let t = match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(ext, data)?
        }
        Dtype::U8 => {
            if ext[0] != 1 {
                return Err(Error::parse(format!("label volume must have C = 1, got {}", ext[0])));
            }
            Tensor::new(ext[1..].to_vec(), payload.iter().map(|&b| b as f64).collect())?
        }
    };
    Ok((t, dtype))
}

pub fn write_volume(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_volume(t, dtype)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(Tensor, Dtype)> {
    decode_volume(&fs::read(path)?)
}

pub fn labels_to_tensor(labels: &LabelVolume) -> Tensor {
    let [d, h, w] = labels.dims();
    Tensor::new(vec![d, h, w], labels.data().iter().map(|&b| b as f64).collect()).expect("dims match")
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (t, dtype) = read_volume(path)?;
    if dtype != Dtype::U8 {
        return Err(Error::parse(format!("{} is not a label volume", path.display())));
    }
    let [d, h, w] = t.shape() else {
        unreachable!("u8 volumes decode to 3 axes")
    };
    LabelVolume::new([*d, *h, *w], t.data().iter().map(|&v| v as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_f32_volume_layout() {
        let t = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
        let bytes = encode_volume(&t, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), 22 + 32);
        assert_eq!(&bytes[..6], b"MVOL\x01\x01");
        assert_eq!(&bytes[6..22], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[26..30], &0.5f32.to_le_bytes());
    }

    #[test]
    fn round_trips() {
        let t = Tensor::new(
            vec![2, 1, 2, 3],
            vec![0.1, -2.0, 3.3, 1e-3, 5.0, 6.0, 7.0, 8.5, -9.0, 0.0, 1.0, 2.0],
        )
        .unwrap();
        let bytes = encode_volume(&t, Dtype::F32).unwrap();
        let (back, dtype) = decode_volume(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F32);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
        assert_eq!(encode_volume(&back, Dtype::F32).unwrap(), bytes);

        let l = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_volume(&l, Dtype::U8).unwrap();
        assert_eq!(bytes.len(), 22 + 4);
        assert_eq!(decode_volume(&bytes).unwrap(), (l, Dtype::U8));
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[1, 2, 2, 2]);
        let good = encode_volume(&t, Dtype::F32).unwrap();
        let mut m = good.clone();
        m[0] = b'X';
        assert!(matches!(decode_volume(&m), Err(Error::Parse(_))));
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode_volume(&v), Err(Error::Parse(_))));
        let mut d = good.clone();
        d[5] = 7;
        assert!(matches!(decode_volume(&d), Err(Error::Parse(_))));
        match decode_volume(&good[..good.len() - 3]) {
            Err(Error::Parse(msg)) => assert!(msg.contains("54"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut e = good.clone();
        e[6] = 3;
        assert!(matches!(decode_volume(&e), Err(Error::Parse(_))));
        assert!(matches!(decode_volume(&good[..10]), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(encode_volume(&Tensor::zeros(&[2, 2, 2]), Dtype::F32).is_err());
        assert!(encode_volume(&Tensor::zeros(&[1, 2, 2, 2]), Dtype::U8).is_err());
        let frac = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        assert!(encode_volume(&frac, Dtype::U8).is_err());
    }
}

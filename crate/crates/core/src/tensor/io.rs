//! Binary tensor blobs: `u32` rank, `rank` x `u32` extents, then the
//! elements as little-endian `f32`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<usize> {
    let rank = u32::try_from(t.rank()).map_err(|_| Error::shape("write_tensor", "rank overflow"))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape("write_tensor", "extent overflow"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(encoded_len(t))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

/// Size in bytes of the encoded blob.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 4 * t.rank() + 4 * t.numel()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(&t));
    }

    #[test]
    fn truncated_blob_is_an_io_error() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let t = Tensor::from_fn(&shape, |_| f32::from_bits(rng.gen::<u32>() & 0x7F7F_FFFF));
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

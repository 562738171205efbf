//! `.span` binary layout and the shared little-endian stream helpers.
//!
//! Layout (all integers 32-bit little-endian):
//!
//! ```text
//! "SPAN" | version | N | d | num_ctx | N x (x: i32, y: i32) | N*d f32 | num_ctx*d f32
//! ```

use crate::error::{Result, SpanError};
use crate::scalar::Scalar;
use crate::sparse::{Coord, SparseMap};
use ndarray::Array2;
use std::io::{Read, Write};

pub const SPAN_MAGIC: [u8; 4] = *b"SPAN";
pub const SPAN_VERSION: u32 = 1;

/// Cursor over a byte slice that reports which section ran out.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(SpanError::TruncatedStream(what))?;
        if end > self.buf.len() {
            return Err(SpanError::TruncatedStream(what));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        let m: [u8; 4] = m.try_into().unwrap();
        if m != expected {
            return Err(SpanError::BadMagic(m));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self, what: &'static str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or(SpanError::TruncatedStream(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SpanError::MalformedStream(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s<T: Scalar>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = T>) {
    for v in vals {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

/// Encodes a map. Values are stored as f32, so the round trip is bit-exact
/// for `SparseMap<f32>`; f64 maps are rounded.
pub fn serialize<T: Scalar>(map: &SparseMap<T>) -> Vec<u8> {
    let n = map.len();
    let d = map.feature_dim();
    let mut out = Vec::with_capacity(20 + n * 8 + (n + map.num_ctx()) * d * 4);
    out.extend_from_slice(&SPAN_MAGIC);
    put_u32(&mut out, SPAN_VERSION);
    put_u32(&mut out, n as u32);
    put_u32(&mut out, d as u32);
    put_u32(&mut out, map.num_ctx() as u32);
    for c in map.coords() {
        out.extend_from_slice(&(c.x as i32).to_le_bytes());
        out.extend_from_slice(&(c.y as i32).to_le_bytes());
    }
    put_f32s(&mut out, map.features().iter().copied());
    put_f32s(&mut out, map.context().iter().copied());
    out
}

pub fn deserialize<T: Scalar>(bytes: &[u8]) -> Result<SparseMap<T>> {
    let mut r = Reader::new(bytes);
    r.magic(SPAN_MAGIC)?;
    let version = r.u32("version")?;
    if version != SPAN_VERSION {
        return Err(SpanError::VersionUnsupported(version));
    }
    let n = r.u32("header")? as usize;
    let d = r.u32("header")? as usize;
    let num_ctx = r.u32("header")? as usize;
    let mut coords = Vec::with_capacity(n.min(bytes.len() / 8));
    for _ in 0..n {
        let x = r.i32("coordinates")?;
        let y = r.i32("coordinates")?;
        if x < 0 || y < 0 {
            return Err(SpanError::MalformedStream(format!("negative coordinate ({x}, {y})")));
        }
        coords.push(Coord::new(x as u32, y as u32));
    }
    let feats = r.f32s(n * d, "features")?;
    let ctx = r.f32s(num_ctx * d, "context")?;
    r.finish()?;
    let features = Array2::from_shape_vec((n, d), feats.into_iter().map(|v| T::lit(v as f64)).collect())
        .expect("shape checked");
    let context = Array2::from_shape_vec((num_ctx, d), ctx.into_iter().map(|v| T::lit(v as f64)).collect())
        .expect("shape checked");
    SparseMap::try_from_parts(coords, features, context)
}

pub fn write_span<T: Scalar, W: Write>(map: &SparseMap<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&serialize(map))
}

pub fn read_span<T: Scalar, R: Read>(mut r: R) -> std::result::Result<SparseMap<T>, Box<dyn std::error::Error + Send + Sync>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(deserialize(&buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::build_sparse_map;
    use proptest::prelude::*;

    fn sample() -> SparseMap<f32> {
        let coords = vec![Coord::new(3, 1), Coord::new(0, 0), Coord::new(2, 5)];
        let feats = Array2::from_shape_fn((3, 2), |(i, j)| i as f32 - 0.5 * j as f32);
        let m = build_sparse_map(coords, feats, 1).unwrap();
        m.with_context(ndarray::array![[1.5, -2.25]]).unwrap()
    }

    #[test]
    fn round_trip_exact() {
        let m = sample();
        let bytes = serialize(&m);
        assert_eq!(&bytes[..4], b"SPAN");
        assert_eq!(bytes.len(), 20 + 3 * 8 + (3 + 1) * 2 * 4);
        assert_eq!(deserialize::<f32>(&bytes).unwrap(), m);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = serialize(&sample());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        // first canonical coordinate is (0, 0), second is (3, 1)
        assert_eq!(&bytes[28..32], &3i32.to_le_bytes());
        assert_eq!(&bytes[32..36], &1i32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = serialize(&sample());
        bytes[0] = b'X';
        assert_eq!(deserialize::<f32>(&bytes).unwrap_err(), SpanError::BadMagic(*b"XPAN"));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = serialize(&sample());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert_eq!(deserialize::<f32>(&bytes).unwrap_err(), SpanError::VersionUnsupported(7));
    }

    #[test]
    fn truncated_features() {
        let bytes = serialize(&sample());
        let cut = &bytes[..20 + 3 * 8 + 5];
        assert_eq!(deserialize::<f32>(cut).unwrap_err(), SpanError::TruncatedStream("features"));
        let cut = &bytes[..bytes.len() - 1];
        assert_eq!(deserialize::<f32>(cut).unwrap_err(), SpanError::TruncatedStream("context"));
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let mut bytes = serialize(&sample());
        // swap the first two coordinate records
        let (a, b) = (bytes[20..28].to_vec(), bytes[28..36].to_vec());
        bytes[20..28].copy_from_slice(&b);
        bytes[28..36].copy_from_slice(&a);
        assert!(deserialize::<f32>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            pts in proptest::collection::hash_set((0u32..100, 0u32..100), 0..40),
            d in 1usize..5,
            num_ctx in 0usize..3,
            seed in any::<u32>(),
        ) {
            let coords: Vec<Coord> = pts.into_iter().map(Coord::from).collect();
            let n = coords.len();
            let bits = |i: usize| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff);
            let feats = Array2::from_shape_fn((n, d), |(i, j)| bits(i * d + j));
            let ctx = Array2::from_shape_fn((num_ctx, d), |(i, j)| -bits(1000 + i * d + j));
            let m = build_sparse_map(coords, feats, 0).unwrap().with_context(ctx).unwrap();
            let back = deserialize::<f32>(&serialize(&m)).unwrap();
            prop_assert_eq!(back.coords(), m.coords());
            for (a, b) in back.features().iter().zip(m.features()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in back.context().iter().zip(m.context()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

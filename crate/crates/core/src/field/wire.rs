//! Little-endian parameter dump.
//!
//! ```text
//! offset size  field
//!      0    4  magic "OMFP"
//!      4    2  format version
//!      6    2  positional-encoding frequencies
//!      8    2  hidden layers
//!     10    2  hidden width
//!     12    4  global id
//!     16    8  parameter version counter
//!     24   48  aabb min xyz, max xyz (f64)
//!     72    4  parameter count
//!     76  8·n  parameters (f64)
//! ```

use crate::error::{ProtocolError, Result};
use crate::geometry::{Aabb, Vec3};

use super::{Arch, InstanceField};

pub const FIELD_MAGIC: [u8; 4] = *b"OMFP";
pub const FIELD_WIRE_VERSION: u16 = 1;
pub const FIELD_HEADER_LEN: usize = 76;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let need = self.pos + n;
        if need > self.buf.len() {
            return Err(ProtocolError::Truncated { need, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..need];
        self.pos = need;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), ProtocolError> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(ProtocolError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn vec3(&mut self) -> Result<Vec3, ProtocolError> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_vec3(out: &mut Vec<u8>, v: &Vec3) {
    for k in 0..3 {
        out.extend_from_slice(&v[k].to_le_bytes());
    }
}

impl InstanceField {
    pub fn encoded_len(&self) -> usize {
        FIELD_HEADER_LEN + 8 * self.theta.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FIELD_MAGIC);
        out.extend_from_slice(&FIELD_WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch.pe_freqs.to_le_bytes());
        out.extend_from_slice(&self.arch.layers.to_le_bytes());
        out.extend_from_slice(&self.arch.width.to_le_bytes());
        out.extend_from_slice(&self.global_id.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        put_vec3(&mut out, &self.aabb.min);
        put_vec3(&mut out, &self.aabb.max);
        out.extend_from_slice(&(self.theta.len() as u32).to_le_bytes());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(FIELD_MAGIC)?;
        let version = r.u16()?;
        if version != FIELD_WIRE_VERSION {
            return Err(ProtocolError::Version(version).into());
        }
        let arch = Arch { pe_freqs: r.u16()?, layers: r.u16()?, width: r.u16()? };
        let global_id = r.u32()?;
        let counter = r.u64()?;
        let aabb = Aabb::new(r.vec3()?, r.vec3()?);
        let n = r.u32()? as usize;
        if arch.layers == 0 || arch.width == 0 || n != arch.param_count() {
            return Err(ProtocolError::Malformed(format!("{n} parameters do not fit architecture {arch:?}")).into());
        }
        if r.remaining() < 8 * n {
            return Err(ProtocolError::Truncated { need: FIELD_HEADER_LEN + 8 * n, have: buf.len() }.into());
        }
        let theta = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.remaining() != 0 {
            return Err(ProtocolError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        if !aabb.is_valid() {
            return Err(ProtocolError::Malformed("degenerate field bounds".into()).into());
        }
        InstanceField::from_parts(arch, theta, aabb, global_id, counter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn field() -> InstanceField {
        let b = Aabb::new(Vec3::new(-0.1, -0.2, 0.0), Vec3::new(0.3, 0.2, 0.5));
        let mut f = InstanceField::new(Arch::default(), b, 9, 1, -1.0).unwrap();
        f.update(|t| t[0] = 0.25);
        f
    }

    #[test]
    fn round_trip() {
        let f = field();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), FIELD_HEADER_LEN + 8 * Arch::default().param_count());
        assert_eq!(bytes.len(), f.encoded_len());
        assert_eq!(InstanceField::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn errors_are_typed() {
        let bytes = field().to_bytes();
        for cut in [0, 3, 10, 75, bytes.len() - 1] {
            assert!(matches!(
                InstanceField::from_bytes(&bytes[..cut]),
                Err(Error::Protocol(ProtocolError::Truncated { .. }))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(InstanceField::from_bytes(&bad), Err(Error::Protocol(ProtocolError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(InstanceField::from_bytes(&bad), Err(Error::Protocol(ProtocolError::Version(7)))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(InstanceField::from_bytes(&long), Err(Error::Protocol(ProtocolError::Malformed(_)))));
    }
}

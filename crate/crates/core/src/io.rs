//! File formats: PLY surface clouds and the OMSF frame container.
//!
//! PLY vertices carry `double x, y, z` and `uint instance, class`.
//!
//! OMSF layout, little-endian:
//!
//! ```text
//! magic "OMSF", version u16, frame count u32, then per frame:
//!   agent_id u32, t u32, width u32, height u32
//!   fx fy cx cy f64
//!   translation xyz f64, rotation quaternion ijkw f64
//!   rgb 3·n f64, depth n f64, gt_mask n u32
//!   corrupted length u32 (0 or n), corrupted_mask u32 each
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{Quaternion, Translation3, UnitQuaternion};

use crate::error::{Error, ProtocolError, Result};
use crate::evalkit::{CloudSource, SurfaceCloud};
use crate::field::wire::{put_vec3, Reader};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::scene::FrameBundle;

pub const FRAME_MAGIC: [u8; 4] = *b"OMSF";
pub const FRAME_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply<W: Write>(mut w: W, cloud: &SurfaceCloud, format: PlyFormat) -> Result<()> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uint instance\nproperty uint class\nend_header\n",
        cloud.len()
    )?;
    for i in 0..cloud.len() {
        let p = &cloud.points[i];
        match format {
            PlyFormat::Ascii => writeln!(w, "{} {} {} {} {}", p.x, p.y, p.z, cloud.instance_ids[i], cloud.class_ids[i])?,
            PlyFormat::BinaryLittleEndian => {
                let mut buf = Vec::with_capacity(32);
                put_vec3(&mut buf, p);
                buf.extend_from_slice(&cloud.instance_ids[i].to_le_bytes());
                buf.extend_from_slice(&cloud.class_ids[i].to_le_bytes());
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Protocol(ProtocolError::Malformed(msg.into()))
}

/// Reads a PLY written by [`write_ply`].
pub fn read_ply<R: Read>(r: R) -> Result<SurfaceCloud> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(malformed("missing end_header"));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["ply"] | [] => {}
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(malformed(format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| malformed(e.to_string()))?),
            ["property", ty, name] => props.push(format!("{ty} {name}")),
            ["end_header"] => break,
            ["comment", ..] => {}
            _ => return Err(malformed(format!("unexpected header line {line:?}"))),
        }
    }
    let expected = ["double x", "double y", "double z", "uint instance", "uint class"];
    if props != expected {
        return Err(malformed(format!("unexpected vertex properties {props:?}")));
    }
    let (format, n) = match (format, count) {
        (Some(f), Some(n)) => (f, n),
        _ => return Err(malformed("PLY header lacks format or vertex count")),
    };
    let mut cloud = SurfaceCloud::new(CloudSource::Reconstruction);
    match format {
        PlyFormat::Ascii => {
            for _ in 0..n {
                line.clear();
                r.read_line(&mut line)?;
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() != 5 {
                    return Err(malformed(format!("vertex line {line:?}")));
                }
                let f = |s: &str| s.parse::<f64>().map_err(|e| malformed(e.to_string()));
                let u = |s: &str| s.parse::<u32>().map_err(|e| malformed(e.to_string()));
                cloud.push(Vec3::new(f(t[0])?, f(t[1])?, f(t[2])?), u(t[3])?, u(t[4])?);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::new();
            r.read_to_end(&mut buf)?;
            if buf.len() != 32 * n {
                return Err(ProtocolError::Truncated { need: 32 * n, have: buf.len() }.into());
            }
            let mut rd = Reader::new(&buf);
            for _ in 0..n {
                let p = rd.vec3()?;
                let (i, c) = (rd.u32()?, rd.u32()?);
                cloud.push(p, i, c);
            }
        }
    }
    Ok(cloud)
}

pub fn write_frames<W: Write>(mut w: W, frames: &[FrameBundle]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        let n = f.len();
        if f.rgb.len() != n || f.depth.len() != n || f.gt_mask.len() != n || !(f.corrupted_mask.is_empty() || f.corrupted_mask.len() == n) {
            return Err(Error::Shape { expected: n, got: f.rgb.len().min(f.depth.len()).min(f.gt_mask.len()) });
        }
        for v in [f.agent_id, f.t as u32, f.width as u32, f.height as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let k = &f.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_vec3(&mut out, &f.pose.translation.vector);
        let q = f.pose.rotation.quaternion();
        for v in [q.i, q.j, q.k, q.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &f.rgb {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for d in &f.depth {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for m in &f.gt_mask {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&(f.corrupted_mask.len() as u32).to_le_bytes());
        for m in &f.corrupted_mask {
            out.extend_from_slice(&m.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_frames(buf: &[u8]) -> Result<Vec<FrameBundle>> {
    let mut r = Reader::new(buf);
    r.magic(FRAME_MAGIC)?;
    let version = r.u16()?;
    if version != FRAME_VERSION {
        return Err(ProtocolError::Version(version).into());
    }
    let count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (agent_id, t, width, height) = (r.u32()?, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = width.checked_mul(height).ok_or_else(|| malformed("frame size overflows"))?;
        if r.remaining() < n * 36 {
            return Err(ProtocolError::Truncated { need: buf.len() - r.remaining() + n * 36, have: buf.len() }.into());
        }
        let intrinsics = Intrinsics { fx: r.f64()?, fy: r.f64()?, cx: r.f64()?, cy: r.f64()? };
        let tr = r.vec3()?;
        let (i, j, k, w) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let pose = Pose::from_parts(Translation3::from(tr), UnitQuaternion::new_unchecked(Quaternion::new(w, i, j, k)));
        let rgb = (0..n).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect::<Result<Vec<_>, ProtocolError>>()?;
        let depth = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let gt_mask = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let m = r.u32()? as usize;
        if m != 0 && m != n {
            return Err(malformed(format!("corrupted mask of {m} pixels for a {n}-pixel frame")));
        }
        let corrupted_mask = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        frames.push(FrameBundle { agent_id, t, pose, intrinsics, width, height, rgb, depth, gt_mask, corrupted_mask });
    }
    if r.remaining() != 0 {
        return Err(malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(frames)
}

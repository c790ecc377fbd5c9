//! Byte layout of a compressed observation and stream framing.
//!
//! All fields are little-endian:
//!
//! | offset | size | field                                            |
//! |--------|------|--------------------------------------------------|
//! | 0      | 4    | magic `SGPC`                                     |
//! | 4      | 1    | version (1)                                      |
//! | 5      | 1    | flags; bit 0 = wrapped azimuth metric            |
//! | 6      | 2    | reserved, zero                                   |
//! | 8      | 4    | `u32` inducing count M                           |
//! | 12     | 24   | pose x, y, z, roll, pitch, yaw (`f32`)           |
//! | 36     | 4    | r_oc (`f32`)                                     |
//! | 40     | 20   | sf2, lt, li, alpha, sn2 (`f32`)                  |
//! | 60     | 12M  | azimuth, inclination, occupancy per point (`f32`) |
//!
//! A frame is `u32` payload length, payload, then the IEEE CRC-32 of the payload.

use std::io::{Read, Write};

use crate::encoder::CompressedObservation;
use crate::error::{Error, Result};
use crate::geometry::{Pose, SurfaceSample};
use crate::kernel::{AzimuthMetric, RqHyperparams};

pub const MAGIC: [u8; 4] = *b"SGPC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 60;
pub const BYTES_PER_POINT: usize = 12;
/// Length prefix plus checksum.
pub const FRAME_OVERHEAD: usize = 8;
const FLAG_WRAPPED: u8 = 1;

/// Serialized size for `m` inducing points.
pub const fn message_len(m: usize) -> usize {
    HEADER_LEN + BYTES_PER_POINT * m
}

pub fn serialize(obs: &CompressedObservation) -> Vec<u8> {
    let mut out = Vec::with_capacity(message_len(obs.len()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(match obs.metric {
        AzimuthMetric::Raw => 0,
        AzimuthMetric::Wrapped => FLAG_WRAPPED,
    });
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(obs.len() as u32).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    obs.pose.to_array().into_iter().for_each(&mut put);
    put(obs.r_oc);
    obs.hyperparams.to_array().into_iter().for_each(&mut put);
    for s in &obs.inducing {
        put(s.azimuth);
        put(s.inclination);
        put(s.occupancy);
    }
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<CompressedObservation> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let flags = bytes[5];
    if flags & !FLAG_WRAPPED != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#04x}")));
    }
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = message_len(m);
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as f64;
    let pose = Pose::from_array(std::array::from_fn(|k| f(12 + 4 * k)));
    let r_oc = f(36);
    let hp: [f64; 5] = std::array::from_fn(|k| f(40 + 4 * k));
    let hyperparams = RqHyperparams {
        signal_variance: hp[0],
        lengthscale_azimuth: hp[1],
        lengthscale_inclination: hp[2],
        rq_alpha: hp[3],
        noise_variance: hp[4],
    };
    let inducing = (0..m)
        .map(|k| {
            let o = HEADER_LEN + BYTES_PER_POINT * k;
            SurfaceSample::new(f(o), f(o + 4), f(o + 8))
        })
        .collect();
    let obs = CompressedObservation {
        pose,
        r_oc,
        hyperparams,
        metric: if flags & FLAG_WRAPPED != 0 {
            AzimuthMetric::Wrapped
        } else {
            AzimuthMetric::Raw
        },
        inducing,
    };
    obs.validate()?;
    Ok(obs)
}

/// Wraps a payload as length, bytes, CRC-32.
pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_OVERHEAD);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

/// Splits one complete frame; the slice must hold exactly one frame.
pub fn decode_frame(frame: &[u8]) -> Result<&[u8]> {
    if frame.len() < FRAME_OVERHEAD {
        return Err(Error::Length {
            expected: FRAME_OVERHEAD,
            actual: frame.len(),
        });
    }
    let len = u32::from_le_bytes(frame[0..4].try_into().expect("4 bytes")) as usize;
    let expected = len + FRAME_OVERHEAD;
    if frame.len() != expected {
        return Err(Error::Length {
            expected,
            actual: frame.len(),
        });
    }
    let payload = &frame[4..4 + len];
    check_crc(payload, &frame[4 + len..])?;
    Ok(payload)
}

fn check_crc(payload: &[u8], trailer: &[u8]) -> Result<()> {
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored == actual {
        Ok(())
    } else {
        Err(Error::Format(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")))
    }
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum FrameRead {
    Payload(Vec<u8>),
    /// A whole frame arrived but its checksum did not match.
    Corrupt { len: usize },
    /// The stream ended cleanly before a new frame started.
    Eof,
}

/// Reads one frame. Lengths above `max_payload` are rejected as a format error
/// since the stream can no longer be trusted to be aligned.
pub fn read_frame<R: Read>(reader: &mut R, max_payload: usize) -> Result<FrameRead> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(FrameRead::Eof),
            Ok(0) => {
                return Err(Error::Length {
                    expected: 4,
                    actual: got,
                })
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > max_payload {
        return Err(Error::Format(format!("frame length {len} exceeds limit {max_payload}")));
    }
    let mut body = vec![0u8; len + 4];
    reader.read_exact(&mut body)?;
    let trailer = body.split_off(len);
    match check_crc(&body, &trailer) {
        Ok(()) => Ok(FrameRead::Payload(body)),
        Err(_) => Ok(FrameRead::Corrupt { len }),
    }
}

pub fn write_frame<W: Write>(writer: &mut W, payload: &[u8]) -> Result<usize> {
    let frame = encode_frame(payload);
    writer.write_all(&frame)?;
    Ok(frame.len())
}

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::wire::{put_f32s, Reader};

pub const MAGIC: &[u8; 4] = b"NOIR";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 19;
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    HelloAck = 2,
    Emb = 3,
    Enriched = 4,
    GradDown = 5,
    GradUp = 6,
    ParamAck = 7,
    Error = 8,
    Bye = 9,
}

pub const FRAME_TYPES: [FrameType; 9] = [
    FrameType::Hello,
    FrameType::HelloAck,
    FrameType::Emb,
    FrameType::Enriched,
    FrameType::GradDown,
    FrameType::GradUp,
    FrameType::ParamAck,
    FrameType::Error,
    FrameType::Bye,
];

impl FrameType {
    pub fn from_u8(v: u8) -> Result<Self> {
        FRAME_TYPES
            .iter()
            .copied()
            .find(|t| *t as u8 == v)
            .ok_or_else(|| Error::format(format!("unknown frame type {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Version = 1,
    Dims = 2,
    Seq = 3,
    Format = 4,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ErrorCode::Version),
            2 => Ok(ErrorCode::Dims),
            3 => Ok(ErrorCode::Seq),
            4 => Ok(ErrorCode::Format),
            other => Err(Error::format(format!("unknown error code {other}"))),
        }
    }
}

/// A raw frame as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u16,
    pub frame_type: FrameType,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, session_id: u64, payload: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            frame_type,
            session_id,
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(Error::Oversize {
                size: self.payload.len(),
                limit: MAX_PAYLOAD,
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.frame_type as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Header fields and payload length; the payload itself is not read.
    fn decode_header(header: &[u8]) -> Result<(u16, FrameType, u64, usize)> {
        let mut r = Reader::new(header);
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad frame magic"));
        }
        let version = r.u16()?;
        let frame_type = FrameType::from_u8(r.u8()?)?;
        let session_id = r.u64()?;
        let len = r.u32()? as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Oversize {
                size: len,
                limit: MAX_PAYLOAD,
            });
        }
        Ok((version, frame_type, session_id, len))
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (version, frame_type, session_id, len) = Self::decode_header(bytes)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Truncated {
                needed: len,
                available: body.len(),
            });
        }
        if body.len() > len {
            return Err(Error::format("trailing bytes after frame payload"));
        }
        Ok(Self {
            version,
            frame_type,
            session_id,
            payload: body.to_vec(),
        })
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream before the first header byte.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => {
                    return Err(Error::Truncated {
                        needed: HEADER_LEN,
                        available: filled,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let (version, frame_type, session_id, len) = Self::decode_header(&header)?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::Truncated {
                    needed: len,
                    available: 0,
                }
            } else {
                e.into()
            }
        })?;
        Ok(Some(Self {
            version,
            frame_type,
            session_id,
            payload,
        }))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SessionMode {
    Inference = 0,
    Tuning = 1,
}

/// Session negotiation. The server answers with its own version and hidden dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub version: u16,
    pub mode: SessionMode,
    pub m: u32,
    pub d: u32,
    pub vocab_size: u32,
    pub lora_enabled: bool,
}

/// A row-major `n × d` block of boundary activations or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: u32,
    pub d: u32,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "tensor header says {n}x{d} but carries {} values",
                data.len()
            )));
        }
        Ok(Self {
            n: n as u32,
            d: d as u32,
            data,
        })
    }

    pub fn payload_len(&self) -> usize {
        8 + 4 * self.data.len()
    }
}

/// Learning-rate commit for the cloud's adapter and, in the reply, the number of adapter
/// parameters updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamAck {
    pub learning_rate: f64,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck(Hello),
    Emb(Tensor),
    Enriched(Tensor),
    GradDown(Tensor),
    GradUp(Tensor),
    ParamAck(ParamAck),
    Error(ErrorCode),
    Bye,
}

/// Primitive field kinds a payload may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    U8,
    U16,
    U32,
    F64,
    /// `n u32, d u32, n·d f32` with `d` fixed by the session's hidden dimension.
    HiddenTensor,
}

/// Every field of every frame type's payload, in wire order.
pub fn payload_schema(frame_type: FrameType) -> &'static [FieldKind] {
    use FieldKind::*;
    match frame_type {
        FrameType::Hello | FrameType::HelloAck => &[U16, U8, U32, U32, U32, U8],
        FrameType::Emb | FrameType::Enriched | FrameType::GradDown | FrameType::GradUp => &[HiddenTensor],
        FrameType::ParamAck => &[F64, U32],
        FrameType::Error => &[U8],
        FrameType::Bye => &[],
    }
}

fn hello_bytes(h: &Hello) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(h.mode as u8);
    out.extend_from_slice(&h.m.to_le_bytes());
    out.extend_from_slice(&h.d.to_le_bytes());
    out.extend_from_slice(&h.vocab_size.to_le_bytes());
    out.push(h.lora_enabled as u8);
    out
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.payload_len());
    out.extend_from_slice(&t.n.to_le_bytes());
    out.extend_from_slice(&t.d.to_le_bytes());
    put_f32s(&mut out, &t.data);
    out
}

fn read_hello(r: &mut Reader<'_>) -> Result<Hello> {
    let version = r.u16()?;
    let mode = match r.u8()? {
        0 => SessionMode::Inference,
        1 => SessionMode::Tuning,
        other => return Err(Error::format(format!("unknown session mode {other}"))),
    };
    let m = r.u32()?;
    let d = r.u32()?;
    let vocab_size = r.u32()?;
    let lora_enabled = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::format(format!("bad adapter flag {other}"))),
    };
    Ok(Hello {
        version,
        mode,
        m,
        d,
        vocab_size,
        lora_enabled,
    })
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let n = r.u32()?;
    let d = r.u32()?;
    let count = (n as usize)
        .checked_mul(d as usize)
        .ok_or_else(|| Error::format("tensor size overflow"))?;
    if count.checked_mul(4).is_none_or(|b| b > r.remaining()) {
        return Err(Error::format(format!(
            "tensor header says {n}x{d} but only {} payload bytes remain",
            r.remaining()
        )));
    }
    Ok(Tensor {
        n,
        d,
        data: r.f32_vec(count)?,
    })
}

impl Message {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Message::Hello(_) => FrameType::Hello,
            Message::HelloAck(_) => FrameType::HelloAck,
            Message::Emb(_) => FrameType::Emb,
            Message::Enriched(_) => FrameType::Enriched,
            Message::GradDown(_) => FrameType::GradDown,
            Message::GradUp(_) => FrameType::GradUp,
            Message::ParamAck(_) => FrameType::ParamAck,
            Message::Error(_) => FrameType::Error,
            Message::Bye => FrameType::Bye,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match self {
            Message::Hello(h) | Message::HelloAck(h) => hello_bytes(h),
            Message::Emb(t) | Message::Enriched(t) | Message::GradDown(t) | Message::GradUp(t) => tensor_bytes(t),
            Message::ParamAck(a) => {
                let mut out = a.learning_rate.to_le_bytes().to_vec();
                out.extend_from_slice(&a.count.to_le_bytes());
                out
            }
            Message::Error(code) => vec![*code as u8],
            Message::Bye => Vec::new(),
        }
    }

    pub fn to_frame(&self, session_id: u64) -> Frame {
        Frame::new(self.frame_type(), session_id, self.payload())
    }

    /// Parses a frame payload according to its type; malformed payloads are format errors.
    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let mut r = Reader::new(&frame.payload);
        let msg = (|| {
            Ok(match frame.frame_type {
                FrameType::Hello => Message::Hello(read_hello(&mut r)?),
                FrameType::HelloAck => Message::HelloAck(read_hello(&mut r)?),
                FrameType::Emb => Message::Emb(read_tensor(&mut r)?),
                FrameType::Enriched => Message::Enriched(read_tensor(&mut r)?),
                FrameType::GradDown => Message::GradDown(read_tensor(&mut r)?),
                FrameType::GradUp => Message::GradUp(read_tensor(&mut r)?),
                FrameType::ParamAck => Message::ParamAck(ParamAck {
                    learning_rate: r.f64()?,
                    count: r.u32()?,
                }),
                FrameType::Error => Message::Error(ErrorCode::from_u8(r.u8()?)?),
                FrameType::Bye => Message::Bye,
            })
        })()
        .map_err(|e| match e {
            Error::Truncated { .. } => Error::format(format!("{:?} payload too short", frame.frame_type)),
            other => other,
        })?;
        if r.remaining() != 0 {
            return Err(Error::format(format!("{:?} payload has trailing bytes", frame.frame_type)));
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello() -> Hello {
        Hello {
            version: PROTOCOL_VERSION,
            mode: SessionMode::Tuning,
            m: 3,
            d: 4,
            vocab_size: 6,
            lora_enabled: true,
        }
    }

    fn samples() -> Vec<Message> {
        let t = Tensor::new(3, 4, (0..12).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        vec![
            Message::Hello(hello()),
            Message::HelloAck(hello()),
            Message::Emb(t.clone()),
            Message::Enriched(t.clone()),
            Message::GradDown(t.clone()),
            Message::GradUp(t),
            Message::ParamAck(ParamAck {
                learning_rate: 0.125,
                count: 7,
            }),
            Message::Error(ErrorCode::Seq),
            Message::Bye,
        ]
    }

    #[test]
    fn every_frame_type_round_trips() {
        let msgs = samples();
        assert_eq!(msgs.len(), FRAME_TYPES.len());
        for msg in msgs {
            let frame = msg.to_frame(0xDEAD_BEEF);
            let bytes = frame.encode().unwrap();
            let back = Frame::decode(&bytes).unwrap();
            assert_eq!(back, frame);
            assert_eq!(back.encode().unwrap(), bytes);
            assert_eq!(Message::from_frame(&back).unwrap(), msg);
            let mut cursor = std::io::Cursor::new(bytes);
            assert_eq!(Frame::read_from(&mut cursor).unwrap().unwrap(), frame);
            assert!(Frame::read_from(&mut cursor).unwrap().is_none());
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let bytes = Message::Bye.to_frame(1).encode().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Frame::decode(&bad), Err(Error::Format(_))));

        let t = Tensor::new(1, 4, vec![1.0; 4]).unwrap();
        let bytes = Message::Emb(t).to_frame(1).encode().unwrap();
        assert!(matches!(
            Frame::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(Frame::decode(&bytes[..10]), Err(Error::Truncated { .. })));

        let mut huge = bytes.clone();
        huge[15..19].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_le_bytes());
        assert!(matches!(Frame::decode(&huge), Err(Error::Oversize { .. })));

        let mut unknown = bytes.clone();
        unknown[6] = 42;
        assert!(matches!(Frame::decode(&unknown), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_header_must_match_body() {
        let mut payload = Vec::new();
        payload.extend_from_slice(&2u32.to_le_bytes());
        payload.extend_from_slice(&4u32.to_le_bytes());
        put_f32s(&mut payload, &[0.0; 7]);
        let frame = Frame::new(FrameType::Emb, 0, payload);
        assert!(matches!(Message::from_frame(&frame), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_payload_is_linear_in_size() {
        for (n, d) in [(1usize, 4usize), (16, 8), (128, 32)] {
            let t = Tensor::new(n, d, vec![0.5; n * d]).unwrap();
            assert_eq!(Message::Emb(t.clone()).payload().len(), 8 + 4 * n * d);
            assert_eq!(Message::Enriched(t).payload().len(), 8 + 4 * n * d);
        }
    }

    #[test]
    fn schema_matches_encoding() {
        for msg in samples() {
            let fixed: usize = payload_schema(msg.frame_type())
                .iter()
                .map(|k| match k {
                    FieldKind::U8 => 1,
                    FieldKind::U16 => 2,
                    FieldKind::U32 => 4,
                    FieldKind::F64 => 8,
                    FieldKind::HiddenTensor => 8 + 4 * 12,
                })
                .sum();
            assert_eq!(fixed, msg.payload().len(), "{:?}", msg.frame_type());
        }
    }
}

//! Framing for probe and echo messages.
//!
//! Every message travels as one length-prefixed frame:
//!
//! ```text
//! +-----------+-----+-----------+-----------+-----------+-------------+---------+
//! | len (u32) | tag | sender    | origin    | round     | payload len | payload |
//! |           | u8  | u32       | u32       | u64       | u32         | bytes   |
//! +-----------+-----+-----------+-----------+-----------+-------------+---------+
//! ```
//!
//! All integers are big-endian. `len` counts the bytes after itself. For a
//! probe `sender` and `origin` are both the probing node; for an echo
//! `sender` is the responder and `origin` the node that sent the probe.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::topology::NodeId;

pub const TAG_PROBE: u8 = 0x01;
pub const TAG_ECHO: u8 = 0x02;
/// Bytes in the length prefix.
pub const PREFIX_LEN: usize = 4;
/// Bytes in the message header that follows the prefix.
pub const HEADER_LEN: usize = 21;
pub const MAX_PAYLOAD: usize = u32::MAX as usize - HEADER_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {0} bytes does not fit in a frame")]
    PayloadTooLarge(usize),
    #[error("unexpected message tag {0:#04x}")]
    BadTag(u8),
    #[error("frame length mismatch: {0}")]
    Truncated(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeMessage {
    pub sender: NodeId,
    pub round: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoMessage {
    pub responder: NodeId,
    pub origin_sender: NodeId,
    pub round: u64,
    pub payload: Vec<u8>,
}

/// Either kind of decoded message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Probe(ProbeMessage),
    Echo(EchoMessage),
}

/// Header fields shared by both message kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub tag: u8,
    pub sender: NodeId,
    pub origin: NodeId,
    pub round: u64,
    pub payload_len: u32,
}

fn encode(tag: u8, sender: NodeId, origin: NodeId, round: u64, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(payload.len()));
    }
    let body_len = HEADER_LEN + payload.len();
    let mut out = Vec::with_capacity(PREFIX_LEN + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.push(tag);
    out.extend_from_slice(&sender.0.to_be_bytes());
    out.extend_from_slice(&origin.0.to_be_bytes());
    out.extend_from_slice(&round.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn encode_probe(msg: &ProbeMessage) -> Result<Vec<u8>, WireError> {
    encode(TAG_PROBE, msg.sender, msg.sender, msg.round, &msg.payload)
}

pub fn encode_echo(msg: &EchoMessage) -> Result<Vec<u8>, WireError> {
    encode(TAG_ECHO, msg.responder, msg.origin_sender, msg.round, &msg.payload)
}

/// Parses the header of a frame body (the bytes after the length prefix).
pub fn parse_header(body: &[u8]) -> Result<Header, WireError> {
    if body.len() < HEADER_LEN {
        return Err(WireError::Truncated(format!(
            "body of {} bytes is shorter than the {HEADER_LEN}-byte header",
            body.len()
        )));
    }
    let u32_at = |i: usize| u32::from_be_bytes(body[i..i + 4].try_into().unwrap());
    let header = Header {
        tag: body[0],
        sender: NodeId(u32_at(1)),
        origin: NodeId(u32_at(5)),
        round: u64::from_be_bytes(body[9..17].try_into().unwrap()),
        payload_len: u32_at(17),
    };
    if body.len() - HEADER_LEN != header.payload_len as usize {
        return Err(WireError::Truncated(format!(
            "header announces {} payload bytes, body carries {}",
            header.payload_len,
            body.len() - HEADER_LEN
        )));
    }
    Ok(header)
}

/// Splits a complete frame into its body, checking the length prefix.
pub fn frame_body(frame: &[u8]) -> Result<&[u8], WireError> {
    if frame.len() < PREFIX_LEN {
        return Err(WireError::Truncated("missing length prefix".into()));
    }
    let claimed = u32::from_be_bytes(frame[..PREFIX_LEN].try_into().unwrap()) as usize;
    let body = &frame[PREFIX_LEN..];
    if body.len() != claimed {
        return Err(WireError::Truncated(format!(
            "prefix claims {claimed} bytes, frame carries {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Decodes a frame body of either kind.
pub fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let h = parse_header(body)?;
    let payload = body[HEADER_LEN..].to_vec();
    match h.tag {
        TAG_PROBE => Ok(Message::Probe(ProbeMessage {
            sender: h.sender,
            round: h.round,
            payload,
        })),
        TAG_ECHO => Ok(Message::Echo(EchoMessage {
            responder: h.sender,
            origin_sender: h.origin,
            round: h.round,
            payload,
        })),
        other => Err(WireError::BadTag(other)),
    }
}

pub fn decode_probe(frame: &[u8]) -> Result<ProbeMessage, WireError> {
    let body = frame_body(frame)?;
    match body.first() {
        Some(&TAG_PROBE) | None => {}
        Some(&t) => return Err(WireError::BadTag(t)),
    }
    match decode_body(body)? {
        Message::Probe(p) => Ok(p),
        Message::Echo(_) => Err(WireError::BadTag(TAG_ECHO)),
    }
}

pub fn decode_echo(frame: &[u8]) -> Result<EchoMessage, WireError> {
    let body = frame_body(frame)?;
    match body.first() {
        Some(&TAG_ECHO) | None => {}
        Some(&t) => return Err(WireError::BadTag(t)),
    }
    match decode_body(body)? {
        Message::Echo(e) => Ok(e),
        Message::Probe(_) => Err(WireError::BadTag(TAG_PROBE)),
    }
}

/// The echo a receiver writes back for `probe`.
pub fn make_echo(probe: &ProbeMessage, responder: NodeId) -> EchoMessage {
    EchoMessage {
        responder,
        origin_sender: probe.sender,
        round: probe.round,
        payload: probe.payload.clone(),
    }
}

/// Reads one frame from a stream and returns its body. `Ok(None)` on a clean
/// end of stream before any prefix byte.
pub fn read_frame<R: Read>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<Option<()>> {
    let mut prefix = [0u8; PREFIX_LEN];
    let mut got = 0;
    while got < PREFIX_LEN {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len < HEADER_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame body of {len} bytes is below header size"),
        ));
    }
    buf.clear();
    buf.resize(len, 0);
    r.read_exact(buf)?;
    Ok(Some(()))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)
}

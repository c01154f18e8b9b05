//! Length-prefixed binary protocol for delegating denoising, latent coding
//! and perceptual metrics to an external process.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! magic "SSWP" | version u16 = 1 | msg_type u8 | payload_len u64 | payload
//! ```
//!
//! Tensors travel as `dtype u8 (0 = f32) | ndim u8 | dims u32 x ndim | data`.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddim::{ConditioningRef, DenoiseError, Denoiser, Timestep};
use crate::lattice::{LatentGrid, LatticeError};
use crate::maskops::BinaryMask;

pub const MAGIC: [u8; 4] = *b"SSWP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;
/// Payloads must stay below 2^32 bytes even though the length field is u64.
pub const MAX_PAYLOAD: u64 = 1 << 32;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DTYPE_F32: u8 = 0;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    DenoiseReq = 1,
    DenoiseResp = 2,
    EncodeReq = 3,
    EncodeResp = 4,
    DecodeReq = 5,
    DecodeResp = 6,
    MetricReq = 7,
    MetricResp = 8,
    Error = 9,
    Hello = 10,
    HelloAck = 11,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageType::*;
        Some(match v {
            1 => DenoiseReq,
            2 => DenoiseResp,
            3 => EncodeReq,
            4 => EncodeResp,
            5 => DecodeReq,
            6 => DecodeResp,
            7 => MetricReq,
            8 => MetricResp,
            9 => Error,
            10 => Hello,
            11 => HelloAck,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramingErrorKind {
    BadMagic,
    BadVersion(u16),
    Oversize(u64),
    Truncated { needed: usize, available: usize },
}

/// Framing failure at byte `offset` of the inspected buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("framing error at offset {offset}: {kind:?}")]
pub struct FramingError {
    pub offset: usize,
    pub kind: FramingErrorKind,
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error("payload of {0} bytes exceeds the 2^32 limit")]
    Oversize(u64),
    #[error("malformed tensor: {0}")]
    Tensor(String),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("unexpected message type {got} (expected {expected:?})")]
    Unexpected { got: u8, expected: MessageType },
    #[error("shape contract violated: sent {sent:?}, received {received:?}")]
    ShapeContract { sent: Vec<u32>, received: Vec<u32> },
    #[error("handshake has not completed")]
    NoHandshake,
    #[error("backend does not advertise capability {0:?}")]
    MissingCapability(String),
    #[error("session is poisoned by an earlier framing error")]
    Poisoned,
    #[error("bad capability blob: {0}")]
    Capabilities(#[from] serde_json::Error),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = BridgeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    /// Raw type byte; may be a value unknown to this side.
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Self {
        Self { msg_type: msg_type as u8, payload }
    }

    pub fn kind(&self) -> Option<MessageType> {
        MessageType::from_u8(self.msg_type)
    }
}

/// `magic | version | type | len | payload`.
pub fn frame_message(msg_type: u8, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() as u64 >= MAX_PAYLOAD {
        return Err(BridgeError::Oversize(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(msg_type);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn parse_header(header: &[u8]) -> std::result::Result<(u8, u64), FramingErrorKind> {
    if header[0..4] != MAGIC {
        return Err(FramingErrorKind::BadMagic);
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(FramingErrorKind::BadVersion(version));
    }
    let len = u64::from_le_bytes(header[7..15].try_into().expect("8 bytes"));
    if len >= MAX_PAYLOAD {
        return Err(FramingErrorKind::Oversize(len));
    }
    Ok((header[6], len))
}

/// Parses one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn parse_message(bytes: &[u8]) -> std::result::Result<(WireMessage, usize), FramingError> {
    parse_at(bytes, 0)
}

fn parse_at(bytes: &[u8], base: usize) -> std::result::Result<(WireMessage, usize), FramingError> {
    let err = |offset, kind| FramingError { offset: base + offset, kind };
    if bytes.len() < HEADER_LEN {
        // report the first byte that disagrees with the magic, if any
        if let Some(i) = (0..bytes.len().min(4)).find(|&i| bytes[i] != MAGIC[i]) {
            return Err(err(i, FramingErrorKind::BadMagic));
        }
        return Err(err(0, FramingErrorKind::Truncated { needed: HEADER_LEN, available: bytes.len() }));
    }
    let (msg_type, len) = parse_header(&bytes[..HEADER_LEN]).map_err(|kind| {
        let offset = match kind {
            FramingErrorKind::BadMagic => (0..4).find(|&i| bytes[i] != MAGIC[i]).unwrap_or(0),
            FramingErrorKind::BadVersion(_) => 4,
            _ => 7,
        };
        err(offset, kind)
    })?;
    let total = HEADER_LEN + len as usize;
    if bytes.len() < total {
        return Err(err(
            HEADER_LEN,
            FramingErrorKind::Truncated { needed: len as usize, available: bytes.len() - HEADER_LEN },
        ));
    }
    Ok((WireMessage { msg_type, payload: bytes[HEADER_LEN..total].to_vec() }, total))
}

/// Splits a buffer into frames. Stops at the first framing error, whose
/// offset is relative to the start of `bytes`.
pub fn parse_stream(bytes: &[u8]) -> (Vec<WireMessage>, Option<FramingError>) {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match parse_at(&bytes[pos..], pos) {
            Ok((msg, used)) => {
                out.push(msg);
                pos += used;
            }
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

pub fn write_message(w: &mut impl Write, msg_type: u8, payload: &[u8]) -> Result<()> {
    w.write_all(&frame_message(msg_type, payload)?)?;
    w.flush()?;
    Ok(())
}

/// Reads exactly one frame. Framing failures are reported with offsets
/// relative to the start of this frame.
pub fn read_message(r: &mut impl Read) -> Result<WireMessage> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let (msg_type, len) = parse_header(&header).map_err(|kind| FramingError {
        offset: match kind {
            FramingErrorKind::BadVersion(_) => 4,
            FramingErrorKind::Oversize(_) => 7,
            _ => 0,
        },
        kind,
    })?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(WireMessage { msg_type, payload })
}

/// A float32 tensor as carried on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorWire {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorWire {
    pub fn from_grid(grid: &LatentGrid) -> Self {
        let (c, h, w) = grid.shape();
        Self { dims: vec![c as u32, h as u32, w as u32], data: grid.data().iter().map(|&v| v as f32).collect() }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            dims: vec![1, mask.height() as u32, mask.width() as u32],
            data: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Interprets the tensor as `C x H x W`. Two-dimensional tensors become a
    /// single channel and a leading batch dimension of 1 is dropped.
    pub fn to_grid(&self) -> Result<LatentGrid> {
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        let (c, h, w) = match d.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            [1, c, h, w] => (*c, *h, *w),
            _ => return Err(BridgeError::Tensor(format!("cannot view dims {:?} as CxHxW", self.dims))),
        };
        Ok(LatentGrid::new(c, h, w, self.data.iter().map(|&v| v as f64).collect())?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.dims.len() > MAX_NDIM {
            return Err(BridgeError::Tensor(format!("ndim {} exceeds {MAX_NDIM}", self.dims.len())));
        }
        let count: u64 = self.dims.iter().map(|&d| d as u64).product();
        if count != self.data.len() as u64 {
            return Err(BridgeError::Tensor(format!(
                "dims {:?} need {count} values, have {}",
                self.dims,
                self.data.len()
            )));
        }
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Decodes a tensor from the front of `bytes`, returning bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(TensorWire, usize)> {
        let bad = |m: String| BridgeError::Tensor(m);
        if bytes.len() < 2 {
            return Err(bad("missing dtype/ndim".into()));
        }
        if bytes[0] != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype {}", bytes[0])));
        }
        let ndim = bytes[1] as usize;
        if ndim > MAX_NDIM {
            return Err(bad(format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        let dims_end = 2 + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(bad("truncated dims".into()));
        }
        let dims: Vec<u32> =
            bytes[2..dims_end].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let count: u64 = dims.iter().map(|&d| d as u64).product();
        let data_len = count
            .checked_mul(4)
            .filter(|&n| n <= (bytes.len() - dims_end) as u64)
            .ok_or_else(|| bad(format!("dims {dims:?} exceed available data")))? as usize;
        let data = bytes[dims_end..dims_end + data_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((TensorWire { dims, data }, dims_end + data_len))
    }
}

/// Capability blob sent in HELLO_ACK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub caps: Vec<String>,
    pub latent_channels: u32,
    pub scale: u32,
}

pub const CAP_DENOISE: u8 = 1;
pub const CAP_ENCODE: u8 = 2;
pub const CAP_DECODE: u8 = 4;
pub const CAP_METRIC: u8 = 8;

impl Capabilities {
    pub fn bitmask(&self) -> u8 {
        self.caps.iter().fold(0, |m, c| {
            m | match c.as_str() {
                "denoise" => CAP_DENOISE,
                "encode" => CAP_ENCODE,
                "decode" => CAP_DECODE,
                "metric" => CAP_METRIC,
                _ => 0,
            }
        })
    }

    pub fn has(&self, cap: &str) -> bool {
        self.caps.iter().any(|c| c == cap)
    }
}

pub fn encode_denoise_request(z: &LatentGrid, t: u32, cond: ConditioningRef) -> Result<Vec<u8>> {
    let mut payload = TensorWire::from_grid(z).encode()?;
    payload.extend_from_slice(&t.to_le_bytes());
    payload.extend_from_slice(&cond.0.to_le_bytes());
    Ok(payload)
}

pub fn decode_denoise_request(payload: &[u8]) -> Result<(TensorWire, u32, ConditioningRef)> {
    let (tensor, used) = TensorWire::decode(payload)?;
    let rest = &payload[used..];
    if rest.len() != 12 {
        return Err(BridgeError::Payload(format!("expected 12 trailing bytes, got {}", rest.len())));
    }
    let t = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
    let cond = u64::from_le_bytes(rest[4..].try_into().expect("8 bytes"));
    Ok((tensor, t, ConditioningRef(cond)))
}

/// `name_len u32 | name | tensor a | tensor b | region mask tensor`.
pub fn encode_metric_request(name: &str, a: &LatentGrid, b: &LatentGrid, region: &BinaryMask) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
    payload.extend_from_slice(name.as_bytes());
    TensorWire::from_grid(a).encode_into(&mut payload)?;
    TensorWire::from_grid(b).encode_into(&mut payload)?;
    TensorWire::from_mask(region).encode_into(&mut payload)?;
    Ok(payload)
}

pub fn decode_metric_request(payload: &[u8]) -> Result<(String, TensorWire, TensorWire, TensorWire)> {
    if payload.len() < 4 {
        return Err(BridgeError::Payload("missing metric name length".into()));
    }
    let n = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
    let name_bytes = payload.get(4..4 + n).ok_or_else(|| BridgeError::Payload("truncated metric name".into()))?;
    let name = String::from_utf8(name_bytes.to_vec()).map_err(|e| BridgeError::Payload(e.to_string()))?;
    let mut pos = 4 + n;
    let mut next = || -> Result<TensorWire> {
        let (t, used) = TensorWire::decode(&payload[pos..])?;
        pos += used;
        Ok(t)
    };
    let (a, b, region) = (next()?, next()?, next()?);
    Ok((name, a, b, region))
}

/// Byte stream a session can run over.
pub trait Transport: Read + Write + Send {}
impl<T: Read + Write + Send> Transport for T {}

/// One serial client connection. Requests are answered in order; a framing
/// error poisons the session.
pub struct BridgeSession<S> {
    stream: S,
    capabilities: Option<Capabilities>,
    poisoned: bool,
}

impl BridgeSession<TcpStream> {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self::new(stream))
    }
}

impl<S: Read + Write> BridgeSession<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, capabilities: None, poisoned: false }
    }

    pub fn capabilities(&self) -> Option<&Capabilities> {
        self.capabilities.as_ref()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    fn round_trip(&mut self, msg_type: MessageType, payload: &[u8], expect: MessageType) -> Result<Vec<u8>> {
        if self.poisoned {
            return Err(BridgeError::Poisoned);
        }
        write_message(&mut self.stream, msg_type as u8, payload)?;
        let reply = match read_message(&mut self.stream) {
            Ok(m) => m,
            Err(e) => {
                if matches!(e, BridgeError::Framing(_)) {
                    self.poisoned = true;
                }
                return Err(e);
            }
        };
        match reply.kind() {
            Some(k) if k == expect => Ok(reply.payload),
            Some(MessageType::Error) => Err(BridgeError::Remote(String::from_utf8_lossy(&reply.payload).into_owned())),
            _ => Err(BridgeError::Unexpected { got: reply.msg_type, expected: expect }),
        }
    }

    pub fn hello(&mut self) -> Result<Capabilities> {
        let payload = self.round_trip(MessageType::Hello, &[], MessageType::HelloAck)?;
        let caps: Capabilities = serde_json::from_slice(&payload)?;
        self.capabilities = Some(caps.clone());
        Ok(caps)
    }

    fn require(&self, cap: &str) -> Result<()> {
        match &self.capabilities {
            None => Err(BridgeError::NoHandshake),
            Some(c) if c.has(cap) => Ok(()),
            Some(_) => Err(BridgeError::MissingCapability(cap.to_string())),
        }
    }

    pub fn denoise(&mut self, z: &LatentGrid, t: u32, cond: ConditioningRef) -> Result<LatentGrid> {
        self.require("denoise")?;
        let payload = encode_denoise_request(z, t, cond)?;
        let reply = self.round_trip(MessageType::DenoiseReq, &payload, MessageType::DenoiseResp)?;
        let (tensor, _) = TensorWire::decode(&reply)?;
        let sent = TensorWire::from_grid(z).dims;
        if tensor.dims != sent {
            return Err(BridgeError::ShapeContract { sent, received: tensor.dims });
        }
        tensor.to_grid()
    }

    pub fn encode(&mut self, image: &LatentGrid) -> Result<LatentGrid> {
        self.require("encode")?;
        let payload = TensorWire::from_grid(image).encode()?;
        let reply = self.round_trip(MessageType::EncodeReq, &payload, MessageType::EncodeResp)?;
        TensorWire::decode(&reply)?.0.to_grid()
    }

    pub fn decode(&mut self, latent: &LatentGrid) -> Result<LatentGrid> {
        self.require("decode")?;
        let payload = TensorWire::from_grid(latent).encode()?;
        let reply = self.round_trip(MessageType::DecodeReq, &payload, MessageType::DecodeResp)?;
        TensorWire::decode(&reply)?.0.to_grid()
    }

    pub fn metric(&mut self, name: &str, a: &LatentGrid, b: &LatentGrid, region: &BinaryMask) -> Result<f64> {
        self.require("metric")?;
        let payload = encode_metric_request(name, a, b, region)?;
        let reply = self.round_trip(MessageType::MetricReq, &payload, MessageType::MetricResp)?;
        let bytes: [u8; 8] = reply
            .as_slice()
            .try_into()
            .map_err(|_| BridgeError::Payload(format!("metric reply has {} bytes, expected 8", reply.len())))?;
        Ok(f64::from_le_bytes(bytes))
    }
}

/// Shared handle to a remote backend usable as a [`Denoiser`]. Calls are
/// serialized on the one connection.
pub struct RemoteBackend {
    session: Mutex<BridgeSession<Box<dyn Transport>>>,
    capabilities: Capabilities,
}

impl RemoteBackend {
    /// Wraps a transport and performs the handshake.
    pub fn handshake(stream: Box<dyn Transport>) -> Result<Self> {
        let mut session = BridgeSession::new(stream);
        let capabilities = session.hello()?;
        Ok(Self { session: Mutex::new(session), capabilities })
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Self::handshake(Box::new(stream))
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    pub fn with_session<T>(&self, f: impl FnOnce(&mut BridgeSession<Box<dyn Transport>>) -> Result<T>) -> Result<T> {
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

impl Denoiser for RemoteBackend {
    fn predict(&self, z: &LatentGrid, t: Timestep, cond: ConditioningRef) -> Result<LatentGrid, DenoiseError> {
        self.with_session(|s| s.denoise(z, t.train_step, cond)).map_err(|e| DenoiseError::new(e.to_string()))
    }
}

pub mod server {
    //! Minimal in-process server side of the protocol, used by the
    //! self-test command and by tests.

    use super::*;

    pub trait Handler {
        fn capabilities(&self) -> Capabilities;

        fn denoise(&self, z: TensorWire, _t: u32, _cond: ConditioningRef) -> std::result::Result<TensorWire, String> {
            Ok(z)
        }

        fn encode(&self, image: TensorWire) -> std::result::Result<TensorWire, String> {
            Ok(image)
        }

        fn decode(&self, latent: TensorWire) -> std::result::Result<TensorWire, String> {
            Ok(latent)
        }

        fn metric(
            &self,
            name: &str,
            _a: TensorWire,
            _b: TensorWire,
            _region: TensorWire,
        ) -> std::result::Result<f64, String> {
            Err(format!("metric {name:?} not available"))
        }
    }

    /// Returns every tensor verbatim.
    pub struct EchoHandler;

    impl Handler for EchoHandler {
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                caps: vec!["denoise".into(), "encode".into(), "decode".into()],
                latent_channels: 3,
                scale: 1,
            }
        }
    }

    fn dispatch(handler: &dyn Handler, msg: &WireMessage) -> (MessageType, Vec<u8>) {
        let reply = |r: std::result::Result<(MessageType, Vec<u8>), String>| match r {
            Ok(ok) => ok,
            Err(e) => (MessageType::Error, e.into_bytes()),
        };
        let tensor_reply = |kind, r: std::result::Result<TensorWire, String>| {
            r.and_then(|t| t.encode().map_err(|e| e.to_string())).map(|b| (kind, b))
        };
        reply(match msg.kind() {
            Some(MessageType::Hello) => serde_json::to_vec(&handler.capabilities())
                .map(|b| (MessageType::HelloAck, b))
                .map_err(|e| e.to_string()),
            Some(MessageType::DenoiseReq) => decode_denoise_request(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|(z, t, c)| tensor_reply(MessageType::DenoiseResp, handler.denoise(z, t, c))),
            Some(MessageType::EncodeReq) => TensorWire::decode(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|(t, _)| tensor_reply(MessageType::EncodeResp, handler.encode(t))),
            Some(MessageType::DecodeReq) => TensorWire::decode(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|(t, _)| tensor_reply(MessageType::DecodeResp, handler.decode(t))),
            Some(MessageType::MetricReq) => decode_metric_request(&msg.payload)
                .map_err(|e| e.to_string())
                .and_then(|(name, a, b, r)| handler.metric(&name, a, b, r))
                .map(|v| (MessageType::MetricResp, v.to_le_bytes().to_vec())),
            _ => Err(format!("unsupported message type {}", msg.msg_type)),
        })
    }

    /// Answers requests until the peer disconnects. A framing error is
    /// answered with ERROR and ends the connection.
    pub fn serve_connection(stream: &mut (impl Read + Write), handler: &dyn Handler) -> Result<()> {
        loop {
            let msg = match read_message(stream) {
                Ok(m) => m,
                Err(BridgeError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(BridgeError::Framing(e)) => {
                    let _ = write_message(stream, MessageType::Error as u8, e.to_string().as_bytes());
                    return Err(e.into());
                }
                Err(e) => return Err(e),
            };
            let (kind, payload) = dispatch(handler, &msg);
            write_message(stream, kind as u8, &payload)?;
        }
    }
}

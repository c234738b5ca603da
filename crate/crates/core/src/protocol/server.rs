use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::message::{ErrorCode, Frame, Hello, Message, ParamAck, SessionMode, PROTOCOL_VERSION};
use super::model::{LoraGrads, Mat, Middle};
use crate::error::{Error, Result};

/// Shared server state: read-only middle weights and the session id counter.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub middle: Arc<Middle>,
    next_session: Arc<AtomicU64>,
}

impl ServerConfig {
    pub fn new(middle: Middle) -> Self {
        Self {
            middle: Arc::new(middle),
            next_session: Arc::new(AtomicU64::new(1)),
        }
    }
}

/// How a connection ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    /// Client sent BYE.
    Bye,
    /// Stream closed without BYE.
    Closed,
    /// The server sent an ERROR frame and closed.
    Rejected(ErrorCode),
}

struct Session {
    id: u64,
    mode: SessionMode,
    /// Private copy of the middle block for tuning sessions with an adapter.
    own_middle: Option<Middle>,
    last_emb: Option<Mat>,
    accumulated: Option<LoraGrads>,
}

struct Violation(ErrorCode, String);

fn violation<T>(code: ErrorCode, detail: impl Into<String>) -> std::result::Result<T, Violation> {
    Err(Violation(code, detail.into()))
}

fn check_width(t_d: u32, d: usize) -> std::result::Result<(), Violation> {
    if t_d as usize != d {
        return violation(ErrorCode::Dims, format!("tensor width {t_d}, session width {d}"));
    }
    Ok(())
}

fn tensor_mat(t: &super::message::Tensor) -> std::result::Result<Mat, Violation> {
    if t.n == 0 {
        return violation(ErrorCode::Dims, "empty tensor");
    }
    Mat::from_tensor(t).map_err(|e| Violation(ErrorCode::Format, e.to_string()))
}

impl Session {
    fn middle<'a>(&'a self, shared: &'a Middle) -> &'a Middle {
        self.own_middle.as_ref().unwrap_or(shared)
    }

    fn handle(&mut self, msg: Message, shared: &Middle) -> std::result::Result<Option<Message>, Violation> {
        let d = shared.d;
        match msg {
            Message::Emb(t) => {
                check_width(t.d, d)?;
                let e = tensor_mat(&t)?;
                let out = self
                    .middle(shared)
                    .forward(&e)
                    .map_err(|err| Violation(ErrorCode::Dims, err.to_string()))?;
                if self.mode == SessionMode::Tuning {
                    self.last_emb = Some(e);
                }
                Ok(Some(Message::Enriched(out.to_tensor())))
            }
            Message::GradDown(t) => {
                if self.mode != SessionMode::Tuning {
                    return violation(ErrorCode::Seq, "gradient in an inference session");
                }
                let Some(e) = self.last_emb.take() else {
                    return violation(ErrorCode::Seq, "gradient without a preceding embedding");
                };
                check_width(t.d, d)?;
                if t.n as usize != e.rows {
                    return violation(ErrorCode::Dims, format!("gradient has {} rows, embedding had {}", t.n, e.rows));
                }
                let g = tensor_mat(&t)?;
                let (de, grads) = self
                    .middle(shared)
                    .backward(&e, &g)
                    .map_err(|err| Violation(ErrorCode::Dims, err.to_string()))?;
                if let (Some(grads), true) = (grads, self.own_middle.is_some()) {
                    match &mut self.accumulated {
                        Some(acc) => acc.add(&grads),
                        None => self.accumulated = Some(grads),
                    }
                }
                Ok(Some(Message::GradUp(de.to_tensor())))
            }
            Message::ParamAck(ack) => {
                if self.mode != SessionMode::Tuning {
                    return violation(ErrorCode::Seq, "parameter commit in an inference session");
                }
                if self.last_emb.is_some() {
                    return violation(ErrorCode::Seq, "parameter commit while a gradient is pending");
                }
                let updated = match (self.own_middle.as_mut(), self.accumulated.take()) {
                    (Some(middle), Some(acc)) => middle.apply_lora_update(&acc, ack.learning_rate, ack.count as usize),
                    _ => 0,
                };
                Ok(Some(Message::ParamAck(ParamAck {
                    learning_rate: ack.learning_rate,
                    count: updated as u32,
                })))
            }
            Message::Bye => Ok(None),
            other => violation(ErrorCode::Seq, format!("unexpected {:?} frame", other.frame_type())),
        }
    }
}

fn open_session(h: Hello, config: &ServerConfig) -> std::result::Result<(Session, Hello), Violation> {
    if h.version != PROTOCOL_VERSION {
        return violation(ErrorCode::Version, format!("client version {}, server {PROTOCOL_VERSION}", h.version));
    }
    let d = config.middle.d;
    if h.d as usize != d || h.m == 0 || h.vocab_size < 2 {
        return violation(
            ErrorCode::Dims,
            format!("client dims m={} d={} |V|={}, server d={d}", h.m, h.d, h.vocab_size),
        );
    }
    let lora = h.mode == SessionMode::Tuning && h.lora_enabled && config.middle.lora.is_some();
    let id = config.next_session.fetch_add(1, Ordering::Relaxed);
    let session = Session {
        id,
        mode: h.mode,
        own_middle: lora.then(|| (*config.middle).clone()),
        last_emb: None,
        accumulated: None,
    };
    let ack = Hello {
        version: PROTOCOL_VERSION,
        lora_enabled: lora,
        ..h
    };
    Ok((session, ack))
}

/// Serves one connection until BYE, end of stream, or a protocol violation. A violation is
/// answered with a single ERROR frame and the connection is closed.
pub fn serve_connection<S: Read + Write>(stream: &mut S, config: &ServerConfig) -> Result<SessionEnd> {
    let mut session: Option<Session> = None;
    loop {
        let frame = match Frame::read_from(stream) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(SessionEnd::Closed),
            Err(Error::Format(_)) | Err(Error::Oversize { .. }) => {
                let id = session.as_ref().map_or(0, |s| s.id);
                Message::Error(ErrorCode::Format).to_frame(id).write_to(stream)?;
                return Ok(SessionEnd::Rejected(ErrorCode::Format));
            }
            Err(e) => return Err(e),
        };
        let id = session.as_ref().map_or(0, |s| s.id);
        let outcome = (|| {
            if frame.version != PROTOCOL_VERSION {
                return violation(ErrorCode::Version, format!("frame version {}", frame.version));
            }
            let msg = Message::from_frame(&frame).map_err(|e| Violation(ErrorCode::Format, e.to_string()))?;
            match (&mut session, msg) {
                (None, Message::Hello(h)) => {
                    let (s, ack) = open_session(h, config)?;
                    let sid = s.id;
                    session = Some(s);
                    Ok((sid, Some(Message::HelloAck(ack))))
                }
                (None, Message::Bye) => Ok((0, None)),
                (None, other) => violation(ErrorCode::Seq, format!("{:?} before HELLO", other.frame_type())),
                (Some(s), msg) => {
                    if frame.session_id != s.id {
                        return violation(ErrorCode::Seq, format!("frame for session {}", frame.session_id));
                    }
                    Ok((s.id, s.handle(msg, &config.middle)?))
                }
            }
        })();
        match outcome {
            Ok((sid, Some(reply))) => reply.to_frame(sid).write_to(stream)?,
            Ok((sid, None)) => {
                Message::Bye.to_frame(sid).write_to(stream)?;
                return Ok(SessionEnd::Bye);
            }
            Err(Violation(code, _detail)) => {
                Message::Error(code).to_frame(id).write_to(stream)?;
                return Ok(SessionEnd::Rejected(code));
            }
        }
    }
}

/// Accepts connections until `shutdown` is set, one thread per connection.
pub fn serve_tcp(listener: TcpListener, config: ServerConfig, shutdown: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let config = config.clone();
                thread::spawn(move || {
                    let _ = serve_connection(&mut stream, &config);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

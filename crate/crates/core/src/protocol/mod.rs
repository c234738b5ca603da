//! Client/cloud split-inference protocol: frame codec, typed messages, toy analytic models,
//! the cloud server, the client roles and a fused reference computation.
//!
//! Frame layout (little-endian): magic `NOIR`, version u16, frame type u8, session id u64,
//! payload length u32, payload.

mod client;
mod message;
mod model;
mod oracle;
mod server;
mod transport;

pub use client::{client_generate, stuning_round, ClientSession, GenerationConfig, RecordExchange, TuningReport};
pub use message::{
    payload_schema, ErrorCode, FieldKind, Frame, FrameType, Hello, Message, ParamAck, SessionMode, Tensor,
    FRAME_TYPES, HEADER_LEN, MAGIC, MAX_PAYLOAD, PROTOCOL_VERSION,
};
pub use model::{
    ClientGrads, ClientModel, Layer, Lora, LoraGrads, Mat, Middle, MiddleKind, ToyStack, DECODER_DEPTH,
};
pub use oracle::{monolithic_oracle, OracleGrads, OracleOutput};
pub use server::{serve_connection, serve_tcp, ServerConfig, SessionEnd};
pub use transport::{loopback_pair, PipeEnd};

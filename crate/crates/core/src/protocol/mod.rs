//! Wire protocol and the staging server.

pub mod config;
pub mod server;
pub mod wire;

pub use config::{parse_size, ConfigError};
pub use server::{EventHook, LocalCluster, Server, ServerConfig, ServerError, ServerEvent};
pub use wire::{
    encode_frame, msg_type, read_frame, read_message, write_frame, write_put, BarrierMsg, ErrorCode, ErrorReply, FrameError,
    GetRequest, Message, PayloadError, ProtocolError, PutRequest, RawFrame, ServerStat, HEADER_LEN, MAGIC,
    MAX_PAYLOAD,
};

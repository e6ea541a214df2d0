use thiserror::Error;

use crate::geometry::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("time {t} outside trace range [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },
    #[error("selective reply needs a hop count of at least 1")]
    ZeroHopReply,
    #[error("no replica exists")]
    NoReplicaExists,
    #[error("instance with {nodes} nodes exceeds the exact-solver cap of {cap}")]
    InstanceTooLarge { nodes: usize, cap: usize },
    #[error("histograms have different bin edges")]
    BinMismatch,
    #[error("expected histogram is all zero")]
    ZeroExpected,
    #[error("empty sample set")]
    EmptySamples,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line() as usize);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line,
                msg: format!("{other:?}"),
            },
        }
    }
}

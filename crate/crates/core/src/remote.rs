//! Newline-delimited JSON request/response transport.
//!
//! One JSON object per line in each direction. A peer may answer any request
//! with `{"error": "..."}` instead of the expected message.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Deserialize)]
#[serde(untagged)]
enum Reply<T> {
    Err { error: String },
    Ok(T),
}

pub struct LineClient<R, W> {
    reader: BufReader<R>,
    writer: W,
}

impl LineClient<TcpStream, TcpStream> {
    /// Connect to `host:port`; a leading `tcp://` is accepted and stripped.
    pub fn connect(endpoint: &str) -> io::Result<Self> {
        let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        let stream = TcpStream::connect(addr)?;
        let reader = stream.try_clone()?;
        Ok(Self::new(reader, stream))
    }
}

impl<R: Read, W: Write> LineClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer,
        }
    }

    pub fn call<Req: Serialize, Resp: DeserializeOwned>(
        &mut self,
        request: &Req,
    ) -> Result<Resp, RemoteError> {
        let mut line = serde_json::to_string(request).map_err(RemoteError::Malformed)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;

        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(RemoteError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "peer closed the connection",
            )));
        }
        match serde_json::from_str::<Reply<Resp>>(reply.trim_end())
            .map_err(RemoteError::Malformed)?
        {
            Reply::Ok(resp) => Ok(resp),
            Reply::Err { error } => Err(RemoteError::Peer(error)),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Malformed(serde_json::Error),
    #[error("peer reported: {0}")]
    Peer(String),
}

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use super::actor::LocalActor;
use crate::error::{Error, Result};

/// One request/reply exchange with an actor.
pub trait ActorLink: Send + Sync {
    fn actor_id(&self) -> &str;

    /// Sends one frame and returns the actor's single reply frame.
    fn exchange(&self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>>;
}

/// Calls a [`LocalActor`] directly; frames are still encoded and decoded.
pub struct InProcessLink {
    actor: Arc<LocalActor>,
}

impl InProcessLink {
    pub fn new(actor: LocalActor) -> Self {
        Self {
            actor: Arc::new(actor),
        }
    }
}

impl ActorLink for InProcessLink {
    fn actor_id(&self) -> &str {
        self.actor.actor_id()
    }

    fn exchange(&self, frame: &[u8], _timeout: Duration) -> Result<Vec<u8>> {
        self.actor.handle_frame(frame)
    }
}

/// Newline-delimited frames over a TCP stream, one exchange per connection.
pub struct TcpLink {
    actor_id: String,
    addr: SocketAddr,
}

impl TcpLink {
    pub fn new(actor_id: impl Into<String>, addr: SocketAddr) -> Self {
        Self {
            actor_id: actor_id.into(),
            addr,
        }
    }
}

impl ActorLink for TcpLink {
    fn actor_id(&self) -> &str {
        &self.actor_id
    }

    fn exchange(&self, frame: &[u8], timeout: Duration) -> Result<Vec<u8>> {
        let io = |e: std::io::Error| Error::Protocol(format!("{}@{}: {e}", self.actor_id, self.addr));
        let stream = TcpStream::connect_timeout(&self.addr, timeout.max(Duration::from_millis(1)))
            .map_err(io)?;
        if !timeout.is_zero() {
            stream.set_read_timeout(Some(timeout)).map_err(io)?;
        }
        (&stream).write_all(frame).map_err(io)?;
        (&stream).flush().map_err(io)?;
        let mut reply = Vec::new();
        BufReader::new(&stream)
            .read_until(b'\n', &mut reply)
            .map_err(io)?;
        if reply.is_empty() {
            return Err(Error::Protocol(format!(
                "{} closed the connection without replying",
                self.actor_id
            )));
        }
        Ok(reply)
    }
}

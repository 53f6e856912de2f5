use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use log::{info, warn};

use super::message::{
    decode_message, encode_message, CallForUncertainty, Decline, Message, UncertaintyResponse,
};
use crate::dataset::ActorDataset;
use crate::ensemble::train_ensemble;
use crate::error::{Error, Result};

/// Fewer joined rows than this and an actor declines.
pub const DEFAULT_MIN_OVERLAP: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Response(UncertaintyResponse),
    Decline(Decline),
}

impl From<Reply> for Message {
    fn from(r: Reply) -> Self {
        match r {
            Reply::Response(x) => Message::Response(x),
            Reply::Decline(x) => Message::Decline(x),
        }
    }
}

/// Local computation of one actor: join, train, report one scalar.
///
/// Nothing but the scalar (or a bare decline) leaves this function; training
/// diagnostics are logged locally.
pub fn handle_call(
    actor: &ActorDataset,
    call: &CallForUncertainty,
    base_seed: u64,
    min_overlap: usize,
) -> Reply {
    let decline = || {
        Reply::Decline(Decline {
            actor_id: actor.actor_id().to_string(),
            call_id: call.call_id.clone(),
        })
    };
    let overlap = actor.overlap(call.metric.part_ids());
    if overlap == 0 || overlap < min_overlap {
        info!(
            "{}: declining {}, overlap {overlap} below {min_overlap}",
            actor.actor_id(),
            call.call_id
        );
        return decline();
    }
    let result = train_ensemble(actor, &call.metric, &call.hyper, base_seed)
        .and_then(|ensemble| ensemble.total_uncertainty(actor));
    match result {
        Ok(u) if u.is_finite() && u >= 0.0 => Reply::Response(UncertaintyResponse {
            actor_id: actor.actor_id().to_string(),
            call_id: call.call_id.clone(),
            total_uncertainty: u,
        }),
        Ok(u) => {
            warn!("{}: non-finite uncertainty {u}, declining", actor.actor_id());
            decline()
        }
        Err(e) => {
            warn!("{}: training failed ({e}), declining", actor.actor_id());
            decline()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorPolicy {
    pub base_seed: u64,
    pub min_overlap: usize,
    /// `false` makes the actor decline every call.
    pub participate: bool,
}

/// An actor with its private data, answering wire frames.
#[derive(Debug, Clone)]
pub struct LocalActor {
    dataset: ActorDataset,
    policy: ActorPolicy,
}

impl LocalActor {
    pub fn new(dataset: ActorDataset, policy: ActorPolicy) -> Self {
        Self { dataset, policy }
    }

    pub fn actor_id(&self) -> &str {
        self.dataset.actor_id()
    }

    pub fn respond(&self, call: &CallForUncertainty) -> Reply {
        if !self.policy.participate {
            return Reply::Decline(Decline {
                actor_id: self.actor_id().to_string(),
                call_id: call.call_id.clone(),
            });
        }
        handle_call(&self.dataset, call, self.policy.base_seed, self.policy.min_overlap)
    }

    /// Decodes a call frame and encodes the reply frame.
    pub fn handle_frame(&self, frame: &[u8]) -> Result<Vec<u8>> {
        match decode_message(frame)? {
            Message::Call(call) => Ok(encode_message(&self.respond(&call).into())),
            other => Err(Error::Protocol(format!(
                "actor expected a call, got `{}`",
                other.kind()
            ))),
        }
    }
}

/// Answers one call per connection until `max_connections` have been served
/// (or forever).
pub fn serve_actor(
    listener: TcpListener,
    actor: &LocalActor,
    max_connections: Option<usize>,
) -> Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Error::Protocol(format!("accept failed: {e}")))?;
        let mut reader = BufReader::new(stream.try_clone().map_err(|e| Error::Protocol(e.to_string()))?);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::Protocol(format!("read failed: {e}")))?;
        match actor.handle_frame(&line) {
            Ok(reply) => {
                let mut w = &stream;
                w.write_all(&reply)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::Protocol(format!("write failed: {e}")))?;
            }
            Err(e) => warn!("{}: dropping bad frame: {e}", actor.actor_id()),
        }
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

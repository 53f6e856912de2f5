//! Newline-delimited JSON frames exchanged between coordinator and actors.
//!
//! Every frame is a single object carrying `kind`, `call_id` and
//! `schema_version` plus a kind-specific payload. Field order does not
//! matter and unknown fields are ignored.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dataset::MetricSeries;
use crate::ensemble::EnsembleHyper;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CallForUncertainty {
    pub call_id: String,
    pub metric: MetricSeries,
    pub hyper: EnsembleHyper,
    pub response_deadline: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyResponse {
    pub actor_id: String,
    pub call_id: String,
    pub total_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decline {
    pub actor_id: String,
    pub call_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Call(CallForUncertainty),
    Response(UncertaintyResponse),
    Decline(Decline),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Call(_) => "call",
            Message::Response(_) => "response",
            Message::Decline(_) => "decline",
        }
    }

    pub fn call_id(&self) -> &str {
        match self {
            Message::Call(c) => &c.call_id,
            Message::Response(r) => &r.call_id,
            Message::Decline(d) => &d.call_id,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("empty frame")]
    Empty,
    #[error("truncated frame")]
    Truncated,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersion { expected: u32, found: u64 },
    #[error("missing or invalid field `{0}`")]
    Field(&'static str),
}

#[derive(Serialize, Deserialize)]
struct CallPayload {
    metric: MetricSeries,
    hyper: EnsembleHyper,
    response_deadline_ms: u64,
}

#[derive(Serialize, Deserialize)]
struct ResponsePayload {
    actor_id: String,
    total_uncertainty: f64,
}

#[derive(Serialize, Deserialize)]
struct DeclinePayload {
    actor_id: String,
}

/// Serialises `msg` as one UTF-8 line terminated by `\n`.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let payload = match msg {
        Message::Call(c) => serde_json::to_value(CallPayload {
            metric: c.metric.clone(),
            hyper: c.hyper.clone(),
            response_deadline_ms: c.response_deadline.as_millis() as u64,
        }),
        Message::Response(r) => serde_json::to_value(ResponsePayload {
            actor_id: r.actor_id.clone(),
            total_uncertainty: r.total_uncertainty,
        }),
        Message::Decline(d) => serde_json::to_value(DeclinePayload {
            actor_id: d.actor_id.clone(),
        }),
    }
    .expect("message payloads always serialise");
    let mut obj = match payload {
        Value::Object(map) => map,
        _ => unreachable!("payloads are structs"),
    };
    obj.insert("kind".into(), Value::from(msg.kind()));
    obj.insert("call_id".into(), Value::from(msg.call_id()));
    obj.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    let mut out = serde_json::to_vec(&Value::Object(obj)).expect("json values serialise");
    out.push(b'\n');
    out
}

pub fn decode_message(frame: &[u8]) -> Result<Message, DecodeError> {
    let text = std::str::from_utf8(frame).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let text = text.trim_end_matches(['\n', '\r']);
    if text.trim().is_empty() {
        return Err(DecodeError::Empty);
    }
    let value: Value = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            DecodeError::Truncated
        } else {
            DecodeError::Malformed(e.to_string())
        }
    })?;
    let Value::Object(obj) = value else {
        return Err(DecodeError::Malformed("frame is not an object".into()));
    };
    let version = obj
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or(DecodeError::Field("schema_version"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(DecodeError::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: version,
        });
    }
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or(DecodeError::Field("kind"))?
        .to_string();
    let call_id = obj
        .get("call_id")
        .and_then(Value::as_str)
        .ok_or(DecodeError::Field("call_id"))?
        .to_string();
    match kind.as_str() {
        "call" => {
            let p: CallPayload = payload(obj, "call")?;
            Ok(Message::Call(CallForUncertainty {
                call_id,
                metric: p.metric,
                hyper: p.hyper,
                response_deadline: Duration::from_millis(p.response_deadline_ms),
            }))
        }
        "response" => {
            let p: ResponsePayload = payload(obj, "response")?;
            Ok(Message::Response(UncertaintyResponse {
                actor_id: p.actor_id,
                call_id,
                total_uncertainty: p.total_uncertainty,
            }))
        }
        "decline" => {
            let p: DeclinePayload = payload(obj, "decline")?;
            Ok(Message::Decline(Decline {
                actor_id: p.actor_id,
                call_id,
            }))
        }
        _ => Err(DecodeError::UnknownKind(kind)),
    }
}

fn payload<T: serde::de::DeserializeOwned>(
    obj: Map<String, Value>,
    kind: &'static str,
) -> Result<T, DecodeError> {
    serde_json::from_value(Value::Object(obj))
        .map_err(|e| DecodeError::Malformed(format!("{kind} payload: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call() -> CallForUncertainty {
        CallForUncertainty {
            call_id: "call-7-0001".into(),
            metric: MetricSeries::new(vec![
                ("p1".into(), 0.25),
                ("p2".into(), -1.0 / 3.0),
                ("p3".into(), 1e-300),
            ])
            .unwrap(),
            hyper: EnsembleHyper::default(),
            response_deadline: Duration::from_millis(1500),
        }
    }

    #[test]
    fn call_round_trip() {
        let m = Message::Call(call());
        assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }

    #[test]
    fn decline_round_trip() {
        let d = Message::Decline(Decline {
            actor_id: "tier-2".into(),
            call_id: "c1".into(),
        });
        match decode_message(&encode_message(&d)).unwrap() {
            Message::Decline(x) => {
                assert_eq!(x.actor_id, "tier-2");
                assert_eq!(x.call_id, "c1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frames_are_single_lines() {
        let f = encode_message(&Message::Call(call()));
        assert_eq!(f.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(*f.last().unwrap(), b'\n');
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode_message(b""), Err(DecodeError::Empty));
        assert_eq!(decode_message(b"\n"), Err(DecodeError::Empty));
        let full = encode_message(&Message::Call(call()));
        assert_eq!(decode_message(&full[..full.len() / 2]), Err(DecodeError::Truncated));
        assert_eq!(
            decode_message(br#"{"kind":"hello","call_id":"x","schema_version":1}"#),
            Err(DecodeError::UnknownKind("hello".into()))
        );
        assert_eq!(
            decode_message(br#"{"kind":"decline","call_id":"x","schema_version":2,"actor_id":"a"}"#),
            Err(DecodeError::SchemaVersion { expected: 1, found: 2 })
        );
        assert!(matches!(decode_message(b"[1,2]"), Err(DecodeError::Malformed(_))));
        assert_eq!(
            decode_message(br#"{"kind":"decline","schema_version":1,"actor_id":"a"}"#),
            Err(DecodeError::Field("call_id"))
        );
    }

    #[test]
    fn unknown_fields_and_order_ignored() {
        let m = decode_message(
            br#"{"total_uncertainty":1.5,"extra":{"x":1},"actor_id":"a","schema_version":1,"call_id":"c","kind":"response"}"#,
        )
        .unwrap();
        assert_eq!(
            m,
            Message::Response(UncertaintyResponse {
                actor_id: "a".into(),
                call_id: "c".into(),
                total_uncertainty: 1.5,
            })
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn response_round_trip(actor in "[a-z0-9-]{1,12}", call in "[a-z0-9-]{1,12}", u in 0.0f64..1e12) {
                let m = Message::Response(UncertaintyResponse { actor_id: actor, call_id: call, total_uncertainty: u });
                prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
            }

            #[test]
            fn call_round_trip_any_metric(values in proptest::collection::vec(-1e6f64..1e6, 1..30), ms in 0u64..1_000_000) {
                let metric = MetricSeries::new(values.iter().enumerate().map(|(i, v)| (format!("id,{i}\"q"), *v)).collect()).unwrap();
                let m = Message::Call(CallForUncertainty {
                    call_id: "c".into(),
                    metric,
                    hyper: EnsembleHyper::default(),
                    response_deadline: Duration::from_millis(ms),
                });
                prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
            }
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::actor_seed;
use super::message::{decode_message, encode_message, CallForUncertainty, Message, UncertaintyResponse};
use super::ranking::{rank_contributions_with_slack, ContributionRanking};
use super::transport::ActorLink;
use super::{apply_transform, MetricTransform};
use crate::dataset::{make_noise_actor, ActorDataset, MetricSeries, NOISE_ACTOR_ID};
use crate::ensemble::{train_ensemble, EnsembleHyper};
use crate::error::{Error, Result};

pub const DEFAULT_NOISE_FEATURES: usize = 5;

/// Issues calls and keeps the (private) transform of each open call.
#[derive(Debug, Clone)]
pub struct Coordinator {
    seed: u64,
    issued: u64,
    open: BTreeMap<String, Option<MetricTransform>>,
}

impl Coordinator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            issued: 0,
            open: BTreeMap::new(),
        }
    }

    /// Builds a call with a fresh id; the metric is transformed before it is
    /// broadcast.
    pub fn issue_call(
        &mut self,
        metric: &MetricSeries,
        transform: Option<&MetricTransform>,
        hyper: &EnsembleHyper,
        deadline: Duration,
    ) -> Result<CallForUncertainty> {
        if metric.is_empty() {
            return Err(Error::invalid("cannot issue a call with an empty metric"));
        }
        let metric = match transform {
            Some(t) => apply_transform(metric, t)?,
            None => metric.clone(),
        };
        self.issued += 1;
        let call_id = format!("call-{}-{:04}", self.seed, self.issued);
        self.open.insert(call_id.clone(), transform.copied());
        Ok(CallForUncertainty {
            call_id,
            metric,
            hyper: hyper.clone(),
            response_deadline: deadline,
        })
    }

    pub fn is_open(&self, call_id: &str) -> bool {
        self.open.contains_key(call_id)
    }

    /// Transform kept back from actors for `call_id`.
    pub fn transform_of(&self, call_id: &str) -> Option<MetricTransform> {
        self.open.get(call_id).copied().flatten()
    }

    /// The same pipeline as an actor, on standard-normal features.
    pub fn run_noise_baseline(
        &self,
        call: &CallForUncertainty,
        feature_count: usize,
        seed: u64,
    ) -> Result<UncertaintyResponse> {
        if !self.is_open(&call.call_id) {
            return Err(Error::Protocol(format!("unknown call `{}`", call.call_id)));
        }
        let ids: Vec<String> = call.metric.part_ids().map(String::from).collect();
        let noise = noise_actor(&ids, feature_count, seed)?;
        let ensemble = train_ensemble(&noise, &call.metric, &call.hyper, seed)?;
        Ok(UncertaintyResponse {
            actor_id: NOISE_ACTOR_ID.to_string(),
            call_id: call.call_id.clone(),
            total_uncertainty: ensemble.total_uncertainty(&noise)?,
        })
    }
}

/// The pure-noise reference actor used with training seed `seed`.
pub fn noise_actor(part_ids: &[String], feature_count: usize, seed: u64) -> Result<ActorDataset> {
    make_noise_actor(part_ids.len(), feature_count, part_ids, actor_seed(seed, "features"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    #[serde(with = "millis")]
    pub deadline: Duration,
    pub noise_feature_count: usize,
    pub below_floor_slack: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deadline: Duration::from_secs(3600),
            noise_feature_count: DEFAULT_NOISE_FEATURES,
            below_floor_slack: 1.0,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToActor,
    FromActor,
}

/// One captured wire frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub actor_id: String,
    pub direction: Direction,
    pub frame: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignLog {
    pub call_id: String,
    pub responded: Vec<String>,
    pub declined: Vec<String>,
    pub timed_out: Vec<String>,
    /// Transport or protocol failures, counted as declines.
    pub failed: Vec<(String, String)>,
    /// Frames sorted by actor and direction, independent of arrival order.
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignOutcome {
    pub ranking: ContributionRanking,
    pub log: CampaignLog,
}

enum Outcome {
    Reply(Vec<u8>),
    Failed(String),
}

/// Broadcasts one call, waits for replies until the deadline, adds the noise
/// baseline and ranks. Actors that time out or fail are treated as declines.
pub fn run_campaign(
    links: &[Arc<dyn ActorLink>],
    metric: &MetricSeries,
    transform: Option<&MetricTransform>,
    hyper: &EnsembleHyper,
    config: &CampaignConfig,
) -> Result<CampaignOutcome> {
    if links.is_empty() {
        return Err(Error::invalid("campaign needs at least one actor"));
    }
    let mut coordinator = Coordinator::new(config.seed);
    let call = coordinator.issue_call(metric, transform, hyper, config.deadline)?;
    let frame = encode_message(&Message::Call(call.clone()));
    let frame_text = String::from_utf8_lossy(&frame).trim_end().to_string();
    let mut log = CampaignLog {
        call_id: call.call_id.clone(),
        ..CampaignLog::default()
    };

    let (tx, rx) = mpsc::channel();
    let started = Instant::now();
    for link in links {
        let link = Arc::clone(link);
        let tx = tx.clone();
        let frame = frame.clone();
        let deadline = config.deadline;
        log.transcript.push(TranscriptEntry {
            actor_id: link.actor_id().to_string(),
            direction: Direction::ToActor,
            frame: frame_text.clone(),
        });
        thread::spawn(move || {
            let outcome = match link.exchange(&frame, deadline) {
                Ok(reply) => Outcome::Reply(reply),
                Err(e) => Outcome::Failed(e.to_string()),
            };
            let _ = tx.send((link.actor_id().to_string(), outcome));
        });
    }
    drop(tx);

    let mut pending: BTreeSet<String> = links.iter().map(|l| l.actor_id().to_string()).collect();
    let mut responses = Vec::new();
    while !pending.is_empty() {
        let left = config.deadline.saturating_sub(started.elapsed());
        let Ok((actor_id, outcome)) = rx.recv_timeout(left) else {
            break;
        };
        pending.remove(&actor_id);
        let reply = match outcome {
            Outcome::Reply(r) => r,
            Outcome::Failed(e) => {
                warn!("{actor_id}: {e}");
                log.failed.push((actor_id, e));
                continue;
            }
        };
        log.transcript.push(TranscriptEntry {
            actor_id: actor_id.clone(),
            direction: Direction::FromActor,
            frame: String::from_utf8_lossy(&reply).trim_end().to_string(),
        });
        match decode_message(&reply) {
            Ok(Message::Response(r)) if r.call_id == call.call_id && r.actor_id == actor_id => {
                log.responded.push(actor_id);
                responses.push(r);
            }
            Ok(Message::Decline(d)) if d.call_id == call.call_id && d.actor_id == actor_id => {
                info!("{actor_id} declined");
                log.declined.push(actor_id);
            }
            Ok(other) => log.failed.push((
                actor_id,
                format!("unexpected `{}` for call `{}`", other.kind(), other.call_id()),
            )),
            Err(e) => log.failed.push((actor_id, e.to_string())),
        }
    }
    log.timed_out = pending.into_iter().collect();
    for id in &log.timed_out {
        warn!("{id}: no reply before the deadline");
    }
    log.responded.sort();
    log.declined.sort();
    log.failed.sort();
    log.transcript.sort_by(|a, b| {
        (a.actor_id.as_str(), a.direction).cmp(&(b.actor_id.as_str(), b.direction))
    });
    responses.sort_by(|a, b| a.actor_id.cmp(&b.actor_id));

    if responses.is_empty() {
        return Err(Error::Protocol(format!(
            "no actor answered call `{}`",
            call.call_id
        )));
    }
    let noise = coordinator.run_noise_baseline(
        &call,
        config.noise_feature_count,
        actor_seed(config.seed, NOISE_ACTOR_ID),
    )?;
    let ranking = rank_contributions_with_slack(&responses, &noise, config.below_floor_slack)?;
    Ok(CampaignOutcome { ranking, log })
}

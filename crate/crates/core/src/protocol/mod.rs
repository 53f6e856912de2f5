//! Coordinator/actor message flow for decentralised contribution estimation.
//!
//! The coordinator broadcasts a (possibly rescaled) metric with a call for
//! uncertainty. Each actor joins it to its private features, trains an
//! ensemble locally and answers with a single scalar, or declines. The
//! coordinator adds a pure-noise reference and ranks everyone by ascending
//! uncertainty.

mod actor;
mod coordinator;
mod message;
mod ranking;
mod transport;

use serde::{Deserialize, Serialize};

use crate::dataset::MetricSeries;
use crate::error::{Error, Result};

pub use actor::{handle_call, serve_actor, ActorPolicy, LocalActor, Reply, DEFAULT_MIN_OVERLAP};
pub use coordinator::{
    noise_actor, run_campaign, CampaignConfig, CampaignLog, CampaignOutcome, Coordinator, Direction,
    TranscriptEntry, DEFAULT_NOISE_FEATURES,
};
pub use message::{
    decode_message, encode_message, CallForUncertainty, Decline, DecodeError, Message,
    UncertaintyResponse, SCHEMA_VERSION,
};
pub use ranking::{
    rank_contributions, rank_contributions_with_slack, ContributionRanking, RankEntry,
};
pub use transport::{ActorLink, InProcessLink, TcpLink};

/// Invertible affine change of the broadcast metric: `v' = scale * v + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricTransform {
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
}

impl MetricTransform {
    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        let t = Self { scale, offset };
        t.validate()?;
        Ok(t)
    }

    /// Maps the series to zero mean and unit (population) standard deviation.
    pub fn standardising(series: &MetricSeries) -> Result<Self> {
        let n = series.len() as f64;
        if series.is_empty() {
            return Err(Error::invalid("cannot standardise an empty series"));
        }
        let mean = series.values().sum::<f64>() / n;
        let sd = (series.values().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 0.0) {
            return Err(Error::invalid("cannot standardise a constant series"));
        }
        Self::new(1.0 / sd, -mean / sd)
    }

    fn validate(&self) -> Result<()> {
        if self.scale == 0.0 || !self.scale.is_finite() || !self.offset.is_finite() {
            return Err(Error::invalid(format!(
                "transform scale {} / offset {} not invertible",
                self.scale, self.offset
            )));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            offset: -self.offset / self.scale,
        }
    }
}

pub fn apply_transform(series: &MetricSeries, t: &MetricTransform) -> Result<MetricSeries> {
    t.validate()?;
    series.map_values(|v| t.scale * v + t.offset)
}

/// Per-actor training seed derived from a campaign seed, independent of the
/// order in which actors are contacted.
pub fn actor_seed(campaign_seed: u64, actor_id: &str) -> u64 {
    // FNV-1a of the id, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in actor_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = campaign_seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

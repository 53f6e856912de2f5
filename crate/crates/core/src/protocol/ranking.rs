use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::message::UncertaintyResponse;
use crate::dataset::{csv_field, format_f64, NOISE_ACTOR_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub actor_id: String,
    pub total_uncertainty: f64,
    /// 1 = lowest uncertainty = largest estimated contribution.
    pub rank: usize,
    /// Uncertainty at or above the (slack-scaled) noise floor.
    pub below_floor: bool,
    pub is_noise: bool,
}

/// Actors plus the noise reference, ascending by total uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRanking {
    pub call_id: String,
    pub noise_floor: f64,
    pub entries: Vec<RankEntry>,
}

impl ContributionRanking {
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.actor_id.as_str()).collect()
    }

    pub fn rank_of(&self, actor_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.actor_id == actor_id)
            .map(|e| e.rank)
    }

    pub fn uncertainty_of(&self, actor_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.actor_id == actor_id)
            .map(|e| e.total_uncertainty)
    }

    pub fn below_floor_actors(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.below_floor)
            .map(|e| e.actor_id.as_str())
            .collect()
    }

    /// Reads the CSV written by [`Self::to_csv_string`]. The call id is not
    /// part of the file and comes back empty.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            rank: usize,
            actor_id: String,
            total_uncertainty: f64,
            below_floor: bool,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                row: i,
                message: e.to_string(),
            })?;
            entries.push(RankEntry {
                is_noise: row.actor_id == NOISE_ACTOR_ID,
                actor_id: row.actor_id,
                total_uncertainty: row.total_uncertainty,
                rank: row.rank,
                below_floor: row.below_floor,
            });
        }
        let noise_floor = entries
            .iter()
            .find(|e| e.is_noise)
            .map(|e| e.total_uncertainty)
            .ok_or_else(|| Error::invalid(format!("ranking has no `{NOISE_ACTOR_ID}` entry")))?;
        if entries.iter().enumerate().any(|(i, e)| e.rank != i + 1) {
            return Err(Error::invalid("ranking rows are not in rank order 1..n"));
        }
        Ok(Self {
            call_id: String::new(),
            noise_floor,
            entries,
        })
    }

    /// `rank,actor_id,total_uncertainty,below_floor`, one row per entry.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("rank,actor_id,total_uncertainty,below_floor\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.rank,
                csv_field(&e.actor_id),
                format_f64(e.total_uncertainty),
                e.below_floor
            );
        }
        out
    }
}

/// Ranks responses with the default slack of 1 (flag at `u >= noise_floor`).
pub fn rank_contributions(
    responses: &[UncertaintyResponse],
    noise: &UncertaintyResponse,
) -> Result<ContributionRanking> {
    rank_contributions_with_slack(responses, noise, 1.0)
}

/// Actors whose uncertainty reaches `slack * noise_floor` are flagged.
pub fn rank_contributions_with_slack(
    responses: &[UncertaintyResponse],
    noise: &UncertaintyResponse,
    slack: f64,
) -> Result<ContributionRanking> {
    if responses.is_empty() {
        return Err(Error::invalid("no actor responses to rank"));
    }
    if !(slack.is_finite() && slack > 0.0) {
        return Err(Error::invalid(format!("slack must be positive, got {slack}")));
    }
    let mut seen = HashSet::new();
    for r in responses.iter().chain(std::iter::once(noise)) {
        if r.call_id != noise.call_id {
            return Err(Error::Protocol(format!(
                "response from `{}` is for call `{}`, expected `{}`",
                r.actor_id, r.call_id, noise.call_id
            )));
        }
        if !(r.total_uncertainty.is_finite() && r.total_uncertainty >= 0.0) {
            return Err(Error::Domain(format!(
                "uncertainty {} from `{}`",
                r.total_uncertainty, r.actor_id
            )));
        }
        if !seen.insert(r.actor_id.as_str()) {
            return Err(Error::DuplicateId(r.actor_id.clone()));
        }
    }
    let floor = noise.total_uncertainty;
    let threshold = slack * floor;
    let mut entries: Vec<RankEntry> = responses
        .iter()
        .map(|r| RankEntry {
            actor_id: r.actor_id.clone(),
            total_uncertainty: r.total_uncertainty,
            rank: 0,
            below_floor: r.total_uncertainty >= threshold,
            is_noise: false,
        })
        .chain(std::iter::once(RankEntry {
            actor_id: noise.actor_id.clone(),
            total_uncertainty: floor,
            rank: 0,
            below_floor: false,
            is_noise: true,
        }))
        .collect();
    entries.sort_by(|a, b| {
        a.total_uncertainty
            .partial_cmp(&b.total_uncertainty)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.actor_id.cmp(&b.actor_id))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(ContributionRanking {
        call_id: noise.call_id.clone(),
        noise_floor: floor,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(id: &str, u: f64) -> UncertaintyResponse {
        UncertaintyResponse {
            actor_id: id.into(),
            call_id: "c".into(),
            total_uncertainty: u,
        }
    }

    #[test]
    fn ascending_order_with_noise() {
        let r = rank_contributions(&[resp("B", 1.0), resp("A", 0.5)], &resp("noise-baseline", 2.0)).unwrap();
        assert_eq!(r.order(), vec!["A", "B", "noise-baseline"]);
        assert!(r.below_floor_actors().is_empty());
        assert_eq!(r.rank_of("A"), Some(1));
        assert_eq!(r.rank_of("noise-baseline"), Some(3));
    }

    #[test]
    fn above_noise_is_flagged() {
        let r = rank_contributions(&[resp("A", 2.5)], &resp("noise-baseline", 2.0)).unwrap();
        assert_eq!(r.below_floor_actors(), vec!["A"]);
        assert_eq!(r.order(), vec!["noise-baseline", "A"]);
    }

    #[test]
    fn equal_to_floor_is_flagged() {
        let r = rank_contributions(&[resp("A", 2.0)], &resp("noise-baseline", 2.0)).unwrap();
        assert_eq!(r.below_floor_actors(), vec!["A"]);
    }

    #[test]
    fn slack_moves_threshold() {
        let r = rank_contributions_with_slack(&[resp("A", 1.9)], &resp("noise-baseline", 2.0), 0.9).unwrap();
        assert_eq!(r.below_floor_actors(), vec!["A"]);
        let r = rank_contributions_with_slack(&[resp("A", 2.1)], &resp("noise-baseline", 2.0), 1.1).unwrap();
        assert!(r.below_floor_actors().is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let r = rank_contributions(&[resp("B", 1.0), resp("A", 1.0)], &resp("noise-baseline", 2.0)).unwrap();
        assert_eq!(r.order()[..2], ["A", "B"]);
    }

    #[test]
    fn mixed_calls_rejected() {
        let mut b = resp("B", 1.0);
        b.call_id = "other".into();
        assert!(rank_contributions(&[resp("A", 1.0), b], &resp("noise-baseline", 2.0)).is_err());
    }

    #[test]
    fn empty_and_duplicates_rejected() {
        assert!(rank_contributions(&[], &resp("noise-baseline", 2.0)).is_err());
        assert!(rank_contributions(&[resp("A", 1.0), resp("A", 1.5)], &resp("noise-baseline", 2.0)).is_err());
    }

    #[test]
    fn csv_shape() {
        let r = rank_contributions(&[resp("A", 0.5)], &resp("noise-baseline", 2.0)).unwrap();
        assert_eq!(
            r.to_csv_string(),
            "rank,actor_id,total_uncertainty,below_floor\n1,A,0.5,false\n2,noise-baseline,2.0,false\n"
        );
    }

    #[test]
    fn csv_round_trip() {
        let r = rank_contributions(&[resp("A", 0.1 + 0.2), resp("B", 3.5)], &resp("noise-baseline", 2.0)).unwrap();
        let back = ContributionRanking::from_csv_reader(r.to_csv_string().as_bytes()).unwrap();
        assert_eq!(back.entries, r.entries);
        assert_eq!(back.noise_floor, 2.0);
        assert!(ContributionRanking::from_csv_reader("rank,actor_id,total_uncertainty,below_floor\n1,A,1.0,false\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_map_preserves_ranking(
                us in proptest::collection::vec(0.0f64..50.0, 1..12),
                floor in 0.0f64..50.0,
                a in 0.01f64..10.0,
                b in 0.0f64..5.0,
            ) {
                let rs: Vec<_> = us.iter().enumerate().map(|(i, u)| resp(&format!("a{i:02}"), *u)).collect();
                let base = rank_contributions(&rs, &resp("noise-baseline", floor)).unwrap();
                let f = |u: f64| (a * u + b).sqrt() + u.powi(3);
                let mapped: Vec<_> = rs.iter().map(|r| resp(&r.actor_id, f(r.total_uncertainty))).collect();
                let other = rank_contributions(&mapped, &resp("noise-baseline", f(floor))).unwrap();
                prop_assert_eq!(base.order(), other.order());
                prop_assert_eq!(base.below_floor_actors(), other.below_floor_actors());
            }

            #[test]
            fn entries_sorted_and_ranked(us in proptest::collection::vec(0.0f64..5.0, 1..12), floor in 0.0f64..5.0) {
                let rs: Vec<_> = us.iter().enumerate().map(|(i, u)| resp(&format!("a{i}"), *u)).collect();
                let r = rank_contributions(&rs, &resp("noise-baseline", floor)).unwrap();
                prop_assert_eq!(r.entries.len(), us.len() + 1);
                for (i, w) in r.entries.windows(2).enumerate() {
                    prop_assert!(w[0].total_uncertainty <= w[1].total_uncertainty);
                    prop_assert_eq!(w[0].rank, i + 1);
                }
            }
        }
    }
}

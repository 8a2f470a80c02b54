//! Peer broadcast between agents.
//!
//! Wire format is a single line:
//! `MSG sender=AZ cycle=3 rt=1.25 trend=+ ranking=TX,NM`
//! with `rt=na` when no estimate exists and an empty ranking allowed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::observation::Observation;
use super::PolicyAction;
use crate::policy::phase_shares;

/// Longest ranking carried in a message.
pub const MAX_RANKING: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: String,
    pub cycle: usize,
    pub rt: Option<f64>,
    /// Sign of the 7-day IR trend: −1, 0 or 1.
    pub trend: i8,
    /// Origin codes, tightest control first.
    pub ranking: Vec<String>,
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rt = self.rt.map_or("na".to_string(), |v| format!("{v}"));
        let trend = match self.trend.signum() {
            1 => "+",
            -1 => "-",
            _ => "0",
        };
        write!(
            f,
            "MSG sender={} cycle={} rt={} trend={} ranking={}",
            self.sender,
            self.cycle,
            rt,
            trend,
            self.ranking.join(",")
        )
    }
}

impl FromStr for Message {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(' ');
        if parts.next() != Some("MSG") {
            return Err("missing MSG tag".into());
        }
        let mut field = |name: &str| -> Result<&str, String> {
            let part = parts.next().ok_or(format!("missing {name}"))?;
            part.strip_prefix(name)
                .and_then(|p| p.strip_prefix('='))
                .ok_or(format!("expected {name}=, found {part:?}"))
        };
        let sender = field("sender")?.to_string();
        let cycle = field("cycle")?.parse().map_err(|e| format!("cycle: {e}"))?;
        let rt = match field("rt")? {
            "na" => None,
            v => Some(v.parse().map_err(|e| format!("rt: {e}"))?),
        };
        let trend = match field("trend")? {
            "+" => 1,
            "-" => -1,
            "0" => 0,
            other => return Err(format!("bad trend {other:?}")),
        };
        let ranking_raw = field("ranking")?;
        let ranking: Vec<String> = if ranking_raw.is_empty() {
            Vec::new()
        } else {
            ranking_raw.split(',').map(str::to_string).collect()
        };
        if ranking.len() > MAX_RANKING {
            return Err("ranking too long".into());
        }
        Ok(Message {
            sender,
            cycle,
            rt,
            trend,
            ranking,
        })
    }
}

/// Builds the broadcast for an agent's provisional action.
///
/// TIR origins are ranked by ascending early-phase share (ties by index);
/// SIS/TIS rank the single chosen origin.
pub fn extract_message(obs: &Observation, action: &PolicyAction) -> Message {
    let code = |o: usize| {
        obs.inflows
            .iter()
            .find(|f| f.origin == o)
            .map_or_else(|| o.to_string(), |f| f.code.clone())
    };
    let mut ranking: Vec<String> = match action {
        PolicyAction::Tir { allocations } => {
            let mut keyed: Vec<(f64, usize)> = allocations
                .iter()
                .map(|(o, a)| {
                    let early = phase_shares(a).map_or(a.fractions()[0], |s| s[0]);
                    (early, *o)
                })
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().map(|(_, o)| code(o)).collect()
        }
        PolicyAction::Sis { origin } | PolicyAction::Tis { origin } => vec![code(*origin)],
        PolicyAction::NoOp => Vec::new(),
    };
    ranking.truncate(MAX_RANKING);
    Message {
        sender: obs.code.clone(),
        cycle: obs.cycle,
        rt: obs.local.rt,
        trend: obs.local.trend_sign(),
        ranking,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_form() {
        let m = Message {
            sender: "AZ".into(),
            cycle: 3,
            rt: Some(1.25),
            trend: 1,
            ranking: vec!["TX".into(), "NM".into()],
        };
        assert_eq!(m.to_string(), "MSG sender=AZ cycle=3 rt=1.25 trend=+ ranking=TX,NM");
        let empty = Message {
            rt: None,
            trend: 0,
            ranking: vec![],
            ..m
        };
        assert_eq!(empty.to_string(), "MSG sender=AZ cycle=3 rt=na trend=0 ranking=");
        assert_eq!(empty.to_string().parse::<Message>().unwrap(), empty);
    }

    #[test]
    fn rejects_garbage() {
        assert!("hello".parse::<Message>().is_err());
        assert!("MSG sender=AZ cycle=x rt=na trend=0 ranking=".parse::<Message>().is_err());
        assert!("MSG sender=AZ cycle=1 rt=na trend=? ranking=".parse::<Message>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            sender in "[A-Z]{2}",
            cycle in 0usize..1000,
            rt in proptest::option::of(0.0..10.0f64),
            trend in -1i8..=1,
            ranking in proptest::collection::vec("[A-Z]{2}", 0..10),
        ) {
            let m = Message { sender, cycle, rt, trend, ranking };
            let text = m.to_string();
            prop_assert!(text.len() < 512);
            prop_assert_eq!(text.parse::<Message>().unwrap(), m);
        }
    }
}

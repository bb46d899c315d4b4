//! Server-to-node commands and the line-oriented control messages that carry
//! them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_GAIN_DELTA_DB: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandKind {
    /// Drop all stored, not yet uploaded segments.
    Flush,
    Reboot,
    GainAdjust { delta_db: f64 },
    Update { version: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCommand {
    pub id: u64,
    #[serde(flatten)]
    pub kind: CommandKind,
    pub issued_at_ms: i64,
}

impl NodeCommand {
    pub fn new(id: u64, kind: CommandKind, issued_at_ms: i64) -> Result<Self> {
        let c = Self {
            id,
            kind,
            issued_at_ms,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let CommandKind::GainAdjust { delta_db } = self.kind {
            if !(delta_db.is_finite() && delta_db.abs() <= MAX_GAIN_DELTA_DB) {
                return Err(Error::GainOutOfRange(delta_db));
            }
        }
        Ok(())
    }
}

/// One control record, sent as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Hello {
        node_id: String,
    },
    /// Reply to `Hello`; the server's public key follows as a separate frame.
    Welcome,
    /// Precedes an envelope frame. `applied` lists command ids the node has
    /// carried out since its last successful exchange.
    Upload {
        seq: u64,
        #[serde(default)]
        applied: Vec<u64>,
    },
    Ack {
        seq: u64,
        /// Highest seq below which the server holds every segment.
        contiguous: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<NodeCommand>,
    },
    Reject {
        seq: u64,
        reason: String,
    },
}

impl ControlMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("control message serialises");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim_end())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_is_bounded() {
        assert!(NodeCommand::new(1, CommandKind::GainAdjust { delta_db: 20.0 }, 0).is_ok());
        assert!(NodeCommand::new(1, CommandKind::GainAdjust { delta_db: -20.5 }, 0).is_err());
        assert!(NodeCommand::new(1, CommandKind::GainAdjust { delta_db: f64::NAN }, 0).is_err());
    }

    #[test]
    fn control_lines_round_trip() {
        let msgs = [
            ControlMessage::Hello { node_id: "n".into() },
            ControlMessage::Welcome,
            ControlMessage::Upload { seq: 4, applied: vec![1, 2] },
            ControlMessage::Ack {
                seq: 4,
                contiguous: Some(4),
                command: Some(NodeCommand::new(9, CommandKind::GainAdjust { delta_db: 3.0 }, 5).unwrap()),
            },
            ControlMessage::Ack { seq: 0, contiguous: None, command: None },
            ControlMessage::Reject { seq: 1, reason: "auth".into() },
        ];
        for m in msgs {
            let line = m.to_line();
            assert!(line.ends_with('\n') && line.matches('\n').count() == 1);
            assert_eq!(ControlMessage::from_line(&line).unwrap(), m);
        }
        let line = ControlMessage::Upload { seq: 4, applied: vec![] }.to_line();
        assert!(line.starts_with("{\"type\":\"upload\",\"seq\":4"), "{line}");
    }
}

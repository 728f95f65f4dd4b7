//! Structured event records emitted by the serving engine, one per request
//! lifecycle transition, consumed by the metrics module and written as JSON
//! lines by the CLI.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::pool::{AdapterId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Admit,
    Abort,
    FirstToken,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub event: EventKind,
    pub request_id: RequestId,
    pub adapter_id: Option<AdapterId>,
}

pub fn write_jsonl(events: &[EventRecord], mut w: impl Write) -> std::io::Result<()> {
    for e in events {
        let line = serde_json::to_string(e).expect("event serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> std::io::Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let events = vec![
            EventRecord { time: 0.5, event: EventKind::Arrival, request_id: 1, adapter_id: Some(3) },
            EventRecord { time: 1.0, event: EventKind::Admit, request_id: 1, adapter_id: Some(3) },
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, events);
    }
}

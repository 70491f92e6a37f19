use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One server state transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: f64,
    pub round: u64,
    pub event: String,
    pub detail: Value,
}

/// Append-only server event log, kept in memory and optionally mirrored to a
/// JSON-lines file.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
    file: Option<File>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { events: Vec::new(), file: Some(file) })
    }

    pub fn log(&mut self, round: u64, event: &str, detail: Value) -> io::Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let e = Event { ts, round, event: event.to_string(), detail };
        if let Some(f) = &mut self.file {
            let mut line = serde_json::to_vec(&e).expect("events serialize");
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.events.push(e);
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn named<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.event == event)
    }

    pub fn read_jsonl(path: &Path) -> io::Result<Vec<Event>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
        }
        Ok(out)
    }
}

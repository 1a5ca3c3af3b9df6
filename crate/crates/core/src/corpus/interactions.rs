use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Delimiters for text inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelimiterConfig {
    pub delimiter: u8,
    /// Separates values inside list-valued feature cells.
    pub list_delimiter: char,
}

impl Default for DelimiterConfig {
    fn default() -> Self {
        Self {
            delimiter: b',',
            list_delimiter: '|',
        }
    }
}

impl DelimiterConfig {
    pub fn tsv() -> Self {
        Self {
            delimiter: b'\t',
            ..Self::default()
        }
    }
}

/// Interned user and item ids. Dense indices are assigned in order of first occurrence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdSpace {
    pub users: IndexSet<String>,
    pub items: IndexSet<String>,
}

impl IdSpace {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_name(&self, user: u32) -> &str {
        &self.users[user as usize]
    }

    pub fn item_name(&self, item: u32) -> &str {
        &self.items[item as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub label: Option<u8>,
}

impl Event {
    pub fn new(user: u32, item: u32, timestamp: i64) -> Self {
        Self {
            user,
            item,
            timestamp,
            label: None,
        }
    }

    /// Unlabelled events count as positives.
    pub fn is_positive(&self) -> bool {
        self.label != Some(0)
    }
}

/// Timestamped user-item events over a shared id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionLog {
    pub ids: Arc<IdSpace>,
    pub events: Vec<Event>,
}

impl InteractionLog {
    pub fn new(ids: Arc<IdSpace>, events: Vec<Event>) -> Self {
        Self { ids, events }
    }

    /// Builds a log from string triples, interning ids in order of appearance.
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, i64)>) -> Self {
        let mut ids = IdSpace::default();
        let mut events = Vec::new();
        for (u, i, t) in triples {
            let (user, _) = ids.users.insert_full(u.to_owned());
            let (item, _) = ids.items.insert_full(i.to_owned());
            events.push(Event::new(user as u32, item as u32, t));
        }
        Self::new(Arc::new(ids), events)
    }

    /// Same id space, different events.
    pub fn with_events(&self, events: Vec<Event>) -> Self {
        Self::new(Arc::clone(&self.ids), events)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.ids.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.ids.n_items()
    }

    /// SHA-256 over the events rendered with their original string ids, in log order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.events {
            let line = format!(
                "{}\t{}\t{}\t{}\n",
                self.ids.user_name(e.user),
                self.ids.item_name(e.item),
                e.timestamp,
                e.label.map_or(String::new(), |l| l.to_string())
            );
            hasher.update(line.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
}

/// Reads a delimited interaction file with a header row naming
/// `user`, `item`, `timestamp` and optionally `label`.
pub fn load_interactions(path: &Path, format: &DelimiterConfig) -> Result<InteractionLog> {
    let mut raw = String::new();
    File::open(path)?.read_to_string(&mut raw)?;
    if raw.trim().is_empty() {
        return Ok(InteractionLog::new(Arc::new(IdSpace::default()), Vec::new()));
    }

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        find_column(&headers, name)
            .ok_or_else(|| Error::Schema(format!("{}: missing `{name}` column", path.display())))
    };
    let user_col = column("user")?;
    let item_col = column("item")?;
    let time_col = column("timestamp")?;
    let label_col = find_column(&headers, "label");

    let mut ids = IdSpace::default();
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |col: usize, name: &str| {
            record
                .get(col)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_error(path, line, format!("missing {name}")))
        };
        let user = field(user_col, "user")?;
        let item = field(item_col, "item")?;
        let timestamp: i64 = field(time_col, "timestamp")?
            .parse()
            .map_err(|_| parse_error(path, line, "timestamp is not an integer".into()))?;
        let label = match label_col.and_then(|c| record.get(c)).filter(|s| !s.is_empty()) {
            None => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => {
                return Err(parse_error(path, line, format!("label `{other}` is not 0 or 1")))
            }
        };
        let (user, _) = ids.users.insert_full(user.to_owned());
        let (item, _) = ids.items.insert_full(item.to_owned());
        events.push(Event {
            user: user as u32,
            item: item as u32,
            timestamp,
            label,
        });
    }
    Ok(InteractionLog::new(Arc::new(ids), events))
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_three_events() {
        let f = write("user,item,timestamp\nu1,i1,5\nu1,i2,6\nu2,i1,7\n");
        let log = load_interactions(f.path(), &DelimiterConfig::default()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.n_users(), 2);
        assert_eq!(log.n_items(), 2);
        assert_eq!(log.events[2], Event::new(1, 0, 7));
        assert_eq!(log.ids.user_name(1), "u2");
    }

    #[test]
    fn empty_file_is_empty_log() {
        let f = write("");
        let log = load_interactions(f.path(), &DelimiterConfig::default()).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn duplicates_are_kept() {
        let f = write("user,item,timestamp\nu1,i1,5\nu1,i1,5\n");
        let log = load_interactions(f.path(), &DelimiterConfig::default()).unwrap();
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn malformed_record_names_line() {
        let f = write("user,item,timestamp\nu1,i1,5\nu1,i2,soon\n");
        let err = load_interactions(f.path(), &DelimiterConfig::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_timestamp_column_is_schema_error() {
        let f = write("user,item\nu1,i1\n");
        let err = load_interactions(f.path(), &DelimiterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn tsv_with_labels() {
        let f = write("user\titem\ttimestamp\tlabel\na\tx\t1\t1\na\ty\t2\t0\n");
        let log = load_interactions(f.path(), &DelimiterConfig::tsv()).unwrap();
        assert!(log.events[0].is_positive());
        assert!(!log.events[1].is_positive());
    }

    #[test]
    fn checksum_depends_on_content() {
        let a = InteractionLog::from_triples([("u1", "i1", 1)]);
        let b = InteractionLog::from_triples([("u1", "i1", 2)]);
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}

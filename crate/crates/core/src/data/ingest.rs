use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};

use super::InteractionDataset;

pub const DEFAULT_CORE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `user<TAB>item<TAB>unix_timestamp`
    Tsv,
    /// `{"user": .., "item": .., "ts": ..}` per line. Amazon review dumps
    /// (`reviewerID`, `asin`, `unixReviewTime`) are accepted as well.
    Jsonl,
    /// A dataset container written by [`InteractionDataset::save_json`].
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" | "txt" => Some(Format::Tsv),
            "jsonl" => Some(Format::Jsonl),
            "json" => Some(Format::Json),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "tsv" => Some(Format::Tsv),
            "jsonl" => Some(Format::Jsonl),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Users and items with fewer interactions are removed iteratively.
    pub min_interactions: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_interactions: DEFAULT_CORE,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RawInteraction {
    pub user: String,
    pub item: String,
    pub ts: i64,
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(alias = "reviewerID", alias = "user_id")]
    user: Value,
    #[serde(alias = "asin", alias = "item_id")]
    item: Value,
    #[serde(alias = "unixReviewTime", alias = "timestamp")]
    ts: Value,
}

/// Parses, 5-core filters, orders and densifies an interaction log.
pub fn ingest(path: &Path, format: Format) -> Result<InteractionDataset> {
    ingest_with(path, format, &IngestOptions::default())
}

pub fn ingest_with(path: &Path, format: Format, options: &IngestOptions) -> Result<InteractionDataset> {
    let records = match format {
        Format::Json => return InteractionDataset::load_json(path),
        Format::Tsv => read_tsv(path)?,
        Format::Jsonl => read_jsonl(path)?,
    };
    build_dataset(records, options.min_interactions)
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn read_tsv(path: &Path) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let ts = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(format!("bad timestamp {:?}: {e}", fields[2])))?;
        out.push(RawInteraction {
            user: user.to_string(),
            item: item.to_string(),
            ts,
        });
    }
    Ok(out)
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let user = id_string(&rec.user).ok_or_else(|| parse_err("user must be a string or number".into()))?;
        let item = id_string(&rec.item).ok_or_else(|| parse_err("item must be a string or number".into()))?;
        let ts = rec
            .ts
            .as_i64()
            .or_else(|| rec.ts.as_str().and_then(|s| s.parse().ok()))
            .ok_or_else(|| parse_err("ts must be an integer".into()))?;
        out.push(RawInteraction { user, item, ts });
    }
    Ok(out)
}

/// Removes users and items with fewer than `k` interactions until no more
/// removals happen. Returns the surviving records in input order.
pub(crate) fn k_core(mut records: Vec<RawInteraction>, k: usize) -> Vec<RawInteraction> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&k| k) {
            return records;
        }
        let mut flags = keep.into_iter();
        records.retain(|_| flags.next().unwrap_or(false));
    }
}

/// Filters, groups by user, sorts each history by timestamp (ties keep file
/// order) and assigns dense ids in lexicographic order of the raw ids.
pub(crate) fn build_dataset(records: Vec<RawInteraction>, k: usize) -> Result<InteractionDataset> {
    let records = k_core(records, k);
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_user: BTreeMap<String, Vec<(i64, usize, String)>> = BTreeMap::new();
    let mut item_set: BTreeMap<String, u32> = BTreeMap::new();
    for (order, r) in records.into_iter().enumerate() {
        item_set.insert(r.item.clone(), 0);
        per_user.entry(r.user).or_default().push((r.ts, order, r.item));
    }
    for (i, id) in item_set.values_mut().enumerate() {
        *id = i as u32 + 1;
    }
    let item_ids: Vec<String> = item_set.keys().cloned().collect();
    let mut user_ids = Vec::with_capacity(per_user.len());
    let mut sequences = Vec::with_capacity(per_user.len());
    for (user, mut events) in per_user {
        events.sort_by_key(|&(ts, order, _)| (ts, order));
        sequences.push(events.iter().map(|(_, _, item)| item_set[item]).collect());
        user_ids.push(user);
    }
    InteractionDataset::new(user_ids, item_ids, sequences, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    /// Three users each rating the same five items: every user and item has
    /// exactly 3 or 5 interactions.
    fn three_by_five() -> String {
        let mut s = String::new();
        for u in 0..3 {
            for i in 0..5 {
                s.push_str(&format!("u{u}\titem{i}\t{}\n", 100 * u + 10 - i));
            }
        }
        s
    }

    #[test]
    fn tiny_file_fails_five_core() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "t.tsv", "u1\ti1\t1\nu1\ti2\t2\n");
        assert!(matches!(ingest(&path, Format::Tsv), Err(Error::EmptyDataset)));
    }

    #[test]
    fn three_users_five_items_survive_at_core_three() {
        // Hand-run of the filter: users have 5 interactions, items have 3.
        // With k = 3 nothing is removed; with k = 5 every item falls, and then
        // every user.
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "t.tsv", &three_by_five());
        let ds = ingest_with(&path, Format::Tsv, &IngestOptions { min_interactions: 3 }).unwrap();
        assert_eq!((ds.user_count(), ds.item_count(), ds.interaction_count()), (3, 5, 15));
        // Timestamps decrease with the item index, so histories run item4..item0.
        assert_eq!(ds.sequence(0), &[5, 4, 3, 2, 1]);
        assert!(matches!(ingest(&path, Format::Tsv), Err(Error::EmptyDataset)));
    }

    #[test]
    fn five_users_five_items_survive_five_core() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for u in 0..5 {
            for i in 0..5 {
                body.push_str(&format!("u{u}\titem{i}\t{i}\n"));
            }
        }
        let path = write(&dir, "t.tsv", &body);
        let ds = ingest(&path, Format::Tsv).unwrap();
        assert_eq!((ds.user_count(), ds.item_count(), ds.interaction_count()), (5, 5, 25));
    }

    #[test]
    fn k_core_is_iterative() {
        // item "rare" has 1 interaction; dropping it leaves user "b" with 4,
        // which then drops b, which leaves item "x" with 4 users...
        let mut recs = Vec::new();
        let push = |recs: &mut Vec<RawInteraction>, u: &str, i: &str| {
            recs.push(RawInteraction {
                user: u.into(),
                item: i.into(),
                ts: 0,
            })
        };
        for u in ["a", "c", "d", "e", "f"] {
            for i in ["x", "y", "z", "w", "v"] {
                push(&mut recs, u, i);
            }
        }
        for i in ["x", "y", "z", "w", "rare"] {
            push(&mut recs, "b", i);
        }
        let kept = k_core(recs, 5);
        assert_eq!(kept.len(), 25);
        assert!(kept.iter().all(|r| r.user != "b"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "t.tsv", "u1\ti1\t1\nu1\ti2\n");
        match ingest(&path, Format::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let path = write(&dir, "t2.tsv", "u1\ti1\tyesterday\n");
        assert!(matches!(ingest(&path, Format::Tsv), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn jsonl_and_amazon_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for u in 0..5 {
            for i in 0..5 {
                if u % 2 == 0 {
                    body.push_str(&format!("{{\"user\":\"u{u}\",\"item\":{i},\"ts\":{i}}}\n"));
                } else {
                    body.push_str(&format!(
                        "{{\"reviewerID\":\"u{u}\",\"asin\":\"{i}\",\"unixReviewTime\":{i},\"overall\":5.0}}\n"
                    ));
                }
            }
        }
        let path = write(&dir, "t.jsonl", &body);
        let ds = ingest(&path, Format::Jsonl).unwrap();
        assert_eq!((ds.user_count(), ds.item_count()), (5, 5));
        let bad = write(&dir, "bad.jsonl", "{\"user\":\"a\",\"item\":\"b\",\"ts\":1}\nnot json\n");
        assert!(matches!(ingest(&bad, Format::Jsonl), Err(Error::Parse { line: 2, .. })));
    }
}

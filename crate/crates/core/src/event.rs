//! Trace data model: statements attached to knowledge items, dataset loading,
//! and the train/test splits used by the prediction experiments.
//!
//! A trace file is JSON Lines. Line 1 is a header object
//! `{"polarity": "refutation"|"verification", "horizon": <real>}` (an optional
//! `"sources"` array fixes the source order and keeps zero-event sources).
//! Every following line is one statement:
//! `{"item": <id>, "source": <id>, "t_add": <real>, "t_eval": <real>|null}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Whether evaluations in a repository remove statements or accept them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Refutation,
    Verification,
}

impl Polarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Refutation => "refutation",
            Polarity::Verification => "verification",
        }
    }
}

impl std::str::FromStr for Polarity {
    type Err = EventError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "refutation" => Ok(Polarity::Refutation),
            "verification" => Ok(Polarity::Verification),
            other => Err(EventError::UnknownPolarity(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown polarity tag {0:?}")]
    UnknownPolarity(String),
    #[error("empty trace file (missing header line)")]
    MissingHeader,
    #[error("invalid horizon {0}")]
    InvalidHorizon(f64),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("split fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("topic row for item {item:?}: {message}")]
    InvalidTopicRow { item: String, message: String },
    #[error("topic count must be positive")]
    ZeroTopics,
}

/// One statement: who supported it, when it was added and when (if ever
/// within the observation window) it was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Index into the owning dataset's source list.
    pub source: usize,
    pub t_add: f64,
    pub t_eval: Option<f64>,
}

impl EventRecord {
    /// Evaluation delay `t_eval - t_add`, if evaluated.
    pub fn delay(&self) -> Option<f64> {
        self.t_eval.map(|te| te - self.t_add)
    }

    /// Observed exposure of the statement: its delay if evaluated, else the
    /// time it survived until the horizon.
    pub fn exposure(&self, horizon: f64) -> f64 {
        self.delay().unwrap_or(horizon - self.t_add)
    }
}

/// Statements of one knowledge item, ordered by addition time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemHistory {
    pub id: String,
    pub events: Vec<EventRecord>,
    pub horizon: f64,
}

impl ItemHistory {
    pub fn new(id: impl Into<String>, mut events: Vec<EventRecord>, horizon: f64) -> Self {
        // stable: equal addition times keep input order
        events.sort_by(|a, b| a.t_add.total_cmp(&b.t_add));
        ItemHistory {
            id: id.into(),
            events,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Statements added strictly before `t`.
    pub fn history_before(&self, t: f64) -> &[EventRecord] {
        let n = self.events.partition_point(|e| e.t_add < t);
        &self.events[..n]
    }

    pub fn n_evaluated(&self) -> usize {
        self.events.iter().filter(|e| e.t_eval.is_some()).count()
    }
}

/// A collection of item histories sharing one polarity and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    polarity: Polarity,
    horizon: f64,
    sources: Vec<String>,
    items: Vec<ItemHistory>,
}

impl Dataset {
    /// Builds a dataset, checking every invariant of the trace model.
    pub fn new(
        polarity: Polarity,
        horizon: f64,
        sources: Vec<String>,
        items: Vec<ItemHistory>,
    ) -> Result<Self, EventError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(EventError::InvalidHorizon(horizon));
        }
        let mut items = items;
        for item in &mut items {
            item.horizon = horizon;
            item.events.sort_by(|a, b| a.t_add.total_cmp(&b.t_add));
            for e in &item.events {
                if e.source >= sources.len() {
                    return Err(EventError::InvalidRecord(format!(
                        "item {:?}: source index {} out of range",
                        item.id, e.source
                    )));
                }
                validate_times(e.t_add, e.t_eval, horizon)
                    .map_err(|m| EventError::InvalidRecord(format!("item {:?}: {m}", item.id)))?;
            }
        }
        Ok(Dataset {
            polarity,
            horizon,
            sources,
            items,
        })
    }

    pub fn empty(
        polarity: Polarity,
        horizon: f64,
        sources: Vec<String>,
    ) -> Result<Self, EventError> {
        Dataset::new(polarity, horizon, sources, Vec::new())
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn items(&self) -> &[ItemHistory] {
        &self.items
    }

    pub fn into_items(self) -> Vec<ItemHistory> {
        self.items
    }

    pub fn n_events(&self) -> usize {
        self.items.iter().map(|d| d.len()).sum()
    }

    pub fn n_evaluated(&self) -> usize {
        self.items.iter().map(|d| d.n_evaluated()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_events() == 0
    }

    pub fn item(&self, id: &str) -> Option<&ItemHistory> {
        self.items.iter().find(|d| d.id == id)
    }

    /// Same events with a different set of items (sources, polarity and
    /// horizon preserved).
    pub fn with_items(&self, items: Vec<ItemHistory>) -> Dataset {
        Dataset {
            polarity: self.polarity,
            horizon: self.horizon,
            sources: self.sources.clone(),
            items,
        }
    }

    /// First `n` items (used for nested corpus-size sweeps).
    pub fn prefix(&self, n: usize) -> Dataset {
        self.with_items(self.items.iter().take(n).cloned().collect())
    }

    /// Re-indexes events onto `order`; sources missing from `order` are
    /// appended after it.
    pub fn reindex_sources(&self, order: &[String]) -> Dataset {
        let mut sources: Vec<String> = order.to_vec();
        let mut index: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut remap = Vec::with_capacity(self.sources.len());
        for s in &self.sources {
            let idx = match index.get(s.as_str()) {
                Some(&i) => i,
                None => {
                    sources.push(s.clone());
                    sources.len() - 1
                }
            };
            remap.push(idx);
        }
        index.clear();
        let items = self
            .items
            .iter()
            .map(|d| ItemHistory {
                id: d.id.clone(),
                horizon: d.horizon,
                events: d
                    .events
                    .iter()
                    .map(|e| EventRecord {
                        source: remap[e.source],
                        ..*e
                    })
                    .collect(),
            })
            .collect();
        Dataset {
            polarity: self.polarity,
            horizon: self.horizon,
            sources,
            items,
        }
    }

    /// Copy of the dataset observed only up to `horizon` (must not exceed the
    /// current horizon): later additions are dropped and later evaluations
    /// censored.
    pub fn truncate(&self, horizon: f64) -> Result<Dataset, EventError> {
        if !(horizon > 0.0 && horizon <= self.horizon) {
            return Err(EventError::InvalidHorizon(horizon));
        }
        let items = self
            .items
            .iter()
            .map(|d| ItemHistory {
                id: d.id.clone(),
                horizon,
                events: d
                    .events
                    .iter()
                    .filter(|e| e.t_add < horizon)
                    .map(|e| EventRecord {
                        t_eval: e.t_eval.filter(|&te| te < horizon),
                        ..*e
                    })
                    .collect(),
            })
            .collect();
        Ok(Dataset {
            polarity: self.polarity,
            horizon,
            sources: self.sources.clone(),
            items,
        })
    }
}

fn validate_times(t_add: f64, t_eval: Option<f64>, horizon: f64) -> Result<(), String> {
    if !(t_add.is_finite() && t_add >= 0.0) {
        return Err(format!(
            "addition time {t_add} must be finite and nonnegative"
        ));
    }
    if t_add >= horizon {
        return Err(format!(
            "addition time {t_add} is not before the horizon {horizon}"
        ));
    }
    if let Some(te) = t_eval {
        if !(te > t_add) {
            return Err(format!(
                "evaluation time {te} must exceed addition time {t_add}"
            ));
        }
        if te >= horizon {
            return Err(format!(
                "evaluation time {te} is not before the horizon {horizon}"
            ));
        }
    }
    Ok(())
}

/// Key names of a trace file's record lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub item_key: String,
    pub source_key: String,
    pub t_add_key: String,
    pub t_eval_key: String,
}

impl Default for TraceSchema {
    fn default() -> Self {
        TraceSchema {
            item_key: "item".into(),
            source_key: "source".into(),
            t_add_key: "t_add".into(),
            t_eval_key: "t_eval".into(),
        }
    }
}

/// Counts reported by the loader.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub censored: usize,
    pub rejected: usize,
    /// `(line number, reason)` for every rejected record.
    pub rejections: Vec<(usize, String)>,
}

#[derive(Debug, Deserialize)]
struct Header {
    polarity: String,
    horizon: f64,
    #[serde(default)]
    sources: Option<Vec<Value>>,
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Loads a trace file. Malformed lines are fatal; records violating the
/// time invariants are rejected and counted; evaluations at or after the
/// horizon are censored.
pub fn load_events(
    path: impl AsRef<Path>,
    schema: &TraceSchema,
) -> Result<(Dataset, LoadReport), EventError> {
    let file = File::open(path)?;
    read_events(BufReader::new(file), schema)
}

pub fn read_events<R: BufRead>(
    reader: R,
    schema: &TraceSchema,
) -> Result<(Dataset, LoadReport), EventError> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(EventError::MissingHeader),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| EventError::Malformed {
                    line: i + 1,
                    message: format!("bad header: {e}"),
                })?;
            }
        }
    };
    let polarity: Polarity = header.polarity.parse()?;
    let horizon = header.horizon;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(EventError::InvalidHorizon(horizon));
    }

    let mut sources: Vec<String> = Vec::new();
    let mut source_index: HashMap<String, usize> = HashMap::new();
    if let Some(declared) = &header.sources {
        for v in declared {
            let s = id_string(v).ok_or_else(|| EventError::Malformed {
                line: 1,
                message: "source ids must be strings or numbers".into(),
            })?;
            if !source_index.contains_key(&s) {
                source_index.insert(s.clone(), sources.len());
                sources.push(s);
            }
        }
    }

    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut items: Vec<(String, Vec<EventRecord>)> = Vec::new();
    let mut report = LoadReport::default();

    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| EventError::Malformed {
            line: line_no,
            message,
        };
        let obj: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let obj = obj
            .as_object()
            .ok_or_else(|| malformed("record is not a JSON object".into()))?;
        let item = obj
            .get(&schema.item_key)
            .and_then(id_string)
            .ok_or_else(|| malformed(format!("missing or invalid {:?}", schema.item_key)))?;
        let source = obj
            .get(&schema.source_key)
            .and_then(id_string)
            .ok_or_else(|| malformed(format!("missing or invalid {:?}", schema.source_key)))?;
        let t_add = obj
            .get(&schema.t_add_key)
            .and_then(Value::as_f64)
            .ok_or_else(|| malformed(format!("missing or invalid {:?}", schema.t_add_key)))?;
        let t_eval = match obj.get(&schema.t_eval_key) {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| malformed(format!("invalid {:?}", schema.t_eval_key)))?,
            ),
        };

        let mut t_eval = t_eval;
        let reject = if !(t_add.is_finite() && t_add >= 0.0) {
            Some(format!(
                "addition time {t_add} must be finite and nonnegative"
            ))
        } else if t_add >= horizon {
            Some(format!(
                "addition time {t_add} is not before the horizon {horizon}"
            ))
        } else if matches!(t_eval, Some(te) if !(te > t_add)) {
            Some(format!(
                "evaluation time {} does not exceed addition time {t_add}",
                t_eval.unwrap()
            ))
        } else {
            None
        };
        if let Some(reason) = reject {
            report.rejected += 1;
            report.rejections.push((line_no, reason));
            continue;
        }
        if matches!(t_eval, Some(te) if te >= horizon) {
            t_eval = None;
            report.censored += 1;
        }

        let s_idx = *source_index.entry(source.clone()).or_insert_with(|| {
            sources.push(source);
            sources.len() - 1
        });
        let d_idx = *item_index.entry(item.clone()).or_insert_with(|| {
            items.push((item, Vec::new()));
            items.len() - 1
        });
        items[d_idx].1.push(EventRecord {
            source: s_idx,
            t_add,
            t_eval,
        });
        report.loaded += 1;
    }

    let items = items
        .into_iter()
        .map(|(id, events)| ItemHistory::new(id, events, horizon))
        .collect();
    let ds = Dataset::new(polarity, horizon, sources, items)?;
    Ok((ds, report))
}

/// Writes a dataset in the trace format. `extra_header` entries (such as a
/// provenance block) are merged into the header object.
pub fn write_events<W: Write>(
    ds: &Dataset,
    mut out: W,
    extra_header: Option<&serde_json::Map<String, Value>>,
) -> Result<(), EventError> {
    let mut header = serde_json::Map::new();
    header.insert("polarity".into(), Value::from(ds.polarity.as_str()));
    header.insert("horizon".into(), Value::from(ds.horizon));
    header.insert(
        "sources".into(),
        Value::Array(ds.sources.iter().map(|s| Value::from(s.as_str())).collect()),
    );
    if let Some(extra) = extra_header {
        for (k, v) in extra {
            header.insert(k.clone(), v.clone());
        }
    }
    serde_json::to_writer(&mut out, &Value::Object(header)).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for d in &ds.items {
        for e in &d.events {
            let rec = serde_json::json!({
                "item": d.id,
                "source": ds.sources[e.source],
                "t_add": e.t_add,
                "t_eval": e.t_eval,
            });
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_events(
    ds: &Dataset,
    path: impl AsRef<Path>,
    extra_header: Option<&serde_json::Map<String, Value>>,
) -> Result<(), EventError> {
    let file = File::create(path)?;
    write_events(ds, BufWriter::new(file), extra_header)
}

/// Granularity of a train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    /// Partition statements; items keep their remaining statements in order.
    Event,
    /// Partition whole item histories.
    Item,
}

/// Deterministic random split. Items left without statements in one part
/// are dropped from that part.
pub fn split_train_test(
    ds: &Dataset,
    fraction: f64,
    seed: u64,
    unit: SplitUnit,
) -> Result<(Dataset, Dataset), EventError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EventError::InvalidFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match unit {
        SplitUnit::Item => {
            let n = ds.items.len();
            if n == 0 {
                return Err(EventError::EmptyDataset);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_train = (fraction * n as f64).round() as usize;
            let mut in_train = vec![false; n];
            for &i in &order[..n_train] {
                in_train[i] = true;
            }
            let (train, test): (Vec<_>, Vec<_>) = ds
                .items
                .iter()
                .cloned()
                .zip(in_train)
                .partition(|(_, t)| *t);
            Ok((
                ds.with_items(train.into_iter().map(|(d, _)| d).collect()),
                ds.with_items(test.into_iter().map(|(d, _)| d).collect()),
            ))
        }
        SplitUnit::Event => {
            let n = ds.n_events();
            if n == 0 {
                return Err(EventError::EmptyDataset);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let n_train = (fraction * n as f64).round() as usize;
            let mut in_train = vec![false; n];
            for &i in &order[..n_train] {
                in_train[i] = true;
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut k = 0;
            for d in &ds.items {
                let mut tr = Vec::new();
                let mut te = Vec::new();
                for e in &d.events {
                    if in_train[k] {
                        tr.push(*e);
                    } else {
                        te.push(*e);
                    }
                    k += 1;
                }
                if !tr.is_empty() {
                    train.push(ItemHistory {
                        id: d.id.clone(),
                        events: tr,
                        horizon: d.horizon,
                    });
                }
                if !te.is_empty() {
                    test.push(ItemHistory {
                        id: d.id.clone(),
                        events: te,
                        horizon: d.horizon,
                    });
                }
            }
            Ok((ds.with_items(train), ds.with_items(test)))
        }
    }
}

/// Per-item topic weight vectors `w_d` (each a probability vector of
/// length `n_topics`).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWeights {
    n_topics: usize,
    rows: HashMap<String, Vec<f64>>,
    uniform: Vec<f64>,
}

const TOPIC_SUM_TOL: f64 = 1e-6;

impl TopicWeights {
    /// Every item gets the uniform vector (a single topic gives `[1.0]`).
    pub fn uniform(n_topics: usize) -> Result<Self, EventError> {
        if n_topics == 0 {
            return Err(EventError::ZeroTopics);
        }
        Ok(TopicWeights {
            n_topics,
            rows: HashMap::new(),
            uniform: vec![1.0 / n_topics as f64; n_topics],
        })
    }

    pub fn n_topics(&self) -> usize {
        self.n_topics
    }

    /// Validates and inserts one row, renormalizing it exactly to sum 1.
    pub fn insert(&mut self, item: impl Into<String>, w: Vec<f64>) -> Result<(), EventError> {
        let item = item.into();
        let bad = |message: String| EventError::InvalidTopicRow {
            item: item.clone(),
            message,
        };
        if w.len() != self.n_topics {
            return Err(bad(format!(
                "expected {} entries, got {}",
                self.n_topics,
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(bad("entries must be finite and nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > TOPIC_SUM_TOL {
            return Err(bad(format!("entries sum to {sum}, not 1")));
        }
        let w = w.into_iter().map(|x| x / sum).collect();
        self.rows.insert(item, w);
        Ok(())
    }

    pub fn contains(&self, item: &str) -> bool {
        self.rows.contains_key(item)
    }

    /// Weights of `item`, or the uniform vector when the item has no row.
    pub fn get(&self, item: &str) -> &[f64] {
        self.rows
            .get(item)
            .map(Vec::as_slice)
            .unwrap_or(&self.uniform)
    }

    /// Weight vectors for every item of `ds`, in item order. Items without a
    /// row fall back to the uniform vector with a warning.
    pub fn resolve(&self, ds: &Dataset) -> Vec<Vec<f64>> {
        let mut missing = 0usize;
        let out = ds
            .items()
            .iter()
            .map(|d| {
                if self.n_topics > 1 && !self.contains(&d.id) {
                    missing += 1;
                }
                self.get(&d.id).to_vec()
            })
            .collect();
        if missing > 0 {
            log::warn!("{missing} item(s) have no topic row; using uniform weights");
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct TopicRow {
    item: Value,
    w: Vec<f64>,
}

/// Loads a topics file (`{"item": <id>, "w": [...]}` per line).
pub fn load_topics(path: impl AsRef<Path>, n_topics: usize) -> Result<TopicWeights, EventError> {
    let file = File::open(path)?;
    read_topics(BufReader::new(file), n_topics)
}

pub fn read_topics<R: BufRead>(reader: R, n_topics: usize) -> Result<TopicWeights, EventError> {
    let mut tw = TopicWeights::uniform(n_topics)?;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TopicRow = serde_json::from_str(&line).map_err(|e| EventError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let item = id_string(&row.item).ok_or_else(|| EventError::Malformed {
            line: i + 1,
            message: "item id must be a string or number".into(),
        })?;
        tw.insert(item, row.w)?;
    }
    Ok(tw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(Dataset, LoadReport), EventError> {
        read_events(text.as_bytes(), &TraceSchema::default())
    }

    #[test]
    fn loads_well_formed_lines() {
        let text = r#"{"polarity": "refutation", "horizon": 15}
{"item": "a", "source": "s1", "t_add": 1.0, "t_eval": 3.0}
{"item": "a", "source": "s2", "t_add": 0.5, "t_eval": null}
{"item": "b", "source": "s1", "t_add": 2.0}
"#;
        let (ds, rep) = parse(text).unwrap();
        assert_eq!(ds.n_events(), 3);
        assert_eq!(rep.loaded, 3);
        assert_eq!(rep.censored, 0);
        assert_eq!(ds.items().len(), 2);
        // sorted by addition time
        assert_eq!(ds.items()[0].events[0].t_add, 0.5);
        assert_eq!(ds.sources(), &["s1".to_string(), "s2".to_string()]);
    }

    #[test]
    fn censors_late_evaluations() {
        let text = "{\"polarity\": \"refutation\", \"horizon\": 15}\n\
                    {\"item\": 1, \"source\": 7, \"t_add\": 2.0, \"t_eval\": 20.0}\n";
        let (ds, rep) = parse(text).unwrap();
        assert_eq!(rep.censored, 1);
        assert_eq!(ds.items()[0].events[0].t_eval, None);
    }

    #[test]
    fn rejects_evaluation_not_after_addition() {
        let text = "{\"polarity\": \"verification\", \"horizon\": 15}\n\
                    {\"item\": \"q\", \"source\": \"u\", \"t_add\": 2.0, \"t_eval\": 2.0}\n\
                    {\"item\": \"q\", \"source\": \"u\", \"t_add\": 3.0, \"t_eval\": 4.0}\n";
        let (ds, rep) = parse(text).unwrap();
        assert_eq!(rep.rejected, 1);
        assert_eq!(rep.rejections[0].0, 2);
        assert_eq!(ds.n_events(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"polarity\": \"refutation\", \"horizon\": 15}\n\
                    {\"item\": \"a\", \"source\": \"s\", \"t_add\": 1.0}\n\
                    {not json}\n";
        match parse(text) {
            Err(EventError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_polarity_is_an_error() {
        let text = "{\"polarity\": \"deletion\", \"horizon\": 15}\n";
        assert!(matches!(parse(text), Err(EventError::UnknownPolarity(_))));
    }

    #[test]
    fn equal_addition_times_keep_input_order() {
        let text = r#"{"polarity": "refutation", "horizon": 5}
{"item": "a", "source": "x", "t_add": 1.0}
{"item": "a", "source": "y", "t_add": 1.0}
{"item": "a", "source": "z", "t_add": 0.5}
"#;
        let (ds, _) = parse(text).unwrap();
        let srcs: Vec<&str> = ds.items()[0]
            .events
            .iter()
            .map(|e| ds.sources()[e.source].as_str())
            .collect();
        assert_eq!(srcs, ["z", "x", "y"]);
        assert_eq!(ds.items()[0].history_before(1.0).len(), 1);
    }

    #[test]
    fn topic_rows() {
        let tw = read_topics(&b""[..], 1).unwrap();
        assert_eq!(tw.get("anything"), &[1.0]);

        let tw = read_topics(&b"{\"item\": \"a\", \"w\": [0.5, 0.5]}\n"[..], 2).unwrap();
        assert_eq!(tw.get("a"), &[0.5, 0.5]);
        assert_eq!(tw.get("missing"), &[0.5, 0.5]);

        let err = read_topics(&b"{\"item\": \"a\", \"w\": [0.7, 0.7]}\n"[..], 2);
        assert!(matches!(err, Err(EventError::InvalidTopicRow { .. })));
        let err = read_topics(&b"{\"item\": \"a\", \"w\": [1.5, -0.5]}\n"[..], 2);
        assert!(matches!(err, Err(EventError::InvalidTopicRow { .. })));
    }

    #[test]
    fn topic_rows_are_renormalized() {
        let tw = read_topics(&b"{\"item\": \"a\", \"w\": [0.2500004, 0.75]}\n"[..], 2).unwrap();
        let s: f64 = tw.get("a").iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    fn ten_items() -> Dataset {
        let items = (0..10)
            .map(|k| {
                let events = (0..10)
                    .map(|j| EventRecord {
                        source: j % 3,
                        t_add: j as f64 + 0.1 * k as f64,
                        t_eval: None,
                    })
                    .collect();
                ItemHistory::new(format!("d{k}"), events, 15.0)
            })
            .collect();
        Dataset::new(
            Polarity::Refutation,
            15.0,
            vec!["a".into(), "b".into(), "c".into()],
            items,
        )
        .unwrap()
    }

    #[test]
    fn item_split_cardinality_and_determinism() {
        let ds = ten_items();
        let (tr, te) = split_train_test(&ds, 0.9, 11, SplitUnit::Item).unwrap();
        assert_eq!(tr.items().len(), 9);
        assert_eq!(te.items().len(), 1);
        let (tr2, te2) = split_train_test(&ds, 0.9, 11, SplitUnit::Item).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
    }

    #[test]
    fn event_split_counts_by_enumeration() {
        let ds = ten_items();
        assert_eq!(ds.n_events(), 100);
        let (tr, te) = split_train_test(&ds, 0.9, 3, SplitUnit::Event).unwrap();
        assert_eq!(tr.n_events(), 90);
        assert_eq!(te.n_events(), 10);
        for part in [&tr, &te] {
            for d in part.items() {
                assert!(d.events.windows(2).all(|w| w[0].t_add <= w[1].t_add));
            }
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = ten_items();
        assert!(matches!(
            split_train_test(&ds, 1.0, 0, SplitUnit::Item),
            Err(EventError::InvalidFraction(_))
        ));
        assert!(split_train_test(&ds, 0.0, 0, SplitUnit::Event).is_err());
    }
}

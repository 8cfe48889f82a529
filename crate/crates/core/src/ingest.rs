//! Raw interaction/attribute parsing, filtering, and the leave-one-out split.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// One item's attribute fields. Each field is a sorted, deduplicated set of
/// values so multi-valued fields ("top five actors") fit the same shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAttributes {
    pub item_id: String,
    pub values: Vec<Vec<String>>,
}

impl ItemAttributes {
    pub fn new(item_id: impl Into<String>, values: Vec<Vec<String>>) -> Self {
        let values = values
            .into_iter()
            .map(|mut field| {
                field.retain(|v| !v.is_empty());
                field.sort();
                field.dedup();
                field
            })
            .collect();
        ItemAttributes {
            item_id: item_id.into(),
            values,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|f| !f.is_empty())
    }
}

/// True when two sorted value sets share at least one value.
pub fn values_intersect(a: &[String], b: &[String]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub user: usize,
    pub item: usize,
    pub rating: usize,
    pub timestamp: Option<usize>,
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            user: 0,
            item: 1,
            rating: 2,
            timestamp: None,
            delimiter: b',',
            has_header: false,
        }
    }
}

/// Column layout of a delimited attribute file (one row per item).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMapping {
    pub item: usize,
    /// (field name, column index)
    pub fields: Vec<(String, usize)>,
    pub delimiter: u8,
    pub value_separator: char,
    pub has_header: bool,
}

impl AttributeMapping {
    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|(n, _)| n.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub malformed: usize,
}

fn open_csv(path: &Path, delimiter: u8, has_header: bool) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file)))
}

fn check_malformed(path: &Path, total: usize, malformed: usize) -> Result<()> {
    if total > 0 && malformed * 2 > total {
        return Err(Error::Data(format!(
            "{}: {malformed} of {total} rows malformed; check the column mapping",
            path.display()
        )));
    }
    if malformed > 0 {
        warn!("{}: skipped {malformed} malformed rows", path.display());
    }
    Ok(())
}

pub fn load_interactions(path: &Path, mapping: &ColumnMapping) -> Result<Parsed<RawInteraction>> {
    let mut reader = open_csv(path, mapping.delimiter, mapping.has_header)?;
    let mut records = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    for row in reader.records() {
        total += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) if e.is_io_error() => {
                return Err(Error::Data(format!("{}: {e}", path.display())))
            }
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        match parse_interaction(&row, mapping) {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if total == 0 {
        warn!("{}: no interaction rows", path.display());
    }
    check_malformed(path, total, malformed)?;
    Ok(Parsed { records, malformed })
}

fn parse_interaction(row: &csv::StringRecord, m: &ColumnMapping) -> Option<RawInteraction> {
    let user_id = row.get(m.user).filter(|s| !s.is_empty())?;
    let item_id = row.get(m.item).filter(|s| !s.is_empty())?;
    let rating: f64 = row.get(m.rating)?.parse().ok()?;
    if !rating.is_finite() {
        return None;
    }
    let timestamp = match m.timestamp {
        Some(c) => match row.get(c) {
            Some("") | None => None,
            Some(s) => Some(s.parse().ok()?),
        },
        None => None,
    };
    Some(RawInteraction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
    })
}

pub fn load_attributes(path: &Path, mapping: &AttributeMapping) -> Result<Parsed<ItemAttributes>> {
    let mut reader = open_csv(path, mapping.delimiter, mapping.has_header)?;
    let mut records = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    for row in reader.records() {
        total += 1;
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                malformed += 1;
                continue;
            }
        };
        let Some(item) = row.get(mapping.item).filter(|s| !s.is_empty()) else {
            malformed += 1;
            continue;
        };
        // A missing column is a missing value, filtered later.
        let values = mapping
            .fields
            .iter()
            .map(|(_, col)| {
                row.get(*col)
                    .map(|cell| {
                        cell.split(mapping.value_separator)
                            .map(|v| v.trim().to_string())
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        records.push(ItemAttributes::new(item, values));
    }
    check_malformed(path, total, malformed)?;
    Ok(Parsed { records, malformed })
}

/// Replace a numeric field by quantile-bin labels (`q0`..`q{bins-1}`).
/// Values that do not parse become missing.
pub fn bin_numeric_field(attrs: &mut [ItemAttributes], field: usize, bins: usize) {
    let bins = bins.max(1);
    let parse = |a: &ItemAttributes| -> Option<f64> {
        a.values
            .get(field)
            .and_then(|f| f.first())
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.is_finite())
    };
    let mut sorted: Vec<f64> = attrs.iter().filter_map(parse).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cuts: Vec<f64> = (1..bins)
        .filter_map(|q| {
            if sorted.is_empty() {
                None
            } else {
                let idx = (q * sorted.len() / bins).min(sorted.len() - 1);
                Some(sorted[idx])
            }
        })
        .collect();
    for a in attrs.iter_mut() {
        let label = parse(a).map(|v| format!("q{}", cuts.iter().filter(|c| v >= **c).count()));
        if let Some(slot) = a.values.get_mut(field) {
            *slot = label.into_iter().collect();
        }
    }
}

/// Post-filter implicit-feedback dataset with dense user and item indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub field_names: Vec<String>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Training positives per user, in first-seen order.
    pub positives: Vec<Vec<usize>>,
    /// Timestamps parallel to `positives`.
    pub timestamps: Vec<Vec<Option<i64>>>,
    /// item -> field -> sorted value set
    pub attributes: Vec<Vec<Vec<String>>>,
    /// Leave-one-out test item per user, once split.
    pub heldout: Option<Vec<usize>>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn n_train_actions(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn item_attributes(&self, item: usize) -> ItemAttributes {
        ItemAttributes {
            item_id: self.item_ids[item].clone(),
            values: self.attributes[item].clone(),
        }
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.user_ids.iter().position(|u| u == user_id)
    }

    /// All positives (training plus held-out) as sets.
    pub fn all_positive_sets(&self) -> Vec<HashSet<usize>> {
        self.positives
            .iter()
            .enumerate()
            .map(|(u, p)| {
                let mut s: HashSet<usize> = p.iter().copied().collect();
                if let Some(h) = &self.heldout {
                    s.insert(h[u]);
                }
                s
            })
            .collect()
    }

    /// Back to raw form (ratings set to 5.0), held-out items folded back in.
    pub fn to_raw(&self) -> (Vec<RawInteraction>, Vec<ItemAttributes>) {
        let mut raw = Vec::new();
        for (u, items) in self.positives.iter().enumerate() {
            for (pos, &i) in items.iter().enumerate() {
                raw.push(RawInteraction {
                    user_id: self.user_ids[u].clone(),
                    item_id: self.item_ids[i].clone(),
                    rating: 5.0,
                    timestamp: self.timestamps[u][pos],
                });
            }
            if let Some(h) = &self.heldout {
                raw.push(RawInteraction {
                    user_id: self.user_ids[u].clone(),
                    item_id: self.item_ids[h[u]].clone(),
                    rating: 5.0,
                    timestamp: None,
                });
            }
        }
        let attrs = (0..self.n_items()).map(|i| self.item_attributes(i)).collect();
        (raw, attrs)
    }

    /// Drop `items` from the index space entirely. Returns the reduced
    /// dataset and the old→new item index map. Users' held-out entries
    /// pointing at a removed item are replaced by their latest remaining
    /// training positive when one exists.
    pub fn without_items(&self, items: &[usize]) -> (InteractionDataset, Vec<Option<usize>>) {
        let removed: HashSet<usize> = items.iter().copied().collect();
        let mut remap = vec![None; self.n_items()];
        let mut item_ids = Vec::new();
        let mut attributes = Vec::new();
        for i in 0..self.n_items() {
            if !removed.contains(&i) {
                remap[i] = Some(item_ids.len());
                item_ids.push(self.item_ids[i].clone());
                attributes.push(self.attributes[i].clone());
            }
        }
        let mut positives = Vec::with_capacity(self.n_users());
        let mut timestamps = Vec::with_capacity(self.n_users());
        for (items, times) in self.positives.iter().zip(&self.timestamps) {
            let (p, t): (Vec<usize>, Vec<Option<i64>>) = items
                .iter()
                .zip(times)
                .filter_map(|(&i, &t)| remap[i].map(|n| (n, t)))
                .unzip();
            positives.push(p);
            timestamps.push(t);
        }
        let heldout = self.heldout.as_ref().map(|h| {
            h.iter()
                .enumerate()
                .map(|(u, &i)| match remap[i] {
                    Some(n) => n,
                    None => {
                        let moved = positives[u].pop().unwrap_or(usize::MAX);
                        timestamps[u].pop();
                        moved
                    }
                })
                .collect()
        });
        (
            InteractionDataset {
                field_names: self.field_names.clone(),
                user_ids: self.user_ids.clone(),
                item_ids,
                positives,
                timestamps,
                attributes,
                heldout,
            },
            remap,
        )
    }
}

/// Counts after each filtering stage, for diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub raw_interactions: usize,
    pub complete_items: usize,
    pub positive_interactions: usize,
    pub distinct_pairs: usize,
    pub passes: usize,
    pub users: usize,
    pub items: usize,
    pub actions: usize,
}

/// Missing-value removal, binarization (`rating > rating_threshold`),
/// deduplication and the minimum-history rule, iterated to a fixed point.
pub fn filter_and_binarize(
    raw: &[RawInteraction],
    attrs: &[ItemAttributes],
    field_names: &[String],
    min_history: usize,
    rating_threshold: f64,
) -> Result<(InteractionDataset, FilterReport)> {
    let k = field_names.len();
    let mut report = FilterReport {
        raw_interactions: raw.len(),
        ..Default::default()
    };
    let mut attr_map: HashMap<&str, &ItemAttributes> = HashMap::new();
    for a in attrs {
        if a.values.len() != k {
            return Err(Error::Data(format!(
                "item {} has {} attribute fields, expected {k}",
                a.item_id,
                a.values.len()
            )));
        }
        if a.is_complete() {
            attr_map.entry(a.item_id.as_str()).or_insert(a);
        }
    }
    report.complete_items = attr_map.len();

    // user -> ordered distinct items with latest timestamp
    let mut user_order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, (Vec<&str>, HashMap<&str, Option<i64>>)> = HashMap::new();
    for r in raw {
        if !(r.rating > rating_threshold) || !attr_map.contains_key(r.item_id.as_str()) {
            continue;
        }
        report.positive_interactions += 1;
        let entry = per_user.entry(r.user_id.as_str()).or_insert_with(|| {
            user_order.push(r.user_id.as_str());
            (Vec::new(), HashMap::new())
        });
        match entry.1.get_mut(r.item_id.as_str()) {
            Some(ts) => {
                *ts = match (*ts, r.timestamp) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                }
            }
            None => {
                entry.0.push(r.item_id.as_str());
                entry.1.insert(r.item_id.as_str(), r.timestamp);
            }
        }
    }
    report.distinct_pairs = per_user.values().map(|(v, _)| v.len()).sum();

    let mut alive: Vec<&str> = user_order;
    loop {
        report.passes += 1;
        let before = alive.len();
        alive.retain(|u| {
            per_user[u]
                .0
                .iter()
                .filter(|i| attr_map.contains_key(*i))
                .count()
                >= min_history
        });
        if alive.len() == before {
            break;
        }
    }

    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut ds = InteractionDataset {
        field_names: field_names.to_vec(),
        user_ids: Vec::new(),
        item_ids: Vec::new(),
        positives: Vec::new(),
        timestamps: Vec::new(),
        attributes: Vec::new(),
        heldout: None,
    };
    for u in &alive {
        let (items, ts) = &per_user[u];
        let mut p = Vec::with_capacity(items.len());
        let mut t = Vec::with_capacity(items.len());
        for item in items {
            let idx = *item_index.entry(item).or_insert_with(|| {
                ds.item_ids.push(item.to_string());
                ds.attributes.push(attr_map[item].values.clone());
                ds.item_ids.len() - 1
            });
            p.push(idx);
            t.push(ts[item]);
        }
        ds.user_ids.push(u.to_string());
        ds.positives.push(p);
        ds.timestamps.push(t);
    }
    report.users = ds.n_users();
    report.items = ds.n_items();
    report.actions = ds.n_train_actions();
    if ds.n_users() == 0 {
        return Err(Error::Data(format!("dataset empty after filtering: {report:?}")));
    }
    Ok((ds, report))
}

/// Move one positive per user into `heldout`: the latest by timestamp when
/// every positive of the user carries one, otherwise a seeded uniform pick.
pub fn leave_one_out_split(ds: &InteractionDataset, seed: u64) -> Result<InteractionDataset> {
    if ds.heldout.is_some() {
        return Err(Error::Data("dataset is already split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    let mut heldout = Vec::with_capacity(ds.n_users());
    for u in 0..ds.n_users() {
        let items = &mut out.positives[u];
        let times = &mut out.timestamps[u];
        if items.len() < 2 {
            return Err(Error::Data(format!(
                "user {} has {} positives; leave-one-out needs at least 2",
                ds.user_ids[u],
                items.len()
            )));
        }
        let pick = if times.iter().all(Option::is_some) {
            // latest timestamp, later position wins ties
            (0..items.len()).max_by_key(|&p| (times[p], p)).unwrap()
        } else {
            *(0..items.len()).collect::<Vec<_>>().choose(&mut rng).unwrap()
        };
        heldout.push(items.remove(pick));
        times.remove(pick);
    }
    out.heldout = Some(heldout);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub features: usize,
}

/// Counts over the post-filter dataset; actions include held-out items.
pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    let heldout = ds.heldout.as_ref().map_or(0, Vec::len);
    DatasetStats {
        users: ds.n_users(),
        items: ds.n_items(),
        actions: ds.n_train_actions() + heldout,
        features: ds.n_fields(),
    }
}

/// Serialized dataset snapshot shared by every downstream stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split_seed: Option<u64>,
    pub filter_report: Option<FilterReport>,
    pub dataset: InteractionDataset,
}

impl DatasetManifest {
    pub fn new(dataset: InteractionDataset, split_seed: Option<u64>) -> Self {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            split_seed,
            filter_report: None,
            dataset,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomically(path, |w| {
            serde_json::to_writer(w, self).map_err(|e| Error::Data(e.to_string()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomically<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

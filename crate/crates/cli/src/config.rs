//! Run configuration: a sectioned TOML file, overridden by `ERAN_<SECTION>_<KEY>`
//! environment variables, overridden in turn by command-line flags.

use std::path::{Path, PathBuf};

use eran::ingest::{AttributeMapping, ColumnMapping};
use eran::trainer::TrainConfig;
use eran::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SECTIONS: [&str; 5] = ["run", "data", "netbuild", "train", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Every random draw (split, sampling, initialization, slates) derives from this.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 1 gives byte-reproducible runs.
    pub threads: Option<usize>,
    /// Write a checkpoint every N epochs (0 keeps only the final model).
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("run"),
            threads: None,
            checkpoint_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub interactions: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub delimiter: String,
    pub has_header: bool,
    pub user_column: usize,
    pub item_column: usize,
    pub rating_column: usize,
    pub timestamp_column: Option<usize>,
    pub attribute_delimiter: String,
    pub attribute_has_header: bool,
    pub attribute_item_column: usize,
    /// `name:column` per attribute field.
    pub attribute_fields: Vec<String>,
    pub value_separator: String,
    /// Numeric attribute fields to replace with quantile bins.
    pub bin_fields: Vec<String>,
    pub bins: usize,
    pub min_history: usize,
    pub rating_threshold: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            interactions: None,
            attributes: None,
            delimiter: ",".into(),
            has_header: false,
            user_column: 0,
            item_column: 1,
            rating_column: 2,
            timestamp_column: None,
            attribute_delimiter: ",".into(),
            attribute_has_header: false,
            attribute_item_column: 0,
            attribute_fields: Vec::new(),
            value_separator: "|".into(),
            bin_fields: Vec::new(),
            bins: 4,
            min_history: 5,
            rating_threshold: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetbuildSection {
    pub co_min: u32,
    pub edge_lists: bool,
}

impl Default for NetbuildSection {
    fn default() -> Self {
        NetbuildSection {
            co_min: 1,
            edge_lists: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub negatives: usize,
    pub cold_items: usize,
    pub cold_ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![5, 10, 15],
            negatives: eran::evalkit::SLATE_NEGATIVES,
            cold_items: 40,
            cold_ks: vec![5, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub netbuild: NetbuildSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

fn single_byte(name: &str, s: &str) -> Result<u8> {
    let s = if s == "\\t" { "\t" } else { s };
    match s.as_bytes() {
        [b] => Ok(*b),
        _ => Err(Error::Config(format!("{name} must be a single byte, got {s:?}"))),
    }
}

impl RunConfig {
    pub fn column_mapping(&self) -> Result<ColumnMapping> {
        let d = &self.data;
        Ok(ColumnMapping {
            user: d.user_column,
            item: d.item_column,
            rating: d.rating_column,
            timestamp: d.timestamp_column,
            delimiter: single_byte("data.delimiter", &d.delimiter)?,
            has_header: d.has_header,
        })
    }

    pub fn attribute_mapping(&self) -> Result<AttributeMapping> {
        let d = &self.data;
        if d.attribute_fields.is_empty() {
            return Err(Error::Config("data.attribute_fields is empty".into()));
        }
        let fields = d
            .attribute_fields
            .iter()
            .map(|f| {
                let (name, col) = f
                    .rsplit_once(':')
                    .ok_or_else(|| Error::Config(format!("attribute field {f:?} is not name:column")))?;
                let col = col
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("attribute field {f:?} has a bad column")))?;
                Ok((name.trim().to_string(), col))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sep = d.value_separator.chars();
        let value_separator = match (sep.next(), sep.next()) {
            (Some(c), None) => c,
            _ => return Err(Error::Config("data.value_separator must be one character".into())),
        };
        Ok(AttributeMapping {
            item: d.attribute_item_column,
            fields,
            delimiter: single_byte("data.attribute_delimiter", &d.attribute_delimiter)?,
            value_separator,
            has_header: d.attribute_has_header,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parse an override value: a TOML literal if it is one, a comma list when
/// it contains commas, otherwise a bare string.
pub fn parse_value(raw: &str) -> Value {
    if let Ok(t) = format!("v = {raw}").parse::<Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

fn set(table: &mut Table, section: &str, key: &str, value: Value) -> Result<()> {
    if !SECTIONS.contains(&section) {
        return Err(Error::Config(format!("unknown config section {section:?}")));
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("config section {section:?} is not a table"))),
    }
}

/// `ERAN_<SECTION>_<KEY>` pairs; variables naming other sections are ignored.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String, String)> {
    let mut out: Vec<(String, String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix("ERAN_")?.to_ascii_lowercase();
            let (section, key) = rest.split_once('_')?;
            SECTIONS
                .contains(&section)
                .then(|| (section.to_string(), key.to_string(), v))
        })
        .collect();
    out.sort();
    out
}

/// Load `path` (optional), then apply environment and flag overrides.
/// `flags` holds `section.key=value` assignments.
pub fn load(path: Option<&Path>, env: Vec<(String, String, String)>, flags: &[String]) -> Result<(RunConfig, Table)> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (section, key, value) in env {
        set(&mut table, &section, &key, parse_value(&value))?;
    }
    for flag in flags {
        let (lhs, value) = flag
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {flag:?} is not section.key=value")))?;
        let (section, key) = lhs
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {flag:?} is not section.key=value")))?;
        set(&mut table, section.trim(), key.trim(), parse_value(value.trim()))?;
    }
    let mut cfg: RunConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(p) = path {
        let base = p.parent().unwrap_or(Path::new(""));
        for f in [&mut cfg.data.interactions, &mut cfg.data.attributes].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
    }
    cfg.train.seed = cfg.run.seed;
    cfg.train.validate()?;
    Ok((cfg, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nseed = 3\n[train]\nepochs = 7\nalpha = 2.0\n").unwrap();
        let env = env_overrides(vec![
            ("ERAN_TRAIN_EPOCHS".to_string(), "9".to_string()),
            ("ERAN_TRAIN_HIDDEN_DIMS".to_string(), "16,8".to_string()),
            ("ERAN_KAGGLE_RATINGS".to_string(), "x".to_string()),
            ("HOME".to_string(), "/".to_string()),
        ]);
        assert_eq!(env.len(), 2);
        let (cfg, _) = load(Some(&p), env, &["train.epochs=11".to_string()]).unwrap();
        assert_eq!(cfg.train.epochs, 11);
        assert_eq!(cfg.train.hidden_dims, vec![16, 8]);
        assert_eq!(cfg.train.alpha, 2.0);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(load(None, vec![], &["train.colour=1".to_string()]).is_err());
        assert!(load(None, vec![], &["nope.x=1".to_string()]).is_err());
        assert!(load(None, vec![], &["train.mode=sideways".to_string()]).is_err());
        assert!(load(None, vec![], &["train.learning_rate=-1".to_string()]).is_err());
    }

    #[test]
    fn attribute_fields_parse() {
        let mut cfg = RunConfig::default();
        cfg.data.attribute_fields = vec!["genre:1".into(), "director : 2".into()];
        let m = cfg.attribute_mapping().unwrap();
        assert_eq!(m.fields, vec![("genre".to_string(), 1), ("director".to_string(), 2)]);
        cfg.data.attribute_fields = vec!["genre".into()];
        assert!(cfg.attribute_mapping().is_err());
    }
}

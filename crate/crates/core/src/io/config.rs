//! Flat dotted-key run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::augment::AugmentConfig;
use crate::distill::{DistillConfig, TrainConfig};
use crate::dsp::DspConfig;
use crate::error::{AsitError, Result};
use crate::eval::EvalConfig;
use crate::vit::{BackboneConfig, HeadConfig, PatchGrid};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest CSV; relative wav paths resolve against its directory.
    pub manifest: String,
    /// Use at most this many training clips (0 = all).
    pub max_clips: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dsp: DspConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.augment.validate()?;
        self.backbone.validate()?;
        self.heads.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let p = self.backbone.patch_size;
        if self.augment.mask_block_min > self.dsp.target_frames.min(self.dsp.n_mels) {
            return Err(AsitError::config(
                "augment.mask_block_min",
                "larger than the spectrogram",
            ));
        }
        if p > self.dsp.target_frames || p > self.dsp.n_mels {
            return Err(AsitError::config("backbone.patch_size", "larger than the spectrogram"));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::for_shape(self.dsp.target_frames, self.dsp.n_mels, self.backbone.patch_size)
    }

    /// One `section.key = value` line per field, sorted by key.
    pub fn to_text(&self) -> String {
        let table = match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("struct serializes to a table"),
        };
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses a config document with no overrides.
    pub fn from_text(text: &str) -> Result<Self> {
        parse_config_text(text, &[])
    }

    /// Short stable hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| AsitError::io(path, e))
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn leaf_types(prefix: &str, table: &Table, out: &mut Vec<(String, &'static str)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaf_types(&key, t, out),
            other => out.push((key, other.type_str())),
        }
    }
}

/// Reads `path` (if given) and applies `key=value` overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| AsitError::io(p, e))?,
        None => String::new(),
    };
    parse_config_text(&text, overrides)
}

/// Defaults, then `text`, then `overrides` (each `dotted.key=value`).
pub fn parse_config_text(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| AsitError::config("<file>", e.message().to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| AsitError::config(o.clone(), "override must look like key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => Value::String(raw.to_string()),
        };
        set_path(&mut doc, key, value)?;
    }

    let defaults = match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!(),
    };
    let mut known = Vec::new();
    leaf_types("", &defaults, &mut known);
    let mut given = Vec::new();
    leaf_types("", &doc, &mut given);
    for (key, ty) in given {
        let Some((_, want)) = known.iter().find(|(k, _)| *k == key) else {
            return Err(AsitError::config(key, "unknown key"));
        };
        if *want == "float" && ty == "integer" {
            let v = get_path(&doc, &key).and_then(Value::as_integer).expect("integer leaf");
            set_path(&mut doc, &key, Value::Float(v as f64))?;
        } else if *want != ty {
            return Err(AsitError::config(key, format!("expected {want}, got {ty}")));
        }
    }
    let cfg: RunConfig = Value::Table(doc).try_into().map_err(|e: toml::de::Error| {
        AsitError::config("<config>", e.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn get_path<'a>(doc: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = doc.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_path(doc: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AsitError::config(key, "malformed key"));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| AsitError::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config_text("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_beat_file() {
        let cfg = parse_config_text("augment.corruption_ratio = 0.7\n", &["augment.corruption_ratio=0.5".into()]).unwrap();
        assert_eq!(cfg.augment.corruption_ratio, 0.5);
        let cfg = parse_config_text("augment.corruption_ratio = 0.6\n", &[]).unwrap();
        assert_eq!(cfg.augment.corruption_ratio, 0.6);
    }

    #[test]
    fn section_syntax_also_parses() {
        let cfg = parse_config_text("[distill]\ntau_t = 0.05\n", &[]).unwrap();
        assert_eq!(cfg.distill.tau_t, 0.05);
    }

    #[test]
    fn ratio_out_of_range_names_key() {
        let err = parse_config_text("augment.corruption_ratio = 1.5\n", &[]).unwrap_err();
        match err {
            AsitError::Config { key, .. } => assert_eq!(key, "augment.corruption_ratio"),
            e => panic!("{e}"),
        }
        assert_eq!(AsitError::config("x", "y").exit_code(), 2);
    }

    #[test]
    fn unknown_key_and_type_mismatch_are_named() {
        match parse_config_text("dsp.nmels = 3\n", &[]).unwrap_err() {
            AsitError::Config { key, reason } => {
                assert_eq!(key, "dsp.nmels");
                assert!(reason.contains("unknown"));
            }
            e => panic!("{e}"),
        }
        match parse_config_text("", &["distill.tau_t=fast".into()]).unwrap_err() {
            AsitError::Config { key, reason } => {
                assert_eq!(key, "distill.tau_t");
                assert!(reason.contains("float"), "{reason}");
            }
            e => panic!("{e}"),
        }
        assert!(parse_config_text("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn integer_literal_accepted_for_float() {
        let cfg = parse_config_text("distill.lambda_end = 1\n", &[]).unwrap();
        assert_eq!(cfg.distill.lambda_end, 1.0);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.base_lr = 3.3e-5;
        cfg.dsp.log_floor = 1e-10;
        cfg.data.manifest = "a/b c.csv".into();
        cfg.backbone = BackboneConfig::custom(2, 32, 2, 8);
        let text = cfg.to_text();
        assert!(text.lines().all(|l| l.contains(" = ") && !l.starts_with('[')));
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_ne!(RunConfig::default().fingerprint(), cfg.fingerprint());
    }
}

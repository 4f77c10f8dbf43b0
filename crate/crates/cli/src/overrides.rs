//! `key.path=value` overrides applied on top of a [`RunConfig`].

use anyhow::{anyhow, bail, Context, Result};
use qseg_core::RunConfig;
use serde_json::Value;

/// Applies each `path=value` assignment. Values are parsed as JSON when
/// possible and taken as strings otherwise, so `model.query_mode=shared`
/// and `optim.grad_clip=null` both work.
pub fn apply(cfg: &RunConfig, assignments: &[String]) -> Result<RunConfig> {
    if assignments.is_empty() {
        return Ok(cfg.clone());
    }
    let mut doc = serde_json::to_value(cfg)?;
    for a in assignments {
        let (path, raw) = a
            .split_once('=')
            .ok_or_else(|| anyhow!("override {a:?} is not key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut doc;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                anyhow!("override {path}: {} is not a section", keys[..i].join("."))
            })?;
            if !obj.contains_key(*key) {
                bail!("override {path}: unknown key {key:?}");
            }
            node = obj.get_mut(*key).expect("key checked");
        }
        *node = value;
    }
    RunConfig::from_json(&doc.to_string())
        .with_context(|| format!("applying overrides {assignments:?}"))
}

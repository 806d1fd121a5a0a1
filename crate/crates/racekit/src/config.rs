//! Run configuration: one TOML file drives every subcommand.
//!
//! [`RunConfig`] gathers the per-module configs into named sections, fills
//! crate defaults for anything omitted, and rejects unknown keys so typos
//! fail loudly instead of silently training the wrong arm. Command-line
//! overrides (`--set section.key=value`) are spliced into the parsed value
//! tree before deserialization, so they face exactly the same typing and
//! unknown-key rules as the file itself. Every artifact a run writes carries
//! [`RunConfig::hash`] in a header comment, which makes outputs traceable to
//! the exact configuration that produced them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delta::{CollectConfig, DeltaFitConfig, TargetDynamics};
use crate::dynamics::DynamicsConfig;
use crate::field::FieldConfig;
use crate::losses::{LossWeights, RewardWeights};
use crate::policy::PolicyConfig;
use crate::trainer::{TrackSampler, TrainConfig, TrainSeeds};
use crate::world::WorldConfig;
use crate::{substream, Error, Result};

/// Output locations; everything a run writes lands under one directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("runs") }
    }
}

/// Whole-run configuration: the root seed plus one section per module.
/// Defaults reproduce the benchmark setup (nominal dynamics, zigzag track,
/// state-only policy, standard loss weights), so an empty file is a valid
/// config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; all randomness derives from it through named substreams.
    pub seed: u64,
    pub dynamics: DynamicsConfig,
    pub field: FieldConfig,
    pub losses: LossWeights,
    pub reward: RewardWeights,
    pub world: WorldConfig,
    pub track: TrackSampler,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    /// Mismatched plant for delta collection and sim-to-sim evaluation.
    pub target: TargetDynamics,
    pub collect: CollectConfig,
    pub delta_fit: DeltaFitConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Parse TOML text and splice in `--set section.key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        if overrides.is_empty() {
            // Direct parse keeps toml's line/column diagnostics.
            return toml::from_str(text).map_err(|e| Error::Config(e.to_string()));
        }
        let mut tree: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Read and parse a config file, with overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
            .map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    /// Cross-check every section; called by the CLI before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.field.validate()?;
        self.losses.validate()?;
        self.reward.validate()?;
        self.world.validate()?;
        self.track.geometry.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        self.target.validate()?;
        self.collect.validate()?;
        self.delta_fit.validate()?;
        Ok(())
    }

    /// Canonical serialized form; hashing and round-trip tests key off it.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }

    /// Short hex digest of the canonical form, stamped into artifact
    /// headers.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = String::with_capacity(12);
        for b in &digest[..6] {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }

    /// Training seed bundle derived from the root seed.
    pub fn seeds(&self) -> TrainSeeds {
        TrainSeeds::from_root(self.seed)
    }

    /// Seed for policy parameter initialization.
    pub fn init_seed(&self) -> u64 {
        substream(self.seed, "init", 0)
    }

    /// Seed for delta dataset collection.
    pub fn collect_seed(&self) -> u64 {
        substream(self.seed, "collect", 0)
    }
}

/// Apply one `section.key=value` override to the parsed tree. Intermediate
/// tables are created on demand; the final deserialization still rejects
/// keys no section declares.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override {spec:?} has an empty key path")));
    }
    let value = parse_override_value(raw.trim());
    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        let entry = node
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {path:?} descends into non-table key {seg:?}"))
        })?;
    }
    node.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Parse the right-hand side as a TOML literal; anything that is not one
/// (unquoted enum names, paths) falls back to a string, so
/// `--set track.family=circular` works without shell-escaped quotes.
fn parse_override_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::TrackFamily;

    #[test]
    fn empty_file_yields_documented_defaults() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.dynamics.dt, DynamicsConfig::default().dt);
        assert_eq!(cfg.train.envs, TrainConfig::default().envs);
        assert_eq!(cfg.io.out_dir, PathBuf::from("runs"));
        cfg.validate().unwrap();
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_named() {
        let err = RunConfig::from_toml("[dynamics]\nbogus = 1\n", &[]).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus"), "diagnostic lost the key: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(RunConfig::from_toml("[nosuchsection]\nx = 1\n", &[]).is_err());
        // The same rule holds when the bad key arrives as an override.
        let err =
            RunConfig::from_toml("", &["dynamics.bogus=1".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_with_toml_typing() {
        let ovs = vec![
            "seed=41".to_string(),
            "dynamics.dt=0.02".to_string(),
            "train.envs=4".to_string(),
            "track.family=circular".to_string(),
            "io.out_dir=elsewhere".to_string(),
        ];
        let cfg = RunConfig::from_toml("[train]\nenvs = 2\n", &ovs).unwrap();
        assert_eq!(cfg.seed, 41);
        assert_eq!(cfg.dynamics.dt, 0.02);
        assert_eq!(cfg.train.envs, 4, "override beats the file value");
        assert_eq!(cfg.track.family, TrackFamily::Circular);
        assert_eq!(cfg.io.out_dir, PathBuf::from("elsewhere"));

        let err = RunConfig::from_toml("", &["dynamics.dt=true".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "type mismatch must fail loudly");
        let err = RunConfig::from_toml("", &["dynamics".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "missing '=' must fail");
        let err =
            RunConfig::from_toml("", &["dynamics.dt.x=1".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "cannot descend into a scalar");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml("", &["seed=1".to_string()]).unwrap();
        assert_eq!(a.hash().len(), 12);
        assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn validate_rejects_bad_sections() {
        let cfg = RunConfig::from_toml("[dynamics]\ndt = -1.0\n", &[]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg =
            RunConfig::from_toml("[target]\nmass_scale = 0.0\n", &[]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn load_reports_missing_file_as_io() {
        let err = RunConfig::load(Path::new("/no/such/config.toml"), &[]).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn load_prefixes_diagnostics_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[dynamics]\ndt = \"oops\"\n").unwrap();
        match RunConfig::load(&path, &[]).unwrap_err() {
            Error::Config(msg) => assert!(msg.contains("run.toml"), "missing path in {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn seed_substreams_are_named_and_independent() {
        let cfg = RunConfig::from_toml("", &["seed=9".to_string()]).unwrap();
        let seeds = cfg.seeds();
        assert_eq!(seeds.track, substream(9, "track", 0));
        assert_ne!(cfg.init_seed(), seeds.track);
        assert_ne!(cfg.init_seed(), cfg.collect_seed());
    }
}

//! `key = value` run configuration with flag > file > default precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use alignrec::data::SynthSpec;
use alignrec::model::Variant;
use alignrec::train::TrainConfig;
use alignrec::{Error, Result};

/// Everything a command may need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub interactions: Option<PathBuf>,
    pub visual: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// `0` disables k-core filtering.
    pub kcore: usize,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            interactions: None,
            visual: None,
            text: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            kcore: 5,
            synth: SynthSpec::default(),
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "interactions",
    "visual",
    "text",
    "out",
    "checkpoint",
    "seed",
    "kcore",
    "variant",
    "batch_size",
    "max_epochs",
    "lr",
    "patience",
    "ks",
    "monitor_k",
    "timing",
    "lambda_reg",
    "lambda_cl",
    "lambda_mmd",
    "tau",
    "bandwidths",
    "symmetric_infonce",
    "reduction",
    "d_id",
    "graph_layers",
    "branch_channels",
    "attention_reduction",
    "dilations",
    "synth_users",
    "synth_items",
    "synth_latent_dim",
    "synth_per_user",
    "synth_d_visual",
    "synth_d_text",
    "synth_noise",
];

fn list<T: ToString>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(ToString::to_string).collect();
    format!("[{}]", items.join(", "))
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// The value of every key as it would appear in a config file.
    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let hp = &t.hp;
        let s = &self.synth;
        let values = [
            path(&self.interactions),
            path(&self.visual),
            path(&self.text),
            self.out.display().to_string(),
            path(&self.checkpoint),
            t.seed.to_string(),
            self.kcore.to_string(),
            t.variant.name().to_string(),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.base_lr.to_string(),
            t.patience.to_string(),
            list(&t.ks),
            t.monitor_k.to_string(),
            t.timing.to_string(),
            hp.lambda_reg.to_string(),
            hp.align.lambda_cl.to_string(),
            hp.align.lambda_mmd.to_string(),
            hp.align.tau.to_string(),
            list(&hp.align.bandwidths),
            hp.align.symmetric.to_string(),
            hp.reduction.to_string(),
            hp.d_id.to_string(),
            hp.graph_layers.to_string(),
            hp.branch_channels.to_string(),
            hp.attention_reduction.to_string(),
            list(&hp.dilations),
            s.users.to_string(),
            s.items.to_string(),
            s.latent_dim.to_string(),
            s.per_user.to_string(),
            s.d_visual.to_string(),
            s.d_text.to_string(),
            s.noise.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Config-file text that reproduces this configuration.
    pub fn echo(&self) -> String {
        let map = self.to_map();
        KEYS.iter().map(|k| format!("{k} = {}\n", map[k])).collect()
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "interactions" => self.interactions = opt_path(raw),
            "visual" => self.visual = opt_path(raw),
            "text" => self.text = opt_path(raw),
            "out" => self.out = PathBuf::from(raw),
            "checkpoint" => self.checkpoint = opt_path(raw),
            "seed" => {
                t.seed = num(key, raw)?;
                self.synth.seed = t.seed;
            }
            "kcore" => self.kcore = num(key, raw)?,
            "variant" => t.variant = Variant::from_name(raw)?,
            "batch_size" => t.batch_size = num(key, raw)?,
            "max_epochs" => t.max_epochs = num(key, raw)?,
            "lr" => t.base_lr = num(key, raw)?,
            "patience" => t.patience = num(key, raw)?,
            "ks" => t.ks = nums(key, raw)?,
            "monitor_k" => t.monitor_k = num(key, raw)?,
            "timing" => t.timing = num(key, raw)?,
            "lambda_reg" => t.hp.lambda_reg = num(key, raw)?,
            "lambda_cl" => t.hp.align.lambda_cl = num(key, raw)?,
            "lambda_mmd" => t.hp.align.lambda_mmd = num(key, raw)?,
            "tau" => t.hp.align.tau = num(key, raw)?,
            "bandwidths" => t.hp.align.bandwidths = nums(key, raw)?,
            "symmetric_infonce" => t.hp.align.symmetric = num(key, raw)?,
            "reduction" => t.hp.reduction = num(key, raw)?,
            "d_id" => t.hp.d_id = num(key, raw)?,
            "graph_layers" => t.hp.graph_layers = num(key, raw)?,
            "branch_channels" => t.hp.branch_channels = num(key, raw)?,
            "attention_reduction" => t.hp.attention_reduction = num(key, raw)?,
            "dilations" => t.hp.dilations = nums(key, raw)?,
            "synth_users" => self.synth.users = num(key, raw)?,
            "synth_items" => self.synth.items = num(key, raw)?,
            "synth_latent_dim" => self.synth.latent_dim = num(key, raw)?,
            "synth_per_user" => self.synth.per_user = num(key, raw)?,
            "synth_d_visual" => self.synth.d_visual = num(key, raw)?,
            "synth_d_text" => self.synth.d_text = num(key, raw)?,
            "synth_noise" => self.synth.noise = num(key, raw)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies config-file entries, then flag entries, over the defaults.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in file.iter().chain(flags) {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn dataset_paths(&self) -> Result<(&Path, &Path, &Path)> {
        Ok((
            required(&self.interactions, "interactions")?,
            required(&self.visual, "visual")?,
            required(&self.text, "text")?,
        ))
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("`{key}` is required (flag --{key} or config key)")))
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse {raw:?}")))
}

fn nums<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::Config(format!("`{key}`: expected a bracketed list, got {raw:?}")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|x| num(key, x.trim())).collect()
}

/// Parses `key = value` lines; `#` starts a comment line and values may be
/// double-quoted.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!(
                "line {}: unknown configuration key `{k}`",
                n + 1
            )));
        }
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(v);
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Config(format!("{} line {line}: {msg}", path.display())),
        other => other,
    })
}

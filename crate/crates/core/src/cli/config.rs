//! Flat `key = value` experiment configuration.
//!
//! Keys carry a section prefix (`train.epochs`, `generator.days`); a
//! `[section]` line prefixes the keys that follow it. Values resolve in
//! order defaults, config file, `STAN_<KEY>` environment variables (dots
//! written as `__`, e.g. `STAN_TRAIN__EPOCHS`), then command-line flags.
//! Unknown keys are rejected at every level. The resolved key set, sorted
//! and joined as `key=value` lines, is hashed with SHA-256 to give the
//! config hash recorded in every manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{Arch, NetConfig};
use crate::data::{StageLabel, Window};
use crate::nn::AdamConfig;
use crate::preference::AttentionAxis;
use crate::stage_tracker::{GammaMode, GammaSchedule};
use crate::synthgen::{GeneratorConfig, StageProfile, TransitionMatrix};
use crate::trainer::{HistoryPolicy, TrainConfig};

pub const ENV_PREFIX: &str = "STAN_";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Input CSV; `None` means `<out>/dataset.csv`.
    pub dataset: Option<PathBuf>,
    pub dataset_name: String,
    pub split: (f64, f64, f64),
    /// Task columns holding raw values to be binarised by equal-frequency
    /// binning.
    pub binned_tasks: Vec<String>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub base_arch: Arch,
    pub report_archs: Vec<Arch>,
    pub users_per_stage: usize,
    /// Canonical resolved `key=value` lines.
    pub resolved: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.csv"))
    }

    pub fn canonical(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn window_str(w: Window) -> String {
    match w {
        Window::Unlimited => "unlimited".into(),
        Window::Days(d) => d.to_string(),
    }
}

fn history_str(h: HistoryPolicy) -> &'static str {
    match h {
        HistoryPolicy::Exclude => "exclude",
        HistoryPolicy::GlobalMean => "global_mean",
    }
}

/// Every accepted key with its default value.
pub fn defaults() -> BTreeMap<String, String> {
    let g = GeneratorConfig::default();
    let t = TrainConfig::default();
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("seed", "0".into());
    put("output.dir", "out".into());
    put("data.path", String::new());
    put("data.name", "synthetic".into());
    put("data.split", "0.7,0.15,0.15".into());
    put("data.binned_tasks", String::new());

    put("generator.num_users", g.num_users.to_string());
    put("generator.days", g.days.to_string());
    put("generator.sessions_per_user_day", g.sessions_per_user_day.to_string());
    put("generator.tasks", g.task_names.join(","));
    put("generator.user_vocab", list(&g.user_vocab));
    put("generator.item_vocab", list(&g.item_vocab));
    put("generator.num_items", g.num_items.to_string());
    put("generator.feature_jitter", g.feature_jitter.to_string());
    put("generator.item_effect", g.item_effect.to_string());
    put("generator.initial", list(&g.initial));
    put("generator.transitions", list(&g.transitions.0.concat()));
    put("generator.start_timestamp", g.start_timestamp.to_string());
    for p in &g.profiles {
        put(&format!("generator.rates.{}", p.stage.name()), list(&p.rates));
        put(&format!("generator.shift.{}", p.stage.name()), list(&p.feature_shift));
    }

    put("train.arch", t.arch.to_string());
    put("train.user_dim", t.net.user_dim.to_string());
    put("train.item_dim", t.net.item_dim.to_string());
    put("train.expert_hidden", t.net.expert_hidden.to_string());
    put("train.expert_dim", t.net.expert_dim.to_string());
    put("train.tower_hidden", list(&t.net.tower_hidden));
    put("train.num_specific", t.net.num_specific.to_string());
    put("train.num_shared", t.net.num_shared.to_string());
    put("train.ple_layers", t.net.ple_layers.to_string());
    put("train.stan_layers", t.net.stan_layers.to_string());
    put("train.preference_dim", t.preference_dim.to_string());
    put("train.attention_axis", t.attention_axis.to_string());
    put("train.lr", t.adam.lr.to_string());
    put("train.beta1", t.adam.beta1.to_string());
    put("train.beta2", t.adam.beta2.to_string());
    put("train.eps", t.adam.eps.to_string());
    put("train.batch_size", t.batch_size.to_string());
    put("train.epochs", t.epochs.to_string());
    put("train.patience", t.patience.to_string());
    put("train.task_weights", list(&t.task_weights));
    put("train.gamma_mode", t.gamma_mode.to_string());
    put("train.gamma_schedule", t.gamma_schedule.to_string());
    put("train.window", window_str(t.window));
    put("train.history", history_str(t.history).into());

    put("eval.k", "1".into());
    put("eval.base_arch", Arch::SharedBottom.to_string());
    put("eval.archs", list(&Arch::ALL));
    put("export.users_per_stage", "1000".into());
    m
}

/// Parses config text into `(key, value)` pairs.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// `STAN_TRAIN__EPOCHS` → `train.epochs`.
pub fn env_key(var: &str) -> Option<String> {
    var.strip_prefix(ENV_PREFIX).map(|k| k.to_lowercase().replace("__", "."))
}

/// Layers overrides onto the defaults, rejecting unknown and duplicate keys.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(&str, String)],
) -> Result<ExperimentConfig, String> {
    let mut map = defaults();
    let mut apply = |key: String, value: String, origin: &str| -> Result<(), String> {
        match map.get_mut(&key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(format!("unknown config key `{key}` ({origin})")),
        }
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let pairs = parse_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in pairs {
            if !seen.insert(k.clone()) {
                return Err(format!("duplicate config key `{k}` in {}", path.display()));
            }
            apply(k, v, "config file")?;
        }
    }
    let mut env: Vec<(String, String)> = env.into_iter().collect();
    env.sort();
    for (var, v) in env {
        if let Some(k) = env_key(&var) {
            apply(k, v, &var)?;
        }
    }
    for (k, v) in flags {
        apply(k.to_string(), v.clone(), "command line")?;
    }
    build(map)
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("key present in defaults")
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, String>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| format!("invalid value `{v}` for `{key}`: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, String>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| format!("invalid entry `{}` in `{key}`: {e}", s.trim()))
            })
            .collect()
    }

    fn array<const N: usize>(&self, key: &str) -> Result<[f64; N], String> {
        let v: Vec<f64> = self.list(key)?;
        v.try_into()
            .map_err(|v: Vec<f64>| format!("`{key}` needs {N} values, got {}", v.len()))
    }
}

fn build(map: BTreeMap<String, String>) -> Result<ExperimentConfig, String> {
    let r = Reader(&map);
    let seed: u64 = r.get("seed")?;

    let split = r.array::<3>("data.split")?;
    let transitions = r.array::<16>("generator.transitions")?;
    let mut rows = [[0.0; 4]; 4];
    for (i, v) in transitions.into_iter().enumerate() {
        rows[i / 4][i % 4] = v;
    }
    let profiles = StageLabel::ALL
        .iter()
        .map(|&stage| {
            Ok(StageProfile {
                stage,
                rates: r.list(&format!("generator.rates.{}", stage.name()))?,
                feature_shift: r.list(&format!("generator.shift.{}", stage.name()))?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let generator = GeneratorConfig {
        num_users: r.get("generator.num_users")?,
        days: r.get("generator.days")?,
        sessions_per_user_day: r.get("generator.sessions_per_user_day")?,
        seed,
        task_names: r.list("generator.tasks")?,
        user_vocab: r.list("generator.user_vocab")?,
        item_vocab: r.list("generator.item_vocab")?,
        num_items: r.get("generator.num_items")?,
        feature_jitter: r.get("generator.feature_jitter")?,
        item_effect: r.get("generator.item_effect")?,
        initial: r.array::<4>("generator.initial")?,
        profiles,
        transitions: TransitionMatrix(rows),
        start_timestamp: r.get("generator.start_timestamp")?,
    };

    let window = match r.raw("train.window") {
        "unlimited" => Window::Unlimited,
        _ => Window::Days(r.get("train.window")?),
    };
    let history = match r.raw("train.history") {
        "exclude" => HistoryPolicy::Exclude,
        "global_mean" => HistoryPolicy::GlobalMean,
        other => return Err(format!("invalid value `{other}` for `train.history`")),
    };
    let train = TrainConfig {
        arch: r.get("train.arch")?,
        net: NetConfig {
            user_dim: r.get("train.user_dim")?,
            item_dim: r.get("train.item_dim")?,
            expert_hidden: r.get("train.expert_hidden")?,
            expert_dim: r.get("train.expert_dim")?,
            tower_hidden: r.list("train.tower_hidden")?,
            num_specific: r.get("train.num_specific")?,
            num_shared: r.get("train.num_shared")?,
            ple_layers: r.get("train.ple_layers")?,
            stan_layers: r.get("train.stan_layers")?,
        },
        preference_dim: r.get("train.preference_dim")?,
        attention_axis: r.get::<AttentionAxis>("train.attention_axis")?,
        adam: AdamConfig {
            lr: r.get("train.lr")?,
            beta1: r.get("train.beta1")?,
            beta2: r.get("train.beta2")?,
            eps: r.get("train.eps")?,
        },
        batch_size: r.get("train.batch_size")?,
        epochs: r.get("train.epochs")?,
        seed,
        task_weights: r.list("train.task_weights")?,
        gamma_mode: r.get::<GammaMode>("train.gamma_mode")?,
        gamma_schedule: r.get::<GammaSchedule>("train.gamma_schedule")?,
        patience: r.get("train.patience")?,
        window,
        history,
    };

    let k: usize = r.get("eval.k")?;
    if k == 0 {
        return Err("`eval.k` must be at least 1".into());
    }
    let path = r.raw("data.path");
    Ok(ExperimentConfig {
        seed,
        out: PathBuf::from(r.raw("output.dir")),
        dataset: (!path.is_empty()).then(|| PathBuf::from(path)),
        dataset_name: r.raw("data.name").to_string(),
        split: (split[0], split[1], split[2]),
        binned_tasks: r.list("data.binned_tasks")?,
        generator,
        train,
        k,
        base_arch: r.get("eval.base_arch")?,
        report_archs: r.list("eval.archs")?,
        users_per_stage: r.get("export.users_per_stage")?,
        resolved: map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_resolve_to_library_defaults() {
        let c = resolve(None, no_env(), &[]).unwrap();
        assert_eq!(c.generator, GeneratorConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.k, 1);
        assert_eq!(c.report_archs, Arch::ALL.to_vec());
    }

    #[test]
    fn sections_prefix_keys_and_layers_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "seed = 4  # comment\n[train]\nepochs = 3\narch = mmoe\n").unwrap();
        let env = vec![
            ("STAN_TRAIN__EPOCHS".to_string(), "5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = resolve(Some(&path), env, &[("seed", "9".to_string())]).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.arch, Arch::Mmoe);
        assert_eq!((c.seed, c.train.seed, c.generator.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "train.epoch = 3\n").unwrap();
        assert!(resolve(Some(&path), no_env(), &[]).unwrap_err().contains("train.epoch"));
        let env = vec![("STAN_TRAIN__NOPE".to_string(), "1".to_string())];
        assert!(resolve(None, env, &[]).is_err());
        std::fs::write(&path, "seed = 1\nseed = 2\n").unwrap();
        assert!(resolve(Some(&path), no_env(), &[]).unwrap_err().contains("duplicate"));
    }

    #[test]
    fn bad_values_rejected() {
        for (k, v) in [("train.arch", "transformer"), ("data.split", "0.5,0.5"), ("eval.k", "0"), ("train.window", "-1")] {
            assert!(resolve(None, no_env(), &[(k, v.to_string())]).is_err(), "{k}={v}");
        }
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = resolve(None, no_env(), &[]).unwrap();
        let b = resolve(None, no_env(), &[]).unwrap();
        let c = resolve(None, no_env(), &[("train.lr", "0.01".to_string())]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn window_and_lists_parse() {
        let c = resolve(
            None,
            no_env(),
            &[("train.window", "7".into()), ("train.tower_hidden", "8, 4".into())],
        )
        .unwrap();
        assert_eq!(c.train.window, Window::Days(7));
        assert_eq!(c.train.net.tower_hidden, vec![8, 4]);
    }
}

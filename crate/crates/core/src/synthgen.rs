//! Synthetic interaction logs with known lifecycle stages.
//!
//! Every user walks a daily Markov chain over the four stages. Each session
//! draws an item and user features that depend on the current stage, then
//! one Bernoulli label per task at that stage's configured rate. An
//! optional per-item effect tilts the rate up or down for each item while
//! leaving the stage's average rate unchanged, so item features carry
//! signal too.
//!
//! Users get independent random streams keyed by the seed and their index,
//! which makes the output independent of generation order.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InteractionRecord, SplitTag, StageLabel};
use crate::error::DataError;
use crate::seed::keyed_rng;

const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: StageLabel,
    /// Per-task Bernoulli rate, strictly inside (0, 1).
    pub rates: Vec<f64>,
    /// Per-user-slot offset added to feature draws.
    pub feature_shift: Vec<u32>,
}

/// Row-stochastic daily transition probabilities, indexed by stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix(pub [[f64; 4]; 4]);

impl TransitionMatrix {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        TransitionMatrix(m)
    }

    /// `stay` on the diagonal, the rest spread evenly.
    pub fn sticky(stay: f64) -> Self {
        let mut m = [[(1.0 - stay) / 3.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = stay;
        }
        TransitionMatrix(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (i, row) in self.0.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(DataError::Config(format!("transition row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DataError::Config(format!("transition row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub days: usize,
    pub sessions_per_user_day: usize,
    pub seed: u64,
    pub task_names: Vec<String>,
    /// Vocabulary of each user feature slot (`d1` slots).
    pub user_vocab: Vec<usize>,
    /// Vocabulary of each item feature slot (`d3` slots).
    pub item_vocab: Vec<usize>,
    pub num_items: usize,
    /// Width of the uniform noise added to each shifted user feature.
    pub feature_jitter: u32,
    /// Strength in `[0, 1]` of the per-item rate tilt.
    pub item_effect: f64,
    /// Stage distribution on day 0.
    pub initial: [f64; 4],
    /// One profile per stage, in `StageLabel::ALL` order.
    pub profiles: Vec<StageProfile>,
    pub transitions: TransitionMatrix,
    pub start_timestamp: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        // (ctr, staytime, cvr) per stage; ordering only, values are synthetic
        let rates = [[0.1, 0.4, 0.3], [0.45, 0.1, 0.45], [0.6, 0.6, 0.08], [0.85, 0.85, 0.7]];
        let profiles = StageLabel::ALL
            .iter()
            .zip(rates)
            .map(|(&stage, r)| {
                let s = 4 * stage.index() as u32;
                StageProfile {
                    stage,
                    rates: r.to_vec(),
                    feature_shift: vec![s, s, 0],
                }
            })
            .collect();
        GeneratorConfig {
            num_users: 2000,
            days: 30,
            sessions_per_user_day: 2,
            seed: 0,
            task_names: vec!["ctr".into(), "staytime".into(), "cvr".into()],
            user_vocab: vec![16, 16, 16],
            item_vocab: vec![64, 8],
            num_items: 64,
            feature_jitter: 4,
            item_effect: 0.5,
            initial: [0.25; 4],
            profiles,
            transitions: TransitionMatrix::sticky(0.97),
            start_timestamp: 1_600_000_000,
        }
    }
}

impl GeneratorConfig {
    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.days == 0 || self.sessions_per_user_day == 0 || self.num_items == 0 || self.feature_jitter == 0 {
            return bad("days, sessions per day, items and feature jitter must be positive".into());
        }
        if self.sessions_per_user_day as u64 > SECONDS_PER_DAY {
            return bad("more sessions per day than seconds in a day".into());
        }
        if self.task_names.is_empty() || self.user_vocab.is_empty() || self.item_vocab.is_empty() {
            return bad("need at least one task, user slot and item slot".into());
        }
        if self.user_vocab.iter().chain(&self.item_vocab).any(|&v| v == 0) {
            return bad("vocabulary sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.item_effect) {
            return bad(format!("item effect {} outside [0, 1]", self.item_effect));
        }
        let init_sum: f64 = self.initial.iter().sum();
        if self.initial.iter().any(|&p| p.is_nan() || p < 0.0) || (init_sum - 1.0).abs() > 1e-9 {
            return bad(format!("initial stage distribution {:?} is not a distribution", self.initial));
        }
        self.transitions.validate()?;
        if self.profiles.len() != 4 {
            return bad(format!("need 4 stage profiles, got {}", self.profiles.len()));
        }
        for (p, &stage) in self.profiles.iter().zip(&StageLabel::ALL) {
            if p.stage != stage {
                return bad(format!("profile for {} found where {stage} was expected", p.stage));
            }
            if p.rates.len() != self.num_tasks() || p.feature_shift.len() != self.user_vocab.len() {
                return bad(format!("profile {stage} does not match task and slot counts"));
            }
            if let Some(r) = p.rates.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
                return bad(format!("stage {stage} rate {r} must lie strictly inside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn user_id(index: usize) -> String {
        format!("u{:05}", index + 1)
    }

    pub fn item_id(index: usize) -> String {
        format!("i{:05}", index + 1)
    }
}

/// Ground-truth stage of one user on one day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub user_id: String,
    pub day: usize,
    pub stage: StageLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub truth: Vec<TruthRow>,
}

fn draw_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Per-item tables: feature ids and the centred tilt `z[task]` in `[-1, 1]`.
struct ItemTable {
    features: Vec<Vec<u32>>,
    tilt: Vec<Vec<f64>>,
}

fn item_table(cfg: &GeneratorConfig) -> ItemTable {
    let mut rng = keyed_rng(cfg.seed, "items");
    let features = (0..cfg.num_items)
        .map(|i| {
            cfg.item_vocab
                .iter()
                .enumerate()
                .map(|(slot, &v)| {
                    if slot == 0 {
                        (i % v) as u32
                    } else {
                        rng.random_range(0..v as u32)
                    }
                })
                .collect()
        })
        .collect();
    let mut tilt = vec![vec![0.0; cfg.num_tasks()]; cfg.num_items];
    for k in 0..cfg.num_tasks() {
        let raw: Vec<f64> = (0..cfg.num_items).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let centred: Vec<f64> = raw.iter().map(|z| z - mean).collect();
        let scale = centred.iter().fold(1.0f64, |m, z| m.max(z.abs()));
        for (row, z) in tilt.iter_mut().zip(centred) {
            row[k] = z / scale;
        }
    }
    ItemTable { features, tilt }
}

fn generate_user(cfg: &GeneratorConfig, items: &ItemTable, index: usize) -> (Vec<InteractionRecord>, Vec<TruthRow>) {
    let mut rng = keyed_rng(cfg.seed, &format!("user/{index}"));
    let user_id = GeneratorConfig::user_id(index);
    let spacing = SECONDS_PER_DAY / cfg.sessions_per_user_day as u64;
    let mut records = Vec::with_capacity(cfg.days * cfg.sessions_per_user_day);
    let mut truth = Vec::with_capacity(cfg.days);
    let mut stage = draw_index(&mut rng, &cfg.initial);
    for day in 0..cfg.days {
        if day > 0 {
            stage = draw_index(&mut rng, &cfg.transitions.0[stage]);
        }
        let profile = &cfg.profiles[stage];
        truth.push(TruthRow {
            user_id: user_id.clone(),
            day,
            stage: profile.stage,
        });
        for slot in 0..cfg.sessions_per_user_day {
            let timestamp =
                cfg.start_timestamp + day as u64 * SECONDS_PER_DAY + slot as u64 * spacing + rng.random_range(0..spacing);
            let user_features = cfg
                .user_vocab
                .iter()
                .zip(&profile.feature_shift)
                .map(|(&v, &shift)| ((shift + rng.random_range(0..cfg.feature_jitter)) as usize % v) as u32)
                .collect();
            let item = rng.random_range(0..cfg.num_items);
            let labels = profile
                .rates
                .iter()
                .zip(&items.tilt[item])
                .map(|(&r, &z)| {
                    let p = r + cfg.item_effect * r * (1.0 - r) * z;
                    u8::from(rng.random::<f64>() < p)
                })
                .collect();
            records.push(InteractionRecord {
                user_id: user_id.clone(),
                item_id: GeneratorConfig::item_id(item),
                timestamp,
                user_features,
                item_features: items.features[item].clone(),
                labels,
                raw_staytime: None,
            });
        }
    }
    (records, truth)
}

/// Generates the log and the per-(user, day) stage table.
pub fn generate(cfg: &GeneratorConfig) -> Result<Generated, DataError> {
    cfg.validate()?;
    let items = item_table(cfg);
    let per_user: Vec<_> = (0..cfg.num_users)
        .into_par_iter()
        .map(|u| generate_user(cfg, &items, u))
        .collect();
    let mut records = Vec::with_capacity(cfg.num_users * cfg.days * cfg.sessions_per_user_day);
    let mut truth = Vec::with_capacity(cfg.num_users * cfg.days);
    for (r, t) in per_user {
        records.extend(r);
        truth.extend(t);
    }
    let dataset = Dataset::new(
        cfg.task_names.clone(),
        cfg.user_vocab.clone(),
        cfg.item_vocab.clone(),
        records,
        SplitTag::Unsplit,
    )?;
    Ok(Generated { dataset, truth })
}

/// Day index of a generated timestamp.
pub fn day_of(cfg: &GeneratorConfig, timestamp: u64) -> usize {
    (timestamp.saturating_sub(cfg.start_timestamp) / SECONDS_PER_DAY) as usize
}

/// Looks up the true stage of every record.
pub fn record_stages(ds: &Dataset, truth: &[TruthRow], cfg: &GeneratorConfig) -> Result<Vec<StageLabel>, DataError> {
    let table: BTreeMap<(&str, usize), StageLabel> =
        truth.iter().map(|t| ((t.user_id.as_str(), t.day), t.stage)).collect();
    ds.records
        .iter()
        .enumerate()
        .map(|(row, r)| {
            let day = day_of(cfg, r.timestamp);
            table.get(&(r.user_id.as_str(), day)).copied().ok_or_else(|| DataError::Validation {
                row,
                msg: format!("no truth entry for user {} on day {day}", r.user_id),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTaskStat {
    pub stage: StageLabel,
    pub task: String,
    pub sessions: usize,
    pub configured: f64,
    /// `None` when the stage has no sessions.
    pub empirical: Option<f64>,
    /// Binomial standard error at the configured rate.
    pub std_err: Option<f64>,
    /// Deviation beyond three standard errors.
    pub flagged: bool,
}

impl StageTaskStat {
    pub fn deviation(&self) -> Option<f64> {
        self.empirical.map(|e| (e - self.configured).abs())
    }
}

/// Empirical label rate per stage and task against the configured rates.
pub fn validate_statistics(
    ds: &Dataset,
    truth: &[TruthRow],
    cfg: &GeneratorConfig,
) -> Result<Vec<StageTaskStat>, DataError> {
    if ds.num_tasks() != cfg.num_tasks() {
        return Err(DataError::Invalid("dataset and generator disagree on tasks".into()));
    }
    let stages = record_stages(ds, truth, cfg)?;
    let k = cfg.num_tasks();
    let mut sessions = [0usize; 4];
    let mut positives = vec![[0usize; 4]; k];
    for (r, st) in ds.records.iter().zip(&stages) {
        sessions[st.index()] += 1;
        for (t, &y) in r.labels.iter().enumerate() {
            positives[t][st.index()] += usize::from(y);
        }
    }
    let mut out = Vec::with_capacity(4 * k);
    for stage in StageLabel::ALL {
        let s = stage.index();
        for (t, name) in cfg.task_names.iter().enumerate() {
            let configured = cfg.profiles[s].rates[t];
            let n = sessions[s];
            let (empirical, std_err) = if n == 0 {
                (None, None)
            } else {
                let se = (configured * (1.0 - configured) / n as f64).sqrt();
                (Some(positives[t][s] as f64 / n as f64), Some(se))
            };
            let flagged = matches!((empirical, std_err), (Some(e), Some(se)) if (e - configured).abs() > 3.0 * se);
            out.push(StageTaskStat {
                stage,
                task: name.clone(),
                sessions: n,
                configured,
                empirical,
                std_err,
                flagged,
            });
        }
    }
    Ok(out)
}

pub fn write_truth_csv<W: Write>(truth: &[TruthRow], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "day", "stage"])?;
    for t in truth {
        w.write_record([t.user_id.clone(), t.day.to_string(), t.stage.name().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: std::io::Read>(reader: R) -> Result<Vec<TruthRow>, DataError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or(DataError::Validation { row, msg: "short row".into() });
        out.push(TruthRow {
            user_id: field(0)?.to_string(),
            day: field(1)?.parse().map_err(|e| DataError::Validation {
                row,
                msg: format!("bad day: {e}"),
            })?,
            stage: field(2)?.parse()?,
        });
    }
    Ok(out)
}

/// Columns `stage,task,sessions,configured,empirical,abs_deviation,flagged`;
/// stages without sessions report `absent`.
pub fn write_stats_csv<W: Write>(stats: &[StageTaskStat], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stage", "task", "sessions", "configured", "empirical", "abs_deviation", "flagged"])?;
    for s in stats {
        let (emp, dev) = match (s.empirical, s.deviation()) {
            (Some(e), Some(d)) => (e.to_string(), d.to_string()),
            _ => ("absent".to_string(), "absent".to_string()),
        };
        w.write_record([
            s.stage.name().to_string(),
            s.task.clone(),
            s.sessions.to_string(),
            s.configured.to_string(),
            emp,
            dev,
            s.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_users: 40,
            days: 5,
            sessions_per_user_day: 3,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_users_give_empty_outputs() {
        let g = generate(&GeneratorConfig {
            num_users: 0,
            ..small()
        })
        .unwrap();
        assert!(g.dataset.is_empty() && g.truth.is_empty());
        assert_eq!(g.dataset.num_users(), 0);
    }

    #[test]
    fn identity_transitions_keep_stage() {
        let cfg = GeneratorConfig {
            transitions: TransitionMatrix::identity(),
            ..small()
        };
        let g = generate(&cfg).unwrap();
        let mut first: BTreeMap<&str, StageLabel> = BTreeMap::new();
        for t in &g.truth {
            assert_eq!(*first.entry(&t.user_id).or_insert(t.stage), t.stage);
        }
    }

    #[test]
    fn rates_must_be_open_interval() {
        let mut cfg = small();
        cfg.profiles[0].rates[0] = 1.0;
        assert!(matches!(generate(&cfg), Err(DataError::Config(_))));
        cfg.profiles[0].rates[0] = 0.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn near_one_rate_gives_near_all_positives() {
        let mut cfg = GeneratorConfig {
            num_users: 200,
            days: 25,
            sessions_per_user_day: 2,
            initial: [1.0, 0.0, 0.0, 0.0],
            transitions: TransitionMatrix::identity(),
            item_effect: 0.0,
            ..small()
        };
        cfg.profiles[0].rates[0] = 0.999;
        let g = generate(&cfg).unwrap();
        assert_eq!(g.dataset.len(), 10_000);
        let ones = g.dataset.records.iter().filter(|r| r.labels[0] == 1).count();
        assert!(ones as f64 >= 0.99 * 10_000.0);
    }

    #[test]
    fn invalid_transitions_rejected() {
        let mut cfg = small();
        cfg.transitions.0[2][1] += 0.1;
        assert!(matches!(generate(&cfg), Err(DataError::Config(_))));
    }

    #[test]
    fn timestamps_strictly_increase_per_user() {
        let g = generate(&small()).unwrap();
        for idx in g.dataset.user_records().values() {
            for w in idx.windows(2) {
                assert!(g.dataset.records[w[0]].timestamp < g.dataset.records[w[1]].timestamp);
            }
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let more = generate(&GeneratorConfig {
            num_users: 41,
            ..small()
        })
        .unwrap();
        // the first 40 users are unchanged by adding a 41st
        let kept = more.dataset.filter(|r| r.user_id != GeneratorConfig::user_id(40));
        assert_eq!(kept.records, a.dataset.records);
    }

    #[test]
    fn empirical_rates_within_binomial_bounds() {
        let mut cfg = GeneratorConfig {
            num_users: 200,
            days: 25,
            sessions_per_user_day: 2,
            initial: [1.0, 0.0, 0.0, 0.0],
            transitions: TransitionMatrix::identity(),
            ..small()
        };
        cfg.profiles[0].rates = vec![0.5, 0.5, 0.5];
        let g = generate(&cfg).unwrap();
        let stats = validate_statistics(&g.dataset, &g.truth, &cfg).unwrap();
        for s in &stats {
            if s.stage == StageLabel::New {
                assert_eq!(s.sessions, 10_000);
                assert!(s.deviation().unwrap() < 0.015, "{s:?}");
            } else {
                assert_eq!(s.empirical, None);
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_stats_csv(&stats, &mut a).unwrap();
        write_stats_csv(&validate_statistics(&g.dataset, &g.truth, &cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().contains("absent"));
    }

    #[test]
    fn mismatched_truth_rejected() {
        let cfg = small();
        let g = generate(&cfg).unwrap();
        let truth: Vec<TruthRow> = g.truth.iter().filter(|t| t.day != 2).cloned().collect();
        assert!(matches!(
            validate_statistics(&g.dataset, &truth, &cfg),
            Err(DataError::Validation { .. })
        ));
    }

    #[test]
    fn item_tilt_is_centred_and_bounded() {
        let cfg = small();
        let t = item_table(&cfg);
        for k in 0..cfg.num_tasks() {
            let col: Vec<f64> = t.tilt.iter().map(|r| r[k]).collect();
            assert!(col.iter().all(|z| z.abs() <= 1.0));
            assert!(col.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn transitions_survive_text_round_trip() {
        let m = TransitionMatrix::sticky(0.9);
        let text: Vec<String> = m.0.iter().flatten().map(|v| v.to_string()).collect();
        let back: Vec<f64> = text.iter().map(|s| s.parse().unwrap()).collect();
        let mut rows = [[0.0; 4]; 4];
        for (i, v) in back.into_iter().enumerate() {
            rows[i / 4][i % 4] = v;
        }
        assert_eq!(TransitionMatrix(rows), m);
        TransitionMatrix(rows).validate().unwrap();
    }

    #[test]
    fn truth_csv_round_trip() {
        let g = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_truth_csv(&g.truth, &mut buf).unwrap();
        assert_eq!(read_truth_csv(buf.as_slice()).unwrap(), g.truth);
    }
}

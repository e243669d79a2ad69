//! Beta posteriors over per-(user, task) preference and the stage weights
//! `γ` drawn from them.
//!
//! Each update increments the user's counter `c` and adds `ỹ·c` to alpha and
//! `(1-ỹ)·c` to beta, so later records weigh more. The total mass after `c`
//! updates is `2 + c(c+1)/2`; beta is stored implicitly as `mass - alpha`,
//! which keeps that identity exact in floating point.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::StageError;
use crate::seed::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    alpha: f64,
    count: u64,
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self::init()
    }
}

impl BetaPosterior {
    /// Uniform prior `Beta(1, 1)`.
    pub fn init() -> Self {
        BetaPosterior { alpha: 1.0, count: 0 }
    }

    /// Rebuilds a stored posterior, checking it is reachable by updates.
    pub fn from_parts(alpha: f64, beta: f64, count: u64) -> Result<Self, StageError> {
        let p = BetaPosterior { alpha, count };
        let mass_err = (alpha + beta - p.mass()).abs();
        if !(alpha >= 1.0 && beta >= 1.0) || mass_err > 1e-9 * p.mass() {
            return Err(StageError::InvalidState(format!(
                "alpha {alpha}, beta {beta} inconsistent with c = {count}"
            )));
        }
        Ok(p)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.mass() - self.alpha
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `alpha + beta = 2 + c(c+1)/2`.
    pub fn mass(&self) -> f64 {
        let c = self.count as f64;
        2.0 + c * (c + 1.0) / 2.0
    }

    pub fn update(&mut self, y: f64) -> Result<(), StageError> {
        if !(0.0..=1.0).contains(&y) {
            return Err(StageError::Domain(y));
        }
        self.count += 1;
        self.alpha += y * self.count as f64;
        // guard against rounding pushing alpha past the mass bound
        self.alpha = self.alpha.min(self.mass() - 1.0);
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let (a, b, m) = (self.alpha, self.beta(), self.mass());
        a * b / (m * m * (m + 1.0))
    }

    /// One draw from `Beta(alpha, beta)`, kept strictly inside `(0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let dist = Beta::new(self.alpha, self.beta()).expect("alpha and beta are at least 1");
        let x: f64 = dist.sample(rng);
        x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }
}

/// How `γ` is obtained from a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    #[default]
    Sampled,
    PosteriorMean,
}

/// How often sampled `γ` is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    #[default]
    PerEpoch,
    PerBatch,
}

macro_rules! name_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = StageError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $($s => Ok($v),)+
                    other => Err(StageError::InvalidState(format!("unknown option `{other}`"))),
                }
            }
        }
    };
}

name_enum!(GammaMode, GammaMode::Sampled => "sampled", GammaMode::PosteriorMean => "posterior_mean");
name_enum!(GammaSchedule, GammaSchedule::PerEpoch => "per_epoch", GammaSchedule::PerBatch => "per_batch");

/// Stream key for the `γ` draw of one (user, task) at an epoch and,
/// optionally, a batch.
pub fn gamma_key(user: &str, task: usize, epoch: usize, batch: Option<usize>) -> String {
    match batch {
        Some(b) => format!("gamma/{user}/{task}/{epoch}/{b}"),
        None => format!("gamma/{user}/{task}/{epoch}"),
    }
}

/// Posteriors for every (user, task), keyed by user id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosteriorStore {
    num_tasks: usize,
    users: BTreeMap<String, Vec<BetaPosterior>>,
}

impl PosteriorStore {
    pub fn new(num_tasks: usize) -> Self {
        PosteriorStore {
            num_tasks,
            users: BTreeMap::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn get(&self, user: &str) -> Option<&[BetaPosterior]> {
        self.users.get(user).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[BetaPosterior])> {
        self.users.iter().map(|(u, p)| (u.as_str(), p.as_slice()))
    }

    pub fn insert(&mut self, user: &str, posteriors: Vec<BetaPosterior>) {
        self.users.insert(user.to_string(), posteriors);
    }

    /// Applies one record's preference vector to `user`'s posteriors.
    pub fn update(&mut self, user: &str, prefs: &[f64]) -> Result<(), StageError> {
        if prefs.len() != self.num_tasks {
            return Err(StageError::InvalidState(format!(
                "{} preferences for {} tasks",
                prefs.len(),
                self.num_tasks
            )));
        }
        if let Some(&bad) = prefs.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(StageError::Domain(bad));
        }
        let post = self
            .users
            .entry(user.to_string())
            .or_insert_with(|| vec![BetaPosterior::init(); self.num_tasks]);
        for (p, &y) in post.iter_mut().zip(prefs) {
            p.update(y)?;
        }
        Ok(())
    }

    /// Fresh posteriors built from `prefs[i]` (the preference vector of
    /// `ds.records[i]`), applied in record order.
    pub fn from_history(ds: &Dataset, prefs: &[Vec<f64>]) -> Result<Self, StageError> {
        if prefs.len() != ds.len() {
            return Err(StageError::InvalidState(format!(
                "{} preference vectors for {} records",
                prefs.len(),
                ds.len()
            )));
        }
        let mut store = PosteriorStore::new(ds.num_tasks());
        for (rec, y) in ds.records.iter().zip(prefs) {
            store.update(&rec.user_id, y)?;
        }
        Ok(store)
    }

    /// `γ` for every known user.
    pub fn gammas(&self, mode: GammaMode, seed: u64, epoch: usize, batch: Option<usize>) -> GammaTable {
        let values = self
            .users
            .iter()
            .map(|(u, post)| {
                let g = post
                    .iter()
                    .enumerate()
                    .map(|(k, p)| match mode {
                        GammaMode::PosteriorMean => p.mean(),
                        GammaMode::Sampled => p.sample(&mut keyed_rng(seed, &gamma_key(u, k, epoch, batch))),
                    })
                    .collect();
                (u.clone(), g)
            })
            .collect();
        GammaTable { epoch, values }
    }

    /// CSV with columns `user_id,task,alpha,beta,c`.
    pub fn write_csv<W: Write>(&self, writer: W, task_names: &[String]) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user_id", "task", "alpha", "beta", "c"])?;
        for (u, post) in &self.users {
            for (name, p) in task_names.iter().zip(post) {
                w.write_record([
                    u.clone(),
                    name.clone(),
                    p.alpha().to_string(),
                    p.beta().to_string(),
                    p.count().to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, task_names: &[String]) -> Result<Self, StageError> {
        let bad = |m: String| StageError::InvalidState(m);
        let mut store = PosteriorStore::new(task_names.len());
        let mut r = csv::Reader::from_reader(reader);
        for row in r.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            if row.len() != 5 {
                return Err(bad(format!("posterior row has {} fields", row.len())));
            }
            let task = task_names
                .iter()
                .position(|t| t == &row[1])
                .ok_or_else(|| bad(format!("unknown task `{}`", &row[1])))?;
            let num = |i: usize| row[i].parse::<f64>().map_err(|e| bad(e.to_string()));
            let count = row[4].parse::<u64>().map_err(|e| bad(e.to_string()))?;
            let p = BetaPosterior::from_parts(num(2)?, num(3)?, count)?;
            store
                .users
                .entry(row[0].to_string())
                .or_insert_with(|| vec![BetaPosterior::init(); task_names.len()])[task] = p;
        }
        Ok(store)
    }
}

/// Per-user `γ` vectors of one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GammaTable {
    pub epoch: usize,
    pub values: BTreeMap<String, Vec<f64>>,
}

impl GammaTable {
    pub fn get(&self, user: &str) -> Option<&[f64]> {
        self.values.get(user).map(Vec::as_slice)
    }

    /// CSV with columns `user_id,task,gamma,epoch`.
    pub fn write_csv<W: Write>(&self, writer: W, task_names: &[String]) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["user_id", "task", "gamma", "epoch"])?;
        for (u, g) in &self.values {
            for (name, v) in task_names.iter().zip(g) {
                w.write_record([u.clone(), name.clone(), v.to_string(), self.epoch.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

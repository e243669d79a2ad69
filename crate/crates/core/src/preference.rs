//! User preference network.
//!
//! From the user feature matrix `U` (one embedding row per user slot) the
//! network computes a self-attended matrix `U'`, reweights it per task with
//! a softmax attention map, and reads out one probability per task through
//! a single linear head. It never sees item features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::ops::{matmul, matmul_nt, matmul_tn, sigmoid, softmax_backward, softmax_in_place};
use crate::nn::{Embedding, Init, Linear, ParamId, ParamStore};

/// Axis along which the task attention map is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Softmax over the `d1` feature rows, separately for each column.
    #[default]
    Feature,
    /// Softmax over the `d2` embedding columns, separately for each row.
    Embedding,
}

impl fmt::Display for AttentionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionAxis::Feature => "feature",
            AttentionAxis::Embedding => "embedding",
        })
    }
}

impl FromStr for AttentionAxis {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "feature" => Ok(AttentionAxis::Feature),
            "embedding" => Ok(AttentionAxis::Embedding),
            other => Err(ModelError::Config(format!("unknown attention axis `{other}`"))),
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), ModelError> {
    if got != want {
        return Err(ModelError::Shape(format!("{what} has {got} entries, expected {want}")));
    }
    Ok(())
}

/// Intermediate values of the self-attention unit.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row-stochastic `d1 x d1` attention matrix.
    pub weights: Vec<f64>,
    /// `U'`, `d1 x d2`.
    pub output: Vec<f64>,
}

/// `U' = softmax_rows((W_Q U)(W_K U)^T / sqrt(d1)) (W_V U)` for row-major
/// `U` of shape `d1 x d2` and square `d1 x d1` weights.
pub fn self_attention(
    u: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    d1: usize,
    d2: usize,
) -> Result<SelfAttention, ModelError> {
    check_len("U", u.len(), d1 * d2)?;
    for (name, w) in [("W_Q", wq), ("W_K", wk), ("W_V", wv)] {
        check_len(name, w.len(), d1 * d1)?;
    }
    let q = matmul(wq, u, d1, d1, d2);
    let k = matmul(wk, u, d1, d1, d2);
    let v = matmul(wv, u, d1, d1, d2);
    let scale = 1.0 / (d1 as f64).sqrt();
    let mut weights = matmul_nt(&q, &k, d1, d2, d1);
    for row in weights.chunks_mut(d1) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        softmax_in_place(row);
    }
    let output = matmul(&weights, &v, d1, d1, d2);
    Ok(SelfAttention {
        q,
        k,
        v,
        weights,
        output,
    })
}

fn softmax_axis(m: &mut [f64], d1: usize, d2: usize, axis: AttentionAxis) {
    match axis {
        AttentionAxis::Embedding => m.chunks_mut(d2).for_each(softmax_in_place),
        AttentionAxis::Feature => {
            let mut col = vec![0.0; d1];
            for j in 0..d2 {
                for i in 0..d1 {
                    col[i] = m[i * d2 + j];
                }
                softmax_in_place(&mut col);
                for i in 0..d1 {
                    m[i * d2 + j] = col[i];
                }
            }
        }
    }
}

fn softmax_axis_backward(a: &[f64], da: &[f64], d1: usize, d2: usize, axis: AttentionAxis) -> Vec<f64> {
    let mut dz = vec![0.0; a.len()];
    match axis {
        AttentionAxis::Embedding => {
            for ((ar, dar), dzr) in a.chunks(d2).zip(da.chunks(d2)).zip(dz.chunks_mut(d2)) {
                softmax_backward(ar, dar, dzr);
            }
        }
        AttentionAxis::Feature => {
            let mut ac = vec![0.0; d1];
            let mut dac = vec![0.0; d1];
            let mut dzc = vec![0.0; d1];
            for j in 0..d2 {
                for i in 0..d1 {
                    ac[i] = a[i * d2 + j];
                    dac[i] = da[i * d2 + j];
                }
                softmax_backward(&ac, &dac, &mut dzc);
                for i in 0..d1 {
                    dz[i * d2 + j] = dzc[i];
                }
            }
        }
    }
    dz
}

/// Returns `(A, s)` with `A = softmax_axis(U' W)` and `s = U' ⊙ A`.
pub fn task_attention(
    u_prime: &[f64],
    w: &[f64],
    d1: usize,
    d2: usize,
    axis: AttentionAxis,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    check_len("U'", u_prime.len(), d1 * d2)?;
    check_len("task attention weight", w.len(), d2 * d2)?;
    let mut a = matmul(u_prime, w, d1, d2, d2);
    softmax_axis(&mut a, d1, d2, axis);
    let s = u_prime.iter().zip(&a).map(|(x, y)| x * y).collect();
    Ok((a, s))
}

/// `sigmoid(w . flatten(s) + b)` with `s` flattened row-major.
pub fn preference_predict(s: &[f64], head_w: &[f64], head_b: f64) -> Result<f64, ModelError> {
    check_len("head weight", head_w.len(), s.len())?;
    let z: f64 = s.iter().zip(head_w).map(|(a, b)| a * b).sum::<f64>() + head_b;
    Ok(sigmoid(z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceLoss {
    pub value: f64,
    /// Set when every record was masked out, so the loss carries no signal.
    pub all_masked: bool,
}

/// Sum of squared errors over records whose `keep` flag is set.
pub fn preference_loss(pred: &[f64], target: &[f64], keep: &[bool]) -> Result<PreferenceLoss, ModelError> {
    check_len("pseudo-labels", target.len(), pred.len())?;
    check_len("history mask", keep.len(), pred.len())?;
    let mut value = 0.0;
    let mut any = false;
    for ((&y, &l), &m) in pred.iter().zip(target).zip(keep) {
        if m {
            value += (l - y) * (l - y);
            any = true;
        }
    }
    if !any && !pred.is_empty() {
        log::warn!("every record lacks history; preference loss is zero");
    }
    Ok(PreferenceLoss {
        value,
        all_masked: !any,
    })
}

/// Per-record activations needed for the backward pass.
#[derive(Debug, Clone)]
pub struct PreferenceCache {
    user: Vec<u32>,
    u: Vec<f64>,
    attn: SelfAttention,
    /// Per task: attention map `A`.
    maps: Vec<Vec<f64>>,
    /// Per task: `s^k`, `d1 x d2` row-major.
    pub embeddings: Vec<Vec<f64>>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreferenceNet {
    tables: Vec<Embedding>,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    task_w: Vec<ParamId>,
    heads: Vec<Linear>,
    axis: AttentionAxis,
    d1: usize,
    d2: usize,
}

impl PreferenceNet {
    /// One table per user slot with vocabularies `user_vocab` and width `d2`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        user_vocab: &[usize],
        d2: usize,
        num_tasks: usize,
        axis: AttentionAxis,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let d1 = user_vocab.len();
        if d1 == 0 || d2 == 0 || num_tasks == 0 {
            return Err(ModelError::Config(
                "preference net needs user slots, a positive width and tasks".into(),
            ));
        }
        let tables = user_vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| Embedding::new(store, &format!("{name}.user{i}"), v, d2, rng))
            .collect();
        let wq = store.add(format!("{name}.wq"), &[d1, d1], Init::FanIn(d1), rng);
        let wk = store.add(format!("{name}.wk"), &[d1, d1], Init::FanIn(d1), rng);
        let wv = store.add(format!("{name}.wv"), &[d1, d1], Init::FanIn(d1), rng);
        let task_w = (0..num_tasks)
            .map(|k| store.add(format!("{name}.task{k}.w"), &[d2, d2], Init::FanIn(d2), rng))
            .collect();
        let heads = (0..num_tasks)
            .map(|k| Linear::new(store, &format!("{name}.task{k}.head"), d1 * d2, 1, true, rng))
            .collect();
        Ok(PreferenceNet {
            tables,
            wq,
            wk,
            wv,
            task_w,
            heads,
            axis,
            d1,
            d2,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d1, self.d2)
    }

    pub fn axis(&self) -> AttentionAxis {
        self.axis
    }

    pub fn user_matrix(&self, p: &[f64], user: &[u32]) -> Result<Vec<f64>, ModelError> {
        check_len("user features", user.len(), self.d1)?;
        let mut u = Vec::with_capacity(self.d1 * self.d2);
        for (slot, (t, &idx)) in self.tables.iter().zip(user).enumerate() {
            if idx as usize >= t.vocab {
                return Err(ModelError::OutOfVocab {
                    slot,
                    index: idx,
                    vocab: t.vocab,
                });
            }
            u.extend_from_slice(t.row(p, idx as usize));
        }
        Ok(u)
    }

    pub fn forward(&self, p: &[f64], user: &[u32]) -> Result<PreferenceCache, ModelError> {
        let (d1, d2) = (self.d1, self.d2);
        let u = self.user_matrix(p, user)?;
        let attn = self_attention(&u, self.wq.of(p), self.wk.of(p), self.wv.of(p), d1, d2)?;
        let mut maps = Vec::with_capacity(self.num_tasks());
        let mut embeddings = Vec::with_capacity(self.num_tasks());
        let mut predictions = Vec::with_capacity(self.num_tasks());
        for (w, head) in self.task_w.iter().zip(&self.heads) {
            let (a, s) = task_attention(&attn.output, w.of(p), d1, d2, self.axis)?;
            predictions.push(sigmoid(head.forward(p, &s)[0]));
            maps.push(a);
            embeddings.push(s);
        }
        Ok(PreferenceCache {
            user: user.to_vec(),
            u,
            attn,
            maps,
            embeddings,
            predictions,
        })
    }

    pub fn predict(&self, p: &[f64], user: &[u32]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(p, user)?.predictions)
    }

    /// Accumulates parameter gradients given `dL/dỹ^k` for every task.
    pub fn backward(&self, p: &[f64], cache: &PreferenceCache, d_pred: &[f64], g: &mut [f64]) {
        let (d1, d2) = (self.d1, self.d2);
        let u_prime = &cache.attn.output;
        let mut d_uprime = vec![0.0; d1 * d2];
        for k in 0..self.num_tasks() {
            if d_pred[k] == 0.0 {
                continue;
            }
            let y = cache.predictions[k];
            let dz = d_pred[k] * y * (1.0 - y);
            let s = &cache.embeddings[k];
            let a = &cache.maps[k];
            let mut ds = vec![0.0; d1 * d2];
            self.heads[k].backward(p, s, &[dz], g, Some(&mut ds));
            let mut da = vec![0.0; d1 * d2];
            for i in 0..d1 * d2 {
                d_uprime[i] += ds[i] * a[i];
                da[i] = ds[i] * u_prime[i];
            }
            let dm = softmax_axis_backward(a, &da, d1, d2, self.axis);
            let w = self.task_w[k];
            for (gw, d) in w.of_mut(g).iter_mut().zip(matmul_tn(u_prime, &dm, d1, d2, d2)) {
                *gw += d;
            }
            for (du, d) in d_uprime.iter_mut().zip(matmul_nt(&dm, w.of(p), d1, d2, d2)) {
                *du += d;
            }
        }

        let at = &cache.attn;
        let dp = matmul_nt(&d_uprime, &at.v, d1, d2, d1);
        let dv = matmul_tn(&at.weights, &d_uprime, d1, d1, d2);
        let mut dscore = vec![0.0; d1 * d1];
        for ((pr, dpr), dsr) in at.weights.chunks(d1).zip(dp.chunks(d1)).zip(dscore.chunks_mut(d1)) {
            softmax_backward(pr, dpr, dsr);
        }
        let scale = 1.0 / (d1 as f64).sqrt();
        dscore.iter_mut().for_each(|v| *v *= scale);
        let dq = matmul(&dscore, &at.k, d1, d1, d2);
        let dk = matmul_tn(&dscore, &at.q, d1, d1, d2);

        let mut du = vec![0.0; d1 * d2];
        for (w, d) in [(self.wq, &dq), (self.wk, &dk), (self.wv, &dv)] {
            for (gw, x) in w.of_mut(g).iter_mut().zip(matmul_nt(d, &cache.u, d1, d2, d1)) {
                *gw += x;
            }
            for (a, b) in du.iter_mut().zip(matmul_tn(w.of(p), d, d1, d1, d2)) {
                *a += b;
            }
        }
        for (slot, t) in self.tables.iter().enumerate() {
            t.accumulate(g, cache.user[slot] as usize, &du[slot * d2..(slot + 1) * d2]);
        }
    }
}

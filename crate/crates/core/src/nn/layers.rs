use rand::Rng;

use super::params::{Init, ParamId, ParamStore};

/// Dense layer `y = W x (+ b)` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), &[out_dim, in_dim], Init::FanIn(in_dim), rng);
        let b = bias.then(|| store.add(format!("{name}.b"), &[out_dim], Init::Zeros, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = self.w.of(p);
        let mut y: Vec<f64> = match self.b {
            Some(b) => b.of(p).to_vec(),
            None => vec![0.0; self.out_dim],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    /// Accumulates parameter gradients into `g` and, if requested, the input
    /// gradient into `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        {
            let gw = self.w.of_mut(g);
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (gwi, &xi) in gw[o * self.in_dim..(o + 1) * self.in_dim].iter_mut().zip(x) {
                    *gwi += d * xi;
                }
            }
        }
        if let Some(b) = self.b {
            for (gb, &d) in b.of_mut(g).iter_mut().zip(dy) {
                *gb += d;
            }
        }
        if let Some(dx) = dx {
            let w = self.w.of(p);
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (dxi, &wi) in dx.iter_mut().zip(&w[o * self.in_dim..(o + 1) * self.in_dim]) {
                    *dxi += d * wi;
                }
            }
        }
    }
}

/// Feed-forward stack with ReLU between layers (and optionally after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    relu_last: bool,
}

/// Activations kept for the backward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("mlp cache holds the input at least")
    }
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], relu_last: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers, relu_last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(p, acts.last().unwrap());
            if self.has_relu(i) {
                for v in y.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            acts.push(y);
        }
        MlpCache { acts }
    }

    /// Returns the gradient with respect to the input.
    pub fn backward(&self, p: &[f64], cache: &MlpCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut delta = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.has_relu(i) {
                for (d, &a) in delta.iter_mut().zip(&cache.acts[i + 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let mut dx = vec![0.0; layer.in_dim];
            layer.backward(p, &cache.acts[i], &delta, g, Some(&mut dx));
            delta = dx;
        }
        delta
    }
}

/// Lookup table `vocab x dim`.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(name, &[vocab, dim], Init::FanIn(dim), rng);
        Embedding { table, vocab, dim }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    /// Caller guarantees `index < vocab`.
    pub fn row<'a>(&self, p: &'a [f64], index: usize) -> &'a [f64] {
        &self.table.of(p)[index * self.dim..(index + 1) * self.dim]
    }

    pub fn accumulate(&self, g: &mut [f64], index: usize, d: &[f64]) {
        let rows = self.table.of_mut(g);
        for (gv, &dv) in rows[index * self.dim..(index + 1) * self.dim].iter_mut().zip(d) {
            *gv += dv;
        }
    }
}

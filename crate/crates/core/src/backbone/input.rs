use rand::Rng;

use crate::data::InteractionRecord;
use crate::error::ModelError;
use crate::nn::{Embedding, ParamStore};

/// One lookup table per feature slot: user slots of width `user_dim`, item
/// slots of width `item_dim`.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    user: Vec<Embedding>,
    item: Vec<Embedding>,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        user_vocab: &[usize],
        user_dim: usize,
        item_vocab: &[usize],
        item_dim: usize,
        rng: &mut R,
    ) -> Self {
        let user = user_vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| Embedding::new(store, &format!("{name}.user{i}"), v, user_dim, rng))
            .collect();
        let item = item_vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| Embedding::new(store, &format!("{name}.item{i}"), v, item_dim, rng))
            .collect();
        EmbeddingTables { user, item }
    }

    pub fn user_slots(&self) -> &[Embedding] {
        &self.user
    }

    pub fn item_slots(&self) -> &[Embedding] {
        &self.item
    }

    /// `d1 * d2 + d3 * d4`.
    pub fn input_dim(&self) -> usize {
        self.user.iter().chain(&self.item).map(|e| e.dim).sum()
    }

    fn check(&self, user: &[u32], item: &[u32]) -> Result<(), ModelError> {
        if user.len() != self.user.len() || item.len() != self.item.len() {
            return Err(ModelError::Shape(format!(
                "expected {} user and {} item features, got {} and {}",
                self.user.len(),
                self.item.len(),
                user.len(),
                item.len()
            )));
        }
        let slots = self.user.iter().zip(user).chain(self.item.iter().zip(item));
        for (slot, (table, &idx)) in slots.enumerate() {
            if idx as usize >= table.vocab {
                return Err(ModelError::OutOfVocab {
                    slot,
                    index: idx,
                    vocab: table.vocab,
                });
            }
        }
        Ok(())
    }

    /// User-slot embeddings followed by item-slot embeddings, each slot's
    /// row copied in slot order.
    pub fn embed(&self, p: &[f64], user: &[u32], item: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check(user, item)?;
        let mut x = Vec::with_capacity(self.input_dim());
        for (table, &idx) in self.user.iter().zip(user).chain(self.item.iter().zip(item)) {
            x.extend_from_slice(table.row(p, idx as usize));
        }
        Ok(x)
    }

    /// Scatters `dx` (gradient of the concatenated input) into the table rows.
    pub fn backward(&self, g: &mut [f64], user: &[u32], item: &[u32], dx: &[f64]) {
        let mut off = 0;
        for (table, &idx) in self.user.iter().zip(user).chain(self.item.iter().zip(item)) {
            table.accumulate(g, idx as usize, &dx[off..off + table.dim]);
            off += table.dim;
        }
    }
}

/// Flat input vector for one record.
pub fn embed_input(record: &InteractionRecord, tables: &EmbeddingTables, p: &[f64]) -> Result<Vec<f64>, ModelError> {
    tables.embed(p, &record.user_features, &record.item_features)
}

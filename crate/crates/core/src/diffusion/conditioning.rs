//! Class and metadata conditioning.
//!
//! Every categorical attribute owns a learnable embedding table. The class
//! embedding and the `k` metadata embeddings are concatenated into one
//! conditioning vector whose width must equal the timestep embedding width,
//! so the two can be summed before they reach the residual blocks.

use medi_nn::{normal, ParamId, ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Standard deviation of the Gaussian used to initialise embedding rows.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Embedding widths and vocabulary sizes of a conditioned denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub d_class: usize,
    pub d_e: usize,
    pub d_t: usize,
    pub class_cardinality: usize,
    pub attribute_cardinalities: Vec<usize>,
}

impl ConditioningSpec {
    /// Fails unless `d_class + k * d_e == d_t`.
    pub fn new(
        d_class: usize,
        d_e: usize,
        d_t: usize,
        class_cardinality: usize,
        attribute_cardinalities: Vec<usize>,
    ) -> Result<Self> {
        let k = attribute_cardinalities.len();
        if d_class + k * d_e != d_t {
            return Err(Error::Conditioning(format!(
                "d_class ({d_class}) + k ({k}) * d_e ({d_e}) = {} but the timestep embedding width d_t is {d_t}",
                d_class + k * d_e
            )));
        }
        if d_class == 0 || d_t == 0 {
            return Err(Error::Conditioning("embedding widths must be positive".into()));
        }
        if k > 0 && d_e == 0 {
            return Err(Error::Conditioning("d_e must be positive when metadata attributes are present".into()));
        }
        if class_cardinality == 0 || attribute_cardinalities.contains(&0) {
            return Err(Error::Conditioning("every vocabulary needs at least one category".into()));
        }
        Ok(Self { d_class, d_e, d_t, class_cardinality, attribute_cardinalities })
    }

    /// Class-only baseline: the class embedding spans the full timestep width.
    pub fn class_only(d_t: usize, class_cardinality: usize) -> Result<Self> {
        Self::new(d_t, 0, d_t, class_cardinality, Vec::new())
    }

    /// Number of metadata attributes `k`.
    pub fn k(&self) -> usize {
        self.attribute_cardinalities.len()
    }

    pub fn is_class_only(&self) -> bool {
        self.k() == 0
    }

    pub fn validate(&self, cond: &Conditioning) -> Result<()> {
        if cond.meta_ids.len() != self.k() {
            return Err(Error::Conditioning(format!(
                "expected {} metadata ids, got {}",
                self.k(),
                cond.meta_ids.len()
            )));
        }
        if cond.class_id >= self.class_cardinality {
            return Err(Error::Conditioning(format!(
                "class id {} outside vocabulary of size {}",
                cond.class_id, self.class_cardinality
            )));
        }
        for (i, (&id, &card)) in cond.meta_ids.iter().zip(&self.attribute_cardinalities).enumerate() {
            if id >= card {
                return Err(Error::Conditioning(format!(
                    "metadata attribute {i}: id {id} outside vocabulary of size {card}"
                )));
            }
        }
        Ok(())
    }
}

/// Vocabulary ids selecting one class and one value per metadata attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Conditioning {
    pub class_id: usize,
    pub meta_ids: Vec<usize>,
}

impl Conditioning {
    pub fn new(class_id: usize, meta_ids: Vec<usize>) -> Self {
        Self { class_id, meta_ids }
    }

    pub fn class_only(class_id: usize) -> Self {
        Self { class_id, meta_ids: Vec::new() }
    }
}

/// Handles to the class table and the per-attribute tables inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub class: ParamId,
    pub attributes: Vec<ParamId>,
}

impl EmbeddingTables {
    pub fn register<T: Real, R: Rng + ?Sized>(spec: &ConditioningSpec, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let class = store.add_row_sparse(
            "cond.class_embedding",
            normal(vec![spec.class_cardinality, spec.d_class], EMBEDDING_INIT_STD, rng),
        );
        let attributes = spec
            .attribute_cardinalities
            .iter()
            .enumerate()
            .map(|(i, &card)| {
                store.add_row_sparse(format!("cond.meta_embedding.{i}"), normal(vec![card, spec.d_e], EMBEDDING_INIT_STD, rng))
            })
            .collect();
        Self { class, attributes }
    }

    /// `concat(z_class, z_meta_1, ..., z_meta_k)` for a single conditioning tuple.
    pub fn build_conditioning<T: Real>(
        &self,
        spec: &ConditioningSpec,
        store: &ParamStore<T>,
        cond: &Conditioning,
    ) -> Result<Vec<T>> {
        spec.validate(cond)?;
        let mut z = Vec::with_capacity(spec.d_t);
        z.extend_from_slice(row(store, self.class, cond.class_id));
        for (table, &id) in self.attributes.iter().zip(&cond.meta_ids) {
            z.extend_from_slice(row(store, *table, id));
        }
        Ok(z)
    }

    /// Batched conditioning vectors `[B, d_t]` recorded on a tape.
    pub fn conditioning_var<T: Real>(&self, spec: &ConditioningSpec, tape: &mut Tape<'_, T>, conds: &[Conditioning]) -> Result<Var> {
        for c in conds {
            spec.validate(c)?;
        }
        let class_ids: Vec<usize> = conds.iter().map(|c| c.class_id).collect();
        let table = tape.param(self.class);
        let mut parts = vec![tape.embedding(table, &class_ids)];
        for (i, id) in self.attributes.iter().enumerate() {
            let ids: Vec<usize> = conds.iter().map(|c| c.meta_ids[i]).collect();
            let table = tape.param(*id);
            parts.push(tape.embedding(table, &ids));
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) })
    }
}

fn row<T: Real>(store: &ParamStore<T>, table: ParamId, id: usize) -> &[T] {
    let t = store.value(table);
    let w = t.dim(1);
    &t.data()[id * w..(id + 1) * w]
}

/// `z_final = z_t + z_cond`.
pub fn combine_with_timestep<T: Real>(z_t: &[T], z_cond: &[T]) -> Result<Vec<T>> {
    if z_t.len() != z_cond.len() {
        return Err(Error::WidthMismatch { cond: z_cond.len(), timestep: z_t.len() });
    }
    Ok(z_t.iter().zip(z_cond).map(|(a, b)| *a + *b).collect())
}

//! Saved models: parameters plus everything needed to rebuild and condition them.

use std::path::Path;

use medi_nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conditioning::{Conditioning, ConditioningSpec};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::unet::{DenoiserModel, UnetConfig};
use crate::error::io_err;
use crate::registry::{Attribute, MetadataSchema, PatchRecord, Vocabulary};
use crate::{Error, Result};

/// Translates category names to the id tuples a model is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningMap {
    pub class: Vocabulary,
    /// Conditioned attributes in embedding order; empty for class-only models.
    pub attributes: Vec<(Attribute, Vocabulary)>,
}

impl ConditioningMap {
    pub fn from_schema(schema: &MetadataSchema, attrs: &[Attribute]) -> Result<Self> {
        let mut attributes = Vec::with_capacity(attrs.len());
        for a in attrs {
            if *a == Attribute::Class || !schema.attributes.contains_key(a) {
                return Err(Error::UnknownAttribute(a.to_string()));
            }
            attributes.push((*a, schema.vocab(*a).clone()));
        }
        Ok(Self { class: schema.class.clone(), attributes })
    }

    pub fn attribute_list(&self) -> Vec<Attribute> {
        self.attributes.iter().map(|(a, _)| *a).collect()
    }

    /// Spec with the given widths and this map's cardinalities.
    pub fn spec(&self, d_class: usize, d_e: usize, d_t: usize) -> Result<ConditioningSpec> {
        ConditioningSpec::new(
            d_class,
            d_e,
            d_t,
            self.class.len(),
            self.attributes.iter().map(|(_, v)| v.len()).collect(),
        )
    }

    /// Ids for a class name and one value per conditioned attribute.
    pub fn encode(&self, class: &str, meta: &[&str]) -> Result<Conditioning> {
        if meta.len() != self.attributes.len() {
            return Err(Error::Conditioning(format!(
                "expected {} metadata values, got {}",
                self.attributes.len(),
                meta.len()
            )));
        }
        let class_id =
            self.class.id_of(class).ok_or_else(|| Error::Conditioning(format!("class {class:?} not in vocabulary")))?;
        let meta_ids = self
            .attributes
            .iter()
            .zip(meta)
            .map(|((a, v), value)| {
                v.id_of(value).ok_or_else(|| Error::Conditioning(format!("{a} value {value:?} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(Conditioning::new(class_id, meta_ids))
    }

    pub fn encode_record(&self, r: &PatchRecord) -> Result<Conditioning> {
        let values: Vec<_> = self.attributes.iter().map(|(a, _)| r.value(*a)).collect();
        let refs: Vec<&str> = values.iter().map(|v| v.as_ref()).collect();
        self.encode(&r.class_label, &refs)
    }

    /// Class name followed by attribute values.
    pub fn decode(&self, c: &Conditioning) -> Result<(String, Vec<String>)> {
        let class = self
            .class
            .value_of(c.class_id)
            .ok_or_else(|| Error::Conditioning(format!("class id {} out of range", c.class_id)))?;
        if c.meta_ids.len() != self.attributes.len() {
            return Err(Error::Conditioning("metadata arity mismatch".into()));
        }
        let meta = self
            .attributes
            .iter()
            .zip(&c.meta_ids)
            .map(|((a, v), id)| {
                v.value_of(*id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Conditioning(format!("{a} id {id} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok((class.to_string(), meta))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub unet: UnetConfig,
    pub conditioning: ConditioningSpec,
    pub schedule: ScheduleConfig,
    pub map: ConditioningMap,
    pub fingerprint: String,
    pub steps: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(
        model: &DenoiserModel<f32>,
        schedule: &ScheduleConfig,
        map: &ConditioningMap,
        schema: &MetadataSchema,
        steps: u64,
    ) -> Self {
        Self {
            unet: model.config.clone(),
            conditioning: model.conditioning.clone(),
            schedule: *schedule,
            map: map.clone(),
            fingerprint: schema.fingerprint(&map.attribute_list()),
            steps,
            params: model.params().clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Fails unless `schema` has the vocabularies this model was trained with.
    pub fn check_schema(&self, schema: &MetadataSchema) -> Result<()> {
        let attrs = self.map.attribute_list();
        if attrs.iter().any(|a| !schema.attributes.contains_key(a)) {
            return Err(Error::FingerprintMismatch { expected: self.fingerprint.clone(), found: "missing attributes".into() });
        }
        let found = schema.fingerprint(&attrs);
        if found != self.fingerprint {
            return Err(Error::FingerprintMismatch { expected: self.fingerprint.clone(), found });
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(&self.schedule)
    }

    pub fn model(&self) -> Result<DenoiserModel<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::new(self.unet.clone(), self.conditioning.clone(), &mut rng)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

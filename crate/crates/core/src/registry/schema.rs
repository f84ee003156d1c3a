use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Sentinel for a missing optional attribute value. It is an ordinary
/// category and always takes the last id of its vocabulary.
pub const UNKNOWN: &str = "UNKNOWN";

/// Categorical attributes a record can be grouped or conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Class,
    Site,
    Race,
    Gender,
    /// Age in decades, derived on demand; the raw age is kept on the record.
    AgeBucket,
}

impl Attribute {
    pub const METADATA: [Attribute; 4] = [Attribute::Site, Attribute::Race, Attribute::Gender, Attribute::AgeBucket];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Class => "class",
            Attribute::Site => "site",
            Attribute::Race => "race",
            Attribute::Gender => "gender",
            Attribute::AgeBucket => "age_bucket",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "class" | "class_label" => Ok(Attribute::Class),
            "site" | "tss" => Ok(Attribute::Site),
            "race" => Ok(Attribute::Race),
            "gender" => Ok(Attribute::Gender),
            "age_bucket" | "age" => Ok(Attribute::AgeBucket),
            other => Err(Error::UnknownAttribute(other.to_string())),
        }
    }
}

/// Ordered category list; ids are positions.
///
/// Values sort lexicographically with [`UNKNOWN`] forced to the end, so ids
/// are stable for a given set of observed values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    values: Vec<String>,
}

impl Vocabulary {
    pub fn from_values<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = values.into_iter().map(|s| s.as_ref().to_string()).collect();
        let has_unknown = set.contains(UNKNOWN);
        let mut values: Vec<String> = set.into_iter().filter(|v| v != UNKNOWN).collect();
        if has_unknown {
            values.push(UNKNOWN.to_string());
        }
        Self { values }
    }

    pub fn id_of(&self, value: &str) -> Option<usize> {
        let known = self.values.len() - usize::from(self.has_unknown());
        if value == UNKNOWN {
            return self.has_unknown().then_some(self.values.len() - 1);
        }
        self.values[..known].binary_search_by(|v| v.as_str().cmp(value)).ok()
    }

    pub fn value_of(&self, id: usize) -> Option<&str> {
        self.values.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_unknown(&self) -> bool {
        self.values.last().is_some_and(|v| v == UNKNOWN)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.values.iter().map(String::as_str).enumerate()
    }
}

/// Vocabularies for the class label and every metadata attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub class: Vocabulary,
    pub attributes: BTreeMap<Attribute, Vocabulary>,
}

impl MetadataSchema {
    pub fn vocab(&self, attr: Attribute) -> &Vocabulary {
        match attr {
            Attribute::Class => &self.class,
            other => &self.attributes[&other],
        }
    }

    /// Number of metadata attributes (the class label excluded).
    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn cardinality(&self, attr: Attribute) -> usize {
        self.vocab(attr).len()
    }

    /// Content hash of the class vocabulary and the listed attribute vocabularies.
    pub fn fingerprint(&self, attrs: &[Attribute]) -> String {
        let mut h = Sha256::new();
        let mut feed = |attr: Attribute, vocab: &Vocabulary| {
            h.update(attr.name().as_bytes());
            h.update([0u8]);
            for v in vocab.values() {
                h.update(v.as_bytes());
                h.update([0u8]);
            }
            h.update([1u8]);
        };
        feed(Attribute::Class, &self.class);
        for a in attrs {
            feed(*a, self.vocab(*a));
        }
        hex::encode(&h.finalize()[..16])
    }
}

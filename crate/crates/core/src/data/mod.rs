//! Concept banks, datasets and image files.

pub mod bank;
pub mod folder;
pub mod images;
pub mod synthetic;

pub use bank::{antonym_id, cosine, prototype_id, BankSource, ConceptBank};
pub use folder::{attribute_columns, load_folder, write_folder};
pub use images::{read_image, read_image_exact, write_pnm, ImageGeometry};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An image with one boolean per concept.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `[H, W, C]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub attributes: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub concepts: Vec<String>,
    pub records: Vec<DatasetRecord>,
    /// Entries dropped while loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks the concept list against a bank, by name and order.
    pub fn check_bank(&self, bank: &ConceptBank) -> Result<()> {
        if self.concepts != bank.names() {
            return Err(Error::Config(format!(
                "dataset concepts {:?} differ from bank concepts {:?}",
                self.concepts,
                bank.names()
            )));
        }
        Ok(())
    }

    /// The first `n` records.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            concepts: self.concepts.clone(),
            records: self.records[..n.min(self.len())].to_vec(),
            skipped: 0,
        }
    }
}

/// Bank rows selected by the attributes: positive where true, antonym where false.
pub fn prototype_ids(attributes: &[bool]) -> Vec<usize> {
    attributes
        .iter()
        .enumerate()
        .map(|(j, &a)| prototype_id(j, a))
        .collect()
}

/// `[M, E_c]` prototype matrix of one record.
pub fn prototypes_for<T: Real>(record: &DatasetRecord, bank: &ConceptBank) -> Result<Tensor<T>> {
    if record.attributes.len() != bank.concept_count() {
        return Err(Error::dim(
            "prototypes_for",
            &[record.attributes.len()],
            &[bank.concept_count()],
        ));
    }
    let data = prototype_ids(&record.attributes)
        .into_iter()
        .flat_map(|id| bank.vector(id).iter().map(|&x| T::lit(x)))
        .collect();
    Tensor::new([bank.concept_count(), bank.dim()], data)
}

use std::collections::HashMap;
use std::path::Path;

use super::checkpoint;
use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor<f32>,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

/// Parameters of a store placed on a tape for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Place every parameter on `tape`: trainable ones as tracked leaves,
    /// frozen ones as constants.
    pub fn bind<E: Element>(&self, tape: &mut Tape<E>) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.param(e.value.cast::<E>())
                } else {
                    tape.constant(e.value.cast::<E>())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Same as [`ParamStore::bind`] but untracked (inference).
    pub fn bind_frozen<E: Element>(&self, tape: &mut Tape<E>) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.constant(e.value.cast::<E>()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Like [`ParamStore::bind`] with caller-supplied values, one per
    /// parameter in store order (e.g. `f64` copies for finite differences).
    pub fn bind_values<E: Element>(&self, tape: &mut Tape<E>, values: &[Tensor<E>]) -> Result<Bound> {
        if values.len() != self.entries.len() {
            return Err(Error::shape("bind_values", format!("{} values for {} parameters", values.len(), self.entries.len())));
        }
        let vars = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, v)| {
                if v.shape() != e.value.shape() {
                    return Err(Error::shape("bind_values", format!("{} has shape {:?}, got {:?}", e.name, e.value.shape(), v.shape())));
                }
                if e.trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, self.entries.iter().map(|e| (e.name.as_str(), &e.value)))
    }

    /// Overwrite values from a checkpoint. Every parameter of this store must
    /// be present with a matching shape; extra records are ignored.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::read(path)?;
        self.assign(path, records.into_iter())
    }

    pub(crate) fn assign(
        &mut self,
        path: &Path,
        records: impl Iterator<Item = (String, Tensor<f32>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in records {
            if let Some(&i) = self.by_name.get(&name) {
                if t.shape() != self.entries[i].value.shape() {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        detail: format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            self.entries[i].value.shape()
                        ),
                    });
                }
                self.entries[i].value = t;
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("missing parameter {}", self.entries[i].name),
            });
        }
        Ok(())
    }
}

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
    pub trainable: bool,
}

/// Named parameter storage. Names are unique; insertion order is stable and
/// defines the order of checksums and gradient slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamList", into = "ParamList")]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamList {
    params: Vec<Param>,
}

impl TryFrom<ParamList> for ParamSet {
    type Error = Error;

    fn try_from(list: ParamList) -> Result<Self> {
        let mut ps = ParamSet {
            params: list.params,
            index: HashMap::new(),
        };
        ps.reindex()?;
        Ok(ps)
    }
}

impl From<ParamSet> for ParamList {
    fn from(ps: ParamSet) -> Self {
        ParamList { params: ps.params }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name '{name}'"
            )));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    /// Gaussian(0, std) init.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor2D::from_vec(rows, cols, data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor2D::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor2D::filled(rows, cols, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor2D> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and value bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.index.insert(p.name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter name '{}'",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Gradient slots aligned with a [`ParamSet`]. A slot is `None` when the
/// parameter takes no part in the update.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor2D>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    /// Zero slots for every trainable parameter, none for frozen ones.
    pub fn for_trainable(params: &ParamSet) -> Self {
        Self {
            slots: params
                .params
                .iter()
                .map(|p| {
                    p.trainable
                        .then(|| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor2D) {
        self.slots[id.0] = Some(g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2D) {
        match &mut self.slots[id.0] {
            Some(acc) => acc
                .add_assign(g)
                .expect("gradient shape matches its parameter"),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Accumulates a 1×n gradient given as a slice.
    pub fn accumulate_vec(&mut self, id: ParamId, g: &[f64]) {
        self.accumulate(id, &Tensor2D::row_vector(g));
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor2D::is_finite)
    }

    /// Drops slots of parameters that are frozen in `params`.
    pub fn retain_trainable(&mut self, params: &ParamSet) {
        for (slot, p) in self.slots.iter_mut().zip(&params.params) {
            if !p.trainable {
                *slot = None;
            }
        }
    }
}

//! Named parameter storage shared by the detector, memory pool and ranking head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{mask_in_place, GradientMask, Tensor};

/// Parameter handle: the owning store's tag plus the index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) tag: u8,
    pub(crate) index: usize,
}

/// Named parameters of one model component. Components that are trained
/// together use distinct tags so one tape and one optimizer can serve them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tag: u8,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(tag: u8) -> Self {
        Self { tag, ..Self::default() }
    }

    pub fn tag(&self) -> u8 {
        self.tag
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.tag == self.tag && id.index < self.tensors.len()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId { tag: self.tag, index: id }
    }

    /// Registers a parameter drawn uniformly from `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::new(shape, data).expect("valid shape"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&index| ParamId { tag: self.tag, index })
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Compatibility(format!("unknown parameter '{name}'")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        let tag = self.tag;
        (0..self.tensors.len()).map(move |index| ParamId { tag, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Sets `requires_grad` on every parameter whose name satisfies `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if pred(name) {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Zeroes masked gradient entries. Masks naming a parameter this store
    /// does not own are ignored and reported as `false`.
    pub fn apply_mask(&mut self, mask: &GradientMask) -> Result<bool> {
        let Some(id) = self.id(&mask.param) else {
            return Ok(false);
        };
        let t = self.get_mut(id);
        if let Some(g) = t.grad_mut() {
            mask_in_place(g, mask)?;
        }
        Ok(true)
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| {
                let plain = Tensor::new(t.shape(), t.data().to_vec()).expect("shape");
                (n.to_string(), plain)
            })
            .collect()
    }

    /// Overwrites values from a snapshot; every name must exist with a matching shape.
    pub fn load_snapshot(&mut self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snap {
            let id = self.expect_id(name)?;
            let t = self.get_mut(id);
            if t.shape() != value.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            t.data_mut().copy_from_slice(value.data());
        }
        Ok(())
    }
}

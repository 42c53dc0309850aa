use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameters of a [`ParamSet`] recorded as leaves on one tape.
pub struct BoundParams<'p, 't> {
    set: &'p ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'_, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))
    }

    /// Vars in insertion order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a named tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    /// Appends every entry of `other` with `prefix.` prepended.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}.");
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(&head) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, trainable or frozen.
    pub fn bind<'p, 't>(&'p self, tape: &'t Tape, trainable: bool) -> Result<BoundParams<'p, 't>> {
        self.bind_where(tape, |_| trainable)
    }

    /// Records every tensor on `tape`; those whose name satisfies `trainable` receive gradients.
    pub fn bind_where<'p, 't>(
        &'p self,
        tape: &'t Tape,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<BoundParams<'p, 't>> {
        let vars = self
            .iter()
            .map(|(n, t)| {
                if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { set: self, vars })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(&mut w, self.iter())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = ParamSet::new();
        for (n, t) in read_checkpoint(&mut r)? {
            out.insert(n, t);
        }
        Ok(out)
    }

    /// Serialized checkpoint bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self.iter()).expect("writing to a Vec cannot fail");
        buf
    }
}

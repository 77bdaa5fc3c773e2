use std::collections::{BTreeMap, HashMap};

use super::{Array, Graph, Var};
use crate::error::{ensure, Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Option<Array> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.entries.get(name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Array)> + 'a {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Copies every `from*` entry to the same name with `from` replaced by `to`.
    pub fn copy_prefix(&mut self, source: &ParamSet, from: &str, to: &str) -> usize {
        let picked: Vec<(String, Array)> =
            source.with_prefix(from).map(|(k, v)| (format!("{to}{}", &k[from.len()..]), v.clone())).collect();
        let n = picked.len();
        self.entries.extend(picked);
        n
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect() }
    }

    pub fn merge(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Adds every tensor of `other` into the tensor of the same name.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in other.iter() {
            let dst = self.entries.get_mut(k).ok_or_else(|| Error::contract(format!("missing parameter `{k}`")))?;
            ensure!(dst.shape() == v.shape(), "shape mismatch for `{k}`: {:?} vs {:?}", dst.shape(), v.shape());
            dst.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn to_f32_precision(&self) -> ParamSet {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.to_f32_precision())).collect() }
    }

    /// Puts entries onto `g`. Names matching `trainable` become parameters, the rest constants.
    /// Only names matching `include` are bound.
    pub fn bind(&self, g: &mut Graph, include: impl Fn(&str) -> bool, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::new();
        for (k, v) in self.iter().filter(|(k, _)| include(k)) {
            let var = if trainable(k) { g.param(v.clone()) } else { g.constant(v.clone()) };
            vars.insert(k.to_string(), var);
        }
        Bound { vars }
    }

    pub fn bind_all(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.bind(g, |_| true, |_| trainable)
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

/// Parameter name to graph node map produced by [`ParamSet::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Gradients of every bound trainable node after a backward pass. Unreached ones are zero.
    pub fn grads(&self, g: &Graph) -> ParamSet {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, &v)| (k.clone(), g.grad(v).cloned().unwrap_or_else(|| Array::zeros(g.shape(v)))))
            .collect()
    }
}

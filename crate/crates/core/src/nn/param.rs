use std::collections::{BTreeMap, BTreeSet, HashMap};

use polyformer_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// What a parameter is for. Decides weight decay and freeze-ledger grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    RunningStat,
    Prototype,
    Gate,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: kind != ParamKind::RunningStat,
            kind,
        }
    }

    /// Records the parameter on `g` as a leaf that collects gradient iff it
    /// is trainable.
    pub fn leaf(&self, g: &mut Graph<T>) -> Var {
        g.param(&self.name, &self.value, self.trainable)
    }

    /// Same as [`leaf`](Self::leaf) but never collects gradient.
    pub fn frozen_leaf(&self, g: &mut Graph<T>) -> Var {
        g.param(&self.name, &self.value, false)
    }

    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// A set of dotted parameter names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamSet(BTreeSet<String>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.0.insert(name.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn union(&self, other: &ParamSet) -> ParamSet {
        ParamSet(self.0.union(&other.0).cloned().collect())
    }
}

impl FromIterator<String> for ParamSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}

impl<'a> FromIterator<&'a str> for ParamSet {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        ParamSet(iter.into_iter().map(str::to_owned).collect())
    }
}

/// Name → value copy of every parameter, used for freeze ledgers.
pub type Snapshot<T> = BTreeMap<String, Tensor<T>>;

/// Names whose values differ bitwise between two snapshots, plus names
/// present in only one of them.
pub fn changed_params<T: Real>(before: &Snapshot<T>, after: &Snapshot<T>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (name, a) in before {
        match after.get(name) {
            Some(b) if a.bitwise_eq(b) => {}
            _ => {
                out.insert(name.clone());
            }
        }
    }
    for name in after.keys() {
        if !before.contains_key(name) {
            out.insert(name.clone());
        }
    }
    out
}

/// Anything that owns named parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.name.clone()));
        out
    }

    fn snapshot(&self) -> Snapshot<T> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }

    fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }

    /// Marks exactly the parameters in `set` trainable. Running statistics
    /// are never trainable.
    fn set_trainable(&mut self, set: &ParamSet) {
        self.visit_mut(&mut |p| {
            p.trainable = p.kind != ParamKind::RunningStat && set.contains(&p.name);
        });
    }

    fn trainable_names(&self) -> ParamSet {
        let mut out = ParamSet::new();
        self.visit(&mut |p| {
            if p.trainable {
                out.insert(p.name.clone());
            }
        });
        out
    }

    /// Replaces every parameter value from `state`.
    ///
    /// The names and shapes must match exactly; otherwise nothing is changed
    /// and the error lists every missing, unexpected, and mis-shaped name.
    fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let incoming: HashMap<&str, &Tensor<T>> =
            state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problems = Vec::new();
        let mut own = BTreeSet::new();
        self.visit(&mut |p| {
            own.insert(p.name.clone());
            match incoming.get(p.name.as_str()) {
                None => problems.push(format!("missing {}", p.name)),
                Some(t) if t.shape() != p.value.shape() => problems.push(format!(
                    "shape of {}: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        });
        for (name, _) in state {
            if !own.contains(name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::StateMismatch(problems.join("; ")));
        }
        self.visit_mut(&mut |p| p.value = incoming[p.name.as_str()].clone());
        Ok(())
    }
}

/// Per-forward bookkeeping: whether BatchNorm layers in train or stats-only
/// mode should record new running statistics, and the recorded values.
///
/// Updates are applied after the optimizer step by [`ForwardCtx::apply`], so
/// a forward pass never mutates the model it reads.
#[derive(Debug)]
pub struct ForwardCtx<T> {
    pub record_stats: bool,
    updates: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ForwardCtx<T> {
    fn default() -> Self {
        Self::recording()
    }
}

impl<T: Real> ForwardCtx<T> {
    pub fn recording() -> Self {
        ForwardCtx {
            record_stats: true,
            updates: Vec::new(),
        }
    }

    pub fn discarding() -> Self {
        ForwardCtx {
            record_stats: false,
            updates: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: &str, value: Tensor<T>) {
        if self.record_stats {
            self.updates.push((name.to_owned(), value));
        }
    }

    pub fn pending(&self) -> usize {
        self.updates.len()
    }

    /// Writes recorded statistics into `module`. Later records for the same
    /// name win; names `module` does not own are ignored.
    pub fn apply(&self, module: &mut dyn Module<T>) {
        let updates: HashMap<&str, &Tensor<T>> =
            self.updates.iter().map(|(n, t)| (n.as_str(), t)).collect();
        module.visit_mut(&mut |p| {
            if let Some(v) = updates.get(p.name.as_str()) {
                p.value = (*v).clone();
            }
        });
    }
}

//! Layers, parameter bookkeeping and the forward context that binds
//! parameters onto a tape.

mod init;
mod layers;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

pub use init::{init, kaiming_std, Init};
pub use layers::{global_avg_pool, relu, BatchNorm2d, Conv2d, Linear};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Gradients, Tape, Tensor, Var};

/// Parameter group: the pre-trained teacher, the prompt-path additions, or
/// the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Theta,
    Phi,
    Psi,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
            Group::Psi => "psi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theta" => Some(Group::Theta),
            "phi" => Some(Group::Phi),
            "psi" => Some(Group::Psi),
            _ => None,
        }
    }
}

/// Learnable weights versus persistent non-learnable state (running stats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub kind: Kind,
    pub tensor: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn weight(name: String, group: Group, tensor: Tensor<T>) -> Self {
        Self {
            name,
            group,
            kind: Kind::Weight,
            tensor: tensor.with_requires_grad(true),
        }
    }

    pub fn buffer(name: String, group: Group, tensor: Tensor<T>) -> Self {
        Self {
            name,
            group,
            kind: Kind::Buffer,
            tensor: tensor.with_requires_grad(false),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    /// Number of learnable scalars (buffers excluded).
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.kind == Kind::Weight {
                n += p.numel()
            }
        });
        n
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |p| {
            if p.kind == Kind::Weight {
                p.tensor.set_requires_grad(on)
            }
        });
    }
}

impl<T: Element> Module<T> for Param<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.iter().for_each(|m| m.visit(f))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f))
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

/// Gradients keyed by fully-qualified parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.grads.insert(name, grad);
    }
}

/// One forward pass: the tape, the parameters bound onto it, and batch
/// statistics waiting to be folded into running averages.
pub struct Ctx<T> {
    pub tape: Tape<T>,
    /// Train mode: batch norms use batch statistics.
    pub train: bool,
    grad_enabled: bool,
    bound: BTreeMap<String, Var>,
    pending: BTreeMap<String, (T, Vec<T>)>,
}

impl<T: Element> Ctx<T> {
    pub fn new(train: bool) -> Self {
        Self {
            tape: Tape::new(),
            train,
            grad_enabled: true,
            bound: BTreeMap::new(),
            pending: BTreeMap::new(),
        }
    }

    /// Every parameter is bound as a constant.
    pub fn no_grad(train: bool) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(train)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Binds `p` onto the tape once; later calls return the same handle.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = if self.grad_enabled && p.tensor.requires_grad() {
            self.tape.leaf(&p.tensor)
        } else {
            self.tape.constant(p.tensor.clone().with_requires_grad(false))
        };
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub(crate) fn record_stats(&mut self, mean_name: &str, var_name: &str, momentum: T, stats: BatchStats<T>) {
        self.pending.insert(mean_name.into(), (momentum, stats.mean));
        self.pending.insert(var_name.into(), (momentum, stats.var_unbiased));
    }

    /// Backward from `loss`, returning gradients for every bound parameter
    /// that requires grad.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let grads: Gradients<T> = self.tape.backward(loss)?;
        let mut out = GradMap::default();
        for (name, &v) in &self.bound {
            if self.tape.requires_grad(v) {
                out.insert(name.clone(), grads.tensor(v));
            }
        }
        Ok(out)
    }

    /// Folds recorded batch statistics into the matching running buffers:
    /// `r ← (1 − m)·r + m·batch`.
    pub fn commit_running_stats(&self, module: &mut dyn ModuleMut<T>) {
        module.visit_params_mut(&mut |p| {
            if let Some((m, batch)) = self.pending.get(&p.name) {
                let keep = T::one() - *m;
                for (r, &b) in p.tensor.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + *m * b;
                }
            }
        });
    }
}

/// Object-safe view of [`Module::visit_mut`].
pub trait ModuleMut<T: Element> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

impl<T: Element, M: Module<T>> ModuleMut<T> for M {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.visit_mut(f)
    }
}

/// Installs gradients from `grads` into every trainable parameter of
/// `module`; trainable parameters absent from the map get zeros.
pub fn write_grads<T: Element>(module: &mut impl Module<T>, grads: &GradMap<T>) {
    module.visit_mut(&mut |p| {
        if p.kind == Kind::Weight && p.tensor.requires_grad() {
            let g = grads
                .get(&p.name)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| alloc::vec![T::zero(); p.numel()]);
            // lengths agree: the gradient was produced from this tensor
            let _ = p.tensor.set_grad(g);
        }
    });
}

/// Flat listing of every parameter tensor: name, group, kind and shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    pub entries: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub group: Group,
    pub kind: Kind,
    pub shape: Vec<usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Element>(&mut self, module: &impl Module<T>) -> &mut Self {
        module.visit(&mut |p| {
            self.entries.push(RegistryEntry {
                name: p.name.clone(),
                group: p.group,
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
            })
        });
        self
    }

    /// Names must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = alloc::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidConfig(alloc::format!("duplicate parameter name `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn weights(&self, group: Group) -> impl Iterator<Item = &RegistryEntry> {
        self.entries
            .iter()
            .filter(move |e| e.group == group && e.kind == Kind::Weight)
    }

    /// Learnable scalar count in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.weights(group).map(|e| e.shape.iter().product::<usize>()).sum()
    }

    pub fn total(&self) -> usize {
        [Group::Theta, Group::Phi, Group::Psi]
            .into_iter()
            .map(|g| self.count(g))
            .sum()
    }
}

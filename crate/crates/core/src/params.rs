//! Named parameter storage and the per-step forward context.
//!
//! Modules never own tensors. They hold [`ParamId`]s into a [`ParamStore`],
//! which keeps the structure independent of the element type: the same
//! detector can be evaluated in `f32` for training and in `f64` for gradient
//! checks by casting the store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Conv2dSpec, Graph, Real, Tensor, Var};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Operation weights `w`.
    Weight,
    /// Architecture logits `α`.
    Arch,
    /// Non-learnable state such as running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Number of scalars in a group.
    pub fn numel(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Uniform `±sqrt(6 / fan_in)` initialisation.
pub fn fan_in_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Forward<'s, T: Real = f32> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    weight_grad: bool,
    arch_grad: bool,
}

impl<'s, T: Real> Forward<'s, T> {
    /// `weight_grad` / `arch_grad` select which groups become differentiable leaves.
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, weight_grad: bool, arch_grad: bool) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            mode,
            weight_grad,
            arch_grad,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let grad = match p.group {
            ParamGroup::Weight => self.weight_grad,
            ParamGroup::Arch => self.arch_grad,
            ParamGroup::Buffer => false,
        };
        let v = self.graph.leaf(p.value.clone().with_requires_grad(grad));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    /// Runs the backward sweep and returns the gradient of every bound,
    /// differentiable parameter (zeros where the loss does not depend on it).
    pub fn backward(mut self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            if !self.graph.requires_grad(v) {
                continue;
            }
            let g = match self.graph.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); self.graph.value(v).numel()],
            };
            out.push((ParamId(i), g));
        }
        Ok(out)
    }
}

/// Convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let w = fan_in_uniform(rng, &[cout, cin_g, k, k], cin_g * k * k);
        Self {
            weight: store.add(format!("{name}.weight"), ParamGroup::Weight, w),
            spec,
        }
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        fw.graph.conv2d(x, w, self.spec)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

/// Batch norm with affine terms and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamGroup::Weight, Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), ParamGroup::Weight, Tensor::zeros(&[c])),
            running_mean: store.add(format!("{name}.running_mean"), ParamGroup::Buffer, Tensor::zeros(&[c])),
            running_var: store.add(format!("{name}.running_var"), ParamGroup::Buffer, Tensor::ones(&[c])),
        }
    }

    /// Train mode normalises by batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let (g, b) = (fw.param(self.gamma), fw.param(self.beta));
        match fw.mode {
            Mode::Train => {
                let (y, stats) = fw.graph.batch_norm_train(x, g, b, BN_EPS)?;
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - m;
                let rm = fw.store.value_mut(self.running_mean).data_mut();
                rm.iter_mut().zip(&stats.mean).for_each(|(r, &s)| *r = keep * *r + m * s);
                let rv = fw.store.value_mut(self.running_var).data_mut();
                rv.iter_mut().zip(&stats.var).for_each(|(r, &s)| *r = keep * *r + m * s);
                Ok(y)
            }
            Mode::Eval => {
                let mean = fw.store.value(self.running_mean).data().to_vec();
                let var = fw.store.value(self.running_var).data().to_vec();
                fw.graph.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }

    /// Learnable ids only.
    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, k: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), ParamGroup::Weight, fan_in_uniform(rng, &[d, k], d)),
            bias: store.add(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(&[k])),
        }
    }

    pub fn forward<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        fw.graph.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

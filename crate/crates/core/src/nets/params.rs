use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Sampler,
    Encoder,
    Decoder,
    Entropy,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Sampler, Group::Encoder, Group::Decoder, Group::Entropy, Group::Discriminator];

    /// Everything except the critic belongs to the generator side.
    pub fn is_generator(self) -> bool {
        self != Group::Discriminator
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Sampler => "sampler",
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Entropy => "entropy",
            Group::Discriminator => "discriminator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, grouped parameter tensors. Values are shared `Rc`s so graphs can
/// bind them without copying.
#[derive(Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Rc<Tensor>>,
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamSet")
            .field("tensors", &self.len())
            .field("scalars", &self.count(|_| true))
            .finish()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`, for layers feeding a rectifier.
    He,
    /// Uniform with bound `sqrt(3 / fan_in)`.
    Lecun,
    Scaled(f64),
    Zeros,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn add_init(&mut self, name: impl Into<String>, group: Group, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let fan_in = rows.max(1) as f64;
        let bound = match init {
            Init::He => (6.0 / fan_in).sqrt(),
            Init::Lecun => (3.0 / fan_in).sqrt(),
            Init::Scaled(s) => s * (3.0 / fan_in).sqrt(),
            Init::Zeros => 0.0,
        };
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.add(name, group, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_in(&self, pred: impl Fn(Group) -> bool) -> Vec<ParamId> {
        self.ids().filter(|&id| pred(self.groups[id.0])).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn count(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.ids().filter(|&id| pred(self.groups[id.0])).map(|id| self.values[id.0].len()).sum()
    }

    /// Binds every tensor into `g`; tensors whose group satisfies `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: impl Fn(Group) -> bool) -> Bound<'g> {
        let mut vars = Vec::with_capacity(self.values.len());
        let mut leaves = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            if trainable(self.groups[i]) {
                let var = g.leaf_rc(v.clone());
                leaves.push(ParamId(i));
                vars.push(var);
            } else {
                vars.push(g.constant_rc(v.clone()));
            }
        }
        Bound { vars, leaves }
    }

    /// First 8 bytes of SHA-256 over names, shapes and raw values of the
    /// selected groups.
    pub fn digest(&self, pred: impl Fn(Group) -> bool) -> [u8; 8] {
        let mut h = Sha256::new();
        for id in self.ids_in(pred) {
            let t = &self.values[id.0];
            h.update(self.names[id.0].as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let full = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&full[..8]);
        out
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
    leaves: Vec<ParamId>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// The parameters bound as leaves, in id order.
    pub fn leaves(&self) -> &[ParamId] {
        &self.leaves
    }

    pub fn leaf_vars(&self) -> Vec<Var<'g>> {
        self.leaves.iter().map(|id| self.vars[id.0]).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, group: Group, fan_in: usize, fan_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.add_init(format!("{name}.w"), group, fan_in, fan_out, init, rng);
        let b = ps.add_init(format!("{name}.b"), group, 1, fan_out, Init::Zeros, rng);
        Linear { w, b }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p.var(self.w)).add_row(p.var(self.b))
    }
}

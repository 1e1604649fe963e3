//! Parameter storage, layer builders, and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdreError, Result};
use crate::graph::{NodeId, Tape};
use crate::rng::hash_f64_slice;
use crate::tensor::Tensor;

/// Index of a parameter within a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Checkpoint parameter groups. `Extractor`, `Modulation`, and `DistEnc`
/// together form the encoder side of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Extractor,
    Modulation,
    DistEnc,
    DistDec,
    Transform,
    Embed,
    Backbone,
    Head,
}

pub const ALL_GROUPS: [ParamGroup; 8] = [
    ParamGroup::Extractor,
    ParamGroup::Modulation,
    ParamGroup::DistEnc,
    ParamGroup::DistDec,
    ParamGroup::Transform,
    ParamGroup::Embed,
    ParamGroup::Backbone,
    ParamGroup::Head,
];

/// Groups whose cost lands on the encoder side of the transmission.
pub const ENCODER_SIDE_GROUPS: [ParamGroup; 3] = [
    ParamGroup::Extractor,
    ParamGroup::Modulation,
    ParamGroup::DistEnc,
];

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Extractor => "extractor",
            Self::Modulation => "modulation",
            Self::DistEnc => "dist_enc",
            Self::DistDec => "dist_dec",
            Self::Transform => "transform",
            Self::Embed => "embed",
            Self::Backbone => "backbone",
            Self::Head => "head",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        ALL_GROUPS
            .iter()
            .copied()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| CdreError::UnknownGroup(s.to_string()))
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        ALL_GROUPS
            .get(tag as usize)
            .copied()
            .ok_or_else(|| CdreError::CheckpointMismatch(alloc::format!("bad group tag {tag}")))
    }

    pub fn tag(self) -> u8 {
        ALL_GROUPS.iter().position(|g| *g == self).unwrap() as u8
    }
}

struct ParamEntry {
    name: String,
    group: ParamGroup,
    value: Tensor,
    trainable: bool,
}

/// Named, grouped parameter tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        debug_assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Marks parameters trainable according to `keep(group)`.
    pub fn set_trainable(&mut self, keep: impl Fn(ParamGroup) -> bool) {
        for e in &mut self.entries {
            e.trainable = keep(e.group);
        }
    }

    /// Binds a parameter onto a tape as a differentiable (or frozen) leaf.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param_leaf(self.value(id).clone(), id, self.trainable(id))
    }

    pub fn count_scalars(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Groups present in this store, in tag order.
    pub fn present_groups(&self) -> Vec<ParamGroup> {
        ALL_GROUPS
            .iter()
            .copied()
            .filter(|g| self.entries.iter().any(|e| e.group == *g))
            .collect()
    }

    /// Order-sensitive content hash of one group's parameters.
    pub fn group_hash(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| e.group == group) {
            h ^= hash_f64_slice(e.value.data());
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Analytic cost of one layer at a fixed source resolution: exact scalar
/// parameter count and multiply-accumulate count.
#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub group: ParamGroup,
    pub params: usize,
    pub macs: u64,
}

/// Weight initialization for layer builders.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform,
    Zeros,
}

impl Init {
    pub fn sample(self, rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
        init_weights(rng, shape, fan_in, self)
    }
}

fn init_weights(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::KaimingUniform => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).unwrap()
        }
    }
}

/// 2-D convolution layer over `[C, H, W]` tensors.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            group,
            init_weights(rng, &[out_c, in_c, k, k], in_c * k * k, init),
        );
        let b = bias.then(|| {
            store.add(
                &alloc::format!("{name}.bias"),
                group,
                Tensor::zeros(&[out_c]),
            )
        });
        Self {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = store.bind(tape, self.w);
        let b = self.b.map(|b| store.bind(tape, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k + if self.b.is_some() { self.out_c } else { 0 }
    }

    /// Multiplies per application on an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        (self.out_c * self.in_c * self.k * self.k) as u64 * (oh * ow) as u64
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// Fully connected layer over `[N, I]` token matrices.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        in_f: usize,
        out_f: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            group,
            init_weights(rng, &[out_f, in_f], in_f, init),
        );
        let b = bias.then(|| {
            store.add(
                &alloc::format!("{name}.bias"),
                group,
                Tensor::zeros(&[out_f]),
            )
        });
        Self { w, b, in_f, out_f }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = store.bind(tape, self.w);
        let b = self.b.map(|b| store.bind(tape, b));
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_f * self.in_f + if self.b.is_some() { self.out_f } else { 0 }
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (self.out_f * self.in_f * tokens) as u64
    }
}

/// Adam with per-parameter-group learning rates. Moment buffers align
/// with the store's insertion order.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update. Parameters without a gradient entry (frozen or
    /// unused on this step) are left untouched, including their moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
        lr_of: impl Fn(ParamGroup) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, g) in grads {
            let lr = lr_of(store.group(id));
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Self {
        Self {
            m,
            v,
            t,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

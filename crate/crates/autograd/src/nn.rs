//! Parameter storage and the layer set used by the encoders and heads.

use ndarray::Ix1;

use crate::tape::{channel_stats, Arr, Gradients, Tape, Var};

/// Handle to a slot in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
struct Slot {
    name: String,
    value: Arr,
    trainable: bool,
    grad: Option<Arr>,
    adam_m: Option<Arr>,
    adam_v: Option<Arr>,
}

/// Named parameter arrays with their gradient and optimizer state.
///
/// Cloning a `ParamSet` yields an independent copy with identical values,
/// which is how momentum (EMA) shadows are created.
#[derive(Clone, Default)]
pub struct ParamSet {
    slots: Vec<Slot>,
}

/// Shape-driven initializer used by layer constructors.
pub type Init<'a> = &'a mut dyn FnMut(&[usize]) -> Arr;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> ParamId {
        self.slots.push(Slot {
            name: name.into(),
            value,
            trainable,
            grad: None,
            adam_m: None,
            adam_v: None,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> Option<&Arr> {
        self.slots[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for slot in &mut self.slots {
            if slot.name.starts_with(prefix) {
                slot.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad = None;
        }
    }

    /// Elementwise EMA update: `self = momentum * self + (1 - momentum) * src`.
    ///
    /// `self` is the shadow; it must mirror `src` slot for slot.
    pub fn ema_update_from(&mut self, src: &ParamSet, momentum: f64) {
        assert!(
            (0.0..=1.0).contains(&momentum),
            "ema momentum outside [0, 1]"
        );
        assert_eq!(self.slots.len(), src.slots.len(), "ema: slot count mismatch");
        for (dst, s) in self.slots.iter_mut().zip(&src.slots) {
            assert_eq!(
                dst.value.shape(),
                s.value.shape(),
                "ema: shape mismatch for {}",
                dst.name
            );
            dst.value.zip_mut_with(&s.value, |d, &sv| {
                *d = momentum * *d + (1.0 - momentum) * sv;
            });
        }
    }

    pub(crate) fn adam_state(&mut self, id: ParamId) -> (&mut Arr, &Arr, &mut Option<Arr>, &mut Option<Arr>) {
        let slot = &mut self.slots[id.0];
        (
            &mut slot.value,
            slot.grad.as_ref().expect("adam_state without grad"),
            &mut slot.adam_m,
            &mut slot.adam_v,
        )
    }
}

/// Records which tape leaves came from which parameter slots during a
/// forward pass, so gradients can be written back afterwards.
#[derive(Default)]
pub struct Binder {
    bindings: Vec<(ParamId, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter as a tape leaf and remember the binding.
    pub fn bind(&mut self, tape: &mut Tape, pset: &ParamSet, id: ParamId) -> Var {
        let v = tape.leaf(pset.value(id).clone());
        self.bindings.push((id, v));
        v
    }

    /// Insert a parameter as a plain leaf without tracking it (used for the
    /// momentum branch, which never receives gradients).
    pub fn bind_frozen(tape: &mut Tape, pset: &ParamSet, id: ParamId) -> Var {
        tape.leaf(pset.value(id).clone())
    }

    /// Accumulate tape gradients into the parameter set.
    pub fn write_grads(&self, grads: &Gradients, pset: &mut ParamSet) {
        for &(id, var) in &self.bindings {
            if let Some(g) = grads.get(var) {
                match &mut pset.slots[id.0].grad {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.bindings.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

/// Whether a forward pass updates batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pset: &mut ParamSet, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        let w = pset.add(format!("{name}.w"), init(&[d_in, d_out]), true);
        let b = pset.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[d_out])), true);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, pset: &ParamSet, x: Var) -> Var {
        let w = binder.bind(tape, pset, self.w);
        let b = binder.bind(tape, pset, self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn forward_frozen(&self, tape: &mut Tape, pset: &ParamSet, x: Var) -> Var {
        let w = Binder::bind_frozen(tape, pset, self.w);
        let b = Binder::bind_frozen(tape, pset, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// 2-d convolution layer.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pset: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = pset.add(format!("{name}.w"), init(&[c_out, c_in, k, k]), true);
        let b = pset.add(format!("{name}.b"), Arr::zeros(ndarray::IxDyn(&[c_out])), true);
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, pset: &ParamSet, x: Var) -> Var {
        let w = binder.bind(tape, pset, self.w);
        let b = binder.bind(tape, pset, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn forward_frozen(&self, tape: &mut Tape, pset: &ParamSet, x: Var) -> Var {
        let w = Binder::bind_frozen(tape, pset, self.w);
        let b = Binder::bind_frozen(tape, pset, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Batch normalization over all axes except the channel axis (axis 1).
///
/// Running statistics live in the parameter set as non-trainable slots and
/// are updated imperatively during `Mode::Train` forwards. Statistics are
/// always computed over the full batch passed in, which at the simulated
/// worker count equals synchronized batch normalization.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(pset: &mut ParamSet, name: &str, c: usize) -> Self {
        let dim = ndarray::IxDyn(&[c]);
        Self {
            gamma: pset.add(format!("{name}.gamma"), Arr::ones(dim.clone()), true),
            beta: pset.add(format!("{name}.beta"), Arr::zeros(dim.clone()), true),
            running_mean: pset.add(format!("{name}.running_mean"), Arr::zeros(dim.clone()), false),
            running_var: pset.add(format!("{name}.running_var"), Arr::ones(dim), false),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pset: &mut ParamSet,
        x: Var,
        mode: Mode,
    ) -> Var {
        let gamma = binder.bind(tape, pset, self.gamma);
        let beta = binder.bind(tape, pset, self.beta);
        self.apply(tape, pset, x, gamma, beta, mode)
    }

    pub fn forward_frozen(&self, tape: &mut Tape, pset: &mut ParamSet, x: Var, mode: Mode) -> Var {
        let gamma = Binder::bind_frozen(tape, pset, self.gamma);
        let beta = Binder::bind_frozen(tape, pset, self.beta);
        self.apply(tape, pset, x, gamma, beta, mode)
    }

    fn apply(
        &self,
        tape: &mut Tape,
        pset: &mut ParamSet,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
    ) -> Var {
        match mode {
            Mode::Train => {
                let (mean, var) = channel_stats(tape.value(x));
                let m = self.momentum;
                pset.value_mut(self.running_mean).zip_mut_with(&mean.clone().into_dyn(), |r, &b| {
                    *r = m * *r + (1.0 - m) * b;
                });
                pset.value_mut(self.running_var).zip_mut_with(&var.clone().into_dyn(), |r, &b| {
                    *r = m * *r + (1.0 - m) * b;
                });
                tape.batch_norm_train(x, gamma, beta, self.eps)
            }
            Mode::Eval => {
                let mean = pset
                    .value(self.running_mean)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let var = pset
                    .value(self.running_var)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                tape.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
            }
        }
    }
}

/// Layer normalization with affine parameters.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pset: &mut ParamSet, name: &str, d: usize) -> Self {
        let dim = ndarray::IxDyn(&[d]);
        Self {
            gamma: pset.add(format!("{name}.gamma"), Arr::ones(dim.clone()), true),
            beta: pset.add(format!("{name}.beta"), Arr::zeros(dim), true),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, pset: &ParamSet, x: Var) -> Var {
        let gamma = binder.bind(tape, pset, self.gamma);
        let beta = binder.bind(tape, pset, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn forward_frozen(&self, tape: &mut Tape, pset: &ParamSet, x: Var) -> Var {
        let gamma = Binder::bind_frozen(tape, pset, self.gamma);
        let beta = Binder::bind_frozen(tape, pset, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }
}

//! Parameter storage and the layer building blocks shared by the network.
//!
//! Parameters live in a [`ParamSet`] owned by the model; each forward pass
//! opens a [`Session`] that binds them onto a fresh [`Tape`]. After
//! `backward`, gradients are read back per [`ParamId`] and the optimizer
//! mutates the set. Training is single-writer: a `&mut ParamSet` step at a
//! time. Evaluation only needs `&ParamSet` and can fan out across threads.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Handle to one named tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    /// Buffers (batchnorm running stats) are stored here too but are not
    /// touched by the optimizer.
    pub trainable: bool,
}

/// Named tensors of a model: trainable weights plus non-trainable buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Restores values by name; shapes must match the registered ones.
    pub fn load_named(&mut self, named: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, value) in named {
            let entry = self
                .entries
                .iter_mut()
                .find(|e| &e.name == name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
            if entry.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    value.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = value.clone();
        }
        Ok(())
    }
}

/// One forward pass: a tape plus the parameter bindings made on it.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    pub training: bool,
    bound: Vec<(ParamId, Var)>,
    /// Buffer updates produced during a training pass (batchnorm running
    /// stats). The training loop applies them after the optimizer step.
    pub buffer_updates: Vec<(ParamId, ArrayD<f64>)>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            training,
            bound: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Binds a parameter onto the tape (once per session).
    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(&(_, var)) = self.bound.iter().find(|(p, _)| *p == id) {
            return var;
        }
        let entry = self.params.entry(id);
        let var = if entry.trainable {
            self.tape.param(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.bound.push((id, var));
        var
    }

    /// Raw buffer value, for ops that read running stats outside the tape.
    pub fn buffer(&self, id: ParamId) -> &ArrayD<f64> {
        self.params.value(id)
    }

    /// Records an input tensor (no gradient).
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.tape.constant(value)
    }

    /// Backprop from `root` and collect gradients of every bound trainable
    /// parameter, in binding order. Parameters outside the graph get zeros.
    pub fn grads(&self, root: Var) -> Result<Vec<(ParamId, ArrayD<f64>)>> {
        let grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .filter(|(id, _)| self.params.entry(*id).trainable)
            .map(|&(id, var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.params.value(id).raw_dim()));
                (id, g)
            })
            .collect())
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = ps.register(
            format!("{name}.weight"),
            uniform_init(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
        );
        let bias = ps.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels])));
        Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.bind(self.weight);
        let b = self.bias.map(|id| sess.bind(id));
        sess.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Fully connected layer without bias (the attention blocks use pure matrix
/// products).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = ps.register(
            format!("{name}.weight"),
            uniform_init(rng, &[in_features, out_features], in_features),
        );
        Self { weight }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.bind(self.weight);
        sess.tape.matmul(x, w)
    }
}

/// Batch normalization with running statistics.
///
/// Training mode normalizes with batch statistics and queues a running-stat
/// update on the session; eval mode applies the stored running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            scale: ps.register(format!("{name}.scale"), ArrayD::ones(IxDyn(&[channels]))),
            shift: ps.register(format!("{name}.shift"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: ps.register_buffer(
                format!("{name}.running_mean"),
                ArrayD::zeros(IxDyn(&[channels])),
            ),
            running_var: ps.register_buffer(
                format!("{name}.running_var"),
                ArrayD::ones(IxDyn(&[channels])),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let scale = sess.bind(self.scale);
        let shift = sess.bind(self.shift);
        if sess.training {
            let (y, mean, var) = sess.tape.batchnorm_train(x, scale, shift, self.eps)?;
            let m = self.momentum;
            let old_mean = to_1d(sess.buffer(self.running_mean));
            let old_var = to_1d(sess.buffer(self.running_var));
            let new_mean = &old_mean * (1.0 - m) + &mean * m;
            let new_var = &old_var * (1.0 - m) + &var * m;
            sess.buffer_updates
                .push((self.running_mean, new_mean.into_dyn()));
            sess.buffer_updates
                .push((self.running_var, new_var.into_dyn()));
            Ok(y)
        } else {
            let mean = to_1d(sess.buffer(self.running_mean));
            let var = to_1d(sess.buffer(self.running_var));
            sess.tape
                .batchnorm_eval(x, scale, shift, &mean, &var, self.eps)
        }
    }
}

fn to_1d(a: &ArrayD<f64>) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("buffer is rank 1")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn session_binds_each_param_once() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut sess = Session::new(&ps, false);
        let a = sess.bind(id);
        let b = sess.bind(id);
        assert_eq!(a, b);
        assert_eq!(sess.tape.len(), 1);
    }

    #[test]
    fn grads_cover_unreached_params_with_zeros() {
        let mut ps = ParamSet::new();
        let used = ps.register("used", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let unused = ps.register("unused", ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let mut sess = Session::new(&ps, true);
        let u = sess.bind(used);
        let _ = sess.bind(unused);
        let s = sess.tape.sum_all(u);
        let grads = sess.grads(s).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0].1[[0]], 1.0);
        assert_eq!(grads[1].1.sum(), 0.0);
    }

    #[test]
    fn batchnorm_updates_running_stats_in_training_only() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bn = BatchNorm2d::new(&mut ps, "bn", 1);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 1, 2, 2]), |_| rng.gen_range(0.0..4.0));

        let mut sess = Session::new(&ps, false);
        let xv = sess.input(x.clone());
        bn.forward(&mut sess, xv).unwrap();
        assert!(sess.buffer_updates.is_empty());

        let mut sess = Session::new(&ps, true);
        let xv = sess.input(x.clone());
        bn.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.buffer_updates.len(), 2);
        let (_, new_mean) = &sess.buffer_updates[0];
        let batch_mean = x.sum() / 8.0;
        let expected = 0.9 * 0.0 + 0.1 * batch_mean;
        assert!((new_mean[[0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn load_named_round_trips() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut ps, "conv", 3, 4, 3, 1, 1, &mut rng);
        let snapshot: Vec<(String, ArrayD<f64>)> = ps
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        let mut ps2 = ParamSet::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let _conv2 = Conv2d::new(&mut ps2, "conv", 3, 4, 3, 1, 1, &mut rng2);
        ps2.load_named(&snapshot).unwrap();
        assert_eq!(ps.value(conv.weight), ps2.value(conv.weight));

        let bad = vec![("conv.weight".to_string(), ArrayD::zeros(IxDyn(&[1])))];
        assert!(ps2.load_named(&bad).is_err());
    }
}

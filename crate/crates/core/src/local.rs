//! Client-side model assembly and local training.

use rand::seq::SliceRandom;

use crate::arch::{BlockKind, ModelSpec, Role, TensorInfo};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{init_tensor, NamedTensorSpace, Sharing, SharingPolicy};
use crate::rng;
use crate::tensor::{sgd_momentum_step, BnStats, Mode, SgdParam, Tape, Tensor, Var};

/// Samples per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 64;

/// Everything a client keeps between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalState {
    pub client_id: usize,
    /// Private parameters (BN affine and head, depending on the policy).
    pub private: NamedTensorSpace,
    /// Running statistics of every BN layer in forward order; never shared.
    pub bn_stats: Vec<BnStats>,
    /// Momentum buffers for every trainable tensor.
    pub velocity: NamedTensorSpace,
    /// The client's own copy of the shared tensors when it trains alone.
    pub own_shared: Option<Vec<(String, Tensor)>>,
    /// Root of the per-round shuffle streams.
    pub data_seed: u64,
}

impl LocalState {
    /// Fresh state for `spec`: private tensors drawn from per-client streams,
    /// running stats at mean 0 / variance 1.
    pub fn new(client_id: usize, spec: &ModelSpec, policy: SharingPolicy, seed: u64) -> Self {
        let mut private = NamedTensorSpace::new();
        for info in spec.tensors() {
            if policy.sharing(info.role) == Sharing::PrivateTemplate {
                let mut r = rng::stream(seed, "init-private", client_id as u64, rng::name_key(&info.name));
                private.insert(info.name.clone(), init_tensor(&info, &mut r));
            }
        }
        Self {
            client_id,
            private,
            bn_stats: spec.bn_layers().into_iter().map(BnStats::new).collect(),
            velocity: NamedTensorSpace::new(),
            own_shared: None,
            data_seed: seed,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    role: Role,
    shared: bool,
    value: Tensor,
}

/// A client's assembled network: shared tensors plus private state, bound in
/// the order of [`ModelSpec::tensors`].
#[derive(Clone, Debug)]
pub struct LocalModel {
    client_id: usize,
    spec: ModelSpec,
    slots: Vec<Slot>,
    stats: Vec<BnStats>,
    forwards: usize,
}

/// Binds `shared` and the private part of `state` to the layers of `spec`.
pub fn create_local_model(shared: &[(String, Tensor)], state: &LocalState, spec: &ModelSpec) -> Result<LocalModel> {
    let client = state.client_id;
    let infos = spec.tensors();
    let mut slots = Vec::with_capacity(infos.len());
    let mut used = 0;
    for TensorInfo { name, dims, role } in infos {
        let from_shared = shared.iter().find(|(n, _)| *n == name).map(|(_, t)| t);
        let from_private = state.private.get(&name);
        let (value, is_shared) = match (from_shared, from_private) {
            (Some(t), None) => {
                used += 1;
                (t, true)
            }
            (None, Some(t)) => (t, false),
            (Some(_), Some(_)) => return Err(Error::Usage(format!("tensor `{name}` is both shared and private"))),
            (None, None) => return Err(Error::MissingTensor(name)),
        };
        if value.dims() != dims.as_slice() {
            return Err(Error::DimMismatch {
                tensor: name,
                client,
                expected: dims,
                got: value.dims().to_vec(),
            });
        }
        slots.push(Slot {
            name,
            role,
            shared: is_shared,
            value: value.clone(),
        });
    }
    if used != shared.len() {
        let extra = shared.iter().find(|(n, _)| !slots.iter().any(|s| s.name == *n)).map(|(n, _)| n.clone());
        return Err(Error::Usage(format!("shared tensor `{}` is not part of the model", extra.unwrap_or_default())));
    }
    let bn = spec.bn_layers();
    let stats_ok = state.bn_stats.len() == bn.len() && state.bn_stats.iter().zip(&bn).all(|(s, &c)| s.channels() == c);
    if !stats_ok {
        return Err(Error::Usage(format!("client {client}: running statistics do not match the model")));
    }
    Ok(LocalModel {
        client_id: client,
        spec: spec.clone(),
        slots,
        stats: state.bn_stats.clone(),
        forwards: 0,
    })
}

/// Hyper-parameters of one call to [`local_update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalConfig {
    /// Number of optimizer steps `E`.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Keep momentum buffers across rounds instead of zeroing them.
    pub persist_momentum: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    /// Shared tensors after the last step, in model order.
    pub shared: Vec<(String, Tensor)>,
    pub mean_loss: f64,
    /// Fraction of correctly classified training samples over all batches.
    pub accuracy: f64,
    pub steps: usize,
}

impl LocalModel {
    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    /// Training forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forwards
    }

    pub fn num_parameters(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.slots.iter().find(|s| s.name == name).map(|s| &s.value)
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.stats
    }

    pub fn shared_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots.iter().filter(|s| s.shared).map(|s| (s.name.clone(), s.value.clone())).collect()
    }

    pub fn private_tensors(&self) -> Vec<(String, Tensor)> {
        self.slots.iter().filter(|s| !s.shared).map(|s| (s.name.clone(), s.value.clone())).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        let s = &self.spec;
        if d.len() != 4 || d[1] != s.input_channels || d[2] != s.input_size || d[3] != s.input_size {
            let n = d.first().copied().unwrap_or(0);
            return Err(Error::shape("model input", &[n, s.input_channels, s.input_size, s.input_size], d));
        }
        Ok(())
    }

    /// Records the network on `tape`; returns the logits and one leaf per slot.
    fn record(&self, tape: &mut Tape, x: Tensor, stats: &mut [BnStats], mode: Mode) -> Result<(Var, Vec<Var>)> {
        self.check_input(&x)?;
        let vars: Vec<Var> = self.slots.iter().map(|s| tape.leaf(s.value.clone())).collect();
        let mut h = tape.constant(x);
        let (mut p, mut b) = (0, 0);
        for stage in &self.spec.stages {
            let input = h;
            let convs = stage.block.convs_per_stage();
            for k in 0..convs {
                let stride = if k == 0 { stage.stride } else { 1 };
                h = tape.conv2d(h, vars[p], stride)?;
                h = tape.batch_norm(h, vars[p + 1], vars[p + 2], &mut stats[b], mode)?;
                p += 3;
                b += 1;
                if stage.block == BlockKind::ResidualPair && k + 1 == convs {
                    let skip = tape.shortcut(input, stage.stride, stage.out_channels)?;
                    h = tape.add(h, skip)?;
                }
                h = tape.relu(h)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.linear(pooled, vars[p], vars[p + 1])?;
        Ok((logits, vars))
    }

    /// Eval-mode logits `[n, K]`; parameters and running stats are untouched.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.dims()[0];
        let per = x.numel() / n;
        let mut out = Vec::with_capacity(n * self.spec.num_classes);
        let mut stats = self.stats.clone();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut dims = x.dims().to_vec();
            dims[0] = end - start;
            let chunk = Tensor::new(dims, x.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let (logits, _) = self.record(&mut tape, chunk, &mut stats, Mode::Eval)?;
            out.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![n, self.spec.num_classes], out)
    }

    /// Train-mode loss of one batch without touching any state.
    pub fn batch_loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut stats = self.stats.clone();
        let mut tape = Tape::new();
        let (logits, _) = self.record(&mut tape, x.clone(), &mut stats, Mode::Train)?;
        let loss = tape.softmax_xent(logits, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// One forward/backward/update on a batch. Returns the loss and the number
    /// of correct argmax predictions.
    fn train_step(&mut self, x: Tensor, labels: &[usize], cfg: &LocalConfig, velocity: &mut [Tensor]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let mut stats = std::mem::take(&mut self.stats);
        let recorded = self.record(&mut tape, x, &mut stats, Mode::Train);
        self.stats = stats;
        let (logits, vars) = recorded?;
        self.forwards += 1;
        let correct = count_correct(tape.value(logits), labels);
        let loss_var = tape.softmax_xent(logits, labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
            });
        }
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.take(v).ok_or_else(|| Error::Usage("missing parameter gradient".into())))
            .collect::<Result<_>>()?;
        let mut params: Vec<SgdParam<'_>> = self
            .slots
            .iter_mut()
            .zip(&grads)
            .zip(velocity.iter_mut())
            .map(|((s, g), v)| SgdParam {
                name: &s.name,
                value: &mut s.value,
                grad: g,
                velocity: v,
                decay: s.role.decays(),
            })
            .collect();
        sgd_momentum_step(&mut params, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        Ok((loss, correct))
    }
}

/// Argmax per row with ties going to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dims()[logits.dims().len() - 1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// The order samples are visited in during `round`: one shuffle per
/// (client, round), then `steps` consecutive batches with cyclic wrap-around.
pub fn batch_plan(state: &LocalState, n: usize, round: usize, steps: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(state.data_seed, "shuffle", state.client_id as u64, round as u64));
    (0..steps)
        .map(|s| (0..batch_size).map(|k| order[(s * batch_size + k) % n]).collect())
        .collect()
}

/// Runs `cfg.steps` momentum-SGD steps on `data` and writes the private
/// tensors, running stats and momentum back into `state`.
pub fn local_update(model: &mut LocalModel, state: &mut LocalState, data: &Dataset, cfg: &LocalConfig, round: usize) -> Result<LocalResult> {
    let client = state.client_id;
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Usage("local training needs at least one step and a positive batch size".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Usage(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    if data.is_empty() {
        return Err(Error::Data(format!("client {client} has no training samples")));
    }
    if model.client_id != client {
        return Err(Error::Usage(format!("model of client {} used with state of client {client}", model.client_id)));
    }
    let mut velocity: Vec<Tensor> = model
        .slots
        .iter()
        .map(|s| match state.velocity.get(&s.name) {
            Some(v) if cfg.persist_momentum && v.dims() == s.value.dims() => v.clone(),
            _ => Tensor::zeros(s.value.dims()),
        })
        .collect();

    let plan = batch_plan(state, data.len(), round, cfg.steps, cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut seen = 0;
    for (step, idx) in plan.iter().enumerate() {
        let (x, labels) = data.batch(idx).map_err(|e| e.in_client(client, step))?;
        let (loss, c) = model.train_step(x, &labels, cfg, &mut velocity).map_err(|e| e.in_client(client, step))?;
        loss_sum += loss;
        correct += c;
        seen += labels.len();
    }

    for s in model.slots.iter().filter(|s| !s.shared) {
        state.private.insert(s.name.clone(), s.value.clone());
    }
    state.bn_stats = model.stats.clone();
    state.velocity = NamedTensorSpace::new();
    if cfg.persist_momentum {
        for (s, v) in model.slots.iter().zip(velocity) {
            state.velocity.insert(s.name.clone(), v);
        }
    }
    Ok(LocalResult {
        shared: model.shared_tensors(),
        mean_loss: loss_sum / cfg.steps as f64,
        accuracy: correct as f64 / seen as f64,
        steps: cfg.steps,
    })
}

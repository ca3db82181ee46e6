//! The communication-round loop: learning-rate schedule, per-group client
//! sampling, parallel local updates, aggregation and reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::arch::{design_global, design_heterofl_baseline, design_local, enclosing_spec, ClientProfile, DesignBase, GroupId, ModelSpec};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::local::{create_local_model, local_update, LocalConfig, LocalModel, LocalResult, LocalState};
use crate::metrics::{discrepancy_radii, evaluate, weighted_gap, GapReport, Level};
use crate::params::{aggregate, encode, extract, fedavg, init_global, write_tensors, NamedTensorSpace, SharingPolicy, SliceMap, Update};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Per-client depth and width, nested corner sharing.
    ScalableFl,
    /// Every client at the same depth, widths matched to its own parameter count.
    HeteroFl { fixed_depth: usize },
    /// Identical models everywhere and a flat average.
    FedAvgHomogeneous,
    /// No communication: every client trains its own model.
    Individual,
}

impl Method {
    /// Stable lowercase name, e.g. `heterofl(4)`.
    pub fn name(&self) -> String {
        match self {
            Method::ScalableFl => "scalablefl".into(),
            Method::HeteroFl { fixed_depth } => format!("heterofl({fixed_depth})"),
            Method::FedAvgHomogeneous => "fedavg_homogeneous".into(),
            Method::Individual => "individual".into(),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "scalablefl" => Ok(Method::ScalableFl),
            "fedavg_homogeneous" => Ok(Method::FedAvgHomogeneous),
            "individual" => Ok(Method::Individual),
            other => {
                let depth = other
                    .strip_prefix("heterofl(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown method `{other}`"))?;
                let fixed_depth = depth.trim().parse().map_err(|_| format!("bad depth in `{other}`"))?;
                if fixed_depth == 0 {
                    return Err("heterofl depth must be at least 1".into());
                }
                Ok(Method::HeteroFl { fixed_depth })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    /// Multiply by 0.1 at 70% and again at 90% of the rounds.
    Step,
    Constant,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Step => "step",
            LrSchedule::Constant => "constant",
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "step" => Ok(LrSchedule::Step),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(format!("unknown schedule `{other}` (expected cosine, step or constant)")),
        }
    }
}

/// Learning rate of round `t` out of `rounds`.
pub fn adjust_lr(t: usize, rounds: usize, lr0: f64, schedule: LrSchedule) -> f64 {
    match schedule {
        LrSchedule::Constant => lr0,
        LrSchedule::Cosine => lr0 * (1.0 + (std::f64::consts::PI * t as f64 / rounds as f64).cos()) / 2.0,
        LrSchedule::Step => {
            let crossings = (10 * t >= 7 * rounds) as i32 + (10 * t >= 9 * rounds) as i32;
            lr0 * 0.1f64.powi(crossings)
        }
    }
}

/// Number of clients drawn from a group of `n`: `max(1, round(xi * n))`.
pub fn group_quota(n: usize, participation: f64) -> usize {
    ((participation * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Draws each group's quota uniformly without replacement; each group's ids come back sorted.
pub fn select_clients<R: Rng + ?Sized>(groups: &[Vec<usize>], participation: f64, rng: &mut R) -> Vec<Vec<usize>> {
    groups
        .iter()
        .map(|members| {
            let k = group_quota(members.len(), participation);
            let mut picked: Vec<usize> = index::sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub participation: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
    pub local_bn: bool,
    pub local_head: bool,
    pub weighted: bool,
    /// Keep momentum across rounds for federated methods.
    pub persist_momentum: bool,
    /// Evaluate every this many rounds; the last round is always evaluated, 0 means only the last.
    pub eval_every: usize,
    /// Worker threads for local updates; 0 picks the available parallelism.
    pub threads: usize,
    /// Record real elapsed milliseconds instead of 0 in reports.
    pub wall_clock: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            participation: 1.0,
            local_steps: 1,
            batch_size: 16,
            lr: 0.1,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            method: Method::ScalableFl,
            local_bn: true,
            local_head: true,
            weighted: false,
            persist_momentum: false,
            eval_every: 0,
            threads: 1,
            wall_clock: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.into()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must be in (0, 1]");
        }
        if self.local_steps == 0 || self.batch_size == 0 {
            return bad("local steps and batch size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must be in [0, 1) and weight decay >= 0");
        }
        Ok(())
    }

    pub fn policy(&self) -> SharingPolicy {
        SharingPolicy {
            local_bn: self.local_bn,
            local_head: self.local_head,
        }
    }

    fn local(&self, lr: f64) -> LocalConfig {
        LocalConfig {
            steps: self.local_steps,
            batch_size: self.batch_size,
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            persist_momentum: self.persist_momentum || self.method == Method::Individual,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: GroupId,
    /// Mean local training loss of the group's selected clients.
    pub train_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientResult {
    pub client_id: usize,
    pub group: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

/// Per-group evaluation of every client's current model.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEval {
    pub group: GroupId,
    /// Mean over the group's clients of the loss on their own training data.
    pub train_loss: f64,
    /// Mean over the group's clients of the test loss on the group's test set.
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub train_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub lr: f64,
    pub selected: Vec<Vec<usize>>,
    pub clients: Vec<ClientResult>,
    pub groups: Vec<GroupResult>,
    /// Present on evaluation rounds.
    pub eval: Option<Vec<GroupEval>>,
    /// Radii per level (levels in ascending category count); empty when undefined.
    pub radii: Vec<(usize, f64)>,
    pub gap: Option<GapReport>,
    pub wall_ms: u64,
}

/// Per-group results, discrepancy radii as (group index, radius), and the weighted gap.
pub type Evaluation = (Vec<GroupEval>, Vec<(usize, f64)>, GapReport);

/// A running federated experiment over one generated task.
pub struct Federation {
    config: FedConfig,
    data: Arc<TaskData>,
    profiles: Vec<ClientProfile>,
    specs: Vec<ModelSpec>,
    global_spec: ModelSpec,
    space: NamedTensorSpace,
    slices: SliceMap,
    states: Vec<LocalState>,
    groups: Vec<Vec<usize>>,
    pool: rayon::ThreadPool,
    round: usize,
}

impl Federation {
    pub fn new(config: FedConfig, base: &DesignBase, data: Arc<TaskData>) -> Result<Self> {
        config.validate()?;
        let profiles: Vec<ClientProfile> = data
            .clients
            .iter()
            .map(|c| ClientProfile::new(c.client_id, c.train.image_size(), c.train.num_classes(), c.train.len()))
            .collect();
        let specs: Vec<ModelSpec> = match config.method {
            Method::HeteroFl { fixed_depth } => design_heterofl_baseline(&profiles, base, fixed_depth)?,
            Method::FedAvgHomogeneous => {
                if profiles.iter().any(|p| p.group() != profiles[0].group()) {
                    return Err(Error::Usage("fedavg_homogeneous needs every client in one group".into()));
                }
                profiles.iter().map(|p| design_local(p, base)).collect::<Result<_>>()?
            }
            Method::ScalableFl | Method::Individual => profiles.iter().map(|p| design_local(p, base)).collect::<Result<_>>()?,
        };
        let global_spec = match config.method {
            Method::ScalableFl => design_global(&profiles, base)?,
            _ => enclosing_spec(&specs)?,
        };
        let policy = config.policy();
        let space = init_global(&global_spec, policy, rng::derive_seed(config.seed, "global", 0, 0));
        let mut slices = SliceMap::new();
        let mut states = Vec::with_capacity(profiles.len());
        for (p, spec) in profiles.iter().zip(&specs) {
            slices.register(p.client_id, spec, policy, &space)?;
            let mut state = LocalState::new(p.client_id, spec, policy, rng::derive_seed(config.seed, "client", p.client_id as u64, 0));
            if config.method == Method::Individual {
                state.own_shared = Some(extract(&space, &slices, p.client_id)?);
            }
            states.push(state);
        }
        let mut groups = vec![Vec::new(); data.tests.len()];
        for c in &data.clients {
            groups[c.group].push(c.client_id);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        Ok(Self {
            config,
            data,
            profiles,
            specs,
            global_spec,
            space,
            slices,
            states,
            groups,
            pool,
            round: 0,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn space(&self) -> &NamedTensorSpace {
        &self.space
    }

    pub fn global_spec(&self) -> &ModelSpec {
        &self.global_spec
    }

    pub fn specs(&self) -> &[ModelSpec] {
        &self.specs
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn states(&self) -> &[LocalState] {
        &self.states
    }

    pub fn data(&self) -> &TaskData {
        &self.data
    }

    /// Client ids of each group, in group order.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Shared tensors client `id` would start a round from.
    fn shared_for(&self, id: usize) -> Result<Vec<(String, Tensor)>> {
        match &self.states[id].own_shared {
            Some(own) => Ok(own.clone()),
            None => extract(&self.space, &self.slices, id),
        }
    }

    /// The client's current model.
    pub fn client_model(&self, id: usize) -> Result<LocalModel> {
        if id >= self.states.len() {
            return Err(Error::UnknownClient(id));
        }
        create_local_model(&self.shared_for(id)?, &self.states[id], &self.specs[id])
    }

    /// Runs one round. On error no client state and no global tensor changes.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let start = Instant::now();
        let t = self.round;
        let lr = adjust_lr(t, self.config.rounds, self.config.lr, self.config.schedule);
        let selected = select_clients(
            &self.groups,
            self.config.participation,
            &mut rng::stream(self.config.seed, "select", t as u64, 0),
        );
        let jobs: Vec<usize> = selected.iter().flatten().copied().collect();
        let local = self.config.local(lr);
        let this = &*self;
        let outcomes: Vec<Result<(LocalResult, LocalState)>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&id| {
                    let mut state = this.states[id].clone();
                    let mut model = create_local_model(&this.shared_for(id)?, &state, &this.specs[id])?;
                    let result = local_update(&mut model, &mut state, &this.data.clients[id].train, &local, t)?;
                    Ok((result, state))
                })
                .collect()
        });
        let outcomes: Vec<(LocalResult, LocalState)> = outcomes.into_iter().collect::<Result<_>>()?;

        if self.config.method != Method::Individual {
            let updates: Vec<Update> = jobs
                .iter()
                .zip(&outcomes)
                .map(|(&id, (r, _))| Update {
                    client_id: id,
                    tensors: r.shared.clone(),
                    weight: self.profiles[id].num_samples as f64,
                })
                .collect();
            let mut next = self.space.clone();
            match self.config.method {
                Method::FedAvgHomogeneous => fedavg(&mut next, &updates, self.config.weighted)?,
                _ => aggregate(&mut next, &updates, &self.slices, self.config.weighted)?,
            }
            self.space = next;
        }

        let mut clients = Vec::with_capacity(jobs.len());
        for (&id, (result, mut state)) in jobs.iter().zip(outcomes) {
            if self.config.method == Method::Individual {
                state.own_shared = Some(result.shared.clone());
            }
            self.states[id] = state;
            clients.push(ClientResult {
                client_id: id,
                group: self.data.clients[id].group,
                train_loss: result.mean_loss,
                train_accuracy: result.accuracy,
            });
        }
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, _)| {
                let mine: Vec<&ClientResult> = clients.iter().filter(|c| c.group == g).collect();
                let n = mine.len() as f64;
                GroupResult {
                    group: self.data.tests[g].group,
                    train_loss: mine.iter().map(|c| c.train_loss).sum::<f64>() / n,
                    train_accuracy: mine.iter().map(|c| c.train_accuracy).sum::<f64>() / n,
                }
            })
            .collect();

        self.round += 1;
        let last = self.round == self.config.rounds;
        let every = self.config.eval_every;
        let (eval, radii, gap) = if last || (every > 0 && self.round.is_multiple_of(every)) {
            let (eval, radii, gap) = self.evaluate()?;
            (Some(eval), radii, Some(gap))
        } else {
            (None, Vec::new(), None)
        };
        let wall_ms = if self.config.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
        Ok(RoundReport {
            round: t,
            lr,
            selected,
            clients,
            groups,
            eval,
            radii,
            gap,
            wall_ms,
        })
    }

    /// Evaluates every client's current model; returns per-group results,
    /// the discrepancy radii (group index, radius) and the weighted gap.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let ids: Vec<usize> = (0..self.states.len()).collect();
        let per_client: Vec<Result<(f64, f64, f64)>> = self.pool.install(|| {
            ids.par_iter()
                .map(|&id| {
                    let model = self.client_model(id)?;
                    let c = &self.data.clients[id];
                    let train = evaluate(&model, &c.train)?;
                    let test = evaluate(&model, &self.data.tests[c.group])?;
                    Ok((train.loss, test.loss, test.accuracy))
                })
                .collect()
        });
        let per_client: Vec<(f64, f64, f64)> = per_client.into_iter().collect::<Result<_>>()?;
        let evals: Vec<GroupEval> = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, members)| {
                let n = members.len() as f64;
                let sum = |f: fn(&(f64, f64, f64)) -> f64| members.iter().map(|&id| f(&per_client[id])).sum::<f64>() / n;
                GroupEval {
                    group: self.data.tests[g].group,
                    train_loss: sum(|r| r.0),
                    test_loss: sum(|r| r.1),
                    test_accuracy: sum(|r| r.2),
                    train_samples: members.iter().map(|&id| self.profiles[id].num_samples).sum(),
                }
            })
            .collect();

        let mut gap = weighted_gap(
            &evals.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
            &evals.iter().map(|e| e.test_loss).collect::<Vec<_>>(),
            &evals.iter().map(|e| e.train_samples).collect::<Vec<_>>(),
        )?;
        for (t, e) in gap.tasks.iter_mut().zip(&evals) {
            t.accuracy = e.test_accuracy;
        }
        let radii = self.radii()?;
        gap.radii = radii.iter().map(|r| r.1).collect();
        Ok((evals, radii, gap))
    }

    /// Radii between the canonical (lowest-id) client models of consecutive
    /// groups, ordered by ascending category count. Empty when label sets are
    /// not nested.
    fn radii(&self) -> Result<Vec<(usize, f64)>> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.sort_by_key(|&g| (self.data.tests[g].num_classes(), self.data.tests[g].image_size(), g));
        let models: Vec<LocalModel> = order.iter().map(|&g| self.client_model(self.groups[g][0])).collect::<Result<_>>()?;
        let levels: Vec<Level<'_>> = order
            .iter()
            .zip(&models)
            .map(|(&g, m)| Level {
                model: m,
                classes: &self.data.class_maps[g],
            })
            .collect();
        let sets: Vec<_> = order.iter().map(|&g| &self.data.tests[g]).collect();
        match discrepancy_radii(&levels, &sets) {
            Ok(r) => Ok(order.into_iter().zip(r).collect()),
            Err(Error::Metric(_)) => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }

    /// Writes the global store and one private-state file per client.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("global.sfl");
        fs::write(&path, encode(&self.space)?).map_err(|e| Error::io(&path, e))?;
        for (id, state) in self.states.iter().enumerate() {
            let mut tensors: Vec<(String, Tensor)> = state.private.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect();
            if let Some(own) = &state.own_shared {
                tensors.extend(own.iter().cloned());
            }
            for (i, s) in state.bn_stats.iter().enumerate() {
                tensors.push((format!("bn{i}.running_mean"), Tensor::new(vec![s.channels()], s.mean.clone())?));
                tensors.push((format!("bn{i}.running_var"), Tensor::new(vec![s.channels()], s.var.clone())?));
            }
            let path = dir.join(format!("client{id}.sfl"));
            let bytes = write_tensors(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub const METRICS_HEADER: &str = "round,group,client,split,loss,accuracy,lr,rhat,wall_ms";
pub const GAP_HEADER: &str = "round,kind,index,samples,alpha,train_loss,test_loss,gap,accuracy,rhat";

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// Appends the metrics rows of one round. Group aggregates use client `-1`.
pub fn metrics_rows(report: &RoundReport, out: &mut String) {
    let lr = format!("{:.8}", report.lr);
    let w = report.wall_ms;
    let t = report.round;
    for c in &report.clients {
        let _ = writeln!(out, "{t},{},{},train,{},{},{lr},,{w}", c.group, c.client_id, f(c.train_loss), f(c.train_accuracy));
    }
    for (g, r) in report.groups.iter().enumerate() {
        let _ = writeln!(out, "{t},{g},-1,train,{},{},{lr},,{w}", f(r.train_loss), f(r.train_accuracy));
    }
    if let Some(eval) = &report.eval {
        for (g, e) in eval.iter().enumerate() {
            let _ = writeln!(out, "{t},{g},-1,test,{},{},{lr},,{w}", f(e.test_loss), f(e.test_accuracy));
        }
    }
    for (g, r) in &report.radii {
        let _ = writeln!(out, "{t},{g},-1,rhat,,,{lr},{},{w}", f(*r));
    }
}

/// Appends the gap rows of one round: one per task, one aggregate, one per level.
pub fn gap_rows(report: &RoundReport, out: &mut String) {
    let Some(gap) = &report.gap else { return };
    let t = report.round;
    for (m, task) in gap.tasks.iter().enumerate() {
        let _ = writeln!(
            out,
            "{t},task,{m},{},{},{},{},{},{},",
            task.samples,
            f(task.alpha),
            f(task.train_loss),
            f(task.test_loss),
            f(task.train_loss - task.test_loss),
            f(task.accuracy)
        );
    }
    let total: usize = gap.tasks.iter().map(|t| t.samples).sum();
    let _ = writeln!(out, "{t},aggregate,-1,{total},1.000000,{},{},{},,", f(gap.train_loss), f(gap.test_loss), f(gap.gap));
    for (j, r) in gap.radii.iter().enumerate() {
        let _ = writeln!(out, "{t},level,{},,,,,,,{}", j + 1, f(*r));
    }
}

/// Outcome of a full run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub method: Method,
    pub reports: Vec<RoundReport>,
    /// Evaluation after the last round.
    pub final_eval: Vec<GroupEval>,
}

impl ExperimentReport {
    /// Mean over groups of the final test accuracy.
    pub fn mean_accuracy(&self) -> f64 {
        self.final_eval.iter().map(|e| e.test_accuracy).sum::<f64>() / self.final_eval.len() as f64
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub checkpoints: bool,
}

/// Runs all rounds; with an output directory writes `metrics.csv`, `gap.csv`
/// and (optionally) `checkpoints/`.
pub fn run_experiment(fed: &mut Federation, output: Option<&RunOutput>) -> Result<ExperimentReport> {
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut gaps = format!("{GAP_HEADER}\n");
    let mut reports = Vec::with_capacity(fed.config.rounds);
    while fed.round < fed.config.rounds {
        let r = fed.run_round()?;
        metrics_rows(&r, &mut metrics);
        gap_rows(&r, &mut gaps);
        reports.push(r);
    }
    let final_eval = reports
        .last()
        .and_then(|r| r.eval.clone())
        .ok_or_else(|| Error::Usage("experiment ran no rounds".into()))?;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        for (name, body) in [("metrics.csv", &metrics), ("gap.csv", &gaps)] {
            let p = out.dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        if out.checkpoints {
            fed.save_checkpoints(&out.dir.join("checkpoints"))?;
        }
    }
    Ok(ExperimentReport {
        method: fed.config.method,
        reports,
        final_eval,
    })
}

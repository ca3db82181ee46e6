//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! list = a, b, c
//! ```
//!
//! Sections are `design`, `federation`, `data` and `output`. Unknown
//! sections or keys, malformed values and violated constraints are errors
//! carrying the offending line number. [`ExperimentConfig::render`] writes every
//! field explicitly, so `parse(render(c)) == c`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::arch::{BlockKind, DesignBase};
use crate::data::{GroupSpec, SubsetMode, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::fed::{FedConfig, LrSchedule, Method};

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoints: bool,
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub design: DesignBase,
    pub federation: FedConfig,
    /// Methods run by `compare`.
    pub methods: Vec<Method>,
    /// Training seeds per method in `compare`: `seed, seed + 1, ...`.
    pub repeats: usize,
    pub data: SyntheticTaskSpec,
    pub output: OutputConfig,
}

const SECTIONS: [&str; 4] = ["design", "federation", "data", "output"];

const KEYS: &[(&str, &[&str])] = &[
    ("design", &["base_classes", "base_feature_size", "base_widths", "block"]),
    (
        "federation",
        &[
            "rounds",
            "participation",
            "local_steps",
            "batch_size",
            "lr",
            "schedule",
            "momentum",
            "weight_decay",
            "seed",
            "method",
            "methods",
            "repeats",
            "local_bn",
            "local_head",
            "weighted",
            "persist_momentum",
            "eval_every",
            "threads",
        ],
    ),
    (
        "data",
        &[
            "groups",
            "master_classes",
            "master_size",
            "channels",
            "prototype_grid",
            "noise",
            "shift",
            "gain",
            "subset",
            "seed",
        ],
    ),
    ("output", &["dir", "checkpoints", "wall_clock"]),
];

/// Defaults for a group given only as `H:K`.
pub const DEFAULT_CLIENTS: usize = 4;
pub const DEFAULT_TRAIN: usize = 64;
pub const DEFAULT_TEST: usize = 64;

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

/// Raw `key = value` entries with their line numbers.
struct Entries {
    map: HashMap<(String, String), (usize, String)>,
    /// Line of each section header (0 if absent).
    sections: HashMap<String, usize>,
    last_line: usize,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        let mut sections = HashMap::new();
        let mut current: Option<String> = None;
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(line, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(cfg_err(line, format!("unknown section `[{name}]`")));
                }
                if sections.insert(name.to_owned(), line).is_some() {
                    return Err(cfg_err(line, format!("section `[{name}]` appears twice")));
                }
                current = Some(name.to_owned());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = current
                .clone()
                .ok_or_else(|| cfg_err(line, format!("key `{key}` outside any section")))?;
            let known = KEYS.iter().find(|(s, _)| *s == section).is_some_and(|(_, ks)| ks.contains(&key));
            if !known {
                return Err(cfg_err(line, format!("unknown key `{key}` in [{section}]")));
            }
            if value.is_empty() {
                return Err(cfg_err(line, format!("`{key}` has no value")));
            }
            if map.insert((section.clone(), key.to_owned()), (line, value.to_owned())).is_some() {
                return Err(cfg_err(line, format!("duplicate key `{key}` in [{section}]")));
            }
        }
        Ok(Self { map, sections, last_line })
    }

    fn raw(&self, section: &str, key: &str) -> Option<(usize, &str)> {
        self.map.get(&(section.to_owned(), key.to_owned())).map(|(l, v)| (*l, v.as_str()))
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.raw(section, key)
            .map(|(l, _)| l)
            .or_else(|| self.sections.get(section).copied())
            .unwrap_or(self.last_line)
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, v)) => parse_value(line, key, v),
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, v)) = self.raw(section, key) else { return Ok(None) };
        v.split(',').map(|item| parse_value(line, key, item.trim())).collect::<Result<Vec<T>>>().map(Some)
    }

    /// Fails at the key's line unless `ok`.
    fn require(&self, ok: bool, section: &str, key: &str, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(cfg_err(self.line_of(section, key), format!("`{key}` {msg}")))
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err(line, format!("cannot parse `{v}` for `{key}`")))
}

/// Parses `bool` as `true`/`false`/`on`/`off`.
struct Flag(bool);

impl FromStr for Flag {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "true" | "on" => Ok(Flag(true)),
            "false" | "off" => Ok(Flag(false)),
            _ => Err(()),
        }
    }
}

/// Group literal `H:K` or `H:K:clients:train:test`.
struct GroupLit(GroupSpec);

impl FromStr for GroupLit {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(|_| ())).collect::<std::result::Result<_, _>>()?;
        let (h, k, c, tr, te) = match parts[..] {
            [h, k] => (h, k, DEFAULT_CLIENTS, DEFAULT_TRAIN, DEFAULT_TEST),
            [h, k, c, tr, te] => (h, k, c, tr, te),
            _ => return Err(()),
        };
        Ok(GroupLit(GroupSpec {
            image_size: h,
            num_classes: k,
            clients: c,
            train_per_client: tr,
            test_per_group: te,
        }))
    }
}

fn flag(e: &Entries, section: &str, key: &str, default: bool) -> Result<bool> {
    e.get(section, key, Flag(default)).map(|f| f.0)
}

/// Parses and validates a configuration, filling defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let e = Entries::parse(text)?;

    let groups: Vec<GroupSpec> = e
        .list::<GroupLit>("data", "groups")?
        .ok_or_else(|| cfg_err(e.line_of("data", "groups"), "[data] needs `groups`"))?
        .into_iter()
        .map(|g| g.0)
        .collect();
    for g in &groups {
        e.require(g.image_size >= 1 && g.num_classes >= 2, "data", "groups", "needs image size >= 1 and >= 2 classes per group")?;
        e.require(g.clients >= 1 && g.test_per_group >= 1, "data", "groups", "needs >= 1 client and >= 1 test sample per group")?;
        e.require(g.train_per_client >= g.num_classes, "data", "groups", "needs at least one training sample per class per client")?;
    }
    let ordered = groups.windows(2).all(|w| w[0].image_size >= w[1].image_size && w[0].num_classes >= w[1].num_classes);
    e.require(ordered, "data", "groups", "must be ordered by non-increasing image size and category count")?;
    let max_h = groups.iter().map(|g| g.image_size).max().unwrap_or(1);
    let max_k = groups.iter().map(|g| g.num_classes).max().unwrap_or(2);

    let seed: u64 = e.get("federation", "seed", 0)?;
    let master_classes = e.get("data", "master_classes", max_k)?;
    e.require(master_classes >= max_k, "data", "master_classes", "must cover every group's classes")?;
    let master_size = e.get("data", "master_size", max_h)?;
    e.require(
        groups.iter().all(|g| master_size >= g.image_size && master_size % g.image_size == 0),
        "data",
        "master_size",
        "must be a multiple of every group's image size",
    )?;
    let channels = e.get("data", "channels", 3usize)?;
    e.require(channels >= 1, "data", "channels", "must be >= 1")?;
    let prototype_grid = e.get("data", "prototype_grid", 4usize)?;
    e.require(prototype_grid >= 1, "data", "prototype_grid", "must be >= 1")?;
    let noise = e.get("data", "noise", 0.1f64)?;
    e.require(noise >= 0.0 && noise.is_finite(), "data", "noise", "must be finite and >= 0")?;
    let shift_frac = e.get("data", "shift", 0.1f64)?;
    e.require((0.0..=0.5).contains(&shift_frac), "data", "shift", "must be in [0, 0.5]")?;
    let gain = e.get("data", "gain", 0.2f64)?;
    e.require((0.0..1.0).contains(&gain), "data", "gain", "must be in [0, 1)")?;
    let subset = match e.raw("data", "subset") {
        None => SubsetMode::Prefix,
        Some((line, v)) => v.parse().map_err(|m: String| cfg_err(line, m))?,
    };
    let data = SyntheticTaskSpec {
        master_classes,
        master_size,
        channels,
        prototype_grid,
        groups,
        noise,
        shift_frac,
        gain,
        subset,
        seed: e.get("data", "seed", seed)?,
    };

    let base_classes = e.get("design", "base_classes", master_classes)?;
    e.require(base_classes >= 2, "design", "base_classes", "must be >= 2")?;
    let base_feature_size = e.get("design", "base_feature_size", 4usize)?;
    e.require(base_feature_size >= 1, "design", "base_feature_size", "must be >= 1")?;
    e.require(
        data.groups.iter().all(|g| g.image_size > base_feature_size),
        "design",
        "base_feature_size",
        "must be smaller than every group's image size",
    )?;
    let base_widths = e.list("design", "base_widths")?.unwrap_or_else(|| vec![8, 16, 32, 64]);
    e.require(
        !base_widths.is_empty() && base_widths.iter().all(|&w| w >= 1) && base_widths.windows(2).all(|w| w[0] <= w[1]),
        "design",
        "base_widths",
        "must be positive and non-decreasing",
    )?;
    let block = match e.raw("design", "block") {
        None => BlockKind::Plain,
        Some((line, v)) => v.parse().map_err(|m: String| cfg_err(line, m))?,
    };
    let design = DesignBase {
        base_classes,
        base_feature_size,
        base_widths,
        input_channels: channels,
        block,
    };

    let method_of = |key: &str| -> Result<Option<Vec<Method>>> {
        let Some((line, v)) = e.raw("federation", key) else { return Ok(None) };
        split_methods(v).into_iter().map(|m| m.parse().map_err(|msg: String| cfg_err(line, msg))).collect::<Result<_>>().map(Some)
    };
    let method = match method_of("method")? {
        None => Method::ScalableFl,
        Some(ms) if ms.len() == 1 => ms[0],
        Some(_) => return Err(cfg_err(e.line_of("federation", "method"), "`method` takes a single method; use `methods` for lists")),
    };
    let methods = method_of("methods")?.unwrap_or_else(|| vec![method]);
    let schedule = match e.raw("federation", "schedule") {
        None => LrSchedule::Cosine,
        Some((line, v)) => v.parse().map_err(|m: String| cfg_err(line, m))?,
    };
    let d = FedConfig::default();
    let federation = FedConfig {
        rounds: e.get("federation", "rounds", d.rounds)?,
        participation: e.get("federation", "participation", d.participation)?,
        local_steps: e.get("federation", "local_steps", d.local_steps)?,
        batch_size: e.get("federation", "batch_size", d.batch_size)?,
        lr: e.get("federation", "lr", d.lr)?,
        schedule,
        momentum: e.get("federation", "momentum", d.momentum)?,
        weight_decay: e.get("federation", "weight_decay", d.weight_decay)?,
        seed,
        method,
        local_bn: flag(&e, "federation", "local_bn", d.local_bn)?,
        local_head: flag(&e, "federation", "local_head", d.local_head)?,
        weighted: flag(&e, "federation", "weighted", d.weighted)?,
        persist_momentum: flag(&e, "federation", "persist_momentum", d.persist_momentum)?,
        eval_every: e.get("federation", "eval_every", d.eval_every)?,
        threads: e.get("federation", "threads", d.threads)?,
        wall_clock: flag(&e, "output", "wall_clock", d.wall_clock)?,
    };
    let f = &federation;
    e.require(f.rounds >= 1, "federation", "rounds", "must be >= 1")?;
    e.require(f.participation > 0.0 && f.participation <= 1.0, "federation", "participation", "must be in (0, 1]")?;
    e.require(f.local_steps >= 1, "federation", "local_steps", "must be >= 1")?;
    e.require(f.batch_size >= 1, "federation", "batch_size", "must be >= 1")?;
    e.require(f.lr > 0.0 && f.lr.is_finite(), "federation", "lr", "must be positive")?;
    e.require((0.0..1.0).contains(&f.momentum), "federation", "momentum", "must be in [0, 1)")?;
    e.require(f.weight_decay >= 0.0 && f.weight_decay.is_finite(), "federation", "weight_decay", "must be >= 0")?;
    let repeats = e.get("federation", "repeats", 1usize)?;
    e.require(repeats >= 1, "federation", "repeats", "must be >= 1")?;
    for m in &methods {
        if let Method::HeteroFl { fixed_depth } = m {
            e.require(*fixed_depth <= design.base_widths.len(), "federation", "methods", "heterofl depth exceeds the base widths")?;
        }
    }

    let output = OutputConfig {
        dir: PathBuf::from(e.get("output", "dir", "runs".to_string())?),
        checkpoints: flag(&e, "output", "checkpoints", true)?,
        wall_clock: federation.wall_clock,
    };
    Ok(ExperimentConfig {
        design,
        federation,
        methods,
        repeats,
        data,
        output,
    })
}

/// Splits on commas outside parentheses, so `heterofl(4), individual` has two items.
fn split_methods(v: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in v.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(v[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(v[start..].trim());
    out
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Canonical text form with every field spelled out.
    pub fn render(&self) -> String {
        let d = &self.design;
        let f = &self.federation;
        let s = &self.data;
        let groups: Vec<String> = s
            .groups
            .iter()
            .map(|g| format!("{}:{}:{}:{}:{}", g.image_size, g.num_classes, g.clients, g.train_per_client, g.test_per_group))
            .collect();
        let methods: Vec<String> = self.methods.iter().map(Method::name).collect();
        format!(
            "[design]\n\
             base_classes = {}\n\
             base_feature_size = {}\n\
             base_widths = {}\n\
             block = {}\n\
             \n\
             [federation]\n\
             rounds = {}\n\
             participation = {}\n\
             local_steps = {}\n\
             batch_size = {}\n\
             lr = {}\n\
             schedule = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             seed = {}\n\
             method = {}\n\
             methods = {}\n\
             repeats = {}\n\
             local_bn = {}\n\
             local_head = {}\n\
             weighted = {}\n\
             persist_momentum = {}\n\
             eval_every = {}\n\
             threads = {}\n\
             \n\
             [data]\n\
             groups = {}\n\
             master_classes = {}\n\
             master_size = {}\n\
             channels = {}\n\
             prototype_grid = {}\n\
             noise = {}\n\
             shift = {}\n\
             gain = {}\n\
             subset = {}\n\
             seed = {}\n\
             \n\
             [output]\n\
             dir = {}\n\
             checkpoints = {}\n\
             wall_clock = {}\n",
            d.base_classes,
            d.base_feature_size,
            join(&d.base_widths),
            d.block.as_str(),
            f.rounds,
            f.participation,
            f.local_steps,
            f.batch_size,
            f.lr,
            f.schedule.as_str(),
            f.momentum,
            f.weight_decay,
            f.seed,
            f.method.name(),
            methods.join(", "),
            self.repeats,
            f.local_bn,
            f.local_head,
            f.weighted,
            f.persist_momentum,
            f.eval_every,
            f.threads,
            groups.join(", "),
            s.master_classes,
            s.master_size,
            s.channels,
            s.prototype_grid,
            s.noise,
            s.shift_frac,
            s.gain,
            s.subset.as_str(),
            s.seed,
            self.output.dir.display(),
            self.output.checkpoints,
            self.output.wall_clock,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("[federation]\nseed = 7\n[data]\ngroups = 32:10\n").unwrap();
        assert_eq!(c.federation.momentum, 0.9);
        assert_eq!(c.federation.weight_decay, 5e-4);
        assert_eq!(c.federation.schedule, LrSchedule::Cosine);
        assert_eq!(c.data.seed, 7);
        assert_eq!(c.data.groups[0].clients, DEFAULT_CLIENTS);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[data]\ngroups = 32:10\n[federation]\n\nparticipation = 0\n";
        match parse_config(text) {
            Err(Error::Config { line: 5, msg }) => assert!(msg.contains("participation"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("[data]\ngroups = 32:10\ncolour = red\n"), Err(Error::Config { line: 3, .. })));
        assert!(matches!(parse_config("[data]\ngroups = 32:x\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_config("[nope]\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn method_lists_split_outside_parentheses() {
        let c = parse_config("[federation]\nmethods = scalablefl, heterofl(3), individual\n[data]\ngroups = 64:10, 32:5\n").unwrap();
        assert_eq!(c.methods, vec![Method::ScalableFl, Method::HeteroFl { fixed_depth: 3 }, Method::Individual]);
    }
}

//! The server's global parameter store, per-client corner slices and
//! element-wise aggregation.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;

use crate::arch::{ModelSpec, Role, TensorInfo};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, tensor_checksum, write_tensors, read_tensors};

/// Whether a tensor lives on the server or stays with the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    Shared,
    /// Private to each client; the server only knows its shape.
    PrivateTemplate,
}

/// Which parameter roles stay on the clients. Conv weights are always shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharingPolicy {
    pub local_bn: bool,
    pub local_head: bool,
}

impl Default for SharingPolicy {
    fn default() -> Self {
        Self {
            local_bn: true,
            local_head: true,
        }
    }
}

impl SharingPolicy {
    pub fn sharing(&self, role: Role) -> Sharing {
        let private = (role.is_bn() && self.local_bn) || (role.is_head() && self.local_head);
        if private {
            Sharing::PrivateTemplate
        } else {
            Sharing::Shared
        }
    }

    pub fn shared_tensors(&self, spec: &ModelSpec) -> Vec<TensorInfo> {
        spec.tensors()
            .into_iter()
            .filter(|t| self.sharing(t.role) == Sharing::Shared)
            .collect()
    }
}

/// Ordered name -> tensor map holding the server's shared parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorSpace {
    tensors: IndexMap<String, Tensor>,
}

impl NamedTensorSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

/// Kaiming-normal initialization of a weight: std `sqrt(2 / fan_in)` where
/// `fan_in` is the product of all but the first axis.
pub fn kaiming<R: rand::Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor {
    let fan_in: usize = dims[1..].iter().product();
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Initial value of a parameter: weights Kaiming-normal, BN scale 1, shifts and biases 0.
pub fn init_tensor<R: rand::Rng + ?Sized>(info: &TensorInfo, rng: &mut R) -> Tensor {
    match info.role {
        Role::ConvWeight | Role::HeadWeight => kaiming(&info.dims, rng),
        Role::BnScale => Tensor::full(&info.dims, 1.0),
        Role::BnShift | Role::HeadBias => Tensor::zeros(&info.dims),
    }
}

/// The global store for `spec`: one tensor per shared parameter at global dims,
/// deterministic in `seed` (each tensor draws from its own name-keyed stream).
pub fn init_global(spec: &ModelSpec, policy: SharingPolicy, seed: u64) -> NamedTensorSpace {
    let mut space = NamedTensorSpace::new();
    for info in policy.shared_tensors(spec) {
        let mut r = rng::stream(seed, "init-global", rng::name_key(&info.name), 0);
        let t = init_tensor(&info, &mut r);
        space.insert(info.name, t);
    }
    space
}

/// Each client's shared tensors and the corner dims they occupy in the global store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SliceMap {
    clients: BTreeMap<usize, Vec<(String, Vec<usize>)>>,
}

impl SliceMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a client's shared tensors; every one must fit inside the global tensor of the same name.
    pub fn register(&mut self, client_id: usize, spec: &ModelSpec, policy: SharingPolicy, space: &NamedTensorSpace) -> Result<()> {
        let mut entries = Vec::new();
        for info in policy.shared_tensors(spec) {
            let global = space
                .get(&info.name)
                .ok_or_else(|| Error::MissingTensor(info.name.clone()))?;
            let fits = global.dims().len() == info.dims.len() && global.dims().iter().zip(&info.dims).all(|(g, l)| l <= g);
            if !fits {
                return Err(Error::DimMismatch {
                    tensor: info.name,
                    client: client_id,
                    expected: global.dims().to_vec(),
                    got: info.dims,
                });
            }
            entries.push((info.name, info.dims));
        }
        self.clients.insert(client_id, entries);
        Ok(())
    }

    pub fn insert_raw(&mut self, client_id: usize, entries: Vec<(String, Vec<usize>)>) {
        self.clients.insert(client_id, entries);
    }

    pub fn get(&self, client_id: usize) -> Option<&[(String, Vec<usize>)]> {
        self.clients.get(&client_id).map(Vec::as_slice)
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.clients.keys().copied()
    }
}

/// Copies of the client's corner blocks, in slice-map order.
pub fn extract(space: &NamedTensorSpace, slices: &SliceMap, client_id: usize) -> Result<Vec<(String, Tensor)>> {
    let entries = slices.get(client_id).ok_or(Error::UnknownClient(client_id))?;
    entries
        .iter()
        .map(|(name, dims)| {
            let global = space.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            Ok((name.clone(), global.corner(dims)?))
        })
        .collect()
}

/// One client's trained shared tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub client_id: usize,
    pub tensors: Vec<(String, Tensor)>,
    /// Aggregation weight (the client's sample count) when weighting is on.
    pub weight: f64,
}

impl Update {
    pub fn new(client_id: usize, tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            client_id,
            tensors,
            weight: 1.0,
        }
    }
}

/// Validates updates against the slice map and returns them sorted by client id.
fn canonical<'a>(updates: &'a [Update], slices: &SliceMap) -> Result<Vec<&'a Update>> {
    if updates.is_empty() {
        return Err(Error::Usage("aggregation needs at least one update".into()));
    }
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Usage(format!("client {} submitted twice", pair[0].client_id)));
        }
    }
    for u in &sorted {
        let entries = slices.get(u.client_id).ok_or(Error::UnknownClient(u.client_id))?;
        let expected: BTreeMap<&str, &Vec<usize>> = entries.iter().map(|(n, d)| (n.as_str(), d)).collect();
        let mut seen = BTreeSet::new();
        for (name, t) in &u.tensors {
            let dims = expected.get(name.as_str()).ok_or_else(|| Error::DimMismatch {
                tensor: name.clone(),
                client: u.client_id,
                expected: vec![],
                got: t.dims().to_vec(),
            })?;
            if t.dims() != dims.as_slice() {
                return Err(Error::DimMismatch {
                    tensor: name.clone(),
                    client: u.client_id,
                    expected: dims.to_vec(),
                    got: t.dims().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("update of `{name}` from client {}", u.client_id),
                });
            }
            seen.insert(name.as_str());
        }
        if let Some(missing) = expected.keys().find(|n| !seen.contains(*n)) {
            return Err(Error::MissingTensor(format!("{missing} (client {})", u.client_id)));
        }
        if !(u.weight.is_finite() && u.weight > 0.0) {
            return Err(Error::Usage(format!("client {} has invalid weight {}", u.client_id, u.weight)));
        }
    }
    Ok(sorted)
}

/// Per-element accumulator: the first covering value is the reference and the
/// remaining values enter as deviations from it, so identical inputs average
/// back to exactly themselves.
#[derive(Clone, Copy, Default)]
struct Acc {
    reference: f64,
    deviation: f64,
    weight: f64,
}

impl Acc {
    #[inline]
    fn push(&mut self, value: f64, weight: f64) {
        if self.weight == 0.0 {
            self.reference = value;
        } else {
            self.deviation += weight * (value - self.reference);
        }
        self.weight += weight;
    }

    #[inline]
    fn mean(&self) -> Option<f64> {
        if self.weight == 0.0 {
            None
        } else if self.deviation == 0.0 {
            Some(self.reference)
        } else {
            Some(self.reference + self.deviation / self.weight)
        }
    }
}

/// Element-wise averaging: each global element becomes the mean over the
/// participating clients whose slice covers it (ascending client id, one
/// division). Elements no participant covers keep their value. With
/// `weighted`, clients count in proportion to [`Update::weight`].
///
/// The store is untouched when validation fails.
pub fn aggregate(space: &mut NamedTensorSpace, updates: &[Update], slices: &SliceMap, weighted: bool) -> Result<()> {
    let sorted = canonical(updates, slices)?;
    let names: Vec<String> = space.names().map(str::to_owned).collect();
    for name in names {
        let global = space.get_mut(&name).expect("name taken from the store");
        let gdims = global.dims().to_vec();
        let mut acc = vec![Acc::default(); global.numel()];
        for u in &sorted {
            let Some((_, t)) = u.tensors.iter().find(|(n, _)| *n == name) else { continue };
            let w = if weighted { u.weight } else { 1.0 };
            let data = t.data();
            crate::tensor::for_each_corner_run(&gdims, t.dims(), |outer, inner, len| {
                for k in 0..len {
                    acc[outer + k].push(data[inner + k], w);
                }
            });
        }
        for (v, a) in global.data_mut().iter_mut().zip(&acc) {
            if let Some(m) = a.mean() {
                *v = m;
            }
        }
    }
    Ok(())
}

/// Classical FedAvg for homogeneous clients: every update covers every global
/// tensor in full, and each element is averaged over all `|S|` participants.
pub fn fedavg(space: &mut NamedTensorSpace, updates: &[Update], weighted: bool) -> Result<()> {
    let mut full = SliceMap::new();
    for u in updates {
        full.insert_raw(
            u.client_id,
            space.iter().map(|(n, t)| (n.to_owned(), t.dims().to_vec())).collect(),
        );
    }
    let sorted = canonical(updates, &full)?;
    let total: f64 = sorted.iter().map(|u| if weighted { u.weight } else { 1.0 }).sum();
    let names: Vec<String> = space.names().map(str::to_owned).collect();
    for name in names {
        let global = space.get_mut(&name).expect("name taken from the store");
        let columns: Vec<&[f64]> = sorted
            .iter()
            .map(|u| u.tensors.iter().find(|(n, _)| *n == name).expect("validated").1.data())
            .collect();
        for (i, v) in global.data_mut().iter_mut().enumerate() {
            let reference = columns[0][i];
            let mut deviation = 0.0;
            for (u, col) in sorted.iter().zip(&columns).skip(1) {
                let w = if weighted { u.weight } else { 1.0 };
                deviation += w * (col[i] - reference);
            }
            *v = if deviation == 0.0 { reference } else { reference + deviation / total };
        }
    }
    Ok(())
}

//! Deterministic synthetic image-classification tasks with per-group image
//! sizes and nested label sets.
//!
//! Every master class owns a smooth prototype image at the master resolution.
//! A sample is its class prototype, circularly shifted, scaled per channel,
//! perturbed with Gaussian pixel noise, clamped to `[0, 1]` and then
//! area-downsampled to the group's resolution.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::arch::GroupId;
use crate::error::{Error, Result};
use crate::params::{read_tensors, write_tensors};
use crate::rng;
use crate::tensor::Tensor;

/// How a group's labels map onto master classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetMode {
    /// Group label `l` is master class `l`, so label sets are nested prefixes.
    Prefix,
    /// Each group draws its own random subset of master classes.
    Random,
}

impl SubsetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetMode::Prefix => "prefix",
            SubsetMode::Random => "random",
        }
    }
}

impl std::str::FromStr for SubsetMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prefix" => Ok(SubsetMode::Prefix),
            "random" => Ok(SubsetMode::Random),
            other => Err(format!("unknown subset mode `{other}` (expected prefix or random)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub clients: usize,
    pub train_per_client: usize,
    pub test_per_group: usize,
}

impl GroupSpec {
    pub fn id(&self) -> GroupId {
        GroupId {
            image_size: self.image_size,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub master_classes: usize,
    pub master_size: usize,
    pub channels: usize,
    /// Side of the coarse random grid each prototype is upsampled from.
    pub prototype_grid: usize,
    pub groups: Vec<GroupSpec>,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Maximum circular shift as a fraction of the master size.
    pub shift_frac: f64,
    /// Per-channel gain is drawn from `[1 - gain, 1 + gain]`.
    pub gain: f64,
    pub subset: SubsetMode,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Data(m));
        if self.groups.is_empty() {
            return err("at least one group is required".into());
        }
        if self.master_classes < 2 || self.channels == 0 || self.prototype_grid == 0 {
            return err("master classes must be >= 2 and channels, prototype grid >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=0.5).contains(&self.shift_frac) || !(0.0..1.0).contains(&self.gain) {
            return err("noise must be >= 0, shift in [0, 0.5], gain in [0, 1)".into());
        }
        for (g, grp) in self.groups.iter().enumerate() {
            if grp.num_classes < 2 || grp.num_classes > self.master_classes {
                return err(format!("group {g}: {} classes outside 2..={}", grp.num_classes, self.master_classes));
            }
            if grp.image_size == 0 || grp.image_size > self.master_size || !self.master_size.is_multiple_of(grp.image_size) {
                return err(format!(
                    "group {g}: image size {} must divide master size {}",
                    grp.image_size, self.master_size
                ));
            }
            if grp.clients == 0 {
                return err(format!("group {g}: no clients"));
            }
            if grp.train_per_client < grp.num_classes {
                return err(format!(
                    "group {g}: {} samples per client cannot balance {} classes",
                    grp.train_per_client, grp.num_classes
                ));
            }
            if grp.test_per_group == 0 {
                return err(format!("group {g}: empty test set"));
            }
        }
        let ordered = self
            .groups
            .windows(2)
            .all(|w| w[0].image_size >= w[1].image_size && w[0].num_classes >= w[1].num_classes);
        if !ordered {
            return err("groups must be ordered by non-increasing image size and category count".into());
        }
        Ok(())
    }
}

/// Images `[n, C, H, W]` with labels and provenance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub group: GroupId,
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Unique per generated sample; train and test ids never collide.
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.group.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.group.num_classes
    }

    fn sample_len(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut dims = self.images.dims().to_vec();
        dims[0] = indices.len();
        Ok((Tensor::new(dims, data)?, labels))
    }

    /// Hex SHA-256 prefix over images (as f64 bits) and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        update_hash(&mut h, self);
        hex(&h.finalize())
    }

    /// Writes `<stem>.sfl` (tensor `images`) and `<stem>.labels` (u32 little-endian).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let images = dir.join(format!("{stem}.sfl"));
        let bytes = write_tensors([("images", &self.images)])?;
        fs::write(&images, bytes).map_err(|e| Error::io(&images, e))?;
        let labels = dir.join(format!("{stem}.labels"));
        let mut raw = Vec::with_capacity(4 * self.len());
        for &l in &self.labels {
            raw.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(&labels, raw).map_err(|e| Error::io(&labels, e))
    }

    /// Reads a dataset written by [`Dataset::export`]. Ids are renumbered from 0.
    pub fn import(dir: &Path, stem: &str, group: GroupId) -> Result<Self> {
        let images = dir.join(format!("{stem}.sfl"));
        let bytes = fs::read(&images).map_err(|e| Error::io(&images, e))?;
        let mut tensors = read_tensors(&bytes)?;
        if tensors.len() != 1 || tensors[0].0 != "images" || tensors[0].1.dims().len() != 4 {
            return Err(Error::Data(format!("{} does not hold a single 4-axis `images` tensor", images.display())));
        }
        let images_t = tensors.pop().expect("one tensor").1;
        let labels_path = dir.join(format!("{stem}.labels"));
        let raw = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        if raw.len() % 4 != 0 || raw.len() / 4 != images_t.dims()[0] {
            return Err(Error::Data(format!("{} does not match {} images", labels_path.display(), images_t.dims()[0])));
        }
        let labels: Vec<usize> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= group.num_classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", group.num_classes)));
        }
        let ids = (0..labels.len() as u64).collect();
        Ok(Self {
            group,
            images: images_t,
            labels,
            ids,
        })
    }
}

fn update_hash(h: &mut Sha256, d: &Dataset) {
    for &v in d.images.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    for &l in &d.labels {
        h.update((l as u64).to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub group: usize,
    pub train: Dataset,
}

/// Output of [`generate`]: per-client training sets and per-group test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub clients: Vec<ClientData>,
    pub tests: Vec<Dataset>,
    /// Master class index of each group label.
    pub class_maps: Vec<Vec<usize>>,
}

impl TaskData {
    /// One checksum over every split, in client then group order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clients {
            update_hash(&mut h, &c.train);
        }
        for t in &self.tests {
            update_hash(&mut h, t);
        }
        hex(&h.finalize())
    }
}

const SPLIT_TEST: u64 = 1 << 63;

fn provenance(test: bool, group: usize, client: usize, index: usize) -> u64 {
    let split = if test { SPLIT_TEST } else { 0 };
    split | ((group as u64) << 48) | ((client as u64) << 32) | index as u64
}

/// Smooth prototype `[C, H, W]` for master class `class`: a coarse uniform
/// grid bilinearly upsampled to the master size.
pub fn prototype(spec: &SyntheticTaskSpec, class: usize) -> Tensor {
    let g = spec.prototype_grid;
    let h = spec.master_size;
    let mut r = rng::stream(spec.seed, "prototype", class as u64, 0);
    let coarse: Vec<f64> = (0..spec.channels * g * g).map(|_| r.random::<f64>()).collect();
    // sample positions are pixel centres mapped onto the grid, clamped at the borders
    let coord = |p: usize| -> (usize, usize, f64) {
        let x = ((p as f64 + 0.5) * g as f64 / h as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(g - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; spec.channels * h * h];
    for c in 0..spec.channels {
        let grid = &coarse[c * g * g..(c + 1) * g * g];
        for y in 0..h {
            let (y0, y1, fy) = coord(y);
            for x in 0..h {
                let (x0, x1, fx) = coord(x);
                let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
                let bottom = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
                out[(c * h + y) * h + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![spec.channels, h, h], out).expect("prototype dims")
}

/// Area-mean downsampling of the last two (square) axes from `from` to `to`.
pub fn downsample(image: &Tensor, to: usize) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() < 2 {
        return Err(Error::Data("downsample needs at least two axes".into()));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h != w {
        return Err(Error::Data(format!("downsample needs square images, got {h}x{w}")));
    }
    if to == 0 || h % to != 0 {
        return Err(Error::Data(format!("cannot downsample {h} to {to}: not a divisor")));
    }
    if to == h {
        return Ok(image.clone());
    }
    let f = h / to;
    let planes = image.numel() / (h * w);
    let inv = 1.0 / (f * f) as f64;
    let src = image.data();
    let mut out = vec![0.0; planes * to * to];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..to {
            for ox in 0..to {
                let mut s = 0.0;
                for dy in 0..f {
                    let row = &plane[(oy * f + dy) * w + ox * f..(oy * f + dy) * w + ox * f + f];
                    s += row.iter().sum::<f64>();
                }
                out[(p * to + oy) * to + ox] = s * inv;
            }
        }
    }
    let mut new_dims = dims.to_vec();
    let n = new_dims.len();
    new_dims[n - 2] = to;
    new_dims[n - 1] = to;
    Tensor::new(new_dims, out)
}

/// Nearest-neighbour upsampling of the last two (square) axes by an integer factor.
pub fn upsample(image: &Tensor, to: usize) -> Result<Tensor> {
    let dims = image.dims();
    if dims.len() < 2 {
        return Err(Error::Data("upsample needs at least two axes".into()));
    }
    let h = dims[dims.len() - 1];
    if dims[dims.len() - 2] != h || !to.is_multiple_of(h) {
        return Err(Error::Data(format!("cannot upsample {h} to {to}")));
    }
    let f = to / h;
    let planes = image.numel() / (h * h);
    let src = image.data();
    let mut out = Vec::with_capacity(planes * to * to);
    for p in 0..planes {
        for y in 0..to {
            let row = &src[(p * h + y / f) * h..(p * h + y / f + 1) * h];
            out.extend((0..to).map(|x| row[x / f]));
        }
    }
    let mut new_dims = dims.to_vec();
    let n = new_dims.len();
    new_dims[n - 2] = to;
    new_dims[n - 1] = to;
    Tensor::new(new_dims, out)
}

fn class_maps(spec: &SyntheticTaskSpec) -> Vec<Vec<usize>> {
    spec.groups
        .iter()
        .enumerate()
        .map(|(g, grp)| match spec.subset {
            SubsetMode::Prefix => (0..grp.num_classes).collect(),
            SubsetMode::Random => {
                let mut all: Vec<usize> = (0..spec.master_classes).collect();
                all.shuffle(&mut rng::stream(spec.seed, "class-subset", g as u64, 0));
                all.truncate(grp.num_classes);
                all
            }
        })
        .collect()
}

/// One jittered, noisy sample of `proto` at the master size.
fn render_sample<R: Rng>(spec: &SyntheticTaskSpec, proto: &Tensor, r: &mut R, out: &mut [f64]) {
    let h = spec.master_size;
    let max_shift = (spec.shift_frac * h as f64).floor() as i64;
    let dy = r.random_range(-max_shift..=max_shift);
    let dx = r.random_range(-max_shift..=max_shift);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let src = proto.data();
    for c in 0..spec.channels {
        let gain = r.random_range(1.0 - spec.gain..=1.0 + spec.gain);
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            for x in 0..h {
                let sx = (x as i64 - dx).rem_euclid(h as i64) as usize;
                let v = gain * src[(c * h + sy) * h + sx] + noise.sample(r);
                out[(c * h + y) * h + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn render_set(
    spec: &SyntheticTaskSpec,
    protos: &[Tensor],
    class_map: &[usize],
    group: usize,
    stream_key: u64,
    test: bool,
    n: usize,
) -> Result<Dataset> {
    let grp = &spec.groups[group];
    let master = spec.channels * spec.master_size * spec.master_size;
    let mut r = rng::stream(spec.seed, if test { "test-samples" } else { "train-samples" }, group as u64, stream_key);
    let mut raw = vec![0.0; n * master];
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % grp.num_classes;
        render_sample(spec, &protos[class_map[label]], &mut r, &mut raw[i * master..(i + 1) * master]);
        labels.push(label);
        ids.push(provenance(test, group, stream_key as usize, i));
    }
    let full = Tensor::new(vec![n, spec.channels, spec.master_size, spec.master_size], raw)?;
    Ok(Dataset {
        group: grp.id(),
        images: downsample(&full, grp.image_size)?,
        labels,
        ids,
    })
}

/// Generates every client's training set and every group's test set.
/// Client ids are assigned consecutively in group order.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let maps = class_maps(spec);
    let protos: Vec<Tensor> = (0..spec.master_classes).map(|k| prototype(spec, k)).collect();
    let mut clients = Vec::new();
    let mut tests = Vec::new();
    for (g, grp) in spec.groups.iter().enumerate() {
        for c in 0..grp.clients {
            let train = render_set(spec, &protos, &maps[g], g, c as u64, false, grp.train_per_client)?;
            clients.push(ClientData {
                client_id: clients.len(),
                group: g,
                train,
            });
        }
        tests.push(render_set(spec, &protos, &maps[g], g, 0, true, grp.test_per_group)?);
    }
    Ok(TaskData {
        clients,
        tests,
        class_maps: maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            master_classes: 4,
            master_size: 8,
            channels: 2,
            prototype_grid: 3,
            groups: vec![
                GroupSpec {
                    image_size: 8,
                    num_classes: 4,
                    clients: 2,
                    train_per_client: 9,
                    test_per_group: 8,
                },
                GroupSpec {
                    image_size: 4,
                    num_classes: 2,
                    clients: 1,
                    train_per_client: 4,
                    test_per_group: 4,
                },
            ],
            noise,
            shift_frac: 0.1,
            gain: 0.2,
            subset: SubsetMode::Prefix,
            seed: 3,
        }
    }

    #[test]
    fn two_by_two_block_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(downsample(&t, 1).unwrap().data(), &[0.5]);
        assert!(downsample(&t, 3).is_err());
    }

    #[test]
    fn shapes_ids_and_balance() {
        let d = generate(&tiny(0.1)).unwrap();
        assert_eq!(d.clients.len(), 3);
        assert_eq!(d.clients[0].train.images.dims(), &[9, 2, 8, 8]);
        assert_eq!(d.clients[2].train.images.dims(), &[4, 2, 4, 4]);
        let mut counts = [0; 4];
        d.clients[0].train.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let mut ids: Vec<u64> = d.clients.iter().flat_map(|c| c.train.ids.clone()).collect();
        ids.extend(d.tests.iter().flat_map(|t| t.ids.clone()));
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(d.clients.iter().all(|c| c.train.images.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn unbalanceable_client_is_rejected() {
        let mut s = tiny(0.1);
        s.groups[0].train_per_client = 3;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let d = generate(&tiny(0.0)).unwrap();
        let t = &d.tests[0];
        let (x, y) = t.batch(&[3, 1]).unwrap();
        assert_eq!(x.dims(), &[2, 2, 8, 8]);
        assert_eq!(y, vec![t.labels[3], t.labels[1]]);
        assert_eq!(&x.data()[..128], &t.images.data()[3 * 128..4 * 128]);
        assert!(t.batch(&[99]).is_err());
    }
}

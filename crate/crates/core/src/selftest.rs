//! Checks runnable from the command line: reference architecture tables and
//! the slicing/aggregation oracles.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{channel_ratio, design_global, design_heterofl_baseline, design_local, stage_count, BlockKind, ClientProfile, DesignBase};
use crate::params::{aggregate, extract, NamedTensorSpace, SliceMap, Update};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name,
        passed,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

fn expect<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, expected {want:?}"))
    }
}

/// The ImageNet-style profiles: sizes 256/192/128/96 with 1000/500/200/100 classes.
pub fn imagenet_profiles() -> Vec<ClientProfile> {
    [(256, 1000), (192, 500), (128, 200), (96, 100)]
        .iter()
        .enumerate()
        .map(|(i, &(h, k))| ClientProfile::new(i, h, k, 1))
        .collect()
}

/// Residual base with a stem of 64 channels followed by four stages of 64/128/256/512.
pub fn imagenet_base() -> DesignBase {
    DesignBase {
        base_classes: 1000,
        base_feature_size: 8,
        base_widths: vec![64, 64, 128, 256, 512],
        input_channels: 3,
        block: BlockKind::ResidualPair,
    }
}

fn imagenet_table() -> Result<String, String> {
    let base = imagenet_base();
    let want_stages = [5, 5, 4, 4];
    let want_ratio = ["1.00", "0.90", "0.77", "0.67"];
    let want_widths: [&[usize]; 4] = [&[64, 64, 128, 256, 512], &[58, 58, 116, 231, 461], &[50, 50, 99, 197], &[43, 43, 86, 171]];
    for (i, p) in imagenet_profiles().iter().enumerate() {
        let s = design_local(p, &base).map_err(|e| e.to_string())?;
        expect(&format!("stages of H={}", p.image_size), s.depth(), want_stages[i])?;
        expect(&format!("ratio of K={}", p.num_classes), format!("{:.2}", s.width_ratio).as_str(), want_ratio[i])?;
        expect(&format!("widths of K={}", p.num_classes), s.widths().as_slice(), want_widths[i])?;
    }
    Ok("stages 5/5/4/4, ratios 1.00/0.90/0.77/0.67, all widths match".into())
}

fn detection_stages() -> Result<String, String> {
    expect("stages of 512 over 4", stage_count(512, 4).map_err(|e| e.to_string())?, 7)?;
    expect("stages of 256 over 4", stage_count(256, 4).map_err(|e| e.to_string())?, 6)?;
    let r = channel_ratio(20, 80).map_err(|e| e.to_string())?;
    expect("ratio of 20 over 80 classes", format!("{r:.2}").as_str(), "0.68")?;
    Ok("stages 7/6".into())
}

fn three_client_example() -> Result<String, String> {
    let base = DesignBase {
        base_classes: 10,
        base_feature_size: 8,
        base_widths: vec![32, 64, 128, 256],
        input_channels: 3,
        block: BlockKind::Plain,
    };
    let profiles = [ClientProfile::new(1, 128, 10, 1), ClientProfile::new(2, 64, 5, 1), ClientProfile::new(3, 32, 2, 1)];
    let depths: Vec<usize> = profiles
        .iter()
        .map(|p| design_local(p, &base).map(|s| s.depth()))
        .collect::<crate::Result<_>>()
        .map_err(|e| e.to_string())?;
    expect("depths", depths, vec![4, 3, 2])?;
    let g = design_global(&profiles, &base).map_err(|e| e.to_string())?;
    expect("global widths", g.widths(), vec![32, 64, 128, 256])?;
    Ok("depths 4/3/2, global 32/64/128/256".into())
}

fn heterofl_ratio() -> Result<String, String> {
    let specs = design_heterofl_baseline(&imagenet_profiles(), &imagenet_base(), 4).map_err(|e| e.to_string())?;
    let r = specs[0].width_ratio;
    if (r - 2.0).abs() <= 0.1 {
        Ok(format!("four-stage ratio {r:.3}"))
    } else {
        Err(format!("four-stage ratio {r:.3} is not within 0.1 of 2.0"))
    }
}

/// A random family of nested corner slices with one update per client.
pub fn random_family(seed: u64, max_clients: usize, max_dim: usize) -> (NamedTensorSpace, SliceMap, Vec<Update>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut space = NamedTensorSpace::new();
    for k in 0..r.random_range(1..4) {
        let dims = vec![r.random_range(1..=max_dim), r.random_range(1..=max_dim), 3, 3];
        space.insert(format!("t{k}"), Tensor::randn(&dims, 1.0, &mut r));
    }
    let mut slices = SliceMap::new();
    let mut updates = Vec::new();
    for id in 0..r.random_range(1..=max_clients) {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (name, g) in space.iter() {
            let dims: Vec<usize> = g.dims().iter().enumerate().map(|(a, &d)| if a < 2 { r.random_range(1..=d) } else { d }).collect();
            tensors.push((name.to_owned(), Tensor::randn(&dims, 1.0, &mut r)));
            entries.push((name.to_owned(), dims));
        }
        slices.insert_raw(id, entries);
        updates.push(Update::new(id, tensors));
    }
    (space, slices, updates)
}

/// Per element: the first covering client's value plus the mean deviation of
/// all covering clients from it, clients in ascending id order.
pub fn brute_force_aggregate(space: &NamedTensorSpace, updates: &[Update]) -> NamedTensorSpace {
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut out = space.clone();
    for (name, g) in space.iter() {
        let d = g.dims().to_vec();
        let t = out.get_mut(name).expect("same names");
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    for l in 0..d[3] {
                        let vals: Vec<f64> = sorted
                            .iter()
                            .filter_map(|u| u.tensors.iter().find(|(n, _)| n == name))
                            .filter(|(_, lt)| i < lt.dims()[0] && j < lt.dims()[1])
                            .map(|(_, lt)| lt.get(&[i, j, k, l]))
                            .collect();
                        if vals.is_empty() {
                            continue;
                        }
                        let mut dev = 0.0;
                        for v in &vals[1..] {
                            dev += v - vals[0];
                        }
                        let v = if dev == 0.0 { vals[0] } else { vals[0] + dev / vals.len() as f64 };
                        t.set(&[i, j, k, l], v);
                    }
                }
            }
        }
    }
    out
}

fn aggregation_oracle(families: u64) -> Result<String, String> {
    for seed in 0..families {
        let (space, slices, updates) = random_family(seed, 6, 32);
        let mut fast = space.clone();
        aggregate(&mut fast, &updates, &slices, false).map_err(|e| e.to_string())?;
        if fast != brute_force_aggregate(&space, &updates) {
            return Err(format!("family {seed}: aggregate differs from the per-element oracle"));
        }
        let unchanged: Vec<Update> = slices
            .clients()
            .map(|id| extract(&space, &slices, id).map(|t| Update::new(id, t)))
            .collect::<crate::Result<_>>()
            .map_err(|e| e.to_string())?;
        let mut same = space.clone();
        aggregate(&mut same, &unchanged, &slices, false).map_err(|e| e.to_string())?;
        if same != space {
            return Err(format!("family {seed}: extract then aggregate is not the identity"));
        }
    }
    Ok(format!("{families} families bit-exact, identity holds"))
}

/// Runs every check.
pub fn run_selftest() -> Vec<Check> {
    vec![
        check("imagenet architecture table", imagenet_table),
        check("detection stage counts", detection_stages),
        check("three-client example", three_client_example),
        check("heterofl parameter parity", heterofl_ratio),
        check("slicing and aggregation oracle", || aggregation_oracle(200)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_checks_pass() {
        for c in [check("t", imagenet_table), check("d", detection_stages), check("f", three_client_example), check("h", heterofl_ratio)] {
            assert!(c.passed, "{}", c.detail);
        }
        assert!(check("a", || aggregation_oracle(5)).passed);
    }
}

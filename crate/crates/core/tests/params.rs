//! Slicing and aggregation against a brute-force per-element oracle.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalefl::params::{aggregate, extract, fedavg, NamedTensorSpace, SliceMap, Update};
use scalefl::Tensor;

/// Mean over covering clients of one element, with the same reference-shift
/// arithmetic the store promises: first covering value plus the mean of the
/// remaining deviations, clients in ascending id order.
fn oracle_mean(values: &[f64]) -> f64 {
    let reference = values[0];
    let mut dev = 0.0;
    for v in &values[1..] {
        dev += v - reference;
    }
    if dev == 0.0 {
        reference
    } else {
        reference + dev / values.len() as f64
    }
}

/// Loops over every (element, client) pair of every tensor.
fn brute_force(space: &NamedTensorSpace, updates: &[Update]) -> NamedTensorSpace {
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let mut out = space.clone();
    for (name, global) in space.iter() {
        let dims = global.dims().to_vec();
        let t = out.get_mut(name).unwrap();
        for flat in 0..global.numel() {
            // unflatten
            let mut idx = vec![0; dims.len()];
            let mut rem = flat;
            for a in (0..dims.len()).rev() {
                idx[a] = rem % dims[a];
                rem /= dims[a];
            }
            let mut covering = Vec::new();
            for u in &sorted {
                if let Some((_, local)) = u.tensors.iter().find(|(n, _)| n == name) {
                    if idx.iter().zip(local.dims()).all(|(i, d)| i < d) {
                        covering.push(local.get(&idx));
                    }
                }
            }
            if !covering.is_empty() {
                t.data_mut()[flat] = oracle_mean(&covering);
            }
        }
    }
    out
}

fn single(name: &str, t: Tensor) -> NamedTensorSpace {
    let mut s = NamedTensorSpace::new();
    s.insert(name, t);
    s
}

#[test]
fn extract_takes_the_corner() {
    let space = single("w", Tensor::from_fn(&[4, 4], |i| i as f64));
    let mut slices = SliceMap::new();
    slices.insert_raw(0, vec![("w".into(), vec![2, 2])]);
    slices.insert_raw(1, vec![("w".into(), vec![4, 4])]);
    let w0 = extract(&space, &slices, 0).unwrap();
    assert_eq!(w0[0].1.data(), &[0.0, 1.0, 4.0, 5.0]);
    let w1 = extract(&space, &slices, 1).unwrap();
    assert_eq!(&w1[0].1, space.get("w").unwrap());
    assert!(extract(&space, &slices, 9).is_err());
}

#[test]
fn per_element_count_semantics() {
    let space = single("w", Tensor::full(&[3, 3], 10.0));
    let mut slices = SliceMap::new();
    slices.insert_raw(0, vec![("w".into(), vec![2, 2])]);
    slices.insert_raw(1, vec![("w".into(), vec![1, 1])]);
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let mut updated = space.clone();
    aggregate(
        &mut updated,
        &[Update::new(1, vec![("w".into(), b)]), Update::new(0, vec![("w".into(), a)])],
        &slices,
        false,
    )
    .unwrap();
    let w = updated.get("w").unwrap();
    assert_eq!(w.get(&[0, 0]), (1.0 + 2.0) / 2.0);
    assert_eq!(w.get(&[0, 1]), 2.0);
    assert_eq!(w.get(&[1, 0]), 3.0);
    assert_eq!(w.get(&[1, 1]), 4.0);
    assert_eq!(w.get(&[2, 2]), 10.0);
    assert_eq!(w.get(&[0, 2]), 10.0);
}

#[test]
fn single_full_participant_replaces_global() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut space = single("w", Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
    let mut slices = SliceMap::new();
    slices.insert_raw(4, vec![("w".into(), vec![3, 2, 3, 3])]);
    let new = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    aggregate(&mut space, &[Update::new(4, vec![("w".into(), new.clone())])], &slices, false).unwrap();
    assert_eq!(space.get("w").unwrap(), &new);
}

#[test]
fn invalid_updates_leave_the_store_untouched() {
    let space = single("w", Tensor::full(&[2, 2], 1.0));
    let mut slices = SliceMap::new();
    slices.insert_raw(0, vec![("w".into(), vec![2, 2])]);
    let mut s = space.clone();
    let wrong = Tensor::full(&[1, 2], 0.0);
    let err = aggregate(&mut s, &[Update::new(0, vec![("w".into(), wrong)])], &slices, false).unwrap_err();
    assert!(err.to_string().contains("`w`") && err.to_string().contains("client 0"), "{err}");
    let nan = Tensor::new(vec![2, 2], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
    assert!(aggregate(&mut s, &[Update::new(0, vec![("w".into(), nan)])], &slices, false).is_err());
    assert!(aggregate(&mut s, &[], &slices, false).is_err());
    assert_eq!(s, space);
}

#[test]
fn weighted_mean_uses_sample_counts() {
    let space = single("w", Tensor::zeros(&[1]));
    let mut slices = SliceMap::new();
    slices.insert_raw(0, vec![("w".into(), vec![1])]);
    slices.insert_raw(1, vec![("w".into(), vec![1])]);
    let mut s = space.clone();
    let mut a = Update::new(0, vec![("w".into(), Tensor::full(&[1], 1.0))]);
    a.weight = 3.0;
    let mut b = Update::new(1, vec![("w".into(), Tensor::full(&[1], 5.0))]);
    b.weight = 1.0;
    aggregate(&mut s, &[a, b], &slices, true).unwrap();
    assert_eq!(s.get("w").unwrap().data(), &[2.0]);
}

/// A random family of nested slices over a set of global tensors.
#[derive(Debug, Clone)]
struct Family {
    space: NamedTensorSpace,
    slices: SliceMap,
    updates: Vec<Update>,
}

fn random_family(seed: u64, max_clients: usize, max_dim: usize) -> Family {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut space = NamedTensorSpace::new();
    let ntensors = r.random_range(1..4);
    for k in 0..ntensors {
        let dims = vec![r.random_range(1..=max_dim), r.random_range(1..=max_dim), 3, 3];
        space.insert(format!("t{k}"), Tensor::randn(&dims, 1.0, &mut r));
    }
    let mut slices = SliceMap::new();
    let nclients = r.random_range(1..=max_clients);
    let mut updates = Vec::new();
    let mut ids: Vec<usize> = (0..nclients).map(|i| i * 3 + r.random_range(0..3)).collect();
    ids.reverse();
    for &id in &ids {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (name, g) in space.iter() {
            // some clients skip deeper tensors entirely
            if r.random_bool(0.2) {
                continue;
            }
            let dims: Vec<usize> = g.dims().iter().enumerate().map(|(a, &d)| if a < 2 { r.random_range(1..=d) } else { d }).collect();
            tensors.push((name.to_owned(), Tensor::randn(&dims, 1.0, &mut r)));
            entries.push((name.to_owned(), dims));
        }
        slices.insert_raw(id, entries);
        updates.push(Update::new(id, tensors));
    }
    Family { space, slices, updates }
}

#[test]
fn aggregate_matches_brute_force_on_random_families() {
    for seed in 0..50 {
        let f = random_family(seed, 5, 16);
        let mut fast = f.space.clone();
        aggregate(&mut fast, &f.updates, &f.slices, false).unwrap();
        assert_eq!(fast, brute_force(&f.space, &f.updates), "seed {seed}");
    }
}

#[test]
fn five_clients_on_a_16x16_tensor() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let space = single("w", Tensor::randn(&[16, 16, 3, 3], 1.0, &mut r));
    let mut slices = SliceMap::new();
    let mut updates = Vec::new();
    for id in 0..5 {
        let dims = vec![r.random_range(1..=16), r.random_range(1..=16), 3, 3];
        slices.insert_raw(id, vec![("w".into(), dims.clone())]);
        updates.push(Update::new(id, vec![("w".into(), Tensor::randn(&dims, 1.0, &mut r))]));
    }
    let mut fast = space.clone();
    aggregate(&mut fast, &updates, &slices, false).unwrap();
    assert_eq!(fast, brute_force(&space, &updates));
}

#[test]
fn flat_fedavg_matches_element_wise_for_equal_shapes() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let space = single("w", Tensor::randn(&[6, 4, 3, 3], 1.0, &mut r));
    let mut slices = SliceMap::new();
    let mut updates = Vec::new();
    for id in [3, 1, 2] {
        slices.insert_raw(id, vec![("w".into(), vec![6, 4, 3, 3])]);
        updates.push(Update::new(id, vec![("w".into(), Tensor::randn(&[6, 4, 3, 3], 1.0, &mut r))]));
    }
    let mut a = space.clone();
    aggregate(&mut a, &updates, &slices, false).unwrap();
    let mut b = space.clone();
    fedavg(&mut b, &updates, false).unwrap();
    assert_eq!(a, b);
    // divisor is |S| everywhere: compare with a direct three-way mean
    let w = a.get("w").unwrap();
    for i in 0..w.numel() {
        let vals: Vec<f64> = [1, 2, 3]
            .iter()
            .map(|id| updates.iter().find(|u| u.client_id == *id).unwrap().tensors[0].1.data()[i])
            .collect();
        let plain = (vals[0] + vals[1] + vals[2]) / 3.0;
        assert!((w.data()[i] - plain).abs() <= 4.0 * f64::EPSILON * plain.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Aggregating unmodified extracts of any subset leaves the store bit-identical.
    #[test]
    fn extract_then_aggregate_is_identity(seed in 0u64..10_000) {
        let f = random_family(seed, 6, 12);
        let subset: Vec<usize> = f.slices.clients().filter(|id| (seed >> (id % 7)) & 1 == 0 || *id == 0).collect();
        let updates: Vec<Update> = f.slices.clients()
            .filter(|id| subset.contains(id) || subset.is_empty())
            .map(|id| Update::new(id, extract(&f.space, &f.slices, id).unwrap()))
            .collect();
        prop_assume!(!updates.is_empty());
        let mut s = f.space.clone();
        aggregate(&mut s, &updates, &f.slices, false).unwrap();
        prop_assert_eq!(s, f.space);
    }

    #[test]
    fn aggregation_is_order_independent(seed in 0u64..10_000, rot in 0usize..6) {
        let f = random_family(seed, 6, 10);
        let mut a = f.space.clone();
        aggregate(&mut a, &f.updates, &f.slices, false).unwrap();
        let mut shuffled = f.updates.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let mut b = f.space.clone();
        aggregate(&mut b, &shuffled, &f.slices, false).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Corner extraction never reads outside the global tensor and returns exactly its values.
    #[test]
    fn extract_stays_inside_global_dims(seed in 0u64..10_000) {
        let f = random_family(seed, 6, 12);
        for id in f.slices.clients() {
            for (name, t) in extract(&f.space, &f.slices, id).unwrap() {
                let g = f.space.get(&name).unwrap();
                prop_assert!(t.dims().iter().zip(g.dims()).all(|(a, b)| a <= b));
                let d = t.dims().to_vec();
                for i in 0..d[0] { for j in 0..d[1] { for k in 0..3 { for l in 0..3 {
                    prop_assert_eq!(t.get(&[i, j, k, l]), g.get(&[i, j, k, l]));
                }}}}
            }
        }
    }

    /// Uniform shifts: every covered element moves by the mean of its covering deltas.
    #[test]
    fn covered_elements_move_by_mean_delta(seed in 0u64..10_000) {
        let f = random_family(seed, 5, 8);
        let deltas: Vec<f64> = (0..f.updates.len()).map(|i| 0.25 * (i as f64 + 1.0)).collect();
        let updates: Vec<Update> = f.updates.iter().zip(&deltas).map(|(u, d)| {
            let mut e = extract(&f.space, &f.slices, u.client_id).unwrap();
            for (_, t) in &mut e { t.data_mut().iter_mut().for_each(|v| *v += d); }
            Update::new(u.client_id, e)
        }).collect();
        let mut s = f.space.clone();
        aggregate(&mut s, &updates, &f.slices, false).unwrap();
        for (name, g) in f.space.iter() {
            let new = s.get(name).unwrap();
            for i in 0..g.dims()[0] { for j in 0..g.dims()[1] {
                let covering: Vec<f64> = updates.iter().zip(&deltas).filter(|(u, _)| {
                    u.tensors.iter().any(|(n, t)| n == name && i < t.dims()[0] && j < t.dims()[1])
                }).map(|(_, d)| *d).collect();
                let moved = new.get(&[i, j, 0, 0]) - g.get(&[i, j, 0, 0]);
                if covering.is_empty() {
                    prop_assert_eq!(moved, 0.0);
                } else {
                    let want = covering.iter().sum::<f64>() / covering.len() as f64;
                    prop_assert!((moved - want).abs() < 1e-12, "{} vs {}", moved, want);
                }
            }}
        }
    }
}

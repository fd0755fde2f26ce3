use std::collections::{BTreeMap, HashMap};

use batchstore_core::model::{ExecutionId, ObjectRef};
use batchstore_core::placement::{
    hash_parts, owner_of, partition_entries, select_dt_colocated, select_dt_default, ClusterMap,
    NodeId, NodeInfo, Role,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn node(id: &str, role: Role) -> NodeInfo {
    NodeInfo {
        id: NodeId::new(id),
        endpoint: format!("{id}:1"),
        peer: format!("{id}:2"),
        role,
    }
}

fn map_of(ids: &[String]) -> ClusterMap {
    ClusterMap::new(
        1,
        ids.iter().map(|i| node(i, Role::Target)).collect(),
        vec![node("proxy", Role::Proxy)],
    )
    .unwrap()
}

fn sixteen() -> Vec<String> {
    (0..16).map(|i| format!("t{i:02}")).collect()
}

/// Independent argmax over all node scores.
fn oracle_owner(ids: &[String], r: &ObjectRef) -> String {
    let mut scored: Vec<(u64, &String)> = ids
        .iter()
        .map(|id| {
            (
                hash_parts(&[id.as_bytes(), r.bucket.as_bytes(), r.objname.as_bytes()]),
                id,
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    scored[0].1.clone()
}

fn random_names(n: usize, seed: u64) -> Vec<ObjectRef> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..24);
            let name: String = (0..len)
                .map(|_| rng.gen_range(b'a'..=b'z') as char)
                .collect();
            ObjectRef::new("bench", name)
        })
        .collect()
}

#[test]
fn owner_matches_independent_argmax() {
    let ids = sixteen();
    let m = map_of(&ids);
    for r in random_names(2_000, 1) {
        assert_eq!(owner_of(&m, &r).as_str(), oracle_owner(&ids, &r));
    }
}

#[test]
fn ownership_uniform_within_ten_percent() {
    let ids = sixteen();
    let m = map_of(&ids);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in random_names(100_000, 7) {
        *counts.entry(owner_of(&m, &r).0.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    for (id, c) in &counts {
        assert!((5625..=6875).contains(c), "{id} owns {c} of 100000 keys");
    }
}

#[test]
fn default_dt_uniform_within_fifteen_percent() {
    let ids = sixteen();
    let m = map_of(&ids);
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..10_000 {
        let id = ExecutionId(rng.gen());
        *counts.entry(select_dt_default(&m, id).0.clone()).or_default() += 1;
    }
    for (id, c) in &counts {
        assert!((532..=718).contains(c), "{id} selected {c} of 10000 times");
    }
}

#[test]
fn removing_a_node_only_moves_its_keys() {
    let ids = sixteen();
    let full = map_of(&ids);
    let removed = "t05".to_string();
    let rest: Vec<String> = ids.iter().filter(|i| **i != removed).cloned().collect();
    let smaller = map_of(&rest);
    let mut moved = 0;
    for r in random_names(10_000, 11) {
        let before = owner_of(&full, &r).as_str().to_string();
        let after = owner_of(&smaller, &r).as_str().to_string();
        if before == removed {
            moved += 1;
            assert_ne!(after, removed);
        } else {
            assert_eq!(before, after, "{r:?} moved without its owner leaving");
        }
    }
    assert!(moved > 0);

    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    for _ in 0..10_000 {
        let id = ExecutionId(rng.gen());
        let before = select_dt_default(&full, id).as_str().to_string();
        let after = select_dt_default(&smaller, id).as_str().to_string();
        if before != removed {
            assert_eq!(before, after);
        }
    }
}

/// Brute force: count entries per owner, take the max, smallest id on ties.
fn oracle_colocated(ids: &[String], entries: &[ObjectRef]) -> String {
    let mut counts: BTreeMap<String, usize> = ids.iter().map(|i| (i.clone(), 0)).collect();
    for e in entries {
        *counts.get_mut(&oracle_owner(ids, e)).unwrap() += 1;
    }
    let max = *counts.values().max().unwrap();
    counts
        .into_iter()
        .find(|(_, c)| *c == max)
        .map(|(id, _)| id)
        .unwrap()
}

#[test]
fn colocated_matches_brute_force_on_random_batches() {
    let ids: Vec<String> = (1..=4).map(|i| format!("t{i}")).collect();
    let m = map_of(&ids);
    let mut rng = rand::rngs::StdRng::seed_from_u64(17);
    for trial in 0..200 {
        let n = rng.gen_range(1..64);
        let entries = random_names(n, 1000 + trial);
        assert_eq!(
            select_dt_colocated(&m, &entries).as_str(),
            oracle_colocated(&ids, &entries)
        );
    }
}

proptest! {
    #[test]
    fn partition_is_a_partition(n in 0usize..200, seed in any::<u64>(), nodes in 1usize..8) {
        let ids: Vec<String> = (0..nodes).map(|i| format!("n{i}")).collect();
        let m = map_of(&ids);
        let entries = random_names(n, seed);
        let parts = partition_entries(&m, &entries);
        let mut all: Vec<usize> = Vec::new();
        for (node, list) in &parts {
            let idx: Vec<usize> = list.iter().map(|(i, _)| *i).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (i, e) in list {
                prop_assert_eq!(&entries[*i], e);
                prop_assert_eq!(owner_of(&m, e), node);
            }
            all.extend(idx);
        }
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn colocated_selection_is_stable(seed in any::<u64>(), n in 1usize..40) {
        let ids: Vec<String> = (1..=4).map(|i| format!("t{i}")).collect();
        let m = map_of(&ids);
        let mut entries = random_names(n, seed);
        let first = select_dt_colocated(&m, &entries).clone();
        entries.reverse();
        prop_assert_eq!(select_dt_colocated(&m, &entries), &first);
    }
}

#[test]
fn three_node_element_wise_partition() {
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let m = map_of(&ids);
    let entries = vec![
        ObjectRef::new("imagenet", "images/img_0001.jpg"),
        ObjectRef::new("imagenet", "images/img_0002.jpg"),
        ObjectRef::member("shards", "train-0003.tar", "labels/0003.txt"),
        ObjectRef::member("shards", "train-0003.tar", "images/0003.jpg"),
    ];
    let parts = partition_entries(&m, &entries);
    for (i, e) in entries.iter().enumerate() {
        let owner = oracle_owner(&ids, e);
        assert!(parts[&NodeId::new(owner)].iter().any(|(j, _)| *j == i));
    }
}

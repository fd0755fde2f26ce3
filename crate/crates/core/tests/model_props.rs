use batchstore_core::model::{canonical_entry_name, parse_batch_request, BatchRequest, ObjectRef};
use proptest::prelude::*;

fn name_strategy() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_.-][a-zA-Z0-9_./ -]{0,30}"
}

fn ref_strategy() -> impl Strategy<Value = ObjectRef> {
    (
        name_strategy(),
        name_strategy(),
        proptest::option::of(name_strategy()),
    )
        .prop_map(|(bucket, objname, archpath)| ObjectRef {
            bucket,
            objname,
            archpath,
        })
}

/// Bucket and object names without '/', which cannot be re-split ambiguously.
fn flat_ref_strategy() -> impl Strategy<Value = ObjectRef> {
    let flat = "[a-c]{1,3}";
    (flat, flat, proptest::option::of(flat)).prop_map(|(bucket, objname, archpath)| ObjectRef {
        bucket,
        objname,
        archpath,
    })
}

fn request_strategy() -> impl Strategy<Value = BatchRequest> {
    (
        proptest::collection::vec(ref_strategy(), 1..50),
        any::<bool>(),
        any::<bool>(),
        proptest::option::of(0u64..10),
    )
        .prop_map(|(entries, strm, coer, coloc)| BatchRequest {
            entries,
            strm,
            coer,
            coloc,
            ..BatchRequest::new(vec![])
        })
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(req in request_strategy()) {
        let parsed = parse_batch_request(&req.to_json()).unwrap();
        prop_assert_eq!(parsed, req);
    }

    #[test]
    fn distinct_refs_get_distinct_names(a in flat_ref_strategy(), b in flat_ref_strategy()) {
        if a != b {
            prop_assert_ne!(canonical_entry_name(&a), canonical_entry_name(&b));
        } else {
            prop_assert_eq!(canonical_entry_name(&a), canonical_entry_name(&b));
        }
    }
}

#[test]
fn hundred_thousand_entries_keep_order() {
    let entries: Vec<ObjectRef> = (0..100_000)
        .map(|i| {
            if i % 3 == 0 {
                ObjectRef::member("shards", format!("s-{:05}.tar", i / 100), format!("m/{i}"))
            } else {
                ObjectRef::new(format!("b{}", i % 7), format!("obj-{i:08}"))
            }
        })
        .collect();
    let mut req = BatchRequest::new(entries.clone());
    req.strm = true;
    let parsed = parse_batch_request(&req.to_json()).unwrap();
    assert_eq!(parsed.entries, entries);
}

#[test]
fn duplicates_are_kept() {
    let r = ObjectRef::new("b", "o");
    let req = BatchRequest::new(vec![r.clone(), r.clone(), r]);
    assert_eq!(parse_batch_request(&req.to_json()).unwrap().len(), 3);
}

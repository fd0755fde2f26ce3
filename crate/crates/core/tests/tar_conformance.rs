//! Archives from the encoder checked against the internal strict reader, the
//! `tar` crate as an independent reader, and raw block arithmetic.

use std::io::{Cursor, Read};

use batchstore_core::tar::{find_member, parse_archive, TarWriter, BLOCK, STATUS_KEY};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
enum Item {
    Entry(String, Vec<u8>),
    Placeholder(String, String),
}

fn build(items: &[Item]) -> Vec<u8> {
    let mut w = TarWriter::new(Vec::new());
    for it in items {
        match it {
            Item::Entry(n, p) => w.emit_entry(n, p).unwrap(),
            Item::Placeholder(n, r) => w.emit_placeholder(n, r).unwrap(),
        }
    }
    let total = w.finalize().unwrap();
    let out = w.into_inner();
    assert_eq!(total, out.len() as u64);
    out
}

/// Entries as seen by the `tar` crate: (path, payload, placeholder status).
fn read_with_tar_crate(data: &[u8]) -> Vec<(String, Vec<u8>, Option<String>)> {
    let mut ar = tar::Archive::new(Cursor::new(data));
    let mut out = Vec::new();
    for e in ar.entries().unwrap() {
        let mut e = e.unwrap();
        let mut status = None;
        if let Some(exts) = e.pax_extensions().unwrap() {
            for ext in exts {
                let ext = ext.unwrap();
                if ext.key().unwrap() == STATUS_KEY {
                    status = Some(ext.value().unwrap().to_string());
                }
            }
        }
        let path = e.path().unwrap().to_string_lossy().into_owned();
        let mut payload = Vec::new();
        e.read_to_end(&mut payload).unwrap();
        out.push((path, payload, status));
    }
    out
}

fn random_items(rng: &mut impl Rng, max: usize) -> Vec<Item> {
    let n = rng.gen_range(0..max);
    (0..n)
        .map(|_| {
            let name_len = match rng.gen_range(0..10) {
                0 => rng.gen_range(101..400),
                1 => 100,
                _ => rng.gen_range(1..60),
            };
            let mut name: String = (0..name_len)
                .map(|_| rng.gen_range(b'a'..=b'z') as char)
                .collect();
            if name_len > 4 {
                name.replace_range(1..2, "/");
            }
            if rng.gen_bool(0.1) {
                Item::Placeholder(name, "not_found".into())
            } else {
                let size = match rng.gen_range(0..6) {
                    0 => 0,
                    1 => 512,
                    2 => rng.gen_range(511..514),
                    3 => rng.gen_range(1..5000),
                    _ => rng.gen_range(1..200),
                };
                let payload = (0..size).map(|_| rng.gen()).collect();
                Item::Entry(name, payload)
            }
        })
        .collect()
}

fn check_archive(items: &[Item], data: &[u8]) {
    assert_eq!(data.len() % BLOCK, 0);
    assert!(data.len() >= 2 * BLOCK);
    assert!(data[data.len() - 2 * BLOCK..].iter().all(|&b| b == 0));

    let ours = parse_archive(data).expect("internal reader accepts archive");
    let theirs = read_with_tar_crate(data);
    assert_eq!(ours.len(), items.len());
    assert_eq!(theirs.len(), items.len());
    for ((it, o), t) in items.iter().zip(&ours).zip(&theirs) {
        match it {
            Item::Entry(n, p) => {
                assert_eq!(&o.name, n);
                assert_eq!(&o.payload, p);
                assert_eq!(o.status, None);
                assert_eq!(&t.0, n);
                assert_eq!(&t.1, p);
                assert_eq!(t.2, None);
            }
            Item::Placeholder(n, r) => {
                assert_eq!(&o.name, n);
                assert!(o.payload.is_empty());
                assert_eq!(o.soft_error_reason(), Some(r.as_str()));
                assert_eq!(&t.0, n);
                assert!(t.1.is_empty());
                assert_eq!(t.2.as_deref(), Some(format!("soft-error:{r}").as_str()));
            }
        }
    }
}

#[test]
fn thousand_random_archives_conform() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0x6261_7463);
    for _ in 0..1000 {
        let items = random_items(&mut rng, 12);
        let data = build(&items);
        check_archive(&items, &data);
    }
}

#[test]
fn three_entries_round_trip_in_order() {
    let items = vec![
        Item::Entry("imagenet/images/img_0001.jpg".into(), vec![1; 700]),
        Item::Entry("imagenet/images/img_0002.jpg".into(), vec![]),
        Item::Entry("shards/train-0003.tar/labels/0003.txt".into(), b"cat".to_vec()),
    ];
    check_archive(&items, &build(&items));
}

#[test]
fn middle_placeholder_keeps_position() {
    let items = vec![
        Item::Entry("b/o0".into(), b"zero".to_vec()),
        Item::Placeholder("b/o1".into(), "not_found".into()),
        Item::Entry("b/o2".into(), b"two".to_vec()),
    ];
    let data = build(&items);
    check_archive(&items, &data);
    let parsed = parse_archive(&data).unwrap();
    let holes: Vec<usize> = parsed
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_placeholder())
        .map(|(i, _)| i)
        .collect();
    assert_eq!(holes, vec![1]);
}

/// Reader that knows nothing about PAX: walks raw headers and treats every
/// typeflag as a regular file of the stated size.
fn ustar_only_entries(data: &[u8]) -> Vec<(String, u8, u64)> {
    let mut out = Vec::new();
    let mut off = 0;
    while off + BLOCK <= data.len() {
        let h = &data[off..off + BLOCK];
        if h.iter().all(|&b| b == 0) {
            break;
        }
        let end = h[..100].iter().position(|&b| b == 0).unwrap_or(100);
        let name = String::from_utf8_lossy(&h[..end]).into_owned();
        let size_str: String = h[124..135].iter().map(|&b| b as char).collect();
        let size = u64::from_str_radix(size_str.trim_matches(char::from(0)), 8).unwrap();
        out.push((name, h[156], size));
        off += BLOCK + (size as usize).div_ceil(BLOCK) * BLOCK;
    }
    out
}

#[test]
fn placeholder_degrades_to_empty_file_for_pax_unaware_readers() {
    let data = build(&[Item::Placeholder("b/o".into(), "not_found".into())]);
    let raw = ustar_only_entries(&data);
    assert_eq!(raw.len(), 2);
    assert_eq!(raw[0].1, b'x');
    assert_eq!(raw[1], ("b/o".to_string(), b'0', 0));
}

#[test]
fn member_extraction_matches_source() {
    let items = vec![
        Item::Entry("a.txt".into(), b"A".to_vec()),
        Item::Entry("b.txt".into(), b"B".to_vec()),
    ];
    let data = build(&items);
    assert_eq!(find_member(Cursor::new(&data), "b.txt").unwrap(), Some(b"B".to_vec()));
    assert_eq!(find_member(Cursor::new(&data), "missing.txt").unwrap(), None);

    // shards written by the tar crate (GNU long names, real metadata) also work
    let mut b = tar::Builder::new(Vec::new());
    let long = format!("dir/{}", "x".repeat(150));
    for (name, body) in [("one", &b"1"[..]), (long.as_str(), &b"long body"[..])] {
        let mut h = tar::Header::new_gnu();
        h.set_size(body.len() as u64);
        h.set_mode(0o600);
        h.set_mtime(1_700_000_000);
        h.set_cksum();
        b.append_data(&mut h, name, body).unwrap();
    }
    let foreign = b.into_inner().unwrap();
    assert_eq!(find_member(Cursor::new(&foreign), "one").unwrap(), Some(b"1".to_vec()));
    assert_eq!(
        find_member(Cursor::new(&foreign), &long).unwrap(),
        Some(b"long body".to_vec())
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_sequences_give_identical_bytes(seed in any::<u64>()) {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let items = random_items(&mut rng, 20);
        prop_assert_eq!(build(&items), build(&items));
    }
}

#[test]
fn ten_thousand_entries_keep_count_and_order() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(99);
    let items: Vec<Item> = (0..10_000)
        .map(|i| {
            let size = rng.gen_range(0..64);
            Item::Entry(format!("b/obj-{i:08}"), vec![(i % 251) as u8; size])
        })
        .collect();
    let data = build(&items);
    assert_eq!(data.len() % BLOCK, 0);
    let parsed = parse_archive(&data).unwrap();
    assert_eq!(parsed.len(), items.len());
    for (i, e) in parsed.iter().enumerate() {
        assert_eq!(e.name, format!("b/obj-{i:08}"));
    }
}

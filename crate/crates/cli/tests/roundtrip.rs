use asymrd::channels::{BlockKey, ConfusionCounts};
use asymrd_cli::ingest::{ingest_confusions, write_confusions};
use proptest::prelude::*;

fn blocks() -> impl Strategy<Value = (usize, Vec<ConfusionCounts>)> {
    (2usize..6).prop_flat_map(|k| {
        let block = (prop::collection::vec(0u64..1_000_000, k * k), 0usize..3, any::<bool>());
        (Just(k), prop::collection::vec(block, 1..5))
    })
    .prop_map(|(k, raw)| {
        let out = raw
            .into_iter()
            .enumerate()
            .map(|(n, (mut flat, g, model))| {
                flat[0] += 1;
                let inst = if model { format!("m{n}") } else { String::new() };
                let key = BlockKey::new(format!("g{g}"), format!("exp {n}"), "c,1".to_string(), inst).unwrap();
                ConfusionCounts::new(k, flat, key).unwrap()
            })
            .collect();
        (k, out)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialized_counts_read_back_exactly((k, bs) in blocks()) {
        let classes: Vec<String> = (0..k).map(|i| format!("class {i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_confusions(&path, &bs, &classes).unwrap();
        let back = ingest_confusions(&path, &classes).unwrap();
        let mut want = bs.clone();
        want.sort_by(|a, b| a.block.cmp(&b.block));
        let mut got = back;
        got.sort_by(|a, b| a.block.cmp(&b.block));
        prop_assert_eq!(got, want);
    }
}

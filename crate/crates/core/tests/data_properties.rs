use std::collections::BTreeSet;

use comchain::data::*;
use comchain::Error;
use proptest::prelude::*;

fn spec(per_class: usize, sigma: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        per_class,
        sigma,
        seed,
        ..SyntheticSpec::default()
    }
}

fn all_bytes(m: &DatasetManifest) -> Vec<u8> {
    m.shards
        .iter()
        .flat_map(|s| std::fs::read(m.dir.join(&s.path)).unwrap())
        .collect()
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate(&spec(8, 1.0, 5), a.path()).unwrap();
    let mb = generate(&spec(8, 1.0, 5), b.path()).unwrap();
    assert_eq!(ma.sha256, mb.sha256);
    assert_eq!(all_bytes(&ma), all_bytes(&mb));
    let c = tempfile::tempdir().unwrap();
    assert_ne!(generate(&spec(8, 1.0, 6), c.path()).unwrap().sha256, ma.sha256);
}

#[test]
fn zero_noise_gives_identical_class_images() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(&generate(&spec(5, 0.0, 1), dir.path()).unwrap()).unwrap();
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            let same = ds.image(i) == ds.image(j);
            assert_eq!(same, ds.classes[i] == ds.classes[j], "{i} {j}");
        }
    }
}

#[test]
fn default_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&spec(64, 1.0, 1), dir.path()).unwrap();
    let ds = Dataset::open(&m).unwrap();
    assert_eq!(ds.len(), 1024);
    assert_eq!(ds.tokens.len() / ds.spec.caption_len, 4096);
    assert_eq!(m.len(), 1024);
}

#[test]
fn manifest_roundtrip_and_hash_verification() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&spec(4, 1.0, 2), dir.path()).unwrap();
    let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(Dataset::open(&loaded).unwrap(), Dataset::open(&m).unwrap());

    let shard = dir.path().join(&m.shards[0].path);
    let mut bytes = std::fs::read(&shard).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&shard, &bytes).unwrap();
    assert!(matches!(Dataset::open(&m), Err(Error::Integrity(_))));
}

#[test]
fn split_is_stratified_disjoint_exhaustive() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(&spec(64, 1.0, 3), dir.path()).unwrap();
    let parts = split(&m, &[0.9, 0.1], 11).unwrap();
    let (a, b) = (parts[0].indices.clone().unwrap(), parts[1].indices.clone().unwrap());
    assert!((a.len() as i64 - 922).abs() <= 1 && (b.len() as i64 - 102).abs() <= 1);
    let sa: BTreeSet<u64> = a.iter().copied().collect();
    assert!(b.iter().all(|i| !sa.contains(i)));
    assert_eq!(a.len() + b.len(), 1024);
    let ds = Dataset::open(&parts[1]).unwrap();
    for c in 0..16u32 {
        let n = ds.classes.iter().filter(|&&k| k == c).count();
        assert!((6..=7).contains(&n), "class {c}: {n}");
    }
    let whole = split(&m, &[1.0], 11).unwrap();
    assert_eq!(Dataset::open(&whole[0]).unwrap(), Dataset::open(&m).unwrap());
    assert!(split(&m, &[0.5, 0.4], 11).is_err());
}

#[test]
fn classes_are_separated() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(&generate(&spec(10, SEPARATION_SIGMA_BOUND, 4), dir.path()).unwrap()).unwrap();
    let dist = |i: usize, j: usize| -> f64 {
        ds.image(i).iter().zip(ds.image(j)).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (mut within, mut across) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..ds.len() {
        for j in i + 1..ds.len() {
            let acc = if ds.classes[i] == ds.classes[j] { &mut within } else { &mut across };
            acc.0 += dist(i, j);
            acc.1 += 1;
        }
    }
    assert!(within.0 / (within.1 as f64) < across.0 / (across.1 as f64));
}

fn loader(shuffle: bool, seed: u64) -> LoaderSpec {
    LoaderSpec { batch_size: 7, captions: 4, shuffle, seed }
}

#[test]
fn unshuffled_is_file_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(&generate(&spec(3, 1.0, 1), dir.path()).unwrap()).unwrap();
    let order: Vec<usize> = load_batches(&ds, &loader(false, 0), 5)
        .unwrap()
        .iter()
        .flat_map(|b| b.indices.clone())
        .collect();
    assert_eq!(order, (0..ds.len()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn epoch_is_a_partition(seed in any::<u64>(), epoch in 0usize..50, batch in 1usize..40) {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::open(&generate(&spec(3, 1.0, 1), dir.path()).unwrap()).unwrap();
        let spec = LoaderSpec { batch_size: batch, ..loader(true, seed) };
        let batches = load_batches(&ds, &spec, epoch).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        prop_assert_eq!(&batches, &load_batches(&ds, &spec, epoch).unwrap());
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.classes[k], ds.classes[i]);
                let n = ds.spec.tokens_per_sample();
                prop_assert_eq!(&b.tokens[k * n..(k + 1) * n], &ds.tokens[i * n..(i + 1) * n]);
            }
        }
    }
}

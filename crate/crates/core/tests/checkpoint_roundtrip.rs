use comchain::checkpoint::*;
use comchain::modelzoo::{build_params, model, nano, NANO_MODELS, VIT_REF_MODELS};
use comchain::numerics::Rng;
use comchain::Error;

#[test]
fn every_nano_preset_roundtrips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for name in NANO_MODELS {
        let cfg = model(name).unwrap();
        let params = build_params(&cfg, &Rng::new(3)).unwrap();
        let path = dir.path().join(format!("{name}.comc"));
        let hash = save_checkpoint(&params, &cfg, &path).unwrap();
        assert_eq!(hash, file_hash(&path).unwrap());
        let (back, back_cfg) = load_checkpoint(&path).unwrap();
        assert!(back.bit_eq(&params), "{name}");
        assert_eq!(back_cfg, cfg);
        assert_eq!(encode(&back, &back_cfg).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn reference_presets_encode_deterministically() {
    // Only the smallest reference model is built; the others are large.
    let cfg = model(VIT_REF_MODELS[0]).unwrap();
    let params = build_params(&cfg, &Rng::new(1)).unwrap();
    let bytes = encode(&params, &cfg).unwrap();
    let (back, _) = decode(&bytes).unwrap();
    assert!(back.bit_eq(&params));
}

#[test]
fn header_layout() {
    let cfg = nano("tiny", 16, 1);
    let params = build_params(&cfg, &Rng::new(0)).unwrap();
    let bytes = encode(&params, &cfg).unwrap();
    assert_eq!(&bytes[..4], b"COMC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    assert_eq!(json["name"], "tiny");
    let count = u64::from_le_bytes(bytes[16 + len..24 + len].try_into().unwrap());
    assert_eq!(count as usize, params.len());
    let first = params.names().next().unwrap();
    let at = 24 + len;
    assert_eq!(u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize, first.len());
    assert_eq!(&bytes[at + 2..at + 2 + first.len()], first.as_bytes());
}

#[test]
fn every_truncation_is_an_integrity_error() {
    let cfg = nano("tiny", 16, 1);
    let params = build_params(&cfg, &Rng::new(0)).unwrap();
    let bytes = encode(&params, &cfg).unwrap();
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        match decode(&bytes[..cut]) {
            Err(Error::Integrity(_)) => {}
            Err(Error::Json(_)) if cut > 16 => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.comc");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
}

#[test]
fn bad_magic_and_version() {
    let cfg = nano("tiny", 16, 1);
    let mut bytes = encode(&build_params(&cfg, &Rng::new(0)).unwrap(), &cfg).unwrap();
    bytes[4] = 9;
    assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
}

#[test]
fn mismatched_config_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.comc");
    let cfg = model("nano_t").unwrap();
    save_checkpoint(&build_params(&cfg, &Rng::new(0)).unwrap(), &cfg, &path).unwrap();
    match load_checkpoint_as(&path, &model("nano_s").unwrap()) {
        Err(Error::Schema { tensor, .. }) => assert!(!tensor.is_empty()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_tensor_rejected() {
    let cfg = nano("tiny", 16, 1);
    let mut params = build_params(&cfg, &Rng::new(0)).unwrap();
    params.insert("image.extra", comchain::numerics::Tensor::zeros(&[2]));
    assert!(matches!(encode(&params, &cfg).map(|b| decode(&b)), Ok(Err(Error::Schema { ref tensor, .. })) if tensor == "image.extra"));
}

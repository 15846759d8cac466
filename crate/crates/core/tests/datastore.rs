use std::fs;

use proptok::datastore::{
    gen_synthetic, load_descriptions, validate_bundle, write_dataset, ManifestDir, SynthConfig,
};
use proptok::{Error, Tensor};

fn cfg() -> SynthConfig {
    SynthConfig {
        n_classes: 4,
        shots: 3,
        queries_per_class: 2,
        dim: 16,
        patches: 6,
        m_props: 2,
        noise: 0.1,
        seed: 11,
    }
}

fn written() -> (tempfile::TempDir, ManifestDir) {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, desc, _) = gen_synthetic(&cfg()).unwrap();
    let md = write_dataset(dir.path(), &bundle, &desc, 2, 11).unwrap();
    (dir, md)
}

fn invariant_of(e: Error) -> &'static str {
    match e {
        Error::Validation { invariant, .. } => invariant,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

/// Replaces tensor `name` and rewrites the manifest so checksums stay valid.
fn replace(md: &mut ManifestDir, name: &str, t: &Tensor) {
    let rel = md.manifest.files[name].path.clone();
    md.put_tensor(name, &rel, t).unwrap();
    md.write().unwrap();
}

#[test]
fn roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, desc, _) = gen_synthetic(&cfg()).unwrap();
    write_dataset(dir.path(), &bundle, &desc, 2, 11).unwrap();
    let md = ManifestDir::open(dir.path()).unwrap();
    assert_eq!(md.manifest.dim, 16);
    assert_eq!(md.manifest.props, 2);
    assert_eq!(validate_bundle(&md).unwrap(), bundle);
    assert_eq!(load_descriptions(&md).unwrap(), desc);
}

#[test]
fn open_accepts_the_manifest_file_itself() {
    let (dir, _) = written();
    let md = ManifestDir::open(dir.path().join("manifest.json")).unwrap();
    assert!(validate_bundle(&md).is_ok());
}

#[test]
fn descriptions_file_is_one_record_per_line() {
    let (dir, _) = written();
    let text = fs::read_to_string(dir.path().join("descriptions.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for (n, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["class_id"].as_u64(), Some(n as u64));
        assert_eq!(v["descriptions"].as_array().unwrap().len(), 12);
    }
}

#[test]
fn flipped_payload_byte_fails_checksum() {
    let (dir, md) = written();
    let path = dir.path().join(&md.manifest.files["class_tokens"].path);
    let mut bytes = fs::read(&path).unwrap();
    bytes[20] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let md = ManifestDir::open(dir.path()).unwrap();
    assert!(matches!(validate_bundle(&md), Err(Error::Checksum { .. })));
}

#[test]
fn missing_tensor_file_is_io_error() {
    let (dir, md) = written();
    fs::remove_file(dir.path().join(&md.manifest.files["query"].path)).unwrap();
    let md = ManifestDir::open(dir.path()).unwrap();
    assert!(matches!(validate_bundle(&md), Err(Error::Io { .. })));
}

#[test]
fn non_unit_prompt_is_rejected() {
    let (_dir, mut md) = written();
    let mut p = md.tensor("class_prompts").unwrap();
    p.data_mut()[0] += 1e-3;
    replace(&mut md, "class_prompts", &p);
    assert_eq!(invariant_of(validate_bundle(&md).unwrap_err()), "unit-norm");
}

#[test]
fn label_out_of_range_is_rejected() {
    let (_dir, mut md) = written();
    let mut l = md.tensor("labels").unwrap();
    l.data_mut()[0] = 4.0;
    replace(&mut md, "labels", &l);
    assert_eq!(invariant_of(validate_bundle(&md).unwrap_err()), "labels");
}

#[test]
fn fractional_index_is_rejected() {
    let (_dir, mut md) = written();
    let mut s = md.tensor("support").unwrap();
    s.data_mut()[1] = 0.5;
    replace(&mut md, "support", &s);
    assert_eq!(invariant_of(validate_bundle(&md).unwrap_err()), "indices");
}

#[test]
fn wrong_shot_count_is_rejected() {
    let (_dir, mut md) = written();
    let s = md.tensor("support").unwrap();
    let fewer = Tensor::new(vec![s.len() - 1], s.data()[1..].to_vec()).unwrap();
    replace(&mut md, "support", &fewer);
    assert_eq!(invariant_of(validate_bundle(&md).unwrap_err()), "shots");
}

#[test]
fn non_finite_patch_is_rejected() {
    let (_dir, mut md) = written();
    let mut p = md.tensor("patches").unwrap();
    p.data_mut()[3] = f64::NAN;
    replace(&mut md, "patches", &p);
    // The decoder refuses non-finite payloads before validation sees them.
    assert!(matches!(validate_bundle(&md), Err(Error::Format { .. })));
}

#[test]
fn manifest_shape_must_match_header() {
    let (_dir, mut md) = written();
    md.manifest.files.get_mut("class_prompts").unwrap().shape = vec![4, 15];
    md.write().unwrap();
    assert_eq!(invariant_of(validate_bundle(&md).unwrap_err()), "shape");
}

#[test]
fn class_without_descriptions_is_rejected() {
    let (dir, md) = written();
    let path = dir.path().join("descriptions.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    rec["descriptions"] = serde_json::json!([]);
    lines[2] = rec.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(load_descriptions(&md).is_err());
}

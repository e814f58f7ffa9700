use std::collections::{BTreeSet, HashSet};

use ladmim::synthgen::{generate_dataset, write_dataset, DatasetCounts, Label, RgbImage, SceneSpec, Split};
use serde_json::Value;
use sha2::{Digest, Sha256};

const PATCH: usize = 4;

/// `PATCH` x `PATCH` windows at the given stride.
fn patches(img: &RgbImage, stride: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for py in (0..=img.height - PATCH).step_by(stride) {
        for px in (0..=img.width - PATCH).step_by(stride) {
            let mut v = Vec::with_capacity(PATCH * PATCH * 3);
            for y in py..py + PATCH {
                for x in px..px + PATCH {
                    v.extend_from_slice(&img.get(x, y));
                }
            }
            out.push(v);
        }
    }
    out
}

/// Deduplicated patch pool with exact nearest-neighbour distances.
struct Pool {
    set: HashSet<Vec<u8>>,
    list: Vec<Vec<u8>>,
}

impl Pool {
    fn new(it: impl Iterator<Item = Vec<u8>>) -> Self {
        let set: HashSet<Vec<u8>> = it.collect();
        let list = set.iter().cloned().collect();
        Self { set, list }
    }

    fn nn_dist(&self, p: &[u8]) -> f64 {
        if self.set.contains(p) {
            return 0.0;
        }
        self.list
            .iter()
            .map(|q| p.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

#[test]
fn logical_anomalies_are_locally_normal_and_structural_ones_are_not() {
    let (_, imgs) = generate_dataset(&SceneSpec::default(), &DatasetCounts::default(), 3).unwrap();
    // The pool takes every window of the training normals so that it covers
    // all sub-patch offsets; queries are the grid patches a backbone sees.
    let pool = Pool::new(imgs.iter().filter(|l| l.split == Split::Train).flat_map(|l| patches(&l.image, 1)));
    // Held-out normals set the 99th-percentile reference distance.
    let mut ref_d: Vec<f64> = imgs
        .iter()
        .filter(|l| l.split == Split::Val)
        .flat_map(|l| patches(&l.image, PATCH))
        .map(|p| pool.nn_dist(&p))
        .collect();
    ref_d.sort_by(f64::total_cmp);
    let p99 = ref_d[((ref_d.len() as f64 * 0.99).ceil() as usize).min(ref_d.len()) - 1];
    let (mut logical, mut structural) = (0, 0);
    for l in imgs.iter().filter(|l| l.split == Split::Test) {
        let worst = patches(&l.image, PATCH).iter().map(|p| pool.nn_dist(p)).fold(0.0, f64::max);
        match l.kind.label() {
            Label::Logical => {
                logical += 1;
                assert!(worst <= p99, "{} patch at {worst:.1} > {p99:.1}", l.kind)
            }
            Label::Structural => {
                structural += 1;
                assert!(worst > p99, "{} has no unusual patch", l.kind)
            }
            Label::Normal => {}
        }
    }
    assert_eq!((logical, structural), (50, 50));
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Schema check written against the documented manifest layout, not the
/// crate's own types.
fn check_schema(m: &Value, dir: &std::path::Path) {
    assert_eq!(m["schema"], "ladmim-manifest/1");
    assert!(m["seed"].is_u64());
    let images = m["images"].as_array().expect("images array");
    let kinds: BTreeSet<&str> = [
        "none",
        "missing",
        "extra",
        "swapped_position",
        "wrong_combination",
        "scratch",
        "blob",
    ]
    .into();
    let mut ids = BTreeSet::new();
    for e in images {
        let o = e.as_object().expect("entry object");
        for key in ["id", "path", "label", "kind", "split", "seed"] {
            assert!(o.contains_key(key), "missing {key}");
        }
        assert!(ids.insert(e["id"].as_str().unwrap()), "duplicate id");
        assert!(e["seed"].is_u64());
        let kind = e["kind"].as_str().unwrap();
        assert!(kinds.contains(kind), "kind {kind}");
        let label = e["label"].as_str().unwrap();
        let want = match kind {
            "none" => "normal",
            "scratch" | "blob" => "structural",
            _ => "logical",
        };
        assert_eq!(label, want);
        let split = e["split"].as_str().unwrap();
        assert!(["train", "val", "test"].contains(&split));
        if split != "test" {
            assert_eq!(label, "normal", "non-test split must be normal");
        }
        let path = dir.join(e["path"].as_str().unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"), "{}", path.display());
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
    }
}

#[test]
fn dataset_files_manifest_and_determinism() {
    let counts = DatasetCounts::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&SceneSpec::default(), &counts, 11, a.path()).unwrap();
    write_dataset(&SceneSpec::default(), &counts, 11, b.path()).unwrap();
    let ppm = std::fs::read_dir(a.path().join("images"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(ppm, 350);
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(sha_hex(&ma), sha_hex(&mb));
    let value: Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(value["images"].as_array().unwrap().len(), 350);
    check_schema(&value, a.path());

    let c = tempfile::tempdir().unwrap();
    write_dataset(&SceneSpec::default(), &counts, 12, c.path()).unwrap();
    assert_ne!(sha_hex(&ma), sha_hex(&std::fs::read(c.path().join("manifest.json")).unwrap()));
}

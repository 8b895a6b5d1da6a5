use std::fs;

use super::*;
use crate::probe::{Concept, Validity};
use crate::vector::{mean_embedding, Vector};

const PNG_1X1: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44,
    0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f,
    0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8,
    0xcf, 0xc0, 0xf0, 0x1f, 0x00, 0x05, 0x00, 0x01, 0xff, 0x89, 0x99, 0x3d, 0x1d, 0x00, 0x00,
    0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

/// Two layers (`early` 3 components, `late` 2 signed components), d = 2,
/// m = 2, one target, every optional section populated.
fn small_db() -> LensDb {
    let mut early = LayerDecl::new("early", 3, 2);
    early.attribution = Some("crp_composite".into());
    let mut late = LayerDecl::new("late", 2, 2);
    late.signed = true;
    let mut manifest = Manifest::new("toy-model", "toy-clip", 2, vec![early, late]);
    manifest.targets = vec!["ox".into()];
    manifest.dataset_note = Some("synthetic".into());

    let early_examples: Vec<f32> = vec![
        1.0, 0.0, 1.0, 0.2, // component 0
        0.0, 1.0, 0.2, 1.0, // component 1
        1.0, 1.0, 1.0, 0.8, // component 2
    ];
    let means = |ex: &[f32], rows: usize| -> Vec<f32> {
        (0..rows)
            .flat_map(|r| {
                let v = crate::vector::EmbeddingView::new(2, &ex[r * 4..(r + 1) * 4]);
                mean_embedding(v).unwrap().into_inner()
            })
            .collect()
    };
    let late_examples: Vec<f32> = vec![
        0.5, 0.5, 0.4, 0.6, // 0
        -1.0, 0.1, -0.9, 0.0, // 1
        0.3, -0.2, 0.3, -0.3, // 0:neg
        0.1, 0.9, 0.0, 1.0, // 1:neg
    ];
    let meta = |layer_rows: usize, n: usize| -> Vec<ExampleMeta> {
        (0..layer_rows)
            .flat_map(|row| {
                (0..2).map(move |rank| ExampleMeta {
                    index: row % n,
                    sign: if row < n { Sign::Positive } else { Sign::Negative },
                    rank,
                    sample_id: format!("img-{row}-{rank}"),
                    crop_box: [0, 0, 10 + rank as u32, 12],
                    activation: 2.0 - rank as f64,
                })
            })
            .collect()
    };
    let layers = vec![
        LayerData {
            means: means(&early_examples, 3),
            example_embeddings: Some(early_examples),
            activations: Some(vec![3.0, 1.0, 2.0, 2.0, 5.0, 0.5]),
            relevance: Some(vec![0.5, 0.0, 1.0]),
            example_meta: Some(meta(3, 3)),
            edges: None,
        },
        LayerData {
            means: means(&late_examples, 4),
            example_embeddings: Some(late_examples),
            activations: None,
            relevance: Some(vec![0.9, 0.2, 0.05, 0.01]),
            example_meta: Some(meta(4, 2)),
            edges: Some(vec![
                RelevanceEdge {
                    target: "ox".into(),
                    upper: ComponentKey { layer: "late".into(), index: 0, sign: Sign::Positive },
                    lower: ComponentKey { layer: "early".into(), index: 2, sign: Sign::Positive },
                    weight: 0.4,
                },
                RelevanceEdge {
                    target: "ox".into(),
                    upper: ComponentKey { layer: "late".into(), index: 1, sign: Sign::Negative },
                    lower: ComponentKey { layer: "early".into(), index: 0, sign: Sign::Positive },
                    weight: -0.125,
                },
            ]),
        },
    ];
    let probes = ProbeSet {
        name: "animals".into(),
        null_embedding: Some(Vector::new(vec![0.7, 0.7]).unwrap()),
        concepts: vec![Concept {
            label: "horn".into(),
            category: None,
            validity: Validity::Valid,
            embedding: Vector::new(vec![1.0, 0.0]).unwrap(),
            prompts: vec![],
        }],
    };
    let mut thumbs = Thumbnails::default();
    for (layer, index, sign) in [("early", 0, Sign::Positive), ("late", 1, Sign::Negative)] {
        thumbs.insert(
            ThumbnailKey { layer: layer.into(), index, sign, rank: 1 },
            PNG_1X1.to_vec(),
        );
    }
    LensDb::new(manifest, layers, vec![probes], thumbs).unwrap()
}

fn tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn export_load_export_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let db = small_db();
    export(&db, &a).unwrap();
    let loaded = load(&a).unwrap();
    assert_eq!(loaded.manifest(), db.manifest());
    export(&loaded, &b).unwrap();
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn layout_matches_contract() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    let files: Vec<String> = tree(dir.path()).into_iter().map(|(p, _)| p).collect();
    assert_eq!(
        files,
        [
            "activations/early.f32",
            "edges/late.tsv",
            "embeddings/early.f32",
            "embeddings/late.f32",
            "example_embeddings/early.f32",
            "example_embeddings/late.f32",
            "example_meta/early.jsonl",
            "example_meta/late.jsonl",
            "examples/early/0/1.png",
            "examples/late/1-neg/1.png",
            "manifest.json",
            "probes/animals.f32",
            "probes/animals.json",
            "relevance/early.f32",
            "relevance/late.f32",
        ]
    );
    let len = |p: &str| fs::metadata(dir.path().join(p)).unwrap().len();
    assert_eq!(len("embeddings/early.f32"), 3 * 2 * 4);
    assert_eq!(len("embeddings/late.f32"), 4 * 2 * 4);
    assert_eq!(len("example_embeddings/late.f32"), 4 * 2 * 2 * 4);
    assert_eq!(len("relevance/early.f32"), 3 * 4);
    let edges = fs::read_to_string(dir.path().join("edges/late.tsv")).unwrap();
    assert_eq!(edges, "ox\tlate\t0\tearly\t2\t0.4\nox\tlate\t1:neg\tearly\t0\t-0.125\n");
}

#[test]
fn absent_sections_are_omitted_and_flagged_false() {
    let mut manifest = Manifest::new("m", "f", 2, vec![LayerDecl::new("only", 2, 4)]);
    manifest.layers[0].has_relevance = true;
    manifest.layers[0].has_example_embeddings = true;
    manifest.targets = vec!["t".into()];
    let db = LensDb::new(
        manifest,
        vec![LayerData { means: vec![1.0, 0.0, 0.0, 1.0], ..Default::default() }],
        vec![],
        Thumbnails::default(),
    )
    .unwrap();
    let decl = &db.manifest().layers[0];
    assert!(!decl.has_relevance && !decl.has_example_embeddings && !decl.has_edges);

    let dir = tempfile::tempdir().unwrap();
    export(&db, dir.path()).unwrap();
    let files: Vec<String> = tree(dir.path()).into_iter().map(|(p, _)| p).collect();
    assert_eq!(files, ["embeddings/only.f32", "manifest.json"]);

    let rec = db.component(&"only:0".parse().unwrap()).unwrap();
    assert_eq!(rec.theta, &[1.0, 0.0]);
    assert!(rec.examples.is_none() && rec.relevance.is_none() && rec.activations.is_none());
}

#[test]
fn export_twice_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let db = small_db();
    export(&db, &dir.path().join("x")).unwrap();
    export(&db, &dir.path().join("y")).unwrap();
    assert_eq!(tree(&dir.path().join("x")), tree(&dir.path().join("y")));
}

#[test]
fn truncated_blob_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    let p = dir.path().join("embeddings/late.f32");
    let mut bytes = fs::read(&p).unwrap();
    bytes.pop();
    fs::write(&p, bytes).unwrap();
    match load(dir.path()) {
        Err(LensError::SizeMismatch { expected, found, .. }) => {
            assert_eq!((expected, found), (32, 31));
        }
        other => panic!("expected SizeMismatch, got {other:?}"),
    }
}

#[test]
fn missing_blob_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("relevance/early.f32")).unwrap();
    assert!(matches!(load(dir.path()), Err(LensError::MissingBlob { .. })));
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert!(matches!(load(dir.path()), Err(LensError::CorruptManifest(_))));
}

#[test]
fn zero_vector_names_the_component() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    let p = dir.path().join("embeddings/early.f32");
    let mut bytes = fs::read(&p).unwrap();
    bytes[8..16].fill(0);
    fs::write(&p, bytes).unwrap();
    match load(dir.path()) {
        Err(LensError::ZeroNormVector { context }) => assert!(context.contains("early:1"), "{context}"),
        other => panic!("expected ZeroNormVector, got {other:?}"),
    }
}

#[test]
fn relevance_outside_unit_interval_rejected() {
    let db = small_db();
    let mut layers = db.layer_data().to_vec();
    layers[0].relevance = Some(vec![0.5, 1.5, 0.0]);
    let err = LensDb::new(db.manifest().clone(), layers, vec![], Thumbnails::default());
    assert!(matches!(err, Err(LensError::InvalidDatabase(_))));
}

#[test]
fn activations_must_descend() {
    let db = small_db();
    let mut layers = db.layer_data().to_vec();
    layers[0].activations = Some(vec![1.0, 3.0, 2.0, 2.0, 5.0, 0.5]);
    let err = LensDb::new(db.manifest().clone(), layers, vec![], Thumbnails::default());
    assert!(matches!(err, Err(LensError::InvalidDatabase(_))));
}

#[test]
fn edges_must_point_downwards() {
    let db = small_db();
    let mut layers = db.layer_data().to_vec();
    let mut bad = layers[1].edges.clone().unwrap();
    bad[0].lower.layer = "late".into();
    layers[1].edges = Some(bad);
    let err = LensDb::new(db.manifest().clone(), layers, vec![], Thumbnails::default());
    assert!(matches!(err, Err(LensError::InvalidDatabase(_))));
}

#[test]
fn component_views() {
    let db = small_db();
    let rec = db.component(&"early:1".parse().unwrap()).unwrap();
    assert_eq!(rec.id.model_id, "toy-model");
    assert_eq!(rec.activations.unwrap(), &[2.0, 2.0]);
    assert_eq!(rec.relevance.unwrap(), &[0.0]);
    assert_eq!(rec.example_meta.unwrap()[1].sample_id, "img-1-1");
    let theta = mean_embedding(rec.examples.unwrap()).unwrap();
    for (a, b) in theta.iter().zip(rec.theta) {
        assert!((a - b).abs() <= 1e-5);
    }

    let neg = db.component(&"late:0:neg".parse().unwrap()).unwrap();
    assert_eq!(neg.relevance.unwrap(), &[0.05]);
    assert_eq!(neg.example_meta.unwrap()[0].sign, Sign::Negative);

    assert!(matches!(
        db.component(&"early:3".parse().unwrap()),
        Err(LensError::UnknownComponent(_))
    ));
    assert!(matches!(
        db.component(&"early:0:neg".parse().unwrap()),
        Err(LensError::UnknownComponent(_))
    ));
    let foreign = ComponentId::new("other", "early", 0);
    assert!(db.component_by_id(&foreign).is_err());
}

#[test]
fn thumbnails_read_back_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    let db = load(dir.path()).unwrap();
    let key = ThumbnailKey { layer: "late".into(), index: 1, sign: Sign::Negative, rank: 1 };
    assert_eq!(db.thumbnails().get(&key).unwrap().unwrap(), PNG_1X1);
    let missing = ThumbnailKey { rank: 0, ..key };
    assert!(db.thumbnails().get(&missing).unwrap().is_none());
}

#[test]
fn stray_thumbnail_rejected() {
    let dir = tempfile::tempdir().unwrap();
    export(&small_db(), dir.path()).unwrap();
    fs::write(dir.path().join("examples/early/0/notes.txt"), "hi").unwrap();
    assert!(matches!(load(dir.path()), Err(LensError::InvalidDatabase(_))));
}

#[test]
fn export_refuses_non_empty_target() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    assert!(matches!(export(&small_db(), dir.path()), Err(LensError::Io { .. })));
}

#[test]
fn load_restores_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let db = small_db();
    // shortest round-trip form that naive decimal parsing gets wrong by an ulp
    let (m, l, p, t) = (db.manifest.clone(), db.layers.clone(), db.probe_sets.clone(), db.thumbnails.clone());
    let mut l = l;
    l[0].example_meta.as_mut().unwrap()[0].activation = 9.464273452758787;
    let db = LensDb::new(m, l, p, t).unwrap();
    export(&db, &dir.path().join("a")).unwrap();
    let back = load(&dir.path().join("a")).unwrap();
    assert_eq!(back.manifest, db.manifest);
    assert_eq!(back.layers, db.layers);
    assert_eq!(back.probe_sets, db.probe_sets);
}

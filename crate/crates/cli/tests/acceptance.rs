//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fail.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lens_core::audit::separability_counts;
use lens_core::fixtures::{from_means, generate, oracle, LayerSpec, Planted, SyntheticDbSpec, PLANTED_PROBES};
use lens_core::metrics::clarity_pairwise_oracle;
use lens_core::store::{LayerData, LayerDecl, Manifest, Thumbnails};
use lens_core::{
    audit, clarity, compare_sets, export, label_components, label_faithfulness_phi, load, polysemanticity,
    redundancy, relevance_filter, search, separability_auc, AuditOptions, EmbeddingMatrix, LayerFilter,
    LensDb, LensError, DEFAULT_TAU,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T>(r: lens_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(rows).expect("valid rows")
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            loop {
                let r: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                if r.iter().any(|x| x.abs() > 1e-3) {
                    break r;
                }
            }
        })
        .collect()
}

fn clarity_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(2..=512);
        let m = matrix(&gaussian_rows(&mut rng, n, d));
        let fast = e(clarity(&m))?.value;
        let slow = e(clarity_pairwise_oracle(&m))?;
        worst = worst.max((fast - slow).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-5, || format!("max deviation {worst:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("1000 sets, max |compact - pairwise| = {worst:.1e}, {secs:.2} s"))
}

fn clarity_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(2..=64);
        let c = e(clarity(&matrix(&gaussian_rows(&mut rng, n, d))))?.value;
        let lower = -1.0 / (n as f64 - 1.0);
        ensure(c >= lower - 1e-9 && c <= 1.0 + 1e-9, || format!("clarity {c} outside [{lower}, 1] for n = {n}"))?;
    }
    let row: Vec<f32> = (0..7).map(|i| i as f32 - 2.5).collect();
    let same = e(clarity(&matrix(&vec![row; 9])))?.value;
    ensure((same - 1.0).abs() <= 1e-9, || format!("identical set gives {same}"))?;
    let opposite = e(clarity(&matrix(&[vec![1.0, 0.0], vec![-1.0, 0.0]])))?;
    ensure(opposite.value == -1.0, || format!("opposite pair gives {}", opposite.value))?;
    ensure(opposite.lower_bound() == -1.0, || "lower bound for n = 2 is not -1".into())?;
    Ok("1000 random sets in bounds; identical = 1; opposite pair = -1".into())
}

fn blob(rng: &mut ChaCha8Rng, centre: &[f32], count: usize, jitter: f32) -> Vec<Vec<f32>> {
    (0..count)
        .map(|_| centre.iter().map(|c| c + rng.random_range(-jitter..jitter)).collect())
        .collect()
}

fn polysemanticity_fixtures() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = blob(&mut rng, &[1.0, 0.0, 0.0], 10, 0.01);
    rows.extend(blob(&mut rng, &[0.0, 1.0, 0.0], 10, 0.01));
    let orth = e(polysemanticity(&matrix(&rows), 2, 7))?.value;
    ensure(orth >= 0.99, || format!("orthogonal blobs give {orth}"))?;

    let same = e(polysemanticity(&matrix(&vec![vec![0.3, 0.4, 0.5]; 8]), 2, 7))?;
    ensure(same.value == 0.0 && same.degenerate, || format!("identical set gives {same:?}"))?;

    let h = std::f32::consts::FRAC_1_SQRT_2;
    let mut rows = vec![vec![1.0f32, 0.0]; 10];
    rows.extend(vec![vec![h, h]; 10]);
    let diag = e(polysemanticity(&matrix(&rows), 2, 7))?.value;
    ensure((diag - 0.2929).abs() <= 1e-3, || format!("45 degree blobs give {diag}"))?;
    Ok(format!("orthogonal {orth:.4}, identical 0 (degenerate), 45 degrees {diag:.4}"))
}

fn redundancy_fixtures() -> Check {
    let spec = SyntheticDbSpec::new(4, 16, vec![LayerSpec::new("dups", Planted::Duplicated { pairs: 5 }, 0)]);
    let (db, _) = e(generate(&spec))?;
    let dup = e(redundancy(db.layer("dups").map_err(|e| e.to_string())?.means()))?;
    ensure((dup - 1.0).abs() <= 1e-9, || format!("duplicated pairs give {dup}"))?;
    let three = e(redundancy(&matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])))?;
    ensure((three - 2.0 / 3.0).abs() <= 1e-9, || format!("{{e1,e1,e2}} gives {three}"))?;
    Ok(format!("duplicated pairs {dup}, {{e1,e1,e2}} {three:.6}"))
}

fn set_similarity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = matrix(&gaussian_rows(&mut rng, 20, 12));
    let self_sim = e(compare_sets(&v, &v))?;
    ensure((self_sim - 1.0).abs() <= 1e-9, || format!("S(V,V) = {self_sim}"))?;
    let orth = e(compare_sets(&matrix(&[vec![1.0, 0.0]]), &matrix(&[vec![0.0, 1.0]])))?;
    ensure(orth == 0.0, || format!("orthogonal singletons give {orth}"))?;
    let asym = e(compare_sets(&matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &matrix(&[vec![1.0, 0.0]])))?;
    ensure((asym - 0.5).abs() <= 1e-9, || format!("{{e1,e2}} -> {{e1}} gives {asym}"))?;
    let back = e(compare_sets(&matrix(&[vec![1.0, 0.0]]), &matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]])))?;
    ensure(back == 1.0, || format!("{{e1}} -> {{e1,e2}} gives {back}"))?;
    Ok(format!("S(V,V) = {self_sim}, orthogonal 0, asymmetric 0.5 / 1"))
}

fn search_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 48;
    let layers: Vec<(String, Vec<Vec<f32>>)> =
        (0..4).map(|l| (format!("layer{l}"), gaussian_rows(&mut rng, 2500, d))).collect();
    let named: Vec<(&str, Vec<Vec<f32>>)> = layers.iter().map(|(n, r)| (n.as_str(), r.clone())).collect();
    let db = e(from_means(d, &named))?;
    let total: usize = db.layers().map(|l| l.rows()).sum();
    ensure(total == 10_000, || format!("{total} components"))?;
    for _ in 0..100 {
        let l = rng.random_range(0..4);
        let row = rng.random_range(0..2500);
        let probe = layers[l].1[row].clone();
        let hits = e(search(&db, &probe, None, &LayerFilter::All, 10))?;
        let want = format!("layer{l}:{row}");
        ensure(hits[0].component.key() == want && hits[0].rank == 1, || {
            format!("probe {want} ranked {} first", hits[0].component.key())
        })?;
        let slow = oracle::exhaustive_search(&db, &probe, None, 10);
        for (h, (key, score)) in hits.iter().zip(&slow) {
            ensure(&h.component.key() == key && (h.score - score).abs() <= 1e-12, || {
                format!("fast {} {} vs oracle {key} {score}", h.component.key(), h.score)
            })?;
        }
    }
    let probe = layers[0].1[0].clone();
    let hits = e(search(&db, &probe, Some(&probe), &LayerFilter::All, 10_000))?;
    ensure(hits.iter().all(|h| h.score == 0.0), || "probe = null gave a non-zero score".into())?;
    let order: Vec<(String, usize)> = hits.iter().map(|h| (h.component.layer.clone(), h.component.index)).collect();
    let expected: Vec<(String, usize)> =
        (0..4).flat_map(|l| (0..2500).map(move |i| (format!("layer{l}"), i))).collect();
    ensure(order == expected, || "zero-score ties not in index order".into())?;
    Ok("10000 components, 100 own-probe rank-1 hits matching the exhaustive oracle; null probe all zero".into())
}

const PER_BUCKET: usize = 5;

fn planted_db(seed: u64) -> Result<(LensDb, lens_core::fixtures::GroundTruth), String> {
    let spec = SyntheticDbSpec::new(
        seed,
        32,
        vec![
            LayerSpec::new("blobs", Planted::OrthogonalBlobs { concepts: 6, per_concept: 4 }, 10),
            LayerSpec::new("buckets", Planted::AuditBuckets { per_bucket: PER_BUCKET }, 6),
        ],
    );
    e(generate(&spec))
}

fn labelling() -> Check {
    for seed in 0..5 {
        let (db, truth) = planted_db(seed)?;
        let probes = db.probe_set(PLANTED_PROBES).expect("planted probes");
        let blobs = LayerFilter::Only(vec!["blobs".into()]);
        let labels = e(label_components(&db, probes, &blobs, DEFAULT_TAU))?;
        for a in &labels {
            let want = truth.components.get(&a.component.key()).and_then(|t| t.concept.clone());
            ensure(a.label == want, || format!("seed {seed}: {} labelled {:?}, planted {want:?}", a.component.key(), a.label))?;
        }
        let mut previous: Option<BTreeSet<String>> = None;
        for step in 0..=40 {
            let tau = step as f64 * 0.025;
            let labelled: BTreeSet<String> = e(label_components(&db, probes, &blobs, tau))?
                .into_iter()
                .filter(|a| a.label.is_some())
                .map(|a| a.component.key())
                .collect();
            if let Some(prev) = &previous {
                ensure(labelled.is_subset(prev), || format!("seed {seed}: tau {tau} added labels"))?;
            }
            previous = Some(labelled);
        }
    }
    Ok(format!("5 seeds: planted components labelled exactly at tau = {DEFAULT_TAU}; labels shrink monotonically in tau"))
}

fn audit_buckets() -> Check {
    let mut checked = 0;
    for seed in 0..5 {
        let (db, truth) = planted_db(seed)?;
        let probes = db.probe_set(PLANTED_PROBES).expect("planted probes");
        let report = e(audit(&db, probes, "target", "buckets", AuditOptions::default()))?;
        let planted: BTreeSet<String> = truth
            .components
            .iter()
            .filter(|(k, _)| k.strip_prefix("buckets:").is_some_and(|i| i.parse::<usize>().unwrap() < 4 * PER_BUCKET))
            .map(|(k, _)| k.clone())
            .collect();
        let audited: BTreeSet<String> = report.rows.iter().map(|r| r.component.key()).collect();
        ensure(audited == planted, || format!("seed {seed}: audited {audited:?}, planted {planted:?}"))?;
        for r in &report.rows {
            let want = truth.components[&r.component.key()].bucket;
            ensure(r.bucket == want, || format!("seed {seed}: {} in {:?}, planted {want:?}", r.component.key(), r.bucket))?;
            checked += 1;
        }
    }

    // one target, relevance just under, at and over 2.8 %
    let rel = [0.0279f32, 0.028, 0.0281, 0.5, 0.01, 0.0];
    let mut manifest = Manifest::new("m", "e", 2, vec![LayerDecl::new("l", rel.len(), 1)]);
    manifest.targets = vec!["ox".into()];
    manifest.layers[0].has_relevance = true;
    let data = LayerData {
        means: (0..rel.len()).flat_map(|i| [1.0, i as f32]).collect(),
        relevance: Some(rel.to_vec()),
        ..LayerData::default()
    };
    let db = e(LensDb::new(manifest, vec![data], Vec::new(), Thumbnails::default()))?;
    let kept: Vec<usize> = e(relevance_filter(&db, "ox", "l", Some(0.028)))?.iter().map(|c| c.index).collect();
    ensure(kept == [1, 2, 3], || format!("0.028 filter kept {kept:?}"))?;
    Ok(format!("{checked} planted components, 0 misclassified; 0.028 filter keeps 3 of 6"))
}

fn phi_score() -> Check {
    let row = vec![vec![2.0, 4.0, 6.0]];
    let mid = e(label_faithfulness_phi(&row, &[(0, 1)]))?.mean;
    ensure(mid == 0.5, || format!("middle gives {mid}"))?;
    let hi = e(label_faithfulness_phi(&row, &[(0, 2)]))?.mean;
    let lo = e(label_faithfulness_phi(&row, &[(0, 0)]))?.mean;
    ensure(hi == 1.0 && lo == 0.0, || format!("max {hi}, min {lo}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-100.0..100.0);
        let s: Vec<f64> = r.iter().map(|x| a * x + b).collect();
        let c = rng.random_range(0..k);
        let p = e(label_faithfulness_phi(&[r], &[(0, c)]))?.mean;
        let q = e(label_faithfulness_phi(&[s], &[(0, c)]))?.mean;
        worst = worst.max((p - q).abs());
    }
    ensure(worst <= 1e-9, || format!("affine deviation {worst:e}"))?;
    Ok(format!("[2,4,6] -> 0.5 / 1 / 0; 1000 affine rows, max deviation {worst:.1e}"))
}

fn auc() -> Check {
    let sep = e(separability_auc(&[5.0, 6.0, 7.0], &[1.0, 2.0]))?;
    ensure(sep == 1.0, || format!("separated gives {sep}"))?;
    let same = e(separability_auc(&[1.0, 2.0, 2.0, 3.0], &[2.0, 3.0, 1.0, 2.0]))?;
    ensure(same == 0.5, || format!("identical multisets give {same}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..20) as f64).collect();
        let n: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..20) as f64).collect();
        let fwd = e(separability_counts(&p, &n))?;
        let back = e(separability_counts(&n, &p))?;
        ensure(fwd.pairs_x2 == back.pairs_x2 && fwd.wins_x2 + back.wins_x2 == fwd.pairs_x2, || {
            format!("counts {fwd:?} / {back:?}")
        })?;
        worst = worst.max((fwd.value() - (1.0 - back.value())).abs());
    }
    Ok(format!(
        "separated 1, identical 0.5; 100 pairs antisymmetric exactly in pair counts (f64 residue {worst:.1e})"
    ))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn same_content(a: &LensDb, b: &LensDb) -> bool {
    let thumbs = |db: &LensDb| -> Vec<_> {
        db.thumbnails().keys().map(|k| (k.clone(), db.thumbnails().get(k).unwrap())).collect()
    };
    a.manifest() == b.manifest()
        && a.layers().zip(b.layers()).all(|(x, y)| x.data == y.data)
        && a.probe_sets() == b.probe_sets()
        && thumbs(a) == thumbs(b)
}

fn store_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    for i in 0..20 {
        let mut layer = LayerSpec::new("a", Planted::OrthogonalBlobs { concepts: 2, per_concept: 2 }, rng.random_range(0..5));
        layer.signed = i % 2 == 1;
        let spec = SyntheticDbSpec {
            thumbnails: rng.random_range(0..3),
            edges: i % 3 != 0,
            ..SyntheticDbSpec::new(
                rng.random(),
                rng.random_range(8..24),
                vec![layer, LayerSpec::new("b", Planted::AuditBuckets { per_bucket: 1 }, rng.random_range(0..4))],
            )
        };
        let (db, _) = e(generate(&spec))?;
        let a = tmp.path().join(format!("{i}-a"));
        let b = tmp.path().join(format!("{i}-b"));
        e(export(&db, &a))?;
        let loaded = e(load(&a))?;
        ensure(same_content(&loaded, &db), || format!("db {i}: load(export(db)) differs"))?;
        e(export(&loaded, &b))?;
        let (ta, tb) = (tree(&a), tree(&b));
        ensure(ta == tb, || format!("db {i}: re-export not byte-identical"))?;

        let blobs: Vec<&String> = ta.keys().filter(|k| k.ends_with(".f32")).collect();
        let victim = a.join(blobs[rng.random_range(0..blobs.len())]);
        let mut bytes = std::fs::read(&victim).unwrap();
        if rng.random_bool(0.5) {
            bytes.truncate(bytes.len() - 4);
        } else {
            bytes.extend([0u8; 4]);
        }
        std::fs::write(&victim, bytes).unwrap();
        match load(&a) {
            Err(LensError::SizeMismatch { .. }) => {}
            other => return Err(format!("db {i}: corrupted {} gave {:?}", victim.display(), other.map(|_| ()))),
        }
    }
    Ok("20 synthetic dbs re-export byte-identically; every resized blob rejected".into())
}

fn cli_determinism() -> Check {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let (db, _) = planted_db(12)?;
    let path = tmp.path().join("db");
    e(export(&db, &path))?;
    let p = path.to_str().unwrap();
    let runs = [
        vec!["metrics", p, "--layer", "blobs", "--seed", "7"],
        vec!["audit", p, "--probes", PLANTED_PROBES, "--target", "target", "--layer", "buckets"],
    ];
    for args in &runs {
        let mut reports = Vec::new();
        for run in 0..3 {
            let out = tmp.path().join(format!("{}-{run}.csv", args[0]));
            let status = Command::new(env!("CARGO_BIN_EXE_lens"))
                .args(args)
                .args(["--out", out.to_str().unwrap()])
                .status()
                .map_err(|e| e.to_string())?;
            ensure(status.success(), || format!("lens {} exited {status}", args[0]))?;
            reports.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        ensure(reports.iter().all(|r| r == &reports[0] && !r.is_empty()), || {
            format!("lens {} reports differ across runs", args[0])
        })?;
    }
    Ok("lens metrics and lens audit byte-identical over 3 runs".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("clarity identity", clarity_identity),
        ("clarity bounds", clarity_bounds),
        ("polysemanticity fixtures", polysemanticity_fixtures),
        ("redundancy fixtures", redundancy_fixtures),
        ("set similarity", set_similarity),
        ("search", search_criterion),
        ("labelling threshold", labelling),
        ("audit buckets", audit_buckets),
        ("phi score", phi_score),
        ("separability auc", auc),
        ("store round-trip", store_round_trip),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use tracing::debug;

use super::blob;
use super::{ExampleMeta, LayerData, LensDb, Manifest, RelevanceEdge, ThumbnailKey, Thumbnails};
use crate::error::{LensError, Result};
use crate::probe::ProbeSet;
use crate::vector::{ComponentKey, Sign};

const MANIFEST: &str = "manifest.json";

/// Loads and fully validates the LensDB rooted at `path`.
pub fn load(path: &Path) -> Result<LensDb> {
    let manifest_path = path.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LensError::MissingBlob {
            path: manifest_path.clone(),
        },
        _ => LensError::io(&manifest_path, e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LensError::CorruptManifest(e.to_string()))?;
    manifest.validate()?;

    let d = manifest.dim;
    let t = manifest.targets.len();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for decl in &manifest.layers {
        let name = &decl.name;
        let rows = decl.rows();
        let m = decl.m_examples;
        let file = |dir: &str, ext: &str| path.join(dir).join(format!("{name}.{ext}"));
        let means = blob::read_f32(&file("embeddings", "f32"), rows * d)?;
        let example_embeddings = decl
            .has_example_embeddings
            .then(|| blob::read_f32(&file("example_embeddings", "f32"), rows * m * d))
            .transpose()?;
        let activations = decl
            .has_activations
            .then(|| blob::read_f32(&file("activations", "f32"), rows * m))
            .transpose()?;
        let relevance = decl
            .has_relevance
            .then(|| blob::read_f32(&file("relevance", "f32"), rows * t))
            .transpose()?;
        let edges = decl
            .has_edges
            .then(|| read_edges(&file("edges", "tsv")))
            .transpose()?;
        let meta_path = file("example_meta", "jsonl");
        let example_meta = meta_path
            .exists()
            .then(|| read_example_meta(&meta_path))
            .transpose()?;
        layers.push(LayerData {
            means,
            example_embeddings,
            activations,
            relevance,
            example_meta,
            edges,
        });
    }

    let mut probe_sets = Vec::with_capacity(manifest.probe_sets.len());
    for name in &manifest.probe_sets {
        let set = ProbeSet::read(&path.join("probes").join(format!("{name}.json")))?;
        if &set.name != name {
            return Err(LensError::InvalidProbeSet(format!(
                "probes/{name}.json declares name {:?}",
                set.name
            )));
        }
        probe_sets.push(set);
    }

    let thumbnails = scan_thumbnails(path, &manifest)?;
    debug!(
        path = %path.display(),
        layers = layers.len(),
        thumbnails = thumbnails.len(),
        "loaded lens db"
    );
    LensDb::new(manifest, layers, probe_sets, thumbnails)
}

/// Writes `db` to `path`, which must not exist yet or be an empty directory.
///
/// Output is a pure function of the database: exporting the same database
/// twice yields byte-identical trees.
pub fn export(db: &LensDb, path: &Path) -> Result<()> {
    if path.exists() {
        let mut entries = fs::read_dir(path).map_err(|e| LensError::io(path, e))?;
        if entries.next().is_some() {
            return Err(LensError::io(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "export target is not empty",
                ),
            ));
        }
    }
    fs::create_dir_all(path).map_err(|e| LensError::io(path, e))?;
    let manifest = db.manifest();
    let manifest_path = path.join(MANIFEST);
    fs::write(&manifest_path, manifest.to_json()).map_err(|e| LensError::io(&manifest_path, e))?;

    for (decl, data) in manifest.layers.iter().zip(db.layer_data()) {
        let name = &decl.name;
        let file = |dir: &str, ext: &str| path.join(dir).join(format!("{name}.{ext}"));
        blob::write_f32(&file("embeddings", "f32"), data.means.iter().copied())?;
        if let Some(e) = &data.example_embeddings {
            blob::write_f32(&file("example_embeddings", "f32"), e.iter().copied())?;
        }
        if let Some(a) = &data.activations {
            blob::write_f32(&file("activations", "f32"), a.iter().copied())?;
        }
        if let Some(r) = &data.relevance {
            blob::write_f32(&file("relevance", "f32"), r.iter().copied())?;
        }
        if let Some(edges) = &data.edges {
            write_edges(&file("edges", "tsv"), edges)?;
        }
        if let Some(meta) = &data.example_meta {
            write_example_meta(&file("example_meta", "jsonl"), meta)?;
        }
    }

    for set in db.probe_sets() {
        set.write(&path.join("probes"))?;
    }

    for key in db.thumbnails().keys() {
        let bytes = db.thumbnails().get(key)?.expect("listed thumbnail");
        let target = path.join(key.relative_path());
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| LensError::io(parent, e))?;
        }
        fs::write(&target, bytes).map_err(|e| LensError::io(&target, e))?;
    }
    Ok(())
}

const EDGE_HEADER: [&str; 6] = [
    "target",
    "upper_layer",
    "upper_index",
    "lower_layer",
    "lower_index",
    "weight",
];

fn format_index(index: usize, sign: Sign) -> String {
    match sign {
        Sign::Positive => index.to_string(),
        Sign::Negative => format!("{index}:neg"),
    }
}

fn parse_index(field: &str) -> Option<(usize, Sign)> {
    match field.strip_suffix(":neg") {
        Some(i) => i.parse().ok().map(|i| (i, Sign::Negative)),
        None => field.parse().ok().map(|i| (i, Sign::Positive)),
    }
}

fn read_edges(path: &Path) -> Result<Vec<RelevanceEdge>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LensError::MissingBlob {
            path: path.to_path_buf(),
        },
        _ => LensError::io(path, e),
    })?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if lineno == 0 && fields == EDGE_HEADER {
            continue;
        }
        let bad = || {
            LensError::InvalidDatabase(format!(
                "{} line {}: expected 6 tab-separated fields \
                 (target, upper_layer, upper_index, lower_layer, lower_index, weight)",
                path.display(),
                lineno + 1
            ))
        };
        let [target, upper_layer, upper_index, lower_layer, lower_index, weight] = fields[..]
        else {
            return Err(bad());
        };
        let (ui, us) = parse_index(upper_index).ok_or_else(bad)?;
        let (li, ls) = parse_index(lower_index).ok_or_else(bad)?;
        edges.push(RelevanceEdge {
            target: target.to_string(),
            upper: ComponentKey {
                layer: upper_layer.to_string(),
                index: ui,
                sign: us,
            },
            lower: ComponentKey {
                layer: lower_layer.to_string(),
                index: li,
                sign: ls,
            },
            weight: weight.parse().map_err(|_| bad())?,
        });
    }
    Ok(edges)
}

fn write_edges(path: &Path, edges: &[RelevanceEdge]) -> Result<()> {
    let mut out = create(path)?;
    for e in edges {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.target,
            e.upper.layer,
            format_index(e.upper.index, e.upper.sign),
            e.lower.layer,
            format_index(e.lower.index, e.lower.sign),
            e.weight
        )
        .map_err(|err| LensError::io(path, err))?;
    }
    out.flush().map_err(|e| LensError::io(path, e))
}

fn read_example_meta(path: &Path) -> Result<Vec<ExampleMeta>> {
    let text = fs::read_to_string(path).map_err(|e| LensError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                LensError::InvalidDatabase(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn write_example_meta(path: &Path, meta: &[ExampleMeta]) -> Result<()> {
    let mut out = create(path)?;
    for rec in meta {
        let line = serde_json::to_string(rec).expect("example meta serializes");
        writeln!(out, "{line}").map_err(|e| LensError::io(path, e))?;
    }
    out.flush().map_err(|e| LensError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LensError::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| LensError::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn scan_thumbnails(root: &Path, manifest: &Manifest) -> Result<Thumbnails> {
    let mut thumbs = Thumbnails::default();
    for decl in &manifest.layers {
        let layer_dir = root.join("examples").join(&decl.name);
        if !layer_dir.is_dir() {
            continue;
        }
        for comp in read_dir_sorted(&layer_dir)? {
            let comp_name = comp.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let (index, sign) = match comp_name.strip_suffix("-neg") {
                Some(i) => (i.parse::<usize>().ok(), Sign::Negative),
                None => (comp_name.parse::<usize>().ok(), Sign::Positive),
            };
            let Some(index) = index.filter(|_| comp.is_dir()) else {
                return Err(LensError::InvalidDatabase(format!(
                    "unexpected entry {} in thumbnail tree",
                    comp.display()
                )));
            };
            for file in read_dir_sorted(&comp)? {
                let rank = file
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(".png"))
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|_| file.is_file());
                let Some(rank) = rank else {
                    return Err(LensError::InvalidDatabase(format!(
                        "unexpected entry {} in thumbnail tree",
                        file.display()
                    )));
                };
                let key = ThumbnailKey {
                    layer: decl.name.clone(),
                    index,
                    sign,
                    rank,
                };
                if key.relative_path() != file.strip_prefix(root).unwrap_or(&file) {
                    // e.g. "007.png": parses, but would not round-trip
                    return Err(LensError::InvalidDatabase(format!(
                        "non-canonical thumbnail path {}",
                        file.display()
                    )));
                }
                thumbs.insert_path(key, file);
            }
        }
    }
    Ok(thumbs)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| LensError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| LensError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

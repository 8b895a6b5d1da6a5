use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lens_core::audit::build_attribution_graph;
use lens_core::fixtures::{generate, LayerSpec, Planted, SyntheticDbSpec};
use lens_core::metrics::layer_metrics;
use lens_core::query::compare_layers;
use lens_core::report::{self, Table};
use lens_core::{
    audit, cluster_labels, dissect, label_components, load, project_2d, search, AuditOptions, GroupBy,
    LayerFilter, LensDb, LensError, ProbeSet,
};
use lens_service::{AppState, EmbedderClient};
use serde::Serialize;

use crate::{CliError, Command, Common, Format, GroupByArg};

type Result<T> = std::result::Result<T, CliError>;

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Validate { common, probes } => {
            let db = open(&common)?;
            if let Some(p) = &probes {
                resolve_probes(&db, p)?;
            }
            let m = db.manifest();
            let table = Table {
                columns: vec!["layer", "n_components", "m_examples", "signed", "rows"],
                rows: m
                    .layers
                    .iter()
                    .map(|l| {
                        vec![
                            l.name.clone(),
                            l.n_components.to_string(),
                            l.m_examples.to_string(),
                            l.signed.to_string(),
                            l.rows().to_string(),
                        ]
                    })
                    .collect(),
            };
            emit(&common, &table, m)
        }
        Command::Search {
            common,
            text,
            vector,
            null_text,
            null_vector,
            no_null,
            layer,
            top_k,
            embedder_url,
        } => {
            let db = open(&common)?;
            let (probe, null) = match (text, vector) {
                (Some(text), _) => {
                    if text.trim().is_empty() {
                        return Err(CliError::Usage("--text must not be empty".into()));
                    }
                    let url = embedder_url.ok_or_else(|| {
                        CliError::Upstream("LENS_EMBEDDER_URL is not set; pass --vector to search without a sidecar".into())
                    })?;
                    let client = EmbedderClient::new(url, db.dim());
                    let texts = if no_null || null_vector.is_some() {
                        vec![text]
                    } else {
                        vec![text, null_text]
                    };
                    let mut embedded = runtime()?.block_on(client.embed_texts(&texts))?.into_iter();
                    let probe = embedded.next().expect("one vector per text").as_slice().to_vec();
                    let null = match null_vector {
                        Some(p) => Some(read_vector(&p)?),
                        None => embedded.next().map(|v| v.as_slice().to_vec()),
                    };
                    (probe, null)
                }
                (None, Some(path)) => {
                    let null = match null_vector {
                        Some(p) => Some(read_vector(&p)?),
                        None => None,
                    };
                    (read_vector(&path)?, null)
                }
                (None, None) => return Err(CliError::Usage("one of --text or --vector is required".into())),
            };
            let hits = search(&db, &probe, null.as_deref(), &LayerFilter::from_names(layer), top_k)?;
            emit(&common, &report::search_table(&hits), &hits)
        }
        Command::Label {
            common,
            probes,
            layer,
            tau,
        } => {
            let db = open(&common)?;
            let probes = resolve_probes(&db, &probes)?;
            let labels = label_components(&db, &probes, &LayerFilter::from_names(layer), tau)?;
            emit(&common, &report::label_table(&labels), &labels)
        }
        Command::Dissect {
            common,
            probes,
            layer,
            tau,
            group_by,
        } => {
            let db = open(&common)?;
            let probes = resolve_probes(&db, &probes)?;
            let labels = label_components(&db, &probes, &LayerFilter::from_names(layer), tau)?;
            let group_by = match group_by {
                GroupByArg::Label => GroupBy::Label,
                GroupByArg::Category => GroupBy::Category,
            };
            let rows = dissect(&labels, group_by);
            emit(&common, &report::dissection_table(&rows), &rows)
        }
        Command::Compare {
            common,
            other,
            layer,
            other_layer,
        } => {
            let db = open(&common)?;
            let other_db = other.as_deref().map(load_db).transpose()?;
            let b = other_db.as_ref().unwrap_or(&db);
            let c = compare_layers(&db, &layer, b, other_layer.as_deref().unwrap_or(&layer))?;
            emit(&common, &report::comparison_table(&c), &c)
        }
        Command::Audit {
            common,
            probes,
            target,
            layer,
            threshold,
            allow_missing_null,
        } => {
            let db = open(&common)?;
            let probes = resolve_probes(&db, &probes)?;
            let options = AuditOptions {
                threshold,
                allow_missing_null,
            };
            let r = audit(&db, &probes, &target, &layer, options)?;
            emit(&common, &report::audit_table(&r), &r)
        }
        Command::Metrics { common, layer, h, seed } => {
            let db = open(&common)?;
            let r = layer_metrics(&db, &layer, h, seed)?;
            emit(&common, &report::metrics_table(&r), &r)
        }
        Command::Project {
            common,
            layer,
            clusters,
            probes,
            top_k,
            seed,
        } => {
            let db = open(&common)?;
            let l = db.layer(&layer)?;
            match (clusters, probes) {
                (Some(k), Some(p)) => {
                    let probes = resolve_probes(&db, &p)?;
                    let c = cluster_labels(l.means(), k, &probes, top_k, seed)?;
                    emit(&common, &report::cluster_table(&c), &c)
                }
                _ => {
                    let p = project_2d(l.means())?;
                    let ids: Vec<_> = (0..l.rows()).map(|r| l.component_id(r)).collect();
                    #[derive(Serialize)]
                    struct Body<'a> {
                        components: Vec<String>,
                        #[serde(flatten)]
                        projection: &'a lens_core::query::Projection,
                    }
                    let body = Body {
                        components: ids.iter().map(|i| i.key()).collect(),
                        projection: &p,
                    };
                    emit(&common, &report::projection_table(&ids, &p.coords), &body)
                }
            }
        }
        Command::Graph {
            common,
            probes,
            target,
            tau,
            threshold,
            dot,
        } => {
            let db = open(&common)?;
            let probes = resolve_probes(&db, &probes)?;
            let labels = label_components(&db, &probes, &LayerFilter::All, tau)?;
            let g = build_attribution_graph(&db, &labels, &target, threshold)?;
            if dot {
                write_out(common.out.as_deref(), &g.to_dot())
            } else {
                emit(&common, &report::graph_edge_table(&g), &g)
            }
        }
        Command::Serve {
            db_path,
            db_flag,
            addr,
            other,
            embedder_url,
        } => {
            let path = db_path
                .or(db_flag)
                .ok_or_else(|| CliError::Usage("a database path is required (positional or --db)".into()))?;
            serve(&path, addr, &other, embedder_url)
        }
        Command::Synth { out, seed, dim } => {
            let spec = SyntheticDbSpec {
                targets: vec!["target".into(), "other".into()],
                thumbnails: 2,
                ..SyntheticDbSpec::new(
                    seed,
                    dim,
                    vec![
                        LayerSpec::new("blobs", Planted::OrthogonalBlobs { concepts: 4, per_concept: 3 }, 6),
                        LayerSpec::new("buckets", Planted::AuditBuckets { per_bucket: 3 }, 4),
                        LayerSpec::new("dups", Planted::Duplicated { pairs: 4 }, 0),
                    ],
                )
            };
            let (db, _) = generate(&spec)?;
            lens_core::export(&db, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn load_db(path: &Path) -> Result<LensDb> {
    Ok(load(path)?)
}

fn open(common: &Common) -> Result<LensDb> {
    load_db(common.db()?)
}

/// A probe file path, or else the name of a probe set in the database.
fn resolve_probes(db: &LensDb, arg: &str) -> Result<ProbeSet> {
    let path = Path::new(arg);
    let set = if path.is_file() {
        ProbeSet::read(path)?
    } else if let Some(set) = db.probe_set(arg) {
        set.clone()
    } else {
        return Err(CliError::Usage(format!(
            "--probes {arg:?} is neither a file nor a probe set in the database"
        )));
    };
    set.validate(db.dim())?;
    Ok(set)
}

fn read_vector(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(|e| LensError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of numbers: {e}", path.display())))
}

fn emit(common: &Common, table: &Table, value: &impl Serialize) -> Result<()> {
    let body = match common.format {
        Format::Csv => table.to_csv()?,
        Format::Text => {
            let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    write_out(common.out.as_deref(), &body)
}

fn write_out(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, body).map_err(|e| LensError::io(path, e).into()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::Runtime(format!("writing report: {e}")))
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(format!("starting async runtime: {e}")))
}

fn serve(path: &PathBuf, addr: std::net::SocketAddr, others: &[String], embedder_url: Option<String>) -> Result<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let db = load_db(path)?;
    let mut other_dbs = BTreeMap::new();
    for spec in others {
        let (id, p) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--other expects ID=PATH, got {spec:?}")))?;
        other_dbs.insert(id.to_string(), load_db(Path::new(p))?);
    }
    let embedder = embedder_url.map(|url| EmbedderClient::new(url, db.dim()));
    let state = AppState::with_others(db, other_dbs, embedder);
    runtime()?
        .block_on(lens_service::serve(state, addr, |local| {
            println!("listening on http://{local}");
            let _ = std::io::stdout().flush();
        }))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))
}

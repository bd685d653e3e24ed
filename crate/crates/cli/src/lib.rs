//! The `/v1` HTTP API over run directories.
//!
//! Every response is derived from files in the run directory. Cluster
//! assignments, metrics, heatmaps and the projection are computed on first
//! request through the same stage functions the CLI uses and cached there.
//! Verdicts are appended to `verdicts.jsonl` through a single writer.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/v1/runs` | run summaries |
//! | GET | `/v1/runs/{id}/clusters?q=Q` | assignment summary, metrics, current verdicts |
//! | GET | `/v1/runs/{id}/clusters/{cid}/heatmap?q=Q` | `image/png`; `cid` may be `noise` |
//! | GET | `/v1/runs/{id}/clusters/{cid}/heatmap/rows?q=Q` | heatmap sidecar rows |
//! | GET | `/v1/runs/{id}/clusters/{cid}/members?q=Q` | members, access components, positive-pair Jaccard |
//! | GET | `/v1/runs/{id}/clusters/{cid}/verdicts?q=Q` | verdict history of the cluster |
//! | POST | `/v1/runs/{id}/clusters/{cid}/verdict` | `{q, decision, note}` → stored verdict |
//! | GET | `/v1/runs/{id}/projection[?q=Q]` | 2-D PCA of the representations |
//!
//! Errors are `{"code": ..., "message": ...}` with status 400 (`bad_request`),
//! 404 (`not_found`) or 500 (the library error code).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use trajguard::cluster::{ClusterAssignment, KnnMode, NOISE};
use trajguard::dataset::DownstreamTrajectory;
use trajguard::extract::{Key, RepTable};
use trajguard::heatmap::{render_cluster, HeatmapSpec, SidecarRow};
use trajguard::metrics::{select_pairs, time_jaccard, MetricsReport};
use trajguard::pipeline::{self, ModelShape, PrepSummary, TrainSetup};
use trajguard::projection::pca_2d;
use trajguard::store::{
    append_verdict, check_q, current_verdicts, read_manifest, read_verdicts, write_atomic, Decision,
    RunLayout, Stage, Verdict,
};
use trajguard::synth::{AccessInfoGraph, ScenarioConfig};
use trajguard::{Error, WorldConfig};

/// Seed for negative-pair sampling in served metrics.
pub const EVAL_SEED: u64 = 0;
pub const DEFAULT_Q: f64 = 0.05;

pub struct AppState {
    runs: BTreeMap<String, RunLayout>,
    /// Serializes on-demand computation so concurrent requests for the same
    /// q do not race on the cache.
    compute: std::sync::Mutex<()>,
    /// The single verdict writer.
    verdicts: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Runs are identified by their directory name.
    pub fn new(dirs: Vec<PathBuf>) -> trajguard::Result<Arc<Self>> {
        let mut runs = BTreeMap::new();
        for d in dirs {
            let layout = RunLayout::new(&d);
            if !layout.reps().is_file() {
                return Err(Error::invalid("run", format!("{} has no reps/reps.bin; run embed first", d.display())));
            }
            let id = d
                .canonicalize()
                .map_err(|e| Error::io(&d, e))?
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::invalid("run", format!("{} has no name", d.display())))?;
            if runs.insert(id.clone(), layout).is_some() {
                return Err(Error::invalid("run", format!("two runs named {id}")));
            }
        }
        Ok(Arc::new(Self {
            runs,
            compute: std::sync::Mutex::new(()),
            verdicts: tokio::sync::Mutex::new(()),
        }))
    }

    fn run(&self, id: &str) -> Result<RunLayout, ApiError> {
        self.runs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("run {id}")))
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound(_) => Self::not_found(e.to_string()),
            Error::InvalidInput { .. } => Self::bad_request(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct QParam {
    q: Option<String>,
}

impl QParam {
    fn value(&self) -> ApiResult<f64> {
        let Some(s) = &self.q else {
            return Ok(DEFAULT_Q);
        };
        let q: f64 = s.parse().map_err(|_| ApiError::bad_request(format!("q={s} is not a number")))?;
        Ok(check_q(q)?)
    }
}

fn parse_cluster(s: &str) -> ApiResult<i64> {
    if s == "noise" {
        return Ok(NOISE);
    }
    match s.parse::<i64>() {
        Ok(c) if c >= NOISE => Ok(c),
        _ => Err(ApiError::bad_request(format!("cluster id {s} is not an integer or 'noise'"))),
    }
}

/// Assignment and metrics for `q`, computing and caching them if needed.
fn ensure_clusters(state: &AppState, run: &RunLayout, q: f64) -> trajguard::Result<(ClusterAssignment, MetricsReport)> {
    let _guard = state.compute.lock().unwrap_or_else(|e| e.into_inner());
    let cdir = run.clusters(q);
    let mdir = run.metrics(q);
    pipeline::cluster_stage(&run.reps(), q, KnnMode::All, &cdir)?;
    let assignment = cdir.join(pipeline::ASSIGNMENT);
    pipeline::evaluate_stage(&assignment, &run.reps(), &run.prep(), &run.access(), EVAL_SEED, &mdir)?;
    Ok((
        ClusterAssignment::load(&assignment)?,
        pipeline::load_metrics(&mdir.join(pipeline::METRICS))?,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub seed: Option<u64>,
    pub scenario: Option<ScenarioConfig>,
    pub prep: Option<PrepSummary>,
    pub model: Option<ModelShape>,
    pub n_representations: usize,
    pub cached_q: Vec<f64>,
}

fn summarize(id: &str, run: &RunLayout) -> trajguard::Result<RunSummary> {
    let seed = read_manifest(&run.sim()).ok().map(|m| m.seed);
    let scenario = ScenarioConfig::load(&run.sim().join("scenario.toml")).ok();
    let prep = std::fs::read_to_string(run.prep().join(pipeline::PREP_SUMMARY))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let model = TrainSetup::load(&run.model().join(pipeline::MODEL_SETUP)).ok().map(|s| s.model);
    let n_representations = RepTable::load(&run.reps())?.len();
    let mut cached_q = Vec::new();
    if let Ok(entries) = std::fs::read_dir(run.root.join("clusters")) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(q) = name.strip_prefix('q').and_then(|s| s.parse::<f64>().ok()) {
                if e.path().join(pipeline::ASSIGNMENT).is_file() {
                    cached_q.push(q);
                }
            }
        }
    }
    cached_q.sort_by(f64::total_cmp);
    Ok(RunSummary {
        id: id.to_string(),
        seed,
        scenario,
        prep,
        model,
        n_representations,
        cached_q,
    })
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RunSummary>>> {
    blocking(move || {
        let mut out = Vec::new();
        for (id, run) in &state.runs {
            out.push(summarize(id, run)?);
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: i64,
    pub size: usize,
    pub access_components: usize,
    pub pos_mean: f64,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClustersResponse {
    pub run: String,
    pub q: f64,
    pub epsilon: f64,
    pub min_samples: usize,
    pub detecting_count: usize,
    pub n_clusters: usize,
    pub noise_count: usize,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    pub access_homogeneity: Option<f64>,
    pub clusters: Vec<ClusterSummary>,
}

async fn clusters(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(qp): Query<QParam>,
) -> ApiResult<Json<ClustersResponse>> {
    let run = state.run(&id)?;
    let q = qp.value()?;
    blocking(move || {
        let (a, m) = ensure_clusters(&state, &run, q)?;
        let verdicts = current_verdicts(&read_verdicts(&run.verdicts())?, q);
        let clusters = m
            .per_cluster
            .iter()
            .map(|c| ClusterSummary {
                id: c.id,
                size: c.size,
                access_components: c.access_components,
                pos_mean: c.pos_mean,
                verdict: verdicts.get(&c.id).cloned(),
            })
            .collect();
        Ok(Json(ClustersResponse {
            run: id,
            q,
            epsilon: a.epsilon,
            min_samples: a.min_samples,
            detecting_count: m.detecting_count,
            n_clusters: m.n_clusters,
            noise_count: a.noise().len(),
            pos_mean: m.pos_mean,
            neg_mean: m.neg_mean,
            access_homogeneity: m.access_homogeneity,
            clusters,
        }))
    })
    .await
}

fn cluster_exists(a: &ClusterAssignment, cid: i64) -> ApiResult<()> {
    if a.labels.values().any(|&l| l == cid) {
        Ok(())
    } else if cid == NOISE {
        Err(ApiError::not_found("no noise points at this q"))
    } else {
        Err(ApiError::not_found(format!("cluster {cid}")))
    }
}

/// Heatmap PNG path for one cluster, rendering it on first use.
fn ensure_heatmap(state: &AppState, run: &RunLayout, q: f64, cid: i64) -> ApiResult<PathBuf> {
    let (a, _) = ensure_clusters(state, run, q)?;
    cluster_exists(&a, cid)?;
    let label = if cid == NOISE { "noise".to_string() } else { format!("c{cid}") };
    let dir = run.heatmaps(q).join(label);
    let png = dir.join("heatmap.png");
    let assignment = run.clusters(q).join(pipeline::ASSIGNMENT);
    let trajs = run.prep().join(pipeline::PREP_TRAJECTORIES);
    let world = run.prep().join(pipeline::PREP_WORLD);
    let _guard = state.compute.lock().unwrap_or_else(|e| e.into_inner());
    let spec = HeatmapSpec::default();
    Stage::new("heatmap", 0, &(spec, cid))?
        .input("assignment", &assignment)?
        .input("trajectories", &trajs)?
        .input("world", &world)?
        .run(&dir, || {
            let all = pipeline::load_prep_trajectories(&run.prep())?;
            let w = WorldConfig::load(&world)?;
            let img = render_cluster(&a, cid, &all, &w, spec)?;
            write_atomic(&png, &img.to_png()?)?;
            img.write_sidecar(&png)?;
            Ok(vec!["heatmap.png".into(), "heatmap.json".into()])
        })?;
    Ok(png)
}

async fn heatmap(
    State(state): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    Query(qp): Query<QParam>,
) -> ApiResult<Response> {
    let run = state.run(&id)?;
    let q = qp.value()?;
    let cid = parse_cluster(&cid)?;
    let bytes = blocking(move || {
        let png = ensure_heatmap(&state, &run, q, cid)?;
        std::fs::read(&png).map_err(|e| ApiError::from(Error::io(png, e)))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn heatmap_rows(
    State(state): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    Query(qp): Query<QParam>,
) -> ApiResult<Json<Vec<SidecarRow>>> {
    let run = state.run(&id)?;
    let q = qp.value()?;
    let cid = parse_cluster(&cid)?;
    blocking(move || {
        let png = ensure_heatmap(&state, &run, q, cid)?;
        let path = trajguard::heatmap::sidecar_path(&png);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rows = serde_json::from_str(&text).map_err(|e| Error::format("sidecar", e.to_string()))?;
        Ok(Json(rows))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Member {
    pub player_id: u32,
    pub day: u16,
    pub access_node: Option<u32>,
    /// Nearest same-cluster member in representation space.
    pub partner: Option<Key>,
    pub pos_jaccard: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JaccardSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MembersResponse {
    pub run: String,
    pub q: f64,
    pub cluster: i64,
    pub access_components: usize,
    pub pos_jaccard: JaccardSummary,
    pub members: Vec<Member>,
}

fn members_of(state: &AppState, run: &RunLayout, q: f64, cid: i64) -> ApiResult<(usize, JaccardSummary, Vec<Member>)> {
    let (a, _) = ensure_clusters(state, run, q)?;
    cluster_exists(&a, cid)?;
    let keys: Vec<Key> = a.labels.iter().filter(|(_, &l)| l == cid).map(|(&k, _)| k).collect();
    let graph = AccessInfoGraph::load_json(&run.access())?;
    let nodes: Vec<u32> = keys.iter().filter_map(|k| graph.player_nodes.get(&k.0).copied()).collect();
    let components = graph.components_among(&nodes);
    let mut partners: BTreeMap<Key, Key> = BTreeMap::new();
    if cid != NOISE {
        let table = RepTable::load(&run.reps())?;
        for (k, p) in select_pairs(&a, &table, EVAL_SEED)?.pos {
            if a.labels[&k] == cid {
                partners.insert(k, p);
            }
        }
    }
    let trajs = pipeline::load_prep_trajectories(&run.prep())?;
    let by_key: BTreeMap<Key, &DownstreamTrajectory> = trajs.iter().map(|t| (t.key(), t)).collect();
    let cells = |k: &Key| {
        by_key
            .get(k)
            .map(|t| &t.cells_by_minute[..])
            .ok_or_else(|| Error::invalid("trajectories", format!("no trajectory for {k:?}")))
    };
    let mut members = Vec::new();
    let mut js = Vec::new();
    for k in keys {
        let partner = partners.get(&k).copied();
        let pos_jaccard = match partner {
            Some(p) => Some(time_jaccard(cells(&k)?, cells(&p)?)?),
            None => None,
        };
        js.extend(pos_jaccard);
        members.push(Member {
            player_id: k.0,
            day: k.1,
            access_node: graph.player_nodes.get(&k.0).copied(),
            partner,
            pos_jaccard,
        });
    }
    let summary = JaccardSummary {
        n: js.len(),
        mean: (!js.is_empty()).then(|| js.iter().sum::<f64>() / js.len() as f64),
        min: js.iter().copied().reduce(f64::min),
        max: js.iter().copied().reduce(f64::max),
    };
    Ok((components, summary, members))
}

async fn members(
    State(state): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    Query(qp): Query<QParam>,
) -> ApiResult<Json<MembersResponse>> {
    let run = state.run(&id)?;
    let q = qp.value()?;
    let cid = parse_cluster(&cid)?;
    blocking(move || {
        let (access_components, pos_jaccard, members) = members_of(&state, &run, q, cid)?;
        Ok(Json(MembersResponse {
            run: id,
            q,
            cluster: cid,
            access_components,
            pos_jaccard,
            members,
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub q: Option<f64>,
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
}

async fn post_verdict(
    State(state): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    body: Result<Json<VerdictRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<Verdict>)> {
    let run = state.run(&id)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let q = check_q(req.q.unwrap_or(DEFAULT_Q))?;
    let cid = parse_cluster(&cid)?;
    if cid == NOISE {
        return Err(ApiError::bad_request("verdicts apply to clusters, not noise"));
    }
    let st = state.clone();
    let r = run.clone();
    blocking(move || {
        let (a, _) = ensure_clusters(&st, &r, q)?;
        cluster_exists(&a, cid)
    })
    .await?;
    let verdict = Verdict {
        q,
        cluster: cid,
        decision: req.decision,
        note: req.note,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let _writer = state.verdicts.lock().await;
    let path = run.verdicts();
    let v = verdict.clone();
    blocking(move || Ok(append_verdict(&path, &v)?)).await?;
    Ok((StatusCode::CREATED, Json(verdict)))
}

async fn verdict_history(
    State(state): State<Arc<AppState>>,
    UrlPath((id, cid)): UrlPath<(String, String)>,
    Query(qp): Query<QParam>,
) -> ApiResult<Json<Vec<Verdict>>> {
    let run = state.run(&id)?;
    let q = qp.value()?;
    let cid = parse_cluster(&cid)?;
    let all = read_verdicts(&run.verdicts())?;
    Ok(Json(all.into_iter().filter(|v| v.q == q && v.cluster == cid).collect()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectedMember {
    pub player_id: u32,
    pub day: u16,
    pub x: f64,
    pub y: f64,
    pub cluster: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub run: String,
    pub q: Option<f64>,
    pub explained_variance: [f64; 2],
    pub points: Vec<ProjectedMember>,
}

fn ensure_projection(state: &AppState, run: &RunLayout) -> trajguard::Result<trajguard::projection::Projection> {
    let _guard = state.compute.lock().unwrap_or_else(|e| e.into_inner());
    let dir = run.root.join("projection");
    let path = dir.join("projection.json");
    Stage::new("projection", 0, &())?.input("reps", &run.reps())?.run(&dir, || {
        let p = pca_2d(&RepTable::load(&run.reps())?)?;
        let mut s = serde_json::to_string(&p).map_err(|e| Error::format("projection", e.to_string()))?;
        s.push('\n');
        write_atomic(&path, s.as_bytes())?;
        Ok(vec!["projection.json".into()])
    })?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("projection", e.to_string()))
}

async fn projection(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(qp): Query<QParam>,
) -> ApiResult<Json<ProjectionResponse>> {
    let run = state.run(&id)?;
    let q = match qp.q {
        Some(_) => Some(qp.value()?),
        None => None,
    };
    blocking(move || {
        let p = ensure_projection(&state, &run)?;
        let labels = match q {
            Some(q) => Some(ensure_clusters(&state, &run, q)?.0.labels),
            None => None,
        };
        let points = p
            .points
            .into_iter()
            .map(|pt| ProjectedMember {
                cluster: labels.as_ref().and_then(|l| l.get(&(pt.player_id, pt.day)).copied()),
                player_id: pt.player_id,
                day: pt.day,
                x: pt.x,
                y: pt.y,
            })
            .collect();
        Ok(Json(ProjectionResponse {
            run: id,
            q,
            explained_variance: p.explained_variance,
            points,
        }))
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/{id}/clusters", get(clusters))
        .route("/v1/runs/{id}/clusters/{cid}/heatmap", get(heatmap))
        .route("/v1/runs/{id}/clusters/{cid}/heatmap/rows", get(heatmap_rows))
        .route("/v1/runs/{id}/clusters/{cid}/members", get(members))
        .route("/v1/runs/{id}/clusters/{cid}/verdicts", get(verdict_history))
        .route("/v1/runs/{id}/clusters/{cid}/verdict", post(post_verdict))
        .route("/v1/runs/{id}/projection", get(projection))
        .fallback(fallback)
        .with_state(state)
}

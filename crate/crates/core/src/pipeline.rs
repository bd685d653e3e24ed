//! The stages of a run, each guarded by a [`Stage`] manifest:
//! simulate, prep, train, embed, cluster, evaluate, heatmap.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{load_encoder, save_encoder};
use crate::cluster::{cluster_table, ClusterAssignment, KnnMode};
use crate::dataset::{
    build_downstream, load_trajectories, load_triplets, make_triplets, prep_sequences,
    save_trajectories, save_triplets, DownstreamTrajectory,
};
use crate::error::{Error, Result};
use crate::extract::{extract_all, RepTable};
use crate::geo::{build_vocabulary, Vocabulary, WorldConfig};
use crate::heatmap::{render, sidecar_path, HeatmapSpec};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Encoder, ModelConfig};
use crate::store::{write_atomic, Outcome, Stage};
use crate::synth::{
    export_logs, import_logs, read_json, save_profiles, simulate, write_json, AccessInfoGraph,
    ScenarioConfig,
};
use crate::train::{resume, train, EpochStats, TrainConfig, TrainReport, TrainState};

pub const PREP_VOCAB: &str = "vocab.bin";
pub const PREP_TRIPLETS: &str = "triplets.bin";
pub const PREP_TRAJECTORIES: &str = "trajectories.bin";
pub const PREP_WORLD: &str = "world.toml";
pub const PREP_SUMMARY: &str = "prep.json";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const MODEL_STATE: &str = "state.ckpt";
pub const MODEL_REPORT: &str = "report.json";
pub const MODEL_SETUP: &str = "setup.toml";
pub const REPS_BIN: &str = "reps.bin";
pub const REPS_SKIPPED: &str = "skipped.json";
pub const ASSIGNMENT: &str = "assignment.json";
pub const METRICS: &str = "metrics.json";

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))
}

fn parent(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes `DIR/{world.toml, scenario.toml, profiles.json, access.json,
/// teleports.json, logs/day_DD.csv}`.
pub fn simulate_stage(
    world: &WorldConfig,
    scenario: &ScenarioConfig,
    seed: u64,
    dir: &Path,
) -> Result<Outcome> {
    world.validate()?;
    scenario.validate(world)?;
    let stage = Stage::new("simulate", seed, &(world, scenario))?;
    stage.run(dir, || {
        let sim = simulate(world, scenario, seed)?;
        write_atomic(&dir.join("world.toml"), world.to_toml_string().as_bytes())?;
        write_atomic(&dir.join("scenario.toml"), scenario.to_toml_string().as_bytes())?;
        save_profiles(&sim.profiles, &dir.join("profiles.json"))?;
        sim.graph.save_json(&dir.join("access.json"))?;
        write_json(&dir.join("teleports.json"), &sim.teleports)?;
        let logs = dir.join("logs");
        if logs.exists() {
            std::fs::remove_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        }
        let mut out: Vec<String> = ["world.toml", "scenario.toml", "profiles.json", "access.json", "teleports.json"]
            .map(String::from)
            .into();
        for p in export_logs(&sim.logs, &logs)? {
            out.push(format!("logs/{}", file_name(&p)?));
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub n_logs: usize,
    pub n_chunks: usize,
    pub n_triplets: usize,
    pub n_trajectories: usize,
    pub zone_vocab_size: usize,
    pub cell_vocab_size: usize,
    pub vocab_hash: String,
}

/// Vocabulary over every logged location, the triplet corpus and the
/// downstream trajectories.
pub fn prep_stage(
    logs_dir: &Path,
    world_path: &Path,
    mask_rate: f64,
    seed: u64,
    dir: &Path,
) -> Result<Outcome> {
    let stage = Stage::new("prep", seed, &mask_rate)?
        .input("logs", logs_dir)?
        .input("world", world_path)?;
    stage.run(dir, || {
        let world = WorldConfig::load(world_path)?;
        let logs = import_logs(logs_dir)?;
        let vocab = build_vocabulary(logs.iter().map(|l| l.samples.iter().flatten()), &world)?;
        let mut chunks = Vec::new();
        for l in &logs {
            chunks.extend(prep_sequences(l, &world, &vocab)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let triplets = make_triplets(&chunks, mask_rate, &mut rng)?;
        let trajs = logs
            .iter()
            .map(|l| build_downstream(l, &world, &vocab))
            .collect::<Result<Vec<_>>>()?;
        vocab.save(&dir.join(PREP_VOCAB))?;
        save_triplets(&triplets, &dir.join(PREP_TRIPLETS))?;
        save_trajectories(&trajs, &dir.join(PREP_TRAJECTORIES))?;
        write_atomic(&dir.join(PREP_WORLD), world.to_toml_string().as_bytes())?;
        let summary = PrepSummary {
            n_logs: logs.len(),
            n_chunks: chunks.len(),
            n_triplets: triplets.len(),
            n_trajectories: trajs.len(),
            zone_vocab_size: vocab.zone_vocab_size(),
            cell_vocab_size: vocab.cell_vocab_size(),
            vocab_hash: vocab.hash(),
        };
        log::info!(
            "prep: {} logs, {} chunks, {} triplets, vocab {}/{}",
            summary.n_logs,
            summary.n_chunks,
            summary.n_triplets,
            summary.zone_vocab_size,
            summary.cell_vocab_size
        );
        write_json(&dir.join(PREP_SUMMARY), &summary)?;
        Ok([PREP_VOCAB, PREP_TRIPLETS, PREP_TRAJECTORIES, PREP_WORLD, PREP_SUMMARY]
            .map(String::from)
            .into())
    })
}

/// Encoder dimensions; the vocabulary sizes come from the prep directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_hid: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl ModelShape {
    pub fn dagger() -> Self {
        let c = ModelConfig::dagger(0, 0);
        Self {
            d_model: c.d_model,
            d_hid: c.d_hid,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
        }
    }

    pub fn config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_hid: self.d_hid,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            zone_vocab_size: vocab.zone_vocab_size(),
            cell_vocab_size: vocab.cell_vocab_size(),
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::dagger()
    }
}

/// Contents of a `--config` file for `train --preset custom`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSetup {
    pub model: ModelShape,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn dagger(seed: u64) -> Self {
        let (_, train) = crate::train::Preset::Dagger.configs(0, 0, seed);
        Self {
            model: ModelShape::dagger(),
            train,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("train setup: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train setup is always serializable")
    }
}

/// Trains on `prep_dir/triplets.bin`. A training state is saved after every
/// epoch; with `resume_state` an existing one is continued.
pub fn train_stage(
    prep_dir: &Path,
    setup: &TrainSetup,
    dir: &Path,
    resume_state: bool,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Outcome> {
    let stage = Stage::new("train", setup.train.seed, setup)?
        .input("vocab", &prep_dir.join(PREP_VOCAB))?
        .input("triplets", &prep_dir.join(PREP_TRIPLETS))?;
    stage.run(dir, || {
        let vocab = Vocabulary::load(&prep_dir.join(PREP_VOCAB))?;
        let triplets = load_triplets(&prep_dir.join(PREP_TRIPLETS))?;
        let cfg = setup.model.config(&vocab);
        let state_path = dir.join(MODEL_STATE);
        let mut hook = |s: &EpochStats, st: &TrainState| {
            on_epoch(s);
            st.save(&setup.train, &state_path)
        };
        let outcome = if resume_state && state_path.exists() {
            let (state, saved) = TrainState::load(&state_path)?;
            if state.encoder.config != cfg || state.encoder.vocab_hash != vocab.hash() {
                return Err(Error::invalid("resume", "saved state belongs to a different model or vocabulary"));
            }
            if saved != setup.train {
                log::warn!("resume: training config differs from the saved state; using the new one");
            }
            log::info!("resuming after epoch {}", state.epochs_done());
            resume(&triplets, state, &setup.train, &mut hook)?
        } else {
            let enc = Encoder::new(cfg, vocab.hash(), setup.train.seed)?;
            train(&triplets, enc, &setup.train, &mut hook)?
        };
        if let Some(msg) = &outcome.report.diverged {
            log::warn!("training diverged: {msg}; keeping epoch {}", outcome.report.best_epoch);
        }
        save_encoder(&outcome.encoder, &dir.join(MODEL_CKPT))?;
        write_json(&dir.join(MODEL_REPORT), &outcome.report)?;
        write_atomic(&dir.join(MODEL_SETUP), setup.to_toml_string().as_bytes())?;
        Ok([MODEL_CKPT, MODEL_REPORT, MODEL_SETUP].map(String::from).into())
    })
}

pub fn load_report(model_dir: &Path) -> Result<TrainReport> {
    read_json(&model_dir.join(MODEL_REPORT), "train report")
}

/// Representations of every downstream trajectory; empty ones are listed in
/// `skipped.json`.
pub fn embed_stage(ckpt: &Path, prep_dir: &Path, dir: &Path, parallel: bool) -> Result<Outcome> {
    let stage = Stage::new("embed", 0, &())?
        .input("model", ckpt)?
        .input("vocab", &prep_dir.join(PREP_VOCAB))?
        .input("trajectories", &prep_dir.join(PREP_TRAJECTORIES))?;
    stage.run(dir, || {
        let enc = load_encoder(ckpt)?;
        let vocab = Vocabulary::load(&prep_dir.join(PREP_VOCAB))?;
        let trajs = load_trajectories(&prep_dir.join(PREP_TRAJECTORIES))?;
        let out = extract_all(&trajs, &enc, &vocab, parallel)?;
        log::info!("embed: {} representations, {} skipped", out.table.len(), out.skipped.len());
        write_atomic(&dir.join(REPS_BIN), &out.table.to_bytes())?;
        write_json(&dir.join(REPS_SKIPPED), &out.skipped)?;
        Ok([REPS_BIN, REPS_SKIPPED].map(String::from).into())
    })
}

/// Writes `dir/assignment.json`.
pub fn cluster_stage(reps: &Path, q: f64, mode: KnnMode, dir: &Path) -> Result<Outcome> {
    crate::store::check_q(q)?;
    let stage = Stage::new("cluster", 0, &(q, mode))?.input("reps", reps)?;
    stage.run(dir, || {
        let table = RepTable::load(reps)?;
        let a = cluster_table(&table, q, mode)?;
        log::info!(
            "cluster: q={q} epsilon={:.6} clusters={} detecting={}",
            a.epsilon,
            a.n_clusters(),
            crate::cluster::detecting_count(&a)
        );
        write_atomic(&dir.join(ASSIGNMENT), &assignment_bytes(&a)?)?;
        Ok(vec![ASSIGNMENT.to_string()])
    })
}

fn assignment_bytes(a: &ClusterAssignment) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(&a.to_json()).map_err(|e| Error::format("assignment", e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Writes `dir/metrics.json`.
pub fn evaluate_stage(
    assignment: &Path,
    reps: &Path,
    prep_dir: &Path,
    access: &Path,
    seed: u64,
    dir: &Path,
) -> Result<Outcome> {
    let stage = Stage::new("evaluate", seed, &())?
        .input("assignment", assignment)?
        .input("reps", reps)?
        .input("trajectories", &prep_dir.join(PREP_TRAJECTORIES))?
        .input("access", access)?;
    stage.run(dir, || {
        let a = ClusterAssignment::load(assignment)?;
        let table = RepTable::load(reps)?;
        let trajs = load_trajectories(&prep_dir.join(PREP_TRAJECTORIES))?;
        let graph = AccessInfoGraph::load_json(access)?;
        let report = evaluate(&a, &table, &trajs, &graph, seed)?;
        write_json(&dir.join(METRICS), &report)?;
        Ok(vec![METRICS.to_string()])
    })
}

pub fn load_metrics(path: &Path) -> Result<MetricsReport> {
    read_json(path, "metrics report")
}

/// Writes the cluster image at `out`, the noise image next to it, and their
/// sidecars.
pub fn heatmap_stage(
    assignment: &Path,
    prep_dir: &Path,
    world: &Path,
    spec: HeatmapSpec,
    out: &Path,
) -> Result<Outcome> {
    let dir = parent(out);
    let name = file_name(out)?;
    let stage = Stage::new("heatmap", 0, &(spec, &name))?
        .input("assignment", assignment)?
        .input("trajectories", &prep_dir.join(PREP_TRAJECTORIES))?
        .input("world", world)?;
    stage.run(&dir, || {
        let a = ClusterAssignment::load(assignment)?;
        let trajs = load_trajectories(&prep_dir.join(PREP_TRAJECTORIES))?;
        let w = WorldConfig::load(world)?;
        let mut names = Vec::new();
        for img in render(&a, &trajs, &w, spec, out)? {
            names.push(file_name(&img)?);
            names.push(file_name(&sidecar_path(&img))?);
        }
        Ok(names)
    })
}

pub fn load_prep_trajectories(prep_dir: &Path) -> Result<Vec<DownstreamTrajectory>> {
    load_trajectories(&prep_dir.join(PREP_TRAJECTORIES))
}

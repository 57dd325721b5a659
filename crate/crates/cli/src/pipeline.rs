//! Stage graph, content-hash stamps and the run driver.
//!
//! Output layout under the run directory:
//!
//! ```text
//! patterns/     grid.png vertical.png horizontal.png grid_spec.json
//! scenes/<id>/  grid.png vertical.png horizontal.png truth.json meta.json
//! labels/       <id>.png
//! dataset/      manifest.json
//! checkpoints/  model.gpck history.csv
//! detections/<id>/  prob.bin prob.png cnn.json classical.json groundtruth.json
//! reports/      eval.csv eval.json counts.csv overlays/<id>_<method>.png
//! stamps/       <stage>.json
//! run_manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use gridpoint_core::detect::{classical_detect, detect, detect_skeleton, FeaturePointSet, ProbMap};
use gridpoint_core::eval::{count_table, emit_overlay, EvalReport};
use gridpoint_core::image::{load_gray_png, save_gray_png};
use gridpoint_core::label::label_from_pair;
use gridpoint_core::patches::{PatchManifest, PatchSource, SourceEntry};
use gridpoint_core::pattern::{make_grid_spec, render_pattern, GridSpec, PatternMode};
use gridpoint_core::scene::{load_truth, make_surface, render_trio, surface_preset, GRID_PNG, HORIZONTAL_PNG, VERTICAL_PNG};
use gridpoint_core::{BinaryImage, Point};
use gridpoint_net::train::write_history_csv;
use gridpoint_net::{predict_full, ModelCheckpoint, NetError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, Split};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pattern,
    Simulate,
    Label,
    Patches,
    Train,
    Predict,
    Detect,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Pattern,
        Stage::Simulate,
        Stage::Label,
        Stage::Patches,
        Stage::Train,
        Stage::Predict,
        Stage::Detect,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pattern => "pattern",
            Stage::Simulate => "simulate",
            Stage::Label => "label",
            Stage::Patches => "patches",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Detect => "detect",
            Stage::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Pattern => &[],
            Simulate => &[Pattern],
            Label => &[Simulate],
            Patches => &[Simulate, Label],
            Train => &[Patches],
            Predict => &[Simulate, Train],
            Detect => &[Simulate, Label, Predict],
            Eval => &[Simulate, Detect],
        }
    }
}

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const LOCK_FILE: &str = ".gridpoint.lock";
pub const EVAL_CSV: &str = "reports/eval.csv";
pub const EVAL_JSON: &str = "reports/eval.json";
pub const CHECKPOINT: &str = "checkpoints/model.gpck";
pub const HISTORY_CSV: &str = "checkpoints/history.csv";
const PROB_MAGIC: &[u8; 8] = b"GPPROB01";

/// Record of a finished stage: what went in and what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub inputs: String,
    /// Output file (relative to the run directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Stamp {
    fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.outputs).expect("map serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub inputs: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// The resolved configuration; running it again reproduces this run.
    pub config: String,
    pub seed: u64,
    pub deterministic: bool,
    pub stages: Vec<StageRecord>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_toml(&self.config)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside one run directory.
struct Run<'a> {
    cfg: &'a PipelineConfig,
    root: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn save_prob(prob: &ProbMap, path: &Path) -> Result<()> {
    let (h, w) = prob.dim();
    let mut buf = Vec::with_capacity(16 + 4 * prob.len());
    buf.extend_from_slice(PROB_MAGIC);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    for v in prob.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn load_prob(path: &Path) -> Result<ProbMap> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = || CliError::Runtime(format!("{}: not a probability map", path.display()));
    if bytes.len() < 16 || &bytes[..8] != PROB_MAGIC {
        return Err(bad());
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * w * h {
        return Err(bad());
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(ProbMap::from_shape_vec((h, w), data).expect("length checked"))
}

fn test_ids(cfg: &PipelineConfig) -> Vec<&str> {
    cfg.scenes_in(Split::Test).map(|s| s.id.as_str()).collect()
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.root.join("stamps").join(format!("{}.json", stage.name()))
    }

    fn read_stamp(&self, stage: Stage) -> Option<Stamp> {
        let text = fs::read_to_string(self.stamp_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Configuration a stage's outputs depend on.
    fn stage_config(&self, stage: Stage) -> Result<Value> {
        let c = self.cfg;
        Ok(match stage {
            Stage::Pattern => json!({ "layout": c.grid_layout() }),
            Stage::Simulate => {
                let scenes: Vec<Value> = c
                    .scenes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        json!({
                            "id": s.id,
                            "surface": s.surface,
                            "photometry": c.photometry(s),
                            "seed": c.scene_seed(i),
                        })
                    })
                    .collect();
                json!({ "dims": c.dims(), "scenes": scenes })
            }
            Stage::Label => json!({ "params": c.label_params() }),
            Stage::Patches => {
                let train: Vec<&str> = c.scenes_in(Split::Train).map(|s| s.id.as_str()).collect();
                json!({ "dataset": c.dataset, "train": train, "seed": c.split_seed() })
            }
            Stage::Train => json!({ "arch": c.model, "hyper": c.hyper()? }),
            Stage::Predict => json!({ "test": test_ids(c) }),
            Stage::Detect => json!({
                "test": test_ids(c),
                "detect": c.detect,
                "classical": c.classical_params(),
            }),
            Stage::Eval => json!({ "test": test_ids(c), "eval": c.eval }),
        })
    }

    /// Input fingerprint of `stage`, given valid stamps for all its upstream stages.
    fn inputs(&self, stage: Stage, stamps: &BTreeMap<Stage, Stamp>) -> Result<String> {
        let upstream: Vec<Value> = stage
            .deps()
            .iter()
            .map(|d| json!([d.name(), stamps[d].digest()]))
            .collect();
        let doc = json!({
            "stage": stage.name(),
            "tool": env!("CARGO_PKG_VERSION"),
            "config": self.stage_config(stage)?,
            "upstream": upstream,
        });
        Ok(sha256_hex(&serde_json::to_vec(&doc).expect("json")))
    }

    /// A stamp is current when its inputs match and its outputs are intact.
    fn current_stamp(&self, stage: Stage, stamps: &BTreeMap<Stage, Stamp>) -> Result<Option<Stamp>> {
        if stage.deps().iter().any(|d| !stamps.contains_key(d)) {
            return Ok(None);
        }
        let Some(stamp) = self.read_stamp(stage) else {
            return Ok(None);
        };
        if stamp.inputs != self.inputs(stage, stamps)? {
            return Ok(None);
        }
        let intact = stamp
            .outputs
            .iter()
            .all(|(rel, hash)| file_hash(&self.path(rel)).as_deref() == Some(hash.as_str()));
        Ok(intact.then_some(stamp))
    }

    fn write_stamp(&self, stage: Stage, inputs: String, outputs: &[PathBuf]) -> Result<Stamp> {
        let mut map = BTreeMap::new();
        for p in outputs {
            let rel = p
                .strip_prefix(&self.root)
                .expect("outputs live under the run directory")
                .to_string_lossy()
                .replace('\\', "/");
            let hash = file_hash(p).ok_or_else(|| CliError::Runtime(format!("stage output {} vanished", p.display())))?;
            map.insert(rel, hash);
        }
        let stamp = Stamp {
            stage: stage.name().into(),
            inputs,
            outputs: map,
        };
        mkdir(&self.root.join("stamps"))?;
        write_json(&self.stamp_path(stage), &stamp)?;
        Ok(stamp)
    }

    fn execute(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Pattern => self.pattern(),
            Stage::Simulate => self.simulate(),
            Stage::Label => self.label(),
            Stage::Patches => self.patches(),
            Stage::Train => self.train(),
            Stage::Predict => self.predict(),
            Stage::Detect => self.detect(),
            Stage::Eval => self.eval(),
        }
    }

    fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::load_json(self.path("patterns/grid_spec.json"))?)
    }

    fn scene_dir(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(id)
    }

    fn pattern(&self) -> Result<Vec<PathBuf>> {
        let dir = self.path("patterns");
        mkdir(&dir)?;
        let spec = make_grid_spec(&self.cfg.grid_layout())?;
        let mut out = Vec::new();
        for (mode, name) in [
            (PatternMode::Grid, "grid.png"),
            (PatternMode::VerticalOnly, "vertical.png"),
            (PatternMode::HorizontalOnly, "horizontal.png"),
        ] {
            let p = dir.join(name);
            save_gray_png(&render_pattern(&spec, mode), &p)?;
            out.push(p);
        }
        let p = dir.join("grid_spec.json");
        spec.save_json(&p)?;
        out.push(p);
        Ok(out)
    }

    fn simulate(&self) -> Result<Vec<PathBuf>> {
        let spec = self.grid_spec()?;
        let dims = self.cfg.dims();
        let mut out = Vec::new();
        for (i, s) in self.cfg.scenes.iter().enumerate() {
            let (shape, warp) = surface_preset(&s.surface, dims).expect("validated preset");
            let surface = make_surface(shape, dims, warp)?;
            let sample = render_trio(&spec, &surface, &self.cfg.photometry(s), self.cfg.scene_seed(i))?;
            let dir = self.scene_dir(&s.id);
            sample.save(&dir)?;
            log::info!("scene {}: {} truth points", s.id, sample.truth.points.len());
            for f in [GRID_PNG, VERTICAL_PNG, HORIZONTAL_PNG, "truth.json", "meta.json"] {
                out.push(dir.join(f));
            }
        }
        Ok(out)
    }

    fn label(&self) -> Result<Vec<PathBuf>> {
        let dir = self.path("labels");
        mkdir(&dir)?;
        let params = self.cfg.label_params();
        let mut out = Vec::new();
        for s in &self.cfg.scenes {
            let sd = self.scene_dir(&s.id);
            let v = load_gray_png(sd.join(VERTICAL_PNG))?;
            let h = load_gray_png(sd.join(HORIZONTAL_PNG))?;
            let label = label_from_pair(&v, &h, &params)?;
            let p = dir.join(format!("{}.png", s.id));
            label.save_png(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    fn patches(&self) -> Result<Vec<PathBuf>> {
        let dir = self.path("dataset");
        mkdir(&dir)?;
        let (w, h) = (self.cfg.pattern.width, self.cfg.pattern.height);
        let sources = self
            .cfg
            .scenes_in(Split::Train)
            .map(|s| SourceEntry {
                id: s.id.clone(),
                image: format!("../scenes/{}/{GRID_PNG}", s.id),
                label: format!("../labels/{}.png", s.id),
                width: w,
                height: h,
            })
            .collect();
        let d = &self.cfg.dataset;
        let manifest = PatchManifest::build(sources, d.patch_size, d.val_fraction, self.cfg.augment_policy(), self.cfg.split_seed())?;
        log::info!(
            "dataset: {} training and {} validation patches",
            manifest.splits.train.len(),
            manifest.splits.val.len()
        );
        let p = dir.join("manifest.json");
        manifest.save(&p)?;
        Ok(vec![p])
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let dir = self.path("dataset");
        let manifest = PatchManifest::load(dir.join("manifest.json"))?;
        let source = PatchSource::load(manifest, &dir)?;
        let hp = self.cfg.hyper()?;
        let ck = self.path("checkpoints");
        mkdir(&ck)?;
        let cp = match gridpoint_net::train(&self.cfg.model, &source, &hp) {
            Ok(cp) => cp,
            Err(NetError::NonFinite {
                epoch,
                step,
                learning_rate,
                loss,
                partial,
            }) => {
                let p = ck.join("partial.gpck");
                partial.save(&p)?;
                return Err(CliError::Runtime(format!(
                    "training diverged (loss {loss}) at epoch {epoch}, step {step}, learning rate {learning_rate}; \
                     the last complete epoch is saved in {}",
                    p.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let (p, hist) = (self.path(CHECKPOINT), self.path(HISTORY_CSV));
        cp.save(&p)?;
        write_history_csv(&cp.history, &hist)?;
        Ok(vec![p, hist])
    }

    fn predict(&self) -> Result<Vec<PathBuf>> {
        let cp = ModelCheckpoint::load(self.path(CHECKPOINT))?;
        let mut out = Vec::new();
        for id in test_ids(self.cfg) {
            let image = load_gray_png(self.scene_dir(id).join(GRID_PNG))?;
            let prob = predict_full(&cp, &image)?;
            let dir = self.root.join("detections").join(id);
            mkdir(&dir)?;
            let (pb, pp) = (dir.join("prob.bin"), dir.join("prob.png"));
            save_prob(&prob, &pb)?;
            save_gray_png(&prob.mapv(|v| (v * 255.0).round()), &pp)?;
            out.extend([pb, pp]);
        }
        Ok(out)
    }

    fn detect(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let mut out = Vec::new();
        for id in test_ids(c) {
            let dir = self.root.join("detections").join(id);
            let prob = load_prob(&dir.join("prob.bin"))?;
            let image = load_gray_png(self.scene_dir(id).join(GRID_PNG))?;
            let label = BinaryImage::load_png(self.path(&format!("labels/{id}.png")))?;
            let sets = [
                ("cnn", detect(&prob, &c.detect, id)?),
                ("classical", classical_detect(&image, &c.classical_params(), &c.detect, id)?),
                ("groundtruth", detect_skeleton(&label, &c.detect, id)),
            ];
            for (method, fp) in sets {
                let p = dir.join(format!("{method}.json"));
                fp.save_json(&p)?;
                log::info!("{id}: {method} found {} points", fp.len());
                out.push(p);
            }
        }
        Ok(out)
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let c = self.cfg;
        let ids = test_ids(c);
        let truths: Vec<(String, Vec<Point>)> = ids
            .iter()
            .map(|id| Ok((id.to_string(), load_truth(self.scene_dir(id))?)))
            .collect::<Result<_>>()?;
        let methods: Vec<(String, Vec<FeaturePointSet>)> = METHODS
            .iter()
            .map(|m| {
                let sets = ids
                    .iter()
                    .map(|id| Ok(FeaturePointSet::load_json(self.root.join("detections").join(id).join(format!("{m}.json")))?))
                    .collect::<Result<_>>()?;
                Ok((m.to_string(), sets))
            })
            .collect::<Result<_>>()?;
        let (report, sets) = EvalReport::build(&methods, &truths, &c.eval)?;
        let reports = self.path("reports");
        let overlays = reports.join("overlays");
        mkdir(&overlays)?;
        let (csv, js) = (self.path(EVAL_CSV), self.path(EVAL_JSON));
        report.save(&csv, &js)?;
        let counts = reports.join("counts.csv");
        fs::write(&counts, count_table(&methods, &truths)?.to_csv()).map_err(|e| CliError::io(&counts, e))?;
        let mut out = vec![csv, js, counts];
        for (method, scene, m) in &sets {
            let image = load_gray_png(self.scene_dir(scene).join(GRID_PNG))?;
            let p = overlays.join(format!("{scene}_{method}.png"));
            emit_overlay(&image, m, &p)?;
            out.push(p);
        }
        for r in &report.rows {
            log::info!(
                "{} {}: detected {} truth {} matched {} mae {:?} D {:?}",
                r.method,
                r.scene,
                r.detected,
                r.truth,
                r.matched,
                r.mae_px,
                r.d_percent
            );
        }
        Ok(out)
    }
}

/// Methods scored by the eval stage, in report order.
pub const METHODS: [&str; 3] = ["cnn", "classical", "groundtruth"];

/// Runs `stages` (plus nothing else) in dependency order. A stage whose
/// inputs and outputs are unchanged since its last run is skipped. Upstream
/// stages that are not requested must already be current.
pub fn run(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&root)?;
    let run = Run { cfg, root };
    let mut wanted = stages.to_vec();
    wanted.sort();
    wanted.dedup();

    let mut stamps: BTreeMap<Stage, Stamp> = BTreeMap::new();
    let mut records = Vec::new();
    for stage in Stage::ALL {
        let requested = wanted.contains(&stage);
        if !requested && !wanted.iter().any(|w| w > &stage) {
            break;
        }
        for d in stage.deps() {
            if !stamps.contains_key(d) && requested {
                return Err(CliError::Missing {
                    stage: stage.name(),
                    upstream: d.name(),
                    what: format!("up-to-date output of stage `{}`", d.name()),
                });
            }
        }
        if let Some(stamp) = run.current_stamp(stage, &stamps)? {
            if requested {
                log::info!("{}: up to date, skipped", stage.name());
                records.push(StageRecord {
                    stage: stage.name().into(),
                    status: StageStatus::Skipped,
                    inputs: stamp.inputs.clone(),
                });
            }
            stamps.insert(stage, stamp);
            continue;
        }
        if !requested {
            continue;
        }
        let inputs = run.inputs(stage, &stamps)?;
        let _ = fs::remove_file(run.stamp_path(stage));
        log::info!("{}: running", stage.name());
        let outputs = run.execute(stage)?;
        let stamp = run.write_stamp(stage, inputs.clone(), &outputs)?;
        records.push(StageRecord {
            stage: stage.name().into(),
            status: StageStatus::Ran,
            inputs,
        });
        stamps.insert(stage, stamp);
    }

    let config = cfg.to_toml();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: sha256_hex(config.as_bytes()),
        config,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        stages: records,
        artifacts: stamps.values().flat_map(|s| s.outputs.clone()).collect(),
    };
    write_json(&run.root.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

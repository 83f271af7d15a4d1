//! File formats and run configuration.
//!
//! Fixations and frames are CSV. Maps use a small binary container:
//! `SMAP`, then little-endian `u32` version, width and height, then
//! `height × width` `f64` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{default_sigma_grid, DEFAULT_BINS, DEFAULT_LAMBDAS};
use crate::calibration::Stage;
use crate::domain::{validate_dataset, Dataset, Fixation, FixationTrain, ImageFrame, SaliencyMap};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{KlSpec, NonfixationKind, NonfixationSpec};
use crate::optim::OptimizerConfig;

pub const FIXATION_HEADER: [&str; 5] = ["image_id", "subject_id", "x", "y", "t"];
pub const FRAME_HEADER: [&str; 3] = ["image_id", "width", "height"];
pub const MAP_MAGIC: [u8; 4] = *b"SMAP";
pub const MAP_VERSION: u32 = 1;
const MAP_HEADER_BYTES: usize = 16;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Reads CSV records, skipping `#` comment lines, and checks the header.
fn csv_records(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let first = match records.next() {
        Some(r) => r.map_err(|e| Error::MalformedHeader(e.to_string()))?,
        None => return Err(Error::MalformedHeader("empty file".into())),
    };
    if first.iter().collect::<Vec<_>>() != header {
        return Err(Error::MalformedHeader(format!(
            "expected `{}`, found `{}`",
            header.join(","),
            first.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for r in records {
        let r = r.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = r.position().map_or(0, |p| p.line());
        if r.len() != header.len() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), r.len()),
            });
        }
        out.push((line, r));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(r: &csv::StringRecord, i: usize, line: u64, name: &str) -> Result<T> {
    r[i].trim().parse().map_err(|_| Error::MalformedRow {
        line,
        reason: format!("{name}: cannot parse `{}`", &r[i]),
    })
}

/// Train-local checks; dataset-level rules need the frames.
fn check_train(t: &FixationTrain) -> Vec<String> {
    let mut out = Vec::new();
    let entity = format!("train ({}, {})", t.image_id, t.subject_id);
    if t.fixations.windows(2).any(|w| !(w[1].t > w[0].t)) {
        out.push(format!("{entity}: t not strictly increasing"));
    }
    if t
        .fixations
        .iter()
        .any(|f| !(f.t >= 0.0) || !f.x.is_finite() || !f.y.is_finite() || !f.t.is_finite())
    {
        out.push(format!("{entity}: non-finite coordinate or negative time"));
    }
    out
}

/// Trains in order of first appearance; rows keep file order within a train.
pub fn parse_fixations_csv(path: &Path) -> Result<Vec<FixationTrain>> {
    let mut trains: Vec<FixationTrain> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (line, r) in csv_records(path, &FIXATION_HEADER)? {
        let image_id = r[0].to_string();
        let subject_id = r[1].to_string();
        if image_id.is_empty() || subject_id.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty id".into(),
            });
        }
        let f = Fixation::new(
            parse_field(&r, 2, line, "x")?,
            parse_field(&r, 3, line, "y")?,
            parse_field(&r, 4, line, "t")?,
        );
        let key = (image_id.clone(), subject_id.clone());
        let i = *index.entry(key).or_insert_with(|| {
            trains.push(FixationTrain::new(image_id, subject_id, Vec::new()));
            trains.len() - 1
        });
        trains[i].fixations.push(f);
    }
    let problems: Vec<String> = trains.iter().flat_map(check_train).collect();
    if !problems.is_empty() {
        return Err(Error::ValidationFailed(problems));
    }
    Ok(trains)
}

pub fn parse_frames_csv(path: &Path) -> Result<Vec<ImageFrame>> {
    csv_records(path, &FRAME_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            Ok(ImageFrame::new(
                r[0].to_string(),
                parse_field(&r, 1, line, "width")?,
                parse_field(&r, 2, line, "height")?,
            ))
        })
        .collect()
}

fn comment_lines(meta: Option<&Metadata>) -> String {
    match meta {
        None => String::new(),
        Some(m) => m
            .entries()
            .iter()
            .map(|(k, v)| format!("# {k}: {v}\n"))
            .collect(),
    }
}

/// CSV text with optional metadata comments; numbers use the shortest
/// representation that parses back to the same value.
pub fn csv_text(header: &[&str], rows: &[Vec<String>], meta: Option<&Metadata>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(comment_lines(meta) + &String::from_utf8(body).expect("utf-8 csv"))
}

pub fn write_fixations_csv(path: &Path, trains: &[FixationTrain], meta: Option<&Metadata>) -> Result<()> {
    let rows: Vec<Vec<String>> = trains
        .iter()
        .flat_map(|t| {
            t.fixations.iter().map(move |f| {
                vec![
                    t.image_id.clone(),
                    t.subject_id.clone(),
                    f.x.to_string(),
                    f.y.to_string(),
                    f.t.to_string(),
                ]
            })
        })
        .collect();
    write_file(path, csv_text(&FIXATION_HEADER, &rows, meta)?.as_bytes())
}

pub fn write_frames_csv(path: &Path, frames: &[ImageFrame], meta: Option<&Metadata>) -> Result<()> {
    let rows: Vec<Vec<String>> = frames
        .iter()
        .map(|f| vec![f.image_id.clone(), f.width.to_string(), f.height.to_string()])
        .collect();
    write_file(path, csv_text(&FRAME_HEADER, &rows, meta)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn encode_map(grid: &Grid) -> Result<Vec<u8>> {
    if let Some((x, y)) = grid.first_non_finite() {
        return Err(Error::NonFiniteValue { x, y });
    }
    let mut out = Vec::with_capacity(MAP_HEADER_BYTES + grid.len() * 8);
    out.extend_from_slice(&MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < MAP_HEADER_BYTES {
        return Err(Error::TruncatedFile {
            expected: MAP_HEADER_BYTES as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAP_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != MAP_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let (w, h) = (word(8) as usize, word(12) as usize);
    let expected = MAP_HEADER_BYTES + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::TruncatedFile {
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[MAP_HEADER_BYTES..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn write_map(path: &Path, grid: &Grid) -> Result<()> {
    write_file(path, &encode_map(grid)?)
}

pub fn read_map(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_map(&bytes)
}

pub fn map_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.smap"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSource {
    pub id: String,
    /// Directory holding one `<image_id>.smap` per image.
    pub map_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSection {
    pub bins: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for HistogramSection {
    fn default() -> Self {
        HistogramSection {
            bins: DEFAULT_BINS.to_vec(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoldSection {
    pub sigma_grid: Vec<f64>,
    pub folds: usize,
    pub regularization: f64,
}

impl Default for GoldSection {
    fn default() -> Self {
        GoldSection {
            sigma_grid: default_sigma_grid(),
            folds: 10,
            regularization: 1e-6,
        }
    }
}

/// A named AUC or KL variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricSpec {
    Auc {
        id: String,
        nonfixations: NonfixationSpec,
    },
    KlFixation {
        id: String,
        #[serde(default)]
        kl: KlSpec,
        #[serde(default)]
        nonfixations: NonfixationSpec,
    },
    KlImage {
        id: String,
    },
}

impl MetricSpec {
    pub fn id(&self) -> &str {
        match self {
            MetricSpec::Auc { id, .. } | MetricSpec::KlFixation { id, .. } | MetricSpec::KlImage { id } => id,
        }
    }

    pub fn defaults() -> Vec<MetricSpec> {
        vec![
            MetricSpec::Auc {
                id: "auc_uniform".into(),
                nonfixations: NonfixationSpec::default(),
            },
            MetricSpec::Auc {
                id: "auc_shuffled".into(),
                nonfixations: NonfixationSpec {
                    kind: NonfixationKind::ShuffledFixations,
                    ..Default::default()
                },
            },
            MetricSpec::KlFixation {
                id: "kl_fixation".into(),
                kl: KlSpec::default(),
                nonfixations: NonfixationSpec::default(),
            },
            MetricSpec::KlImage {
                id: "kl_image".into(),
            },
        ]
    }
}

fn default_stage() -> Stage {
    Stage::Blur
}

fn default_metrics() -> Vec<MetricSpec> {
    MetricSpec::defaults()
}

/// One run's configuration. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub fixations: PathBuf,
    pub frames: PathBuf,
    #[serde(default)]
    pub models: Vec<ModelSource>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub histogram: HistogramSection,
    #[serde(default)]
    pub gold: GoldSection,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricSpec>,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.fixations);
        fix(&mut self.frames);
        fix(&mut self.output_dir);
        for m in &mut self.models {
            fix(&mut m.map_dir);
        }
    }

    /// SHA-256 over the canonical JSON of every field that affects results.
    /// Paths are hashed by file name only, and the output directory and job
    /// count are left out, so moving a run does not change its hash.
    pub fn hash(&self) -> String {
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let canonical = serde_json::json!({
            "fixations": name(&self.fixations),
            "frames": name(&self.frames),
            "models": self.models.iter().map(|m| serde_json::json!({"id": m.id, "map_dir": name(&m.map_dir)})).collect::<Vec<_>>(),
            "seed": self.seed,
            "stage": self.stage,
            "optimizer": self.optimizer,
            "histogram": self.histogram,
            "gold": self.gold,
            "metrics": self.metrics,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn model(&self, id: &str) -> Result<&ModelSource> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown model `{id}`")))
    }

    /// Frames, fixations and every configured model's maps, validated.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let frames = parse_frames_csv(&self.frames)?;
        let trains = parse_fixations_csv(&self.fixations)?;
        let mut d = Dataset::new(frames, trains);
        let problems: Vec<String> = validate_dataset(&d).iter().map(|v| v.to_string()).collect();
        if !problems.is_empty() {
            return Err(Error::ValidationFailed(problems));
        }
        for m in &self.models {
            for frame in d.frames.clone() {
                let path = map_path(&m.map_dir, &frame.image_id);
                if !path.exists() {
                    return Err(Error::MissingMap {
                        model_id: m.id.clone(),
                        image_id: frame.image_id.clone(),
                    });
                }
                let values = read_map(&path)?;
                if values.width() != frame.width || values.height() != frame.height {
                    return Err(Error::ShapeMismatch(frame.width, frame.height, values.width(), values.height()));
                }
                d.insert_map(SaliencyMap {
                    image_id: frame.image_id.clone(),
                    model_id: m.id.clone(),
                    values,
                });
            }
        }
        Ok(d)
    }
}

/// Provenance written into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub generator: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub notes: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Metadata {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
            seed,
            generator: crate::synth::GENERATOR.to_string(),
            notes: BTreeMap::new(),
        }
    }

    pub fn for_config(cfg: &RunConfig) -> Self {
        Metadata::new(cfg.hash(), cfg.seed)
    }

    pub fn with_note(mut self, key: &str, value: impl Into<String>) -> Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("tool".to_string(), self.tool.clone()),
            ("tool_version".to_string(), self.tool_version.clone()),
            ("config_hash".to_string(), self.config_hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("generator".to_string(), self.generator.clone()),
        ];
        out.extend(self.notes.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }
}

/// Pretty JSON of `{"metadata": ..., "result": ...}` with a trailing newline.
pub fn json_document<T: Serialize>(meta: &Metadata, result: &T) -> Result<String> {
    let doc = serde_json::json!({ "metadata": meta, "result": result });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn write_json<T: Serialize>(path: &Path, meta: &Metadata, result: &T) -> Result<()> {
    write_file(path, json_document(meta, result)?.as_bytes())
}

/// Writes `<stem>.csv` with comment metadata and a `<stem>.json` sidecar.
pub fn write_table(dir: &Path, stem: &str, header: &[&str], rows: &[Vec<String>], meta: &Metadata) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), csv_text(header, rows, Some(meta))?.as_bytes())?;
    let sidecar = serde_json::json!({ "table": format!("{stem}.csv"), "columns": header });
    write_json(&dir.join(format!("{stem}.json")), meta, &sidecar)
}

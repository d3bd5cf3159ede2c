//! Experiment configuration, the variant x backbone x split matrix, and
//! the persisted results directory.
//!
//! Layout of a results directory:
//!
//! ```text
//! experiment.json              resolved configuration
//! splits.csv                   image_id, split_index, partition
//! runs/<variant>__<backbone>/split-<k>/
//!     checkpoint.safetensors   manifest.json
//!     predictions_{internal,external}.csv
//!     report_{internal,external}.json
//! run_summary.json             sub-run count and failures
//! aggregate.json               mean and std over splits
//! tables/<metric>.md           rendered tables
//! tradeoff_external.{svg,png,csv}
//! ```

mod plot;
mod report;

pub use plot::{points_csv, render_svg, render_tradeoff_plot, svg_to_png, tradeoff_points, PlotFiles, PlotPoint};
pub use report::{
    aggregate, load_aggregate, read_split_reports, render_table, save_aggregate, AggregateRow, Metric,
    ProbeSummary, Scope, SplitReport, AGGREGATE_FILE,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Device;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{load_backbone, Backbone, BackboneSpec, CacheKey, EmbeddingCache};
use crate::ingest::{
    load_manifest, preprocess_image, tone_distribution_table, AugmentSpec, DiagnosisMapping, ImageRecord,
    IngestOptions, Ingested, PreprocessSpec, Source, Task,
};
use crate::metrics::{fairness_report, MetricOptions, PredictionRecord};
use crate::models::{DebiasNet, ModelConfig, NetInput, Variant};
use crate::nn::mix_seed;
use crate::split::{make_split_series, Partition, Ratios, SplitSeries, NUM_SPLITS};
use crate::synthetic::{self, tone_probe, SyntheticSpec};
use crate::train::{self, Checkpoint, Dataset, Hyperparameters, Inputs, TrainConfig};

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "SKINFAIR_DATA_ROOT";

/// Largest input side kept decoded in memory for trainable backbones.
const IN_MEMORY_MAX_SIDE: u32 = 64;
const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base for the relative paths below; defaults to the config file's directory.
    pub root: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    /// Image directory of the training source (source-specific default otherwise).
    pub train_images: Option<PathBuf>,
    pub external_manifest: Option<PathBuf>,
    pub external_images: Option<PathBuf>,
    /// Diagnosis mapping files replacing the built-in tables.
    pub train_mapping: Option<PathBuf>,
    pub external_mapping: Option<PathBuf>,
    pub dedup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// How many of the split series to run.
    pub count: usize,
    pub seed: u64,
    pub fixed_test_pool: bool,
    pub ratios: Ratios,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            count: NUM_SPLITS,
            seed: 0,
            fixed_test_pool: false,
            ratios: Ratios::default(),
        }
    }
}

/// A backbone with the name used for its table columns.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedBackbone {
    pub name: String,
    pub spec: BackboneSpec,
}

impl NamedBackbone {
    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' })
            .collect()
    }
}

impl Serialize for NamedBackbone {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(&self.spec).map_err(serde::ser::Error::custom)?;
        if let Some(m) = v.as_object_mut() {
            m.insert("name".into(), self.name.clone().into());
        }
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for NamedBackbone {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut m = serde_json::Map::deserialize(d)?;
        let name = match m.remove("name") {
            Some(serde_json::Value::String(s)) if !s.trim().is_empty() => s,
            _ => return Err(D::Error::custom("every backbone needs a non-empty `name`")),
        };
        let spec = BackboneSpec::deserialize(serde_json::Value::Object(m)).map_err(D::Error::custom)?;
        Ok(Self { name, spec })
    }
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}
fn default_parallel() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub train_source: Source,
    pub external_source: Source,
    #[serde(default)]
    pub data: DataConfig,
    pub backbones: Vec<NamedBackbone>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub train: Hyperparameters,
    /// Model settings: `common` applies to every variant, a variant key
    /// (`tabe`, `fairdisco`, `vae`, `baseline`) to that variant only.
    #[serde(default)]
    pub model: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default = "yes")]
    pub augment_enabled: bool,
    /// Generator settings when the training source is synthetic.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Embedding cache location; `<output_dir>/cache` by default.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Fit a tone probe on external-set features of every sub-run.
    #[serde(default = "yes")]
    pub tone_probe: bool,
    /// Directory of the file the config was read from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Read a TOML file, splicing in the files listed under `include`
/// (relative to the including file). Keys of the including file win.
fn read_toml_tree(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canonical = path.canonicalize().map_err(|e| Error::io(path, e))?;
    if stack.contains(&canonical) {
        return Err(Error::config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(Error::config("`include` entries must be strings")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(Error::config("`include` must be a string or a list of strings")),
    };
    stack.push(canonical);
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merge_tables(&mut merged, read_toml_tree(&dir.join(inc), stack)?);
    }
    stack.pop();
    merge_tables(&mut merged, table);
    Ok(merged)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let table = read_toml_tree(path, &mut Vec::new())?;
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Switch task, pairing the external source with it unless the
    /// experiment is synthetic.
    pub fn set_task(&mut self, task: Task) {
        self.task = task;
        if self.external_source != Source::Synthetic {
            self.external_source = task.external_source();
        }
        if let Some(s) = self.synthetic.as_mut() {
            s.task = task;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let synthetic = self.train_source == Source::Synthetic;
        if synthetic != (self.external_source == Source::Synthetic) {
            return Err(Error::config("synthetic experiments use the synthetic source for both training and external testing"));
        }
        if !synthetic {
            if self.train_source != Source::Fitzpatrick17k {
                return Err(Error::config(format!("unsupported training source {}", self.train_source)));
            }
            if self.external_source != self.task.external_source() {
                return Err(Error::config(format!(
                    "task {} is tested externally on {}, not {}",
                    self.task,
                    self.task.external_source(),
                    self.external_source
                )));
            }
        }
        if let Some(s) = &self.synthetic {
            if s.task != self.task {
                return Err(Error::config("synthetic.task differs from the experiment task"));
            }
            s.validate()?;
        }
        if self.backbones.is_empty() {
            return Err(Error::config("at least one backbone is required"));
        }
        let mut names: Vec<&str> = self.backbones.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.backbones.len() {
            return Err(Error::config("backbone names must be unique"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("at least one model variant is required"));
        }
        if self.splits.count == 0 || self.splits.count > NUM_SPLITS {
            return Err(Error::config(format!("splits.count must lie in 1..={NUM_SPLITS}")));
        }
        if self.parallel == 0 {
            return Err(Error::config("parallel must be at least 1"));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        for key in self.model.keys() {
            if key != "common" && key.parse::<Variant>().is_err() {
                return Err(Error::config(format!("unknown [model.{key}] section")));
            }
        }
        for &v in &self.variants {
            self.model_config(v)?;
        }
        Ok(())
    }

    /// Variant defaults overlaid with `[model.common]` and `[model.<variant>]`.
    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let mut value = serde_json::to_value(ModelConfig::new(variant))?;
        let obj = value.as_object_mut().expect("struct serializes to an object");
        for key in ["common", variant.key()] {
            if let Some(over) = self.model.get(key) {
                let over = over
                    .as_object()
                    .ok_or_else(|| Error::config(format!("[model.{key}] must be a table")))?;
                for (k, v) in over {
                    obj.insert(k.clone(), v.clone());
                }
            }
        }
        let mut cfg: ModelConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("model settings for {variant}: {e}")))?;
        cfg.num_classes = self.task.conditions().len();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_root(&self) -> PathBuf {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(root);
        }
        match &self.data.root {
            Some(r) if r.is_absolute() => r.clone(),
            Some(r) => self.base_dir.join(r),
            None => self.base_dir.clone(),
        }
    }

    fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Seed for model initialization and batching of split `k`; the same for
    /// every variant and backbone so their runs differ only by the variant.
    pub fn run_seed(&self, split: usize) -> u64 {
        mix_seed(self.seed, &[split as u64])
    }

    /// The fairness metric reported for this task.
    pub fn fairness_metric(&self) -> Metric {
        fairness_metric(self.task)
    }

    fn preprocess(&self, spec: &BackboneSpec) -> PreprocessSpec {
        PreprocessSpec {
            target_size: spec.input_size,
            augment: self.augment,
            augment_enabled: self.augment_enabled,
            normalization: spec.normalization(),
        }
    }
}

/// EOM for cancer detection, PQD for the inflammatory task.
pub fn fairness_metric(task: Task) -> Metric {
    match task {
        Task::Cancer => Metric::Eom,
        Task::Inflammatory => Metric::Pqd,
    }
}

/// Ingested training and external records, both already restricted to the
/// task's two conditions.
pub struct IngestedData {
    pub train: Ingested,
    pub external: Ingested,
}

fn default_images_dir(source: Source, manifest: &Path) -> PathBuf {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    match source {
        Source::Fitzpatrick17k | Source::PadUfes => dir.join("images"),
        Source::Scin | Source::Synthetic => dir.to_path_buf(),
    }
}

/// Generate the synthetic dataset under `<output_dir>/data` unless an
/// identical one is already there. Returns the train and test manifests.
pub fn ensure_synthetic_data(config: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let spec = config.synthetic.clone().unwrap_or_else(|| SyntheticSpec {
        task: config.task,
        ..SyntheticSpec::default()
    });
    let dir = config.output_dir.join("data");
    let spec_path = dir.join("spec.json");
    let (train, test) = (dir.join("train.csv"), dir.join("test.csv"));
    if spec_path.is_file() && train.is_file() && test.is_file() {
        let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        if serde_json::from_str::<SyntheticSpec>(&text).ok().as_ref() == Some(&spec) {
            return Ok((train, test));
        }
    }
    let data = synthetic::generate(&spec)?;
    log::info!(
        "generated {} train and {} test synthetic images (class/tone phi {:.3})",
        data.train.len(),
        data.test.len(),
        data.train_phi
    );
    synthetic::write_dataset(&data, &dir)
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn ingest_one(
    config: &ExperimentConfig,
    source: Source,
    manifest: &Path,
    images: Option<&PathBuf>,
    mapping: Option<&PathBuf>,
) -> Result<Ingested> {
    let root = config.data_root();
    let mapping = match mapping {
        Some(p) => DiagnosisMapping::from_file(&resolve(&root, p))?,
        None => DiagnosisMapping::builtin(source),
    };
    let options = IngestOptions {
        images_dir: images
            .map(|p| resolve(&root, p))
            .unwrap_or_else(|| default_images_dir(source, manifest)),
        dedup: config.data.dedup,
    };
    let mut ingested = load_manifest(source, manifest, &mapping, &options)?;
    let before = ingested.records.len();
    ingested.records.retain(|r| config.task.label_of(r.condition).is_some());
    log::info!(
        "{source}: {} of {} rows usable for {} ({} rejected, {} outside the task)",
        ingested.records.len(),
        ingested.rows,
        config.task,
        ingested.rejections.len(),
        before - ingested.records.len()
    );
    if ingested.records.is_empty() {
        return Err(Error::invalid(format!("{source} has no records for task {}", config.task)));
    }
    Ok(ingested)
}

/// Load both sources named by the configuration.
pub fn ingest(config: &ExperimentConfig) -> Result<IngestedData> {
    let root = config.data_root();
    let (train_manifest, external_manifest) = if config.train_source == Source::Synthetic
        && config.data.train_manifest.is_none()
    {
        ensure_synthetic_data(config)?
    } else {
        let need = |p: &Option<PathBuf>, what: &str| {
            p.as_ref()
                .map(|p| resolve(&root, p))
                .ok_or_else(|| Error::config(format!("data.{what} is required")))
        };
        (need(&config.data.train_manifest, "train_manifest")?, need(&config.data.external_manifest, "external_manifest")?)
    };
    let train = ingest_one(
        config,
        config.train_source,
        &train_manifest,
        config.data.train_images.as_ref(),
        config.data.train_mapping.as_ref(),
    )?;
    let external = ingest_one(
        config,
        config.external_source,
        &external_manifest,
        config.data.external_images.as_ref(),
        config.data.external_mapping.as_ref(),
    )?;
    Ok(IngestedData { train, external })
}

/// Write records, rejections and the tone distribution table to `dir`.
pub fn write_ingest_outputs(data: &IngestedData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.train.write_records(&dir.join("train_records.csv"))?;
    data.train.write_rejections(&dir.join("train_rejections.jsonl"))?;
    data.external.write_records(&dir.join("external_records.csv"))?;
    data.external.write_rejections(&dir.join("external_rejections.jsonl"))?;
    let all: Vec<ImageRecord> = data.train.records.iter().chain(&data.external.records).cloned().collect();
    report::write_text(&dir.join("tone_table.csv"), &tone_distribution_table(&all).to_csv())
}

pub fn make_splits(config: &ExperimentConfig, train: &[ImageRecord]) -> Result<SplitSeries> {
    make_split_series(train, config.splits.seed, &config.splits.ratios, config.splits.fixed_test_pool)
}

/// Records, splits and per-backbone datasets shared by every sub-run.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub records: Vec<ImageRecord>,
    /// Records `0..n_train` come from the training source, the rest are external.
    pub n_train: usize,
    pub series: SplitSeries,
    pub inputs: Vec<BackboneInputs>,
}

/// Model inputs of every record for one backbone.
pub struct BackboneInputs {
    pub backbone: usize,
    pub data: Dataset,
    /// Checksum of the frozen backbone that produced embedding inputs.
    pub embedding_checksum: Option<String>,
}

impl Prepared {
    pub fn external_indices(&self) -> Vec<usize> {
        (self.n_train..self.records.len()).collect()
    }
}

fn embed_records(
    backbone: &Backbone,
    records: &[ImageRecord],
    pre: &PreprocessSpec,
    cache_root: &Path,
) -> Result<Vec<Vec<f32>>> {
    let eval = pre.for_eval();
    let key = CacheKey {
        weights_checksum: backbone.checksum().to_string(),
        preprocess_hash: eval.eval_hash(),
    };
    let mut cache = EmbeddingCache::open(cache_root, &key)?;
    let missing: Vec<&ImageRecord> = records.iter().filter(|r| !cache.contains(&r.image_id)).collect();
    if !missing.is_empty() {
        log::info!("embedding {} images ({} cached)", missing.len(), records.len() - missing.len());
    }
    for chunk in missing.chunks(EMBED_CHUNK) {
        let pixels = chunk
            .iter()
            .map(|r| preprocess_image(&r.image_path, &eval, 0))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = chunk.iter().map(|r| r.image_id.clone()).collect();
        cache.insert(&backbone.embed(&pixels, &ids)?)?;
    }
    records
        .iter()
        .map(|r| {
            cache
                .get(&r.image_id)?
                .ok_or_else(|| Error::invalid(format!("embedding of {} missing from cache", r.image_id)))
        })
        .collect()
}

fn backbone_inputs(
    config: &ExperimentConfig,
    index: usize,
    records: &[ImageRecord],
    device: &Device,
) -> Result<BackboneInputs> {
    let named = &config.backbones[index];
    let pre = config.preprocess(&named.spec);
    let (inputs, embedding_checksum) = if named.spec.trainable {
        let paths: Vec<PathBuf> = records.iter().map(|r| r.image_path.clone()).collect();
        let inputs = if named.spec.input_size <= IN_MEMORY_MAX_SIDE {
            Inputs::load_images(&paths, pre)?
        } else {
            Inputs::ImageFiles { paths, spec: pre }
        };
        (inputs, None)
    } else {
        let backbone = load_backbone(&named.spec, config.seed, device)?;
        let rows = embed_records(&backbone, records, &pre, &config.cache_root())?;
        (Inputs::Embeddings(rows), Some(backbone.checksum().to_string()))
    };
    let labels = records
        .iter()
        .map(|r| {
            config
                .task
                .label_of(r.condition)
                .ok_or_else(|| Error::invalid(format!("{} is not a {} condition", r.condition, config.task)))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(
        records.iter().map(|r| r.image_id.clone()).collect(),
        inputs,
        labels,
        records.iter().map(|r| r.tone.get()).collect(),
    )?;
    Ok(BackboneInputs {
        backbone: index,
        data,
        embedding_checksum,
    })
}

/// Which sub-runs to execute; `None` selects everything configured.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub variants: Option<Vec<Variant>>,
    pub backbones: Option<Vec<String>>,
    pub splits: Option<Vec<usize>>,
}

impl Selection {
    fn backbone_indices(&self, config: &ExperimentConfig) -> Result<Vec<usize>> {
        match &self.backbones {
            None => Ok((0..config.backbones.len()).collect()),
            Some(names) => names
                .iter()
                .map(|n| {
                    config
                        .backbones
                        .iter()
                        .position(|b| &b.name == n)
                        .ok_or_else(|| Error::config(format!("no backbone named {n:?} in the configuration")))
                })
                .collect(),
        }
    }

    fn variants(&self, config: &ExperimentConfig) -> Result<Vec<Variant>> {
        match &self.variants {
            None => Ok(config.variants.clone()),
            Some(v) => {
                if let Some(x) = v.iter().find(|x| !config.variants.contains(x)) {
                    return Err(Error::config(format!("variant {x} is not part of the configuration")));
                }
                Ok(v.clone())
            }
        }
    }

    fn splits(&self, config: &ExperimentConfig) -> Result<Vec<usize>> {
        match &self.splits {
            None => Ok((0..config.splits.count).collect()),
            Some(s) => {
                if let Some(k) = s.iter().find(|&&k| k >= config.splits.count) {
                    return Err(Error::config(format!("split {k} outside 0..{}", config.splits.count)));
                }
                Ok(s.clone())
            }
        }
    }
}

/// Ingest, split, and build the inputs of the selected backbones. Writes
/// `experiment.json` and `splits.csv` into the output directory.
pub fn prepare(config: &ExperimentConfig, selection: &Selection, device: &Device) -> Result<Prepared> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report::write_text(&out.join("experiment.json"), &serde_json::to_string_pretty(config)?)?;
    let data = ingest(config)?;
    let n_train = data.train.records.len();
    let series = make_splits(config, &data.train.records)?;
    let ids: Vec<String> = data.train.records.iter().map(|r| r.image_id.clone()).collect();
    series.export_csv(&ids, &out.join("splits.csv"))?;
    let records: Vec<ImageRecord> = data.train.records.into_iter().chain(data.external.records).collect();
    let inputs = selection
        .backbone_indices(config)?
        .into_iter()
        .map(|i| backbone_inputs(config, i, &records, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        config: config.clone(),
        records,
        n_train,
        series,
        inputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Evaluate,
    /// Train, evaluate, aggregate and render.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub variant: Variant,
    pub backbone: usize,
    pub split: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub variant: Variant,
    pub backbone: String,
    pub split: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sub_runs: usize,
    pub completed: usize,
    pub failures: Vec<Failure>,
    /// Problems in aggregation or rendering.
    pub render_errors: Vec<String>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures.is_empty() && self.render_errors.is_empty()
    }
}

pub fn job_dir(out: &Path, variant: Variant, backbone: &NamedBackbone, split: usize) -> PathBuf {
    out.join("runs")
        .join(format!("{}__{}", variant.key(), backbone.slug()))
        .join(format!("split-{split}"))
}

const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let k = preds.first().map_or(0, |p| p.scores.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id".to_string(), "split".into(), "label".into(), "predicted".into(), "group".into()];
    header.extend((0..k).map(|i| format!("score_{i}")));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![
            p.image_id.clone(),
            p.split.to_string(),
            p.label.to_string(),
            p.predicted.to_string(),
            p.group.to_string(),
        ];
        row.extend(p.scores.iter().map(|s| format!("{s:.8}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn inputs_for<'a>(prepared: &'a Prepared, backbone: usize) -> Result<&'a BackboneInputs> {
    prepared
        .inputs
        .iter()
        .find(|b| b.backbone == backbone)
        .ok_or_else(|| Error::invalid("backbone inputs were not prepared"))
}

/// Train one sub-run and persist its checkpoint and manifest.
fn train_job(prepared: &Prepared, job: Job, dir: &Path, device: &Device) -> Result<(DebiasNet, train::RunManifest)> {
    let config = &prepared.config;
    let named = &config.backbones[job.backbone];
    let bi = inputs_for(prepared, job.backbone)?;
    let seed = config.run_seed(job.split);
    let model = config.model_config(job.variant)?;
    let (input, checksum) = match (&bi.embedding_checksum, bi.data.inputs.embedding_dim()) {
        (Some(c), Some(d)) => (NetInput::Embeddings(d), c.clone()),
        _ => {
            let b = load_backbone(&named.spec, seed, device)?;
            let c = b.checksum().to_string();
            (NetInput::Images(b), c)
        }
    };
    let net = DebiasNet::new(model.clone(), input, seed, device)?;
    let tc = TrainConfig {
        hyper: config.train.clone(),
        seed,
        model,
        backbone: named.spec.clone(),
    };
    let split: &Partition = &prepared.series.splits[job.split];
    let outcome = match train::train(&tc, &net, &checksum, &bi.data, split, job.split) {
        Ok(o) => o,
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            last_good,
        }) => {
            if let Some(c) = &last_good {
                c.save(&dir.join("last_good.safetensors"))?;
            }
            return Err(Error::NonFiniteLoss { epoch, batch, last_good });
        }
        Err(e) => return Err(e),
    };
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let mut manifest = outcome.manifest;
    manifest.split_seed = prepared.series.seeds.get(job.split).copied();
    manifest.notes.push(format!("backbone name: {}", named.name));
    if !config.augment_enabled {
        manifest.overrides.push("augment_enabled=false".into());
    }
    Ok((net, manifest))
}

/// Predict the internal and external test sets, write predictions and
/// reports, and return headline metrics for the manifest.
fn evaluate_job(prepared: &Prepared, job: Job, net: &DebiasNet, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let config = &prepared.config;
    let named = &config.backbones[job.backbone];
    let data = &inputs_for(prepared, job.backbone)?.data;
    let options = config.metrics;
    let split = &prepared.series.splits[job.split];
    let mut metrics = BTreeMap::new();
    for (scope, idx) in [(Scope::Internal, split.test.clone()), (Scope::External, prepared.external_indices())] {
        let preds = train::predict(net, data, &idx, job.split, options.grouping, options.threshold)?;
        write_predictions(&dir.join(format!("predictions_{}.csv", scope.key())), &preds)?;
        let report = fairness_report(&preds, &options);
        let probe = if config.tone_probe && scope == Scope::External {
            let feats = train::features(net, data, &idx)?;
            let tones: Vec<u8> = idx.iter().map(|&i| data.tones[i]).collect();
            match tone_probe(&feats, &tones, mix_seed(config.seed, &[7, job.split as u64])) {
                Ok(p) => Some(ProbeSummary {
                    accuracy: p.accuracy,
                    chance: p.chance,
                }),
                Err(e) => {
                    log::warn!("tone probe skipped: {e}");
                    None
                }
            }
        } else {
            None
        };
        let sr = SplitReport {
            variant: job.variant,
            backbone: named.name.clone(),
            backbone_index: job.backbone,
            split: job.split,
            scope,
            options,
            report,
            tone_probe: probe,
        };
        for m in Metric::ALL {
            if let Some(v) = sr.value(m) {
                metrics.insert(format!("{}_{}", scope.key(), m.key()), v);
            }
        }
        sr.save(dir)?;
    }
    Ok(metrics)
}

fn run_job(prepared: &Prepared, job: Job, stage: Stage, device: &Device) -> Result<()> {
    let named = &prepared.config.backbones[job.backbone];
    let dir = job_dir(&prepared.config.output_dir, job.variant, named, job.split);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _ = std::fs::remove_file(dir.join("error.txt"));
    let manifest_path = dir.join("manifest.json");
    log::info!("sub-run {} / {} / split {}", job.variant, named.name, job.split);
    match stage {
        Stage::Train => {
            let (_, manifest) = train_job(prepared, job, &dir, device)?;
            report::write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)
        }
        Stage::All => {
            let (net, mut manifest) = train_job(prepared, job, &dir, device)?;
            manifest.metrics = evaluate_job(prepared, job, &net, &dir)?;
            report::write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)
        }
        Stage::Evaluate => {
            let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE), device)?;
            let bi = inputs_for(prepared, job.backbone)?;
            if let Some(c) = &bi.embedding_checksum {
                if c != &ckpt.meta.backbone_checksum {
                    return Err(Error::invalid(format!(
                        "checkpoint was trained on embeddings from backbone {}, current backbone is {c}",
                        ckpt.meta.backbone_checksum
                    )));
                }
            }
            let net = ckpt.build_net(device)?;
            let metrics = evaluate_job(prepared, job, &net, &dir)?;
            if manifest_path.is_file() {
                let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
                let mut manifest: train::RunManifest = serde_json::from_str(&text)?;
                manifest.metrics = metrics;
                report::write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
            }
            Ok(())
        }
    }
}

/// Run the selected sub-runs on up to `config.parallel` workers. Failed
/// sub-runs leave an `error.txt` and are listed in the summary; the others
/// are unaffected. With [`Stage::All`] the reports are aggregated and
/// rendered afterwards.
pub fn run(prepared: &Prepared, selection: &Selection, stage: Stage, device: &Device) -> Result<RunSummary> {
    let config = &prepared.config;
    let variants = selection.variants(config)?;
    let splits = selection.splits(config)?;
    let mut jobs = Vec::new();
    for bi in &prepared.inputs {
        for &variant in &variants {
            for &split in &splits {
                jobs.push(Job {
                    variant,
                    backbone: bi.backbone,
                    split,
                });
            }
        }
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let workers = config.parallel.min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&job) = jobs.get(i) else { break };
                if let Err(e) = run_job(prepared, job, stage, device) {
                    let named = &config.backbones[job.backbone];
                    log::error!("sub-run {} / {} / split {} failed: {e}", job.variant, named.name, job.split);
                    let dir = job_dir(&config.output_dir, job.variant, named, job.split);
                    let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
                    failures.lock().expect("no poisoned lock").push((
                        i,
                        Failure {
                            variant: job.variant,
                            backbone: named.name.clone(),
                            split: job.split,
                            message: e.to_string(),
                        },
                    ));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by_key(|(i, _)| *i);
    let mut summary = RunSummary {
        sub_runs: jobs.len(),
        completed: jobs.len() - failures.len(),
        failures: failures.into_iter().map(|(_, f)| f).collect(),
        render_errors: Vec::new(),
    };
    if stage == Stage::All {
        if let Err(e) = write_reports(&config.output_dir, config.fairness_metric()) {
            summary.render_errors.push(e.to_string());
        }
    }
    report::write_text(
        &config.output_dir.join("run_summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Files produced by [`write_reports`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub aggregate: PathBuf,
    pub tables: Vec<PathBuf>,
    pub plot: Option<PlotFiles>,
}

/// Aggregate the persisted split reports under `results`, then render the
/// tables and the external trade-off plot from the written aggregate.
pub fn write_reports(results: &Path, fairness: Metric) -> Result<ReportFiles> {
    let reports = read_split_reports(results)?;
    if reports.is_empty() {
        return Err(Error::invalid(format!("no split reports under {}", results.join("runs").display())));
    }
    let aggregate_path = save_aggregate(&aggregate(&reports), results)?;
    let rows = load_aggregate(results)?;
    let mut tables = Vec::new();
    for m in Metric::ALL {
        if rows.iter().all(|r| r.get(m).is_none()) {
            continue;
        }
        let path = results.join("tables").join(format!("{}.md", m.key()));
        report::write_text(&path, &render_table(&rows, m)?)?;
        tables.push(path);
    }
    let plot = if tradeoff_points(&rows, fairness, Scope::External).is_empty() {
        None
    } else {
        Some(plot_external(results, &rows, fairness)?)
    };
    Ok(ReportFiles {
        aggregate: aggregate_path,
        tables,
        plot,
    })
}

/// Render `tradeoff_external.{svg,png,csv}` into `results`.
pub fn plot_external(results: &Path, rows: &[AggregateRow], fairness: Metric) -> Result<PlotFiles> {
    render_tradeoff_plot(rows, fairness, Scope::External, results, "tradeoff_external")
}

/// Task recorded in a results directory's `experiment.json`, if any.
pub fn recorded_task(results: &Path) -> Option<Task> {
    let text = std::fs::read_to_string(results.join("experiment.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(v.get("task")?.clone()).ok()
}

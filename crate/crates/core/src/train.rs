//! Training and evaluation harness.
//!
//! Momentum SGD over cross-entropy with a frozen stem, no image-level
//! augmentation, and no batch normalization. When enabled, the style
//! transform is applied probabilistically: one Bernoulli coin per batch
//! decides whether every configured insertion point is transformed this step
//! or none is. Evaluation never applies the transform, structurally: the
//! evaluation path takes neither prototype nor noise.
//!
//! Everything is deterministic given the config seed; all randomness flows
//! through fixed named substreams of one root RNG.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_backbone, stream, ArchConfig, Backbone, ForwardTrace, InjectionPlan, InsertionPoint,
    LayerInjection,
};
use crate::domains::{generate_dataset, load_dataset, Dataset, DomainSpec, StyleParams};
use crate::error::{Error, Result};
use crate::prototype::{check_injectable, extract_prototype, load_prototype, StylePrototype};
use crate::rng::SeededRng;
use crate::style::{sample_perturbation, NoiseSpec};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OssaConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Insertion points transformed when the per-batch coin lands heads.
    #[serde(default = "default_layers")]
    pub layers: Vec<String>,
    /// Probability of applying the transform on a training step.
    #[serde(default = "default_prob")]
    pub prob: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_true() -> bool {
    true
}
fn default_layers() -> Vec<String> {
    vec!["post_stem".to_string(), "post_stage1".to_string()]
}
fn default_prob() -> f64 {
    0.5
}
fn default_noise_std() -> f64 {
    0.75
}
fn default_eps() -> f64 {
    1e-5
}

impl Default for OssaConfig {
    fn default() -> Self {
        OssaConfig {
            enabled: true,
            layers: default_layers(),
            prob: default_prob(),
            noise_std: default_noise_std(),
            eps: default_eps(),
        }
    }
}

impl OssaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::invalid_config("prob", format!("must be in [0, 1], got {}", self.prob)));
        }
        if self.enabled && self.layers.is_empty() {
            return Err(Error::invalid_config("layers", "must be non-empty when enabled"));
        }
        let mut seen = Vec::new();
        for name in &self.layers {
            let point = InsertionPoint::from_name(name)?;
            if seen.contains(&point) {
                return Err(Error::invalid_config("layers", format!("duplicate layer {name}")));
            }
            seen.push(point);
        }
        NoiseSpec::new(self.noise_std)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid_config("eps", format!("must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn insertion_points(&self) -> Result<Vec<InsertionPoint>> {
        self.layers.iter().map(|n| InsertionPoint::from_name(n)).collect()
    }
}

/// Where the style prototype comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrototypeSource {
    /// A prototype file extracted earlier.
    File { path: PathBuf },
    /// Extract from `count` images sampled from the target-domain pool.
    Target { count: usize },
    /// Extract from `count` images sampled from the source-domain pool
    /// (ablation control).
    Source { count: usize },
}

impl Default for PrototypeSource {
    fn default() -> Self {
        PrototypeSource::Target { count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedural source/target pair sharing content, differing in style.
    Generated {
        n_classes: usize,
        image_size: usize,
        train_per_class: usize,
        test_per_class: usize,
        /// Content seed of the training pool.
        content_seed: u64,
        /// Content seed of the held-out test pool (both domains).
        test_content_seed: u64,
        /// Content seed of the pool prototype images are sampled from.
        proto_content_seed: u64,
        /// Images available to prototype extraction per domain.
        proto_pool: usize,
        source_style: StyleParams,
        target_style: StyleParams,
    },
    /// Pre-materialized datasets in the documented directory layout.
    Directories {
        source_train: PathBuf,
        source_test: PathBuf,
        target_test: PathBuf,
        /// Pool of target-domain images for prototype extraction.
        target_pool: PathBuf,
        /// Pool of source-domain images (for the source-prototype ablation).
        source_pool: PathBuf,
    },
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if let DataConfig::Generated {
            n_classes,
            image_size,
            train_per_class,
            test_per_class,
            proto_pool,
            source_style,
            target_style,
            ..
        } = self
        {
            let spec = DomainSpec {
                n_classes: *n_classes,
                image_size: *image_size,
                samples_per_class: *train_per_class,
                style: *source_style,
                seed: 0,
            };
            spec.validate()?;
            target_style.validate()?;
            if *test_per_class == 0 {
                return Err(Error::invalid_config("test_per_class", "must be >= 1"));
            }
            if *proto_pool == 0 {
                return Err(Error::invalid_config("proto_pool", "must be >= 1"));
            }
        }
        Ok(())
    }
}

fn default_steps() -> usize {
    600
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.02
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_decay_at() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate is multiplied by this factor once,
    /// after `lr_decay_at * steps` steps.
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_decay_at")]
    pub lr_decay_at: f64,
    #[serde(default)]
    pub arch: ArchConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub ossa: OssaConfig,
    #[serde(default)]
    pub prototype: PrototypeSource,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate()?;
        self.ossa.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid_config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid_config("lr_decay_factor", "must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::invalid_config("lr_decay_at", "must be in [0, 1]"));
        }
        if let PrototypeSource::Target { count } | PrototypeSource::Source { count } =
            &self.prototype
        {
            if *count == 0 {
                return Err(Error::invalid_config("prototype.count", "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub n_examples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub source_per_class: Vec<f64>,
    pub target_per_class: Vec<f64>,
    pub ossa_applied_steps: usize,
    pub total_steps: usize,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(json)?)
    }
}

/// One probabilistic forward pass (the training path). A single coin per
/// batch decides whether all configured layers are transformed or none.
/// With the flag off, no coin is drawn at all, so a disabled run consumes
/// exactly the draws of a plain baseline.
pub fn forward_with_ossa(
    backbone: &Backbone,
    batch: &FeatureMap,
    proto: &StylePrototype,
    cfg: &OssaConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    Ok(forward_with_ossa_traced(backbone, batch, proto, cfg, rng)?.0.logits)
}

pub fn forward_with_ossa_traced(
    backbone: &Backbone,
    batch: &FeatureMap,
    proto: &StylePrototype,
    cfg: &OssaConfig,
    rng: &mut SeededRng,
) -> Result<(ForwardTrace, bool)> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok((backbone.forward_traced(batch, None)?, false));
    }
    let points = cfg.insertion_points()?;
    check_injectable(proto, backbone, &points)?;
    let apply = rng.bernoulli(cfg.prob);
    if !apply {
        return Ok((backbone.forward_traced(batch, None)?, false));
    }
    let spec = NoiseSpec::new(cfg.noise_std)?;
    let mut layers = Vec::with_capacity(points.len());
    for point in points {
        let stats = proto.layer(point.name()).expect("checked injectable");
        let (alpha, beta) = sample_perturbation(rng, &spec, batch.batch(), stats.channels());
        layers.push(LayerInjection { point, stats, alpha, beta });
    }
    let plan = InjectionPlan { layers, eps: cfg.eps };
    Ok((backbone.forward_traced(batch, Some(&plan))?, true))
}

/// Top-1 accuracy over a labeled dataset. The transform is structurally
/// absent here: this path has no prototype, no noise, no coin.
pub fn evaluate(backbone: &Backbone, dataset: &Dataset) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let n_classes = backbone.arch.n_classes;
    let mut correct_per_class = vec![0usize; n_classes];
    let mut total_per_class = vec![0usize; n_classes];
    let chunk = 32;
    let mut idx = 0;
    while idx < dataset.len() {
        let end = (idx + chunk).min(dataset.len());
        let batch = crate::image::Image::batch(&dataset.images[idx..end])?;
        let logits = backbone.forward(&batch)?;
        for (row, &label) in logits.chunks_exact(n_classes).zip(&dataset.labels[idx..end]) {
            if label >= n_classes {
                return Err(Error::Dataset(format!(
                    "label {label} out of range for {n_classes} classes"
                )));
            }
            total_per_class[label] += 1;
            if argmax(row) == label {
                correct_per_class[label] += 1;
            }
        }
        idx = end;
    }
    let correct: usize = correct_per_class.iter().sum();
    let per_class = correct_per_class
        .iter()
        .zip(&total_per_class)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalMetrics {
        accuracy: correct as f64 / dataset.len() as f64,
        per_class_accuracy: per_class,
        n_examples: dataset.len(),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * n_classes..(b + 1) * n_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        loss += sum.ln() + max - row[label];
        for c in 0..n_classes {
            let p = exp[c] / sum;
            grad[b * n_classes + c] =
                (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    (loss / batch as f64, grad)
}

/// The materialized data a run trains and evaluates on.
pub struct RunData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_test: Dataset,
    pub target_pool: Dataset,
    pub source_pool: Dataset,
}

pub fn materialize_data(cfg: &TrainConfig) -> Result<RunData> {
    match &cfg.data {
        DataConfig::Generated {
            n_classes,
            image_size,
            train_per_class,
            test_per_class,
            content_seed,
            test_content_seed,
            proto_content_seed,
            proto_pool,
            source_style,
            target_style,
        } => {
            let spec = |samples: usize, style: &StyleParams, seed: u64| DomainSpec {
                n_classes: *n_classes,
                image_size: *image_size,
                samples_per_class: samples,
                style: *style,
                seed,
            };
            Ok(RunData {
                source_train: generate_dataset(&spec(*train_per_class, source_style, *content_seed))?,
                source_test: generate_dataset(&spec(*test_per_class, source_style, *test_content_seed))?,
                target_test: generate_dataset(&spec(*test_per_class, target_style, *test_content_seed))?,
                target_pool: generate_dataset(&spec(
                    proto_pool.div_ceil(*n_classes),
                    target_style,
                    *proto_content_seed,
                ))?,
                source_pool: generate_dataset(&spec(
                    proto_pool.div_ceil(*n_classes),
                    source_style,
                    *proto_content_seed,
                ))?,
            })
        }
        DataConfig::Directories { source_train, source_test, target_test, target_pool, source_pool } => {
            Ok(RunData {
                source_train: load_dataset(source_train)?,
                source_test: load_dataset(source_test)?,
                target_test: load_dataset(target_test)?,
                target_pool: load_dataset(target_pool)?,
                source_pool: load_dataset(source_pool)?,
            })
        }
    }
}

/// Resolves the configured prototype against the run's data and backbone.
/// Pool sampling uses the dedicated substream, so the set of style images
/// varies with the run seed exactly like a fresh style image per run would.
pub fn resolve_prototype(
    cfg: &TrainConfig,
    data: &RunData,
    backbone: &Backbone,
    root: &SeededRng,
) -> Result<StylePrototype> {
    let points = cfg.ossa.insertion_points()?;
    match &cfg.prototype {
        PrototypeSource::File { path } => {
            let proto = load_prototype(path)?;
            check_injectable(&proto, backbone, &points)?;
            Ok(proto)
        }
        PrototypeSource::Target { count } | PrototypeSource::Source { count } => {
            let pool = match &cfg.prototype {
                PrototypeSource::Target { .. } => &data.target_pool,
                _ => &data.source_pool,
            };
            if *count > pool.len() {
                return Err(Error::Dataset(format!(
                    "prototype needs {count} images but the pool holds {}",
                    pool.len()
                )));
            }
            let mut rng = root.substream(stream::PROTO_SELECT);
            let picked = rng.sample_distinct(pool.len(), *count);
            let images: Vec<_> = picked.iter().map(|&i| pool.images[i].clone()).collect();
            let ids: Vec<String> = picked.iter().map(|&i| format!("pool/{i:05}")).collect();
            let proto =
                extract_prototype(backbone, &images, &ids, &points, cfg.ossa.eps)?.with_seed(cfg.seed);
            Ok(proto)
        }
    }
}

/// Full training run: deterministic given the config (the wall-clock field
/// aside). Returns the trained backbone together with its report.
pub fn train(cfg: &TrainConfig) -> Result<(Backbone, RunReport)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let root = SeededRng::from_seed(cfg.seed);
    let data = materialize_data(cfg)?;
    let mut backbone = build_backbone(&cfg.arch, cfg.seed)?;
    let fingerprint_before = backbone.fingerprint().to_string();

    let proto = if cfg.ossa.enabled {
        Some(resolve_prototype(cfg, &data, &backbone, &root)?)
    } else {
        None
    };

    let n_classes = cfg.arch.n_classes;
    let n_train = data.source_train.len();
    if n_train < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "training set of {n_train} is smaller than one batch of {}",
            cfg.batch_size
        )));
    }

    let mut shuffle_rng = root.substream(stream::SHUFFLE);
    let mut ossa_rng = root.substream(stream::OSSA);
    let mut order: Vec<usize> = (0..n_train).collect();
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0;

    let mut velocity: Vec<Vec<f64>> =
        backbone.trainable_params().iter().map(|p| vec![0.0; p.len()]).collect();

    let steps_per_epoch = n_train / cfg.batch_size;
    let decay_step = (cfg.lr_decay_at * cfg.steps as f64).floor() as usize;
    let mut epoch_losses = Vec::new();
    let mut epoch_acc = 0.0;
    let mut epoch_count = 0usize;
    let mut final_loss = f64::NAN;
    let mut applied = 0usize;

    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > n_train {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let images: Vec<_> = idx.iter().map(|&i| data.source_train.images[i].clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.source_train.labels[i]).collect();
        let batch = crate::image::Image::batch(&images)?;

        let (trace, used) = match &proto {
            Some(p) => forward_with_ossa_traced(&backbone, &batch, p, &cfg.ossa, &mut ossa_rng)?,
            None => (backbone.forward_traced(&batch, None)?, false),
        };
        if used {
            applied += 1;
        }

        let (loss, grad_logits) = cross_entropy(&trace.logits, &labels, n_classes);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        final_loss = loss;
        epoch_acc += loss;
        epoch_count += 1;
        if epoch_count == steps_per_epoch {
            epoch_losses.push(epoch_acc / steps_per_epoch as f64);
            epoch_acc = 0.0;
            epoch_count = 0;
        }

        let grads = backbone.backward(&trace, &grad_logits)?;
        let lr = if step >= decay_step && cfg.lr_decay_at < 1.0 {
            cfg.lr * cfg.lr_decay_factor
        } else {
            cfg.lr
        };
        for ((param, vel), grad) in
            backbone.trainable_params_mut().into_iter().zip(&mut velocity).zip(&grads.tensors)
        {
            for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
    }
    if epoch_count > 0 {
        epoch_losses.push(epoch_acc / epoch_count as f64);
    }

    debug_assert_eq!(stem_before, *backbone.stem(), "frozen stem must not move");

    let source = evaluate(&backbone, &data.source_test)?;
    let target = evaluate(&backbone, &data.target_test)?;

    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        epoch_losses,
        final_loss,
        source_accuracy: source.accuracy,
        target_accuracy: target.accuracy,
        source_per_class: source.per_class_accuracy,
        target_per_class: target.per_class_accuracy,
        ossa_applied_steps: applied,
        total_steps: cfg.steps,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((backbone, report))
}

/// A reasonable generated-domain config for quick experiments and tests:
/// clean source, foggy target (t = 0.6), defaults everywhere else.
pub fn demo_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        steps: default_steps(),
        batch_size: default_batch(),
        lr: default_lr(),
        momentum: default_momentum(),
        lr_decay_factor: default_decay_factor(),
        lr_decay_at: default_decay_at(),
        arch: ArchConfig::default(),
        data: DataConfig::Generated {
            n_classes: 4,
            image_size: 32,
            train_per_class: 100,
            test_per_class: 50,
            content_seed: 1001,
            test_content_seed: 2002,
            proto_content_seed: 3003,
            proto_pool: 16,
            source_style: StyleParams::default(),
            target_style: StyleParams { fog_intensity: 0.6, ..StyleParams::default() },
        },
        ossa: OssaConfig::default(),
        prototype: PrototypeSource::default(),
    }
}

//! Single-pair training loop.
//!
//! Every step draws one structure view `Ĩ_s` and one appearance view `Ĩ_t`;
//! on every `clean_pair_period`-th step the unaugmented pair is appended as a
//! second example. Each example goes through the generator separately (views
//! and the clean pair have different sizes), its three loss terms are computed
//! at the deepest backbone layer, and the per-example objectives are averaged.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::augmentation::{AugmentationPolicy, AugmentationStreams, StreamPositions};
use crate::descriptors::key_self_similarity;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::generator::{init_generator, GeneratorConfig, GeneratorState, Mode};
use crate::image::ImageTensor;
use crate::losses::{
    appearance_loss, identity_loss, splice_loss_tensor, structure_loss, Ablation, LossReport, LossWeights,
    TermWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::vit::Backbone;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub total_iterations: usize,
    /// The clean pair joins the batch on every iteration divisible by this.
    pub clean_pair_period: usize,
    /// Side the larger image dimension is resized to before the backbone.
    pub feature_resize: usize,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_period: usize,
    pub log_period: usize,
    /// Write `outputs/intermediate_{k}.png` every this many iterations; 0 disables.
    pub intermediate_period: usize,
    /// Force sequential host loops. Results are bit-identical either way; this
    /// pins the schedule for auditing.
    pub deterministic: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            total_iterations: 2000,
            clean_pair_period: 75,
            feature_resize: 224,
            seed: 0,
            checkpoint_period: 500,
            log_period: 1,
            intermediate_period: 0,
            deterministic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub trainer: TrainerSection,
    pub ablation: Ablation,
    pub augmentation: AugmentationPolicy,
    /// The generator seed is taken from `trainer.seed`.
    pub generator: GeneratorConfig,
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let t = &self.trainer;
        if t.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be at least 1".into()));
        }
        if t.clean_pair_period == 0 {
            return Err(Error::Config("clean_pair_period must be at least 1".into()));
        }
        if t.log_period == 0 {
            return Err(Error::Config("log_period must be at least 1".into()));
        }
        if t.feature_resize < 2 * patch_size {
            return Err(Error::Config(format!(
                "feature_resize {} must be at least twice the patch size {patch_size}",
                t.feature_resize
            )));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        self.generator_config().validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.trainer.seed,
            ..self.generator.clone()
        }
    }

    pub fn term_weights(&self) -> TermWeights {
        TermWeights::new(self.loss, self.ablation)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// One training example: a structure image and an appearance image.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub structure: ImageTensor,
    pub appearance: ImageTensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    iteration: usize,
    streams: StreamPositions,
    history: Vec<LossReport>,
}

/// Everything needed to continue a run exactly.
#[derive(Debug)]
pub struct RunState {
    pub iteration: usize,
    pub generator: GeneratorState,
    pub optimizer: Adam,
    pub streams: AugmentationStreams,
    pub seed: u64,
    /// Every logged report, in iteration order.
    pub history: Vec<LossReport>,
}

impl RunState {
    pub fn new(config: &TrainConfig, device: &Device, dtype: DType) -> Result<Self> {
        let generator = init_generator(&config.generator_config(), device, dtype)?;
        let optimizer = Adam::new(generator.vars(), config.optimizer)?;
        Ok(Self {
            iteration: 0,
            generator,
            optimizer,
            streams: AugmentationStreams::new(config.trainer.seed),
            seed: config.trainer.seed,
            history: Vec::new(),
        })
    }

    /// Writes `generator.safetensors` (+ sidecar), `optimizer.safetensors` and `state.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.save(dir.join("generator.safetensors"))?;
        let mut opt = WeightArchive::new();
        self.optimizer.write_moments(&mut opt)?;
        opt.write(dir.join("optimizer.safetensors"))?;
        let state = StateFile {
            iteration: self.iteration,
            streams: self.streams.positions(self.seed),
            history: self.history.clone(),
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>, config: &TrainConfig, device: &Device, dtype: DType) -> Result<Self> {
        let dir = dir.as_ref();
        let generator = GeneratorState::load(dir.join("generator.safetensors"), device, dtype)?;
        let mut optimizer = Adam::new(generator.vars(), config.optimizer)?;
        optimizer.read_moments(&WeightArchive::read(dir.join("optimizer.safetensors"))?)?;
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: StateFile =
            serde_json::from_str(&text).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
        Ok(Self {
            iteration: state.iteration,
            generator,
            optimizer,
            streams: AugmentationStreams::restore(&state.streams),
            seed: state.streams.seed,
            history: state.history,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimization step over `batch`; increments `state.iteration`.
///
/// Target features (`Ĩ_t` [CLS] and keys, `Ĩ_s` self-similarity) carry no
/// gradient. Terms whose coefficient is zero are still evaluated and reported
/// but stay out of the graph; a disabled identity term uses a read-only
/// generator pass so it cannot touch the batch-norm statistics.
pub fn train_step(
    backbone: &Backbone,
    state: &mut RunState,
    batch: &[Example],
    config: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let iteration = state.iteration + 1;
    let layer = backbone.num_layers();
    let size = config.trainer.feature_resize;
    let terms = config.term_weights();
    let (device, dtype) = (backbone.device(), backbone.dtype());
    state.generator.set_mode(Mode::Train);

    let features = |x: &Tensor| backbone.forward_features(&backbone.preprocess_tensor(x, size)?, &[layer]);
    let f64_term = |t: Tensor| -> Result<Tensor> { Ok(t.to_dtype(DType::F64)?) };

    let mut objective: Option<Tensor> = None;
    let (mut app_sum, mut st_sum, mut id_sum) = (0.0, 0.0, 0.0);
    for ex in batch {
        let xs = ex.structure.to_tensor(device, dtype)?;
        let xt = ex.appearance.to_tensor(device, dtype)?;
        let fs = features(&xs)?;
        let ft = features(&xt)?;
        let gs = state.generator.forward(&xs)?;
        let fgs = features(&gs)?;

        let app = f64_term(appearance_loss(&ft.cls(layer)?, &fgs.cls(layer)?)?)?;
        let s_src = key_self_similarity(&fs.keys(layer)?)?;
        let st = f64_term(structure_loss(&s_src, &key_self_similarity(&fgs.keys(layer)?)?)?)?;
        let id = if terms.id != 0.0 {
            let gt = state.generator.forward(&xt)?;
            identity_loss(&ft.keys(layer)?, &features(&gt)?.keys(layer)?)?
        } else {
            let gt = state.generator.infer(&xt)?.detach();
            identity_loss(&ft.keys(layer)?, &features(&gt)?.keys(layer)?)?.detach()
        };
        let id = f64_term(id)?;
        app_sum += scalar(&app)?;
        st_sum += scalar(&st)?;
        id_sum += scalar(&id)?;
        let total = splice_loss_tensor(&app, &st, &id, &terms)?;
        objective = Some(match objective {
            None => total,
            Some(acc) => (acc + total)?,
        });
    }
    let n = batch.len() as f64;
    let objective = (objective.expect("batch is non-empty") / n)?;
    let report = LossReport {
        iteration,
        app: app_sum / n,
        structure: st_sum / n,
        id: id_sum / n,
        total: scalar(&objective)?,
    };
    for (name, v) in [
        ("appearance loss", report.app),
        ("structure loss", report.structure),
        ("identity loss", report.id),
        ("total loss", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                iteration,
                diagnostic: Some(Box::new(report)),
            });
        }
    }
    let grads = objective.backward()?;
    state.optimizer.step(&grads)?;
    state.iteration = iteration;
    Ok(report)
}

/// Run directory: `config.snapshot`, `losses.log`, `checkpoints/iter_{k}`, `outputs/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "outputs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
        }
        Ok(Self { root })
    }

    /// Opens an existing run directory without creating anything.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join("config.snapshot").is_file() {
            return Err(Error::InvalidArgument(format!(
                "{} is not a run directory (no config.snapshot)",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("losses.log")
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration}"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join("outputs").join(name)
    }

    pub fn write_config(&self, config: &TrainConfig) -> Result<()> {
        let p = self.root.join("config.snapshot");
        fs::write(&p, config.to_toml()?).map_err(|e| Error::io(p, e))
    }

    pub fn read_config(&self) -> Result<TrainConfig> {
        let p = self.root.join("config.snapshot");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        TrainConfig::from_toml(&text)
    }

    /// Most recent `checkpoints/iter_{k}` directory with a complete state.
    pub fn latest_checkpoint(&self) -> Result<Option<(usize, PathBuf)>> {
        let dir = self.root.join("checkpoints");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(k) = name.strip_prefix("iter_").and_then(|k| k.parse::<usize>().ok()) else {
                continue;
            };
            if entry.path().join("state.json").is_file() && best.as_ref().map_or(true, |(b, _)| k > *b) {
                best = Some((k, entry.path()));
            }
        }
        Ok(best)
    }

    fn append_log(&self, reports: &[LossReport]) -> Result<()> {
        let p = self.loss_log();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        for r in reports {
            writeln!(f, "{}", r.to_log_line()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn rewrite_log(&self, reports: &[LossReport]) -> Result<()> {
        let p = self.loss_log();
        let _ = fs::remove_file(&p);
        self.append_log(reports)
    }

    pub fn read_log(&self) -> Result<Vec<LossReport>> {
        read_loss_log(self.loss_log())
    }
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(LossReport::from_log_line)
        .collect()
}

/// Drives a run: sampling, scheduling, logging and checkpointing.
pub struct Trainer<'a> {
    backbone: &'a Backbone,
    config: TrainConfig,
    structure: ImageTensor,
    appearance: ImageTensor,
    state: RunState,
    run_dir: Option<RunDir>,
}

/// Result of [`Trainer::run`].
#[derive(Debug)]
pub struct TrainOutcome {
    /// `G(I_s)` at the input resolution, batch-norm in inference mode.
    pub output: ImageTensor,
    pub history: Vec<LossReport>,
    pub state: RunState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        structure: ImageTensor,
        appearance: ImageTensor,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate(backbone.patch_size())?;
        let state = RunState::new(&config, backbone.device(), backbone.dtype())?;
        Self::with_state(backbone, structure, appearance, config, state)
    }

    pub fn with_state(
        backbone: &'a Backbone,
        structure: ImageTensor,
        appearance: ImageTensor,
        config: TrainConfig,
        state: RunState,
    ) -> Result<Self> {
        config.validate(backbone.patch_size())?;
        let size = config.trainer.feature_resize;
        backbone.processed_size(structure.height(), structure.width(), size)?;
        backbone.processed_size(appearance.height(), appearance.width(), size)?;
        Ok(Self {
            backbone,
            config,
            structure,
            appearance,
            state,
            run_dir: None,
        })
    }

    /// Attaches a fresh run directory and writes the configuration snapshot.
    pub fn with_run_dir(mut self, dir: RunDir) -> Result<Self> {
        dir.write_config(&self.config)?;
        dir.rewrite_log(&self.state.history)?;
        self.run_dir = Some(dir);
        Ok(self)
    }

    /// Restores the latest checkpoint of an existing run directory.
    pub fn resume(
        backbone: &'a Backbone,
        structure: ImageTensor,
        appearance: ImageTensor,
        dir: RunDir,
    ) -> Result<Self> {
        let config = dir.read_config()?;
        let state = match dir.latest_checkpoint()? {
            Some((k, path)) => {
                log::info!("resuming from iteration {k}");
                RunState::load(path, &config, backbone.device(), backbone.dtype())?
            }
            None => RunState::new(&config, backbone.device(), backbone.dtype())?,
        };
        let mut t = Self::with_state(backbone, structure, appearance, config, state)?;
        dir.rewrite_log(&t.state.history)?;
        t.run_dir = Some(dir);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RunState {
        &mut self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    fn exec(&self) -> ExecPolicy {
        if self.config.trainer.deterministic {
            ExecPolicy::Sequential
        } else {
            ExecPolicy::Parallel
        }
    }

    /// The examples used by the next step.
    pub fn next_batch(&mut self) -> Result<Vec<Example>> {
        let (s, t) =
            self.state
                .streams
                .next_pair(&self.structure, &self.appearance, &self.config.augmentation, self.exec())?;
        let mut batch = vec![Example {
            structure: s,
            appearance: t,
        }];
        if (self.state.iteration + 1) % self.config.trainer.clean_pair_period == 0 {
            batch.push(Example {
                structure: self.structure.clone(),
                appearance: self.appearance.clone(),
            });
        }
        Ok(batch)
    }

    /// Samples a batch and performs one update.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch()?;
        let report = match train_step(self.backbone, &mut self.state, &batch, &self.config) {
            Ok(r) => r,
            Err(e) => {
                if let (Error::NonFinite { .. }, Some(dir)) = (&e, &self.run_dir) {
                    self.write_diagnostics(dir, &batch, &e);
                }
                return Err(e);
            }
        };
        let k = report.iteration;
        let t = &self.config.trainer;
        if k % t.log_period == 0 || k == 1 || k == t.total_iterations {
            self.state.history.push(report);
            if let Some(dir) = &self.run_dir {
                dir.append_log(&[report])?;
            }
        }
        if let Some(dir) = &self.run_dir {
            if t.checkpoint_period > 0 && k % t.checkpoint_period == 0 {
                self.state.save(dir.checkpoint(k))?;
            }
            if t.intermediate_period > 0 && k % t.intermediate_period == 0 {
                self.output()?.save(dir.output(&format!("intermediate_{k}.png")))?;
            }
        }
        Ok(report)
    }

    fn write_diagnostics(&self, dir: &RunDir, batch: &[Example], err: &Error) {
        let root = dir.root().join("diagnostics");
        if fs::create_dir_all(&root).is_err() {
            return;
        }
        for (i, ex) in batch.iter().enumerate() {
            let _ = ex.structure.save(root.join(format!("structure_{i}.png")));
            let _ = ex.appearance.save(root.join(format!("appearance_{i}.png")));
        }
        if let Error::NonFinite {
            diagnostic: Some(report),
            ..
        } = err
        {
            let _ = fs::write(root.join("report.json"), report.to_log_line());
        }
        let _ = fs::write(root.join("error.txt"), err.to_string());
    }

    /// `G(I_s)` at the input resolution using running batch-norm statistics.
    pub fn output(&self) -> Result<ImageTensor> {
        self.state.generator.generate(&self.structure)
    }

    /// Runs until `total_iterations`, calling `observe` after every step.
    pub fn run_with(mut self, mut observe: impl FnMut(&LossReport)) -> Result<TrainOutcome> {
        while self.state.iteration < self.config.trainer.total_iterations {
            let r = self.step()?;
            observe(&r);
        }
        let output = self.output()?;
        if let Some(dir) = &self.run_dir {
            self.state.save(dir.checkpoint(self.state.iteration))?;
            output.save(dir.output("final.png"))?;
        }
        Ok(TrainOutcome {
            output,
            history: self.state.history.clone(),
            state: self.state,
        })
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(|_| {})
    }
}

/// Trains on `{I_s, I_t}` with `config`, optionally writing a run directory.
pub fn train(
    backbone: &Backbone,
    structure: &ImageTensor,
    appearance: &ImageTensor,
    config: &TrainConfig,
    run_dir: Option<RunDir>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(backbone, structure.clone(), appearance.clone(), config.clone())?;
    if let Some(dir) = run_dir {
        t = t.with_run_dir(dir)?;
    }
    t.run()
}

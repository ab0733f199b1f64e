//! L1/Adam training over random HR/LR crop pairs, with versioned
//! checkpoints and bit-exact resumption.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{ConfigError, TensorError, TrainError};
use crate::metrics::{psnr, Psnr};
use crate::swin3d::model::{superformer_forward, ModelError};
use crate::swin3d::{ModelConfig, ParamStore, SuperFormer};
use crate::tensor::Tensor;
use crate::volume::random_crop_pair;

/// Tile edge used for full-volume inference during evaluation.
pub const EVAL_TILE: usize = 64;
/// Overlap between neighbouring inference tiles.
pub const EVAL_OVERLAP: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Crops per optimizer step.
    pub batch: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Cubic crop edge in voxels.
    pub crop: usize,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_interval: u64,
    /// Steps between validation PSNR evaluations; 0 disables them.
    pub eval_interval: u64,
    /// k-space truncation factors used to synthesize LR inputs.
    pub factors: [usize; 3],
    /// Optional global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch: 4,
            iterations: 1000,
            seed: 0,
            crop: 32,
            checkpoint_interval: 100,
            eval_interval: 100,
            factors: [2, 2, 1],
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.crop == 0 || self.factors.contains(&0) {
            return bad("crop and factors must be positive".into());
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return bad("clip must be positive when set".into());
        }
        Ok(())
    }

    /// Checks the crop against the model's patch × window grid.
    pub fn check_against(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        model.check_input_dims([self.crop; 3])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Whether two configs produce the same trajectory (they may differ in
    /// run length and reporting cadence).
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            iterations: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Adam first and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let mut m = ParamStore::new();
        for (k, t) in params.iter() {
            m.insert(k, Tensor::zeros(t.shape()));
        }
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Increments `state.t` first, so the first call uses `t = 1`.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
    state: &mut AdamState,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name).expect("moment present");
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = (b1 * *mi as f64 + (1.0 - b1) * gi as f64) as f32;
        }
        let m = state.m.get(name).expect("moment present");
        let v = state.v.get_mut(name).expect("moment present");
        for (((pi, vi), &gi), &mi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(m.data()) {
            let g = gi as f64;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * g * g) as f32;
            let mhat = mi as f64 / c1;
            let vhat = *vi as f64 / c2;
            *pi = (*pi as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
    }
}

/// Mean absolute error between two tensors of equal shape.
pub fn l1_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64, TensorError> {
    pred.expect_same_shape("l1_loss", target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

fn global_norm(grads: &ParamStore<f32>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt()
}

/// Serializable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: RngState,
}

const MAGIC: &str = "VOLFORMER-CKPT";
const FORMAT_VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

fn toml_lines(prefix: &str, text: &str, out: &mut String) {
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once(" = ").expect("flat toml");
        let _ = writeln!(out, "{prefix}.{k}={v}");
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    fn groups(&self) -> [(&'static str, &ParamStore<f32>); 3] {
        [("param", &self.params), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)]
    }

    /// Text manifest, a blank line, then every tensor as raw little-endian
    /// f32 in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut man = String::new();
        let _ = writeln!(man, "{MAGIC}");
        let _ = writeln!(man, "format={FORMAT_VERSION}");
        let _ = writeln!(man, "step={}", self.step);
        let _ = writeln!(man, "config_hash={}", self.model_config.hash());
        let _ = writeln!(man, "rng_seed={}", hex(&self.rng.seed));
        let _ = writeln!(man, "rng_stream={}", self.rng.stream);
        let _ = writeln!(man, "rng_word_pos={}", self.rng.word_pos);
        let _ = writeln!(man, "adam_t={}", self.adam.t);
        toml_lines("model", &self.model_config.to_toml(), &mut man);
        toml_lines("train", &self.train_config.to_toml(), &mut man);
        let mut payload = Vec::new();
        for (group, store) in self.groups() {
            for (name, t) in store.iter() {
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                let _ = writeln!(man, "tensor={group}/{name} shape={} len={}", shape.join(","), t.len());
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        man.push('\n');
        let mut out = man.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| ckpt_err("missing manifest terminator"))?;
        let man = std::str::from_utf8(&bytes[..split]).map_err(|_| ckpt_err("manifest is not UTF-8"))?;
        let mut payload = &bytes[split + 2..];
        let mut lines = man.lines();
        if lines.next() != Some(MAGIC) {
            return Err(ckpt_err("not a checkpoint file"));
        }
        let mut kv = std::collections::BTreeMap::new();
        let (mut model_toml, mut train_toml) = (String::new(), String::new());
        let mut tensors = Vec::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| ckpt_err(format!("bad line {line:?}")))?;
            if let Some(key) = k.strip_prefix("model.") {
                let _ = writeln!(model_toml, "{key} = {v}");
            } else if let Some(key) = k.strip_prefix("train.") {
                let _ = writeln!(train_toml, "{key} = {v}");
            } else if k == "tensor" {
                tensors.push(v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| kv.get(k).ok_or_else(|| ckpt_err(format!("missing {k}")));
        let num = |k: &str| -> Result<u128, TrainError> {
            field(k)?.parse().map_err(|_| ckpt_err(format!("bad {k}")))
        };
        if num("format")? != FORMAT_VERSION as u128 {
            return Err(ckpt_err(format!("unsupported format {}", field("format")?)));
        }
        let model_config = ModelConfig::from_toml(&model_toml)?;
        if field("config_hash")? != &model_config.hash() {
            return Err(ckpt_err("stored config hash does not match stored config"));
        }
        let train_config = TrainConfig::from_toml(&train_toml)?;
        let rng = RngState {
            seed: unhex32(field("rng_seed")?).ok_or_else(|| ckpt_err("bad rng_seed"))?,
            stream: num("rng_stream")? as u64,
            word_pos: num("rng_word_pos")?,
        };
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for entry in tensors {
            let mut parts = entry.split(' ');
            let full = parts.next().unwrap_or_default();
            let shape = parts.next().and_then(|s| s.strip_prefix("shape="));
            let len = parts.next().and_then(|s| s.strip_prefix("len=")).and_then(|s| s.parse::<usize>().ok());
            let (Some(shape), Some(len)) = (shape, len) else {
                return Err(ckpt_err(format!("bad tensor entry {entry:?}")));
            };
            let shape: Vec<usize> = shape
                .split(',')
                .map(|s| s.parse().map_err(|_| ckpt_err(format!("bad shape in {entry:?}"))))
                .collect::<Result<_, _>>()?;
            let (group, name) = full.split_once('/').ok_or_else(|| ckpt_err("bad tensor name"))?;
            let slot = ["param", "adam_m", "adam_v"]
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| ckpt_err(format!("unknown group {group}")))?;
            if payload.len() < 4 * len {
                return Err(ckpt_err("payload truncated"));
            }
            let data = payload[..4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[4 * len..];
            stores[slot].insert(name, Tensor::new(shape, data)?);
        }
        if !payload.is_empty() {
            return Err(ckpt_err(format!("{} trailing payload bytes", payload.len())));
        }
        let [params, m, v] = stores;
        for (label, s) in [("parameters", &params), ("first moments", &m), ("second moments", &v)] {
            if !s.matches(&model_config) {
                return Err(ckpt_err(format!("{label} do not match the stored model config")));
            }
        }
        Ok(Self {
            step: num("step")? as u64,
            model_config,
            train_config,
            params,
            adam: AdamState {
                t: num("adam_t")? as u64,
                m,
                v,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        let io = |source| TrainError::io(path, source);
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The model this checkpoint describes, after checking it against an
    /// expected configuration when one is given.
    pub fn model(&self, expected: Option<&ModelConfig>) -> Result<SuperFormer<f32>, TrainError> {
        if let Some(cfg) = expected {
            if cfg.hash() != self.model_config.hash() {
                return Err(ConfigError::Invalid(format!(
                    "checkpoint model config hash {} does not match the supplied config {}",
                    self.model_config.hash(),
                    cfg.hash()
                ))
                .into());
            }
        }
        Ok(SuperFormer::from_params(self.model_config.clone(), self.params.clone())?)
    }
}

fn model_err(e: ModelError) -> TrainError {
    match e {
        ModelError::Config(c) => c.into(),
        ModelError::Tensor(t) => t.into(),
    }
}

/// Mean PSNR of the model over every subject, using tiled inference.
pub fn validation_psnr(model: &SuperFormer<f32>, data: &Dataset) -> Result<Psnr, TrainError> {
    let mut values = Vec::with_capacity(data.len());
    for pair in &data.pairs {
        let sr = model
            .predict_tiled(&pair.lr.data, EVAL_TILE, EVAL_OVERLAP)
            .map_err(model_err)?;
        match psnr(&sr, &pair.hr.data, 1.0).map_err(|e| TrainError::Data(e.to_string()))? {
            Psnr::Finite(v) => values.push(v),
            Psnr::Identical => return Ok(Psnr::Identical),
        }
    }
    Ok(Psnr::Finite(values.iter().sum::<f64>() / values.len() as f64))
}

/// In-memory trainer; owns the model, optimizer state and crop sampler.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SuperFormer<f32>,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        config.check_against(&model_config)?;
        let model = SuperFormer::new(model_config)?;
        Ok(Self {
            adam: AdamState::zeros_like(&model.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
        })
    }

    /// Resumes from `ckpt`. `config` may extend the run but must describe the
    /// same trajectory.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if !config.same_trajectory(&ckpt.train_config) {
            return Err(ConfigError::Invalid(
                "training config differs from the checkpoint in more than iterations and intervals".into(),
            )
            .into());
        }
        let model = ckpt.model(None)?;
        Ok(Self {
            model,
            config,
            adam: ckpt.adam,
            step: ckpt.step,
            rng: ckpt.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Draws `batch` crops, accumulates the mean L1 gradient and applies one
    /// Adam update. Returns the batch loss before the update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        let mut crops = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let idx = self.rng.gen_range(0..data.len());
            let pair = &data.pairs[idx];
            crops.push(random_crop_pair(&pair.hr, &pair.lr, self.config.crop, &mut self.rng)?);
        }
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let mut total = None;
        for (hr, lr) in crops {
            let x = tape.constant(lr);
            let y = superformer_forward(&mut tape, x, &bound, &self.model.config).map_err(model_err)?;
            let t = tape.constant(hr);
            let l = tape.l1_loss(y, t)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("batch >= 1"), 1.0 / self.config.batch as f32)?;
        let loss_value = tape.value(loss).item() as f64;
        let mut g = tape.backward(loss)?;
        let mut grads = ParamStore::new();
        for (name, var) in bound.iter() {
            if let Some(t) = g.take(var) {
                grads.insert(name, t);
            }
        }
        if let Some(max) = self.config.clip {
            let norm = global_norm(&grads);
            if norm > max {
                let s = (max / norm) as f32;
                for (_, t) in grads.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            self.config.lr,
            self.config.betas,
            self.config.eps,
        );
        if !self.model.params.iter().all(|(_, t)| t.all_finite()) {
            return Err(TensorError::NonFinite { op: "adam_step" }.into());
        }
        self.step += 1;
        Ok(loss_value)
    }
}

/// One metrics-log record.
pub fn log_line(step: u64, loss: f64, psnr: Option<Psnr>) -> String {
    match psnr {
        Some(p) => format!("step={step} loss={loss:.9} psnr={p}"),
        None => format!("step={step} loss={loss:.9}"),
    }
}

/// Files written by [`run_training`] under its output directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics_log(&self) -> PathBuf {
        self.dir.join("metrics.log")
    }

    /// Wall-clock timings, kept apart so the metrics log is reproducible.
    pub fn timing_log(&self) -> PathBuf {
        self.dir.join("timing.log")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step-{step:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub last_psnr: Option<Psnr>,
}

fn append(path: &Path, text: &str) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| TrainError::io(path, e))
}

/// Drops log records after `step` so a resumed run continues cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<(), TrainError> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.strip_prefix("step=")
                .and_then(|r| r.split(' ').next())
                .and_then(|n| n.parse::<u64>().ok())
                .is_some_and(|n| n <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| TrainError::io(path, e))
}

/// Trains until `trainer.config.iterations`, writing logs and checkpoints
/// under `out`. `on_line` receives every metrics record.
pub fn run_training(
    mut trainer: Trainer,
    data: &Dataset,
    out: &Path,
    mut on_line: impl FnMut(&str),
) -> Result<RunSummary, TrainError> {
    fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let paths = RunPaths { dir: out.to_path_buf() };
    if trainer.step == 0 {
        for p in [paths.metrics_log(), paths.timing_log()] {
            fs::write(&p, "").map_err(|e| TrainError::io(&p, e))?;
        }
    } else {
        truncate_log(&paths.metrics_log(), trainer.step)?;
        truncate_log(&paths.timing_log(), trainer.step)?;
    }
    let cfg = trainer.config.clone();
    let mut summary = RunSummary {
        steps: trainer.step,
        last_loss: None,
        last_psnr: None,
    };
    while trainer.step < cfg.iterations {
        let started = Instant::now();
        let loss = trainer.train_step(data)?;
        let step = trainer.step;
        let psnr = if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            Some(validation_psnr(&trainer.model, data)?)
        } else {
            None
        };
        let line = log_line(step, loss, psnr);
        append(&paths.metrics_log(), &format!("{line}\n"))?;
        append(
            &paths.timing_log(),
            &format!("step={step} wall_ms={:.3}\n", started.elapsed().as_secs_f64() * 1e3),
        )?;
        on_line(&line);
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            trainer.checkpoint().save(&paths.checkpoint(step))?;
        }
        summary.last_loss = Some(loss);
        summary.last_psnr = psnr.or(summary.last_psnr);
    }
    summary.steps = trainer.step;
    trainer.checkpoint().save(&paths.final_checkpoint())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LrCache;
    use crate::volume::synth_phantom;

    fn tiny_run() -> (ModelConfig, TrainConfig, Dataset) {
        let cfg = ModelConfig::toy();
        let tc = TrainConfig {
            batch: 2,
            crop: 8,
            iterations: 3,
            checkpoint_interval: 0,
            eval_interval: 0,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let vol = synth_phantom(4, [16, 16, 16]).unwrap();
        let data = Dataset::from_volumes(vec![vol], tc.factors, &mut LrCache::default()).unwrap();
        (cfg, tc, data)
    }

    #[test]
    fn adam_hand_step() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0f32));
        let mut g = ParamStore::new();
        g.insert("x", Tensor::scalar(1.0f32));
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut s, 0.1, [0.9, 0.999], 1e-8);
        let x = p.get("x").unwrap().item();
        assert!((x as f64 + 0.1 / (1.0 + 1e-8)).abs() < 1e-7, "{x}");
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.5f32));
        let mut s = AdamState::zeros_like(&p);
        s.m.get_mut("x").unwrap().data_mut()[0] = 0.0;
        let mut g = ParamStore::new();
        g.insert("x", Tensor::scalar(0.0f32));
        adam_step(&mut p, &g, &mut s, 0.1, [0.9, 0.999], 1e-8);
        assert_eq!(p.get("x").unwrap().item(), 0.5);
        s.m.get_mut("x").unwrap().data_mut()[0] = 1.0;
        s.v.get_mut("x").unwrap().data_mut()[0] = 1.0;
        let before = p.clone();
        adam_step(&mut p, &g, &mut s, 0.0, [0.9, 0.999], 1e-8);
        assert_eq!(p, before);
        assert!((s.m.get("x").unwrap().item() - 0.9).abs() < 1e-7);
        assert!((s.v.get("x").unwrap().item() - 0.999).abs() < 1e-7);
    }

    #[test]
    fn l1_values() {
        let a = Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0f32, 2.0]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!(l1_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut bad = TrainConfig::default();
        bad.crop = 6;
        assert!(bad.check_against(&ModelConfig::toy()).is_err());
    }

    #[test]
    fn first_loss_is_fresh_model_loss() {
        let (cfg, tc, data) = tiny_run();
        let tc = TrainConfig { batch: 1, ..tc };
        let mut tr = Trainer::new(cfg.clone(), tc.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let _ = rng.gen_range(0..data.len());
        let (hr, lr) = random_crop_pair(&data.pairs[0].hr, &data.pairs[0].lr, tc.crop, &mut rng).unwrap();
        let fresh = SuperFormer::<f32>::new(cfg).unwrap().predict(&lr).unwrap();
        let expected = l1_loss(&fresh, &hr).unwrap();
        let got = tr.train_step(&data).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let (cfg, tc, data) = tiny_run();
        let mut tr = Trainer::new(cfg, tc).unwrap();
        tr.train_step(&data).unwrap();
        let ck = tr.checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut broken = bytes.clone();
        broken.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&broken).is_err());
    }

    #[test]
    fn resume_continues_identically() {
        let (cfg, tc, data) = tiny_run();
        let mut a = Trainer::new(cfg.clone(), tc.clone()).unwrap();
        let la: Vec<f64> = (0..3).map(|_| a.train_step(&data).unwrap()).collect();
        let mut b = Trainer::new(cfg, tc.clone()).unwrap();
        b.train_step(&data).unwrap();
        let ck = Checkpoint::from_bytes(&b.checkpoint().to_bytes()).unwrap();
        let mut c = Trainer::resume(ck, tc).unwrap();
        let lc: Vec<f64> = (0..2).map(|_| c.train_step(&data).unwrap()).collect();
        assert_eq!(&la[1..], &lc[..]);
        assert_eq!(a.checkpoint().to_bytes(), c.checkpoint().to_bytes());
    }
}

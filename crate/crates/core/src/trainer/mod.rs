//! Mini-batch optimization of the SDF and radiance networks.

pub mod adam;

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    pretrain_sphere, read_checkpoint, write_checkpoint, ActivationKind, CheckpointError,
    FieldConfig, NeuralModel, PretrainConfig, PretrainError,
};
use crate::objective::{
    evaluate_batch, prepare_batch, LossTerms, LossWeights, ObjectiveConfig, ObjectiveError, RaySample,
};
use crate::scene_io::Scene;
use crate::tracer::TraceConfig;
use adam::{step_decay, AdamError, AdamState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub field: FieldConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub total_batches: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Double the mask sharpness α every this many batches (0 = never).
    pub alpha_double_every: u64,
    pub pretrain: PretrainConfig,
    pub objective: ObjectiveConfig,
    pub trace: TraceConfig,
    /// Views excluded from ray sampling.
    pub holdout: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            batch_size: 50_000,
            lr: 1e-4,
            lr_decay_factor: 2.0,
            lr_decay_every: 40_000,
            total_batches: 150_000,
            seed: 0,
            checkpoint_every: 1000,
            alpha_double_every: 0,
            pretrain: PretrainConfig::default(),
            objective: ObjectiveConfig::default(),
            trace: TraceConfig::default(),
            holdout: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Counts scaled to a few minutes on one CPU core.
    pub fn desk() -> Self {
        let total = 5000;
        Self {
            field: FieldConfig::desk(),
            batch_size: 2048,
            lr: 5e-4,
            lr_decay_every: 40_000 * total / 150_000,
            total_batches: total,
            checkpoint_every: 1000,
            // a short run needs a stronger eikonal pull to stay distance-like
            objective: ObjectiveConfig {
                weights: LossWeights {
                    w_e: 0.5,
                    ..LossWeights::default()
                },
                ..ObjectiveConfig::default()
            },
            trace: TraceConfig {
                scan_samples: 32,
                ..TraceConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 500,
                batch: 2048,
                lr: 5e-4,
                ..PretrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        let w = &self.objective.weights;
        if [w.w_e, w.w_m, w.w_s].iter().any(|v| *v < 0.0) || w.mask_alpha <= 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        self.trace
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.field.activation == ActivationKind::Sine && self.field.omega0 <= 0.0 {
            return Err(TrainError::Config("omega0 must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, batch: u64) -> f64 {
        step_decay(self.lr, batch, self.lr_decay_every, self.lr_decay_factor)
    }

    pub fn alpha_at(&self, batch: u64) -> f64 {
        let a = self.objective.weights.mask_alpha;
        if self.alpha_double_every == 0 {
            a
        } else {
            a * 2f64.powi((batch / self.alpha_double_every) as i32)
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scene has no training pixels")]
    EmptyScene,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("batch {batch}: {source}")]
    Objective {
        batch: u64,
        source: ObjectiveError,
    },
    #[error("batch {batch}: {source}")]
    Optimizer { batch: u64, source: AdamError },
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("optimizer state: {0}")]
    State(String),
}

/// Uniform sampling (with replacement) over every pixel of the given views.
pub struct RaySampler<'a> {
    scene: &'a Scene,
    views: Vec<usize>,
    offsets: Vec<u64>,
    total: u64,
}

impl<'a> RaySampler<'a> {
    pub fn new(scene: &'a Scene, holdout: &[usize]) -> Result<Self, TrainError> {
        let views: Vec<usize> = (0..scene.views.len())
            .filter(|i| !holdout.contains(i))
            .collect();
        let mut offsets = Vec::with_capacity(views.len());
        let mut total = 0u64;
        for &v in &views {
            offsets.push(total);
            let c = &scene.views[v].camera;
            total += c.width() as u64 * c.height() as u64;
        }
        if total == 0 {
            return Err(TrainError::EmptyScene);
        }
        Ok(Self {
            scene,
            views,
            offsets,
            total,
        })
    }

    /// `(view, x, y)` of a flat pixel index.
    pub fn locate(&self, idx: u64) -> (usize, u32, u32) {
        let k = self.offsets.partition_point(|&o| o <= idx) - 1;
        let v = self.views[k];
        let local = idx - self.offsets[k];
        let w = self.scene.views[v].camera.width() as u64;
        (v, (local % w) as u32, (local / w) as u32)
    }

    pub fn total_pixels(&self) -> u64 {
        self.total
    }

    pub fn sample<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> Vec<RaySample> {
        (0..n)
            .map(|_| {
                let (v, x, y) = self.locate(rng.gen_range(0..self.total));
                let view = &self.scene.views[v];
                let i = (y * view.camera.width() + x) as usize;
                RaySample {
                    ray: view.camera.pixel_ray(x, y),
                    rgb: view.image.data[i].map(|c| c as f64),
                    mask: view.mask[i],
                }
            })
            .collect()
    }
}

pub fn sample_ray_batch<G: Rng + ?Sized>(
    scene: &Scene,
    n: usize,
    rng: &mut G,
) -> Result<Vec<RaySample>, TrainError> {
    Ok(RaySampler::new(scene, &[])?.sample(n, rng))
}

/// Generator for batch `b`: the run seed with the stream set to the batch, so
/// any batch can be regenerated without replaying earlier ones.
pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch + 1);
    rng
}

/// Optimizer moments for both networks plus the next batch index.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub next_batch: u64,
    pub sdf: AdamState<f32>,
    pub radiance: AdamState<f32>,
}

const STATE_MAGIC: &[u8; 4] = b"NLRO";

impl OptimizerState {
    pub fn new(model: &NeuralModel<f32>) -> Self {
        Self {
            next_batch: 0,
            sdf: AdamState::new(model.sdf.net.param_count()),
            radiance: AdamState::new(model.radiance.net.param_count()),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&self.next_batch.to_le_bytes())?;
        for s in [&self.sdf, &self.radiance] {
            w.write_all(&s.step.to_le_bytes())?;
            w.write_all(&(s.m.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(s.m.len() * 8);
            for v in s.m.iter().chain(&s.v) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(TrainError::State("bad magic".into()));
        }
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let next_batch = u64::from_le_bytes(u);
        let mut read_state = |r: &mut R| -> Result<AdamState<f32>, TrainError> {
            r.read_exact(&mut u)?;
            let step = u64::from_le_bytes(u);
            r.read_exact(&mut u)?;
            let len = u64::from_le_bytes(u) as usize;
            if len > 1 << 28 {
                return Err(TrainError::State(format!("{len} moments")));
            }
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(AdamState {
                m: vals[..len].to_vec(),
                v: vals[len..].to_vec(),
                step,
            })
        };
        let sdf = read_state(r)?;
        let radiance = read_state(r)?;
        Ok(Self {
            next_batch,
            sdf,
            radiance,
        })
    }
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(tmp, path)
}

pub fn save_checkpoint(path: &Path, model: &NeuralModel<f32>) -> io::Result<()> {
    write_atomic(path, |w| write_checkpoint(w, model))
}

pub fn load_checkpoint(path: &Path) -> Result<NeuralModel<f32>, TrainError> {
    let mut f = io::BufReader::new(File::open(path)?);
    Ok(read_checkpoint(&mut f)?)
}

pub const LOSS_HEADER: &str = "batch,L_R,L_E,L_M,L_S,total,lr,seconds";

/// Where a run writes its files.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn checkpoint(&self, batch: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{batch:06}.nlrc"))
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.nlrc")
    }

    pub fn optimizer(&self) -> PathBuf {
        self.dir.join("optimizer.bin")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.nlrc")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
}

pub struct TrainOutcome {
    pub model: NeuralModel<f32>,
    pub last_terms: Option<LossTerms>,
    pub batches_run: u64,
    pub seconds: f64,
}

/// Sphere-pretrained initial model for a configuration.
pub fn initial_model(cfg: &TrainConfig) -> Result<NeuralModel<f32>, TrainError> {
    let mut rng = batch_rng(cfg.seed, u64::MAX - 1);
    let mut model = NeuralModel::<f32>::init(&cfg.field, &mut rng);
    pretrain_sphere(&mut model.sdf, &cfg.pretrain, &mut rng)?;
    Ok(model)
}

/// Runs (or resumes, when `out` holds a checkpoint and optimizer state)
/// training until `cfg.total_batches`. Files in `out`: `loss.csv`,
/// `ckpt_######.nlrc`, `latest.nlrc`, `optimizer.bin`, `final.nlrc`.
pub fn train(scene: &Scene, cfg: &TrainConfig, out: &Path, resume: bool) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let paths = RunPaths::new(out);
    let sampler = RaySampler::new(scene, &cfg.holdout)?;

    let (mut model, mut state) = if resume && paths.latest().exists() && paths.optimizer().exists() {
        let model = load_checkpoint(&paths.latest())?;
        let state = OptimizerState::read(&mut io::BufReader::new(File::open(paths.optimizer())?))?;
        (model, state)
    } else {
        let model = initial_model(cfg)?;
        let state = OptimizerState::new(&model);
        (model, state)
    };

    let log_exists = paths.loss_log().exists() && state.next_batch > 0;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(log_exists)
        .write(true)
        .truncate(!log_exists)
        .open(paths.loss_log())?;
    if !log_exists {
        writeln!(log, "{LOSS_HEADER}")?;
    }

    let start = Instant::now();
    let first = state.next_batch;
    let mut last_terms = None;
    let mut obj = cfg.objective;
    for b in first..cfg.total_batches {
        let mut rng = batch_rng(cfg.seed, b);
        let rays = sampler.sample(cfg.batch_size, &mut rng);
        let prepared = prepare_batch(&model.sdf, &rays, &cfg.trace, &mut rng);
        obj.weights.mask_alpha = cfg.alpha_at(b);
        let bg = evaluate_batch(&model, &rays, &prepared, &obj)
            .map_err(|source| TrainError::Objective { batch: b, source })?;
        let lr = cfg.lr_at(b);
        let n_sdf = model.sdf.net.param_count();
        state
            .sdf
            .step(model.sdf.net.params_mut(), &bg.grad[..n_sdf], lr)
            .and_then(|_| {
                state
                    .radiance
                    .step(model.radiance.net.params_mut(), &bg.grad[n_sdf..], lr)
            })
            .map_err(|source| TrainError::Optimizer { batch: b, source })?;
        state.next_batch = b + 1;
        let t = bg.terms;
        writeln!(
            log,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.6e},{:.3}",
            b,
            t.l_r,
            t.l_e,
            t.l_m,
            t.l_s,
            t.total,
            lr,
            start.elapsed().as_secs_f64()
        )?;
        last_terms = Some(t);
        if cfg.checkpoint_every > 0 && (b + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(&paths.checkpoint(b + 1), &model)?;
            save_checkpoint(&paths.latest(), &model)?;
            write_atomic(&paths.optimizer(), |w| state.write(w))?;
        }
    }
    save_checkpoint(&paths.final_checkpoint(), &model)?;
    save_checkpoint(&paths.latest(), &model)?;
    write_atomic(&paths.optimizer(), |w| state.write(w))?;
    Ok(TrainOutcome {
        model,
        last_terms,
        batches_run: cfg.total_batches.saturating_sub(first),
        seconds: start.elapsed().as_secs_f64(),
    })
}

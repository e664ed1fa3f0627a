//! The training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use mupad_tensor::optim::{AdamW, AdamWConfig, Ema};
use mupad_tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::prepare::TrainingRecord;
use crate::error::{MupadError, Result};
use crate::model::{ConditionBatch, Denoiser, ForwardOptions};
use crate::objectives::{condition_dropout, total_loss, AlignVariant, Aligner};

const ALIGN_SEED_OFFSET: u64 = 0xA11;
const STEP_STREAM_KEY: u64 = 0x5EED_7EA1;

pub const LOG_HEADER: &str = "step\ttotal\tpatch\tcls\talign";

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub patch: f64,
    pub cls: f64,
    pub align: Option<f64>,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        let align = self.align.map_or("NA".to_string(), |a| a.to_string());
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.total, self.patch, self.cls, align)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let c: Vec<&str> = line.split('\t').collect();
        let bad = || MupadError::Format(format!("loss log line `{line}`"));
        if c.len() != 5 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(StepLog {
            step: c[0].parse().map_err(|_| bad())?,
            total: f(c[1])?,
            patch: f(c[2])?,
            cls: f(c[3])?,
            align: if c[4] == "NA" { None } else { Some(f(c[4])?) },
        })
    }
}

/// Append-only tab-separated loss log, flushed after every line.
pub struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| MupadError::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| MupadError::io(path, e))?;
        let empty = file.metadata().map_err(|e| MupadError::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{LOG_HEADER}").map_err(|e| MupadError::io(path, e))?;
        }
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, log: &StepLog) -> Result<()> {
        writeln!(self.file, "{}", log.to_line()).map_err(|e| MupadError::io(&self.path, e))?;
        self.file.flush().map_err(|e| MupadError::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepLog>> {
        let text = std::fs::read_to_string(path).map_err(|e| MupadError::io(path, e))?;
        text.lines().skip(1).filter(|l| !l.is_empty()).map(StepLog::parse).collect()
    }
}

/// Where a run writes its loss log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub const LAST_GOOD: &str = "last_good.ckpt";
pub const LATEST: &str = "latest.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Model, alignment head, optimizers and EMA for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Denoiser,
    pub aligner: Aligner,
    pub opt_model: AdamW,
    pub opt_align: AdamW,
    pub ema: Ema,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(config.model.clone(), config.seed)?;
        let aligner = Aligner::new(
            config.align,
            config.model.dim,
            config.teacher_dim(),
            config.model.grid(),
            config.align_layer(),
            config.seed.wrapping_add(ALIGN_SEED_OFFSET),
        );
        let adam = AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Trainer {
            opt_model: AdamW::new(adam, model.params.tensors()),
            opt_align: AdamW::new(adam, aligner.params.tensors()),
            ema: Ema::new(model.params.tensors(), config.ema_decay)?,
            model,
            aligner,
            config,
            step: 0,
        })
    }

    /// Denoiser carrying the EMA weights; used for sampling.
    pub fn ema_model(&self) -> Result<Denoiser> {
        self.model.with_params(&self.ema.shadow)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed ^ STEP_STREAM_KEY);
        r.set_stream(self.step);
        r
    }

    /// One optimization step. State is left untouched when the loss is not finite.
    pub fn train_step(&mut self, records: &[TrainingRecord]) -> Result<StepLog> {
        if records.is_empty() {
            return Err(MupadError::Invalid("no training records".into()));
        }
        let cfg = &self.config;
        let mut rng = self.step_rng();
        let b = cfg.batch;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..records.len())).collect();
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let x0 = Tensor::stack(&idx.iter().map(|&i| records[i].x0.clone()).collect::<Vec<_>>())?;
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let per = x0.len() / b;
        let mut xt = x0.clone();
        let mut v_star = x0.clone();
        for i in 0..b {
            for k in i * per..(i + 1) * per {
                let (x, e) = (x0.data()[k], eps.data()[k]);
                xt.data_mut()[k] = (1.0 - t[i]) * x + t[i] * e;
                v_star.data_mut()[k] = e - x;
            }
        }
        let sets = idx
            .iter()
            .map(|&i| condition_dropout(&records[i].cond, cfg.dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cond = ConditionBatch::from_sets(&sets)?;
        let cls_dim = records[0].cls_target.len();
        let cls_star = Tensor::new(&[b, cls_dim], idx.iter().flat_map(|&i| records[i].cls_target.clone()).collect())?;
        let teacher = Tensor::stack(&idx.iter().map(|&i| records[i].teacher.clone()).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let pm = self.model.params.bind(&mut tape, true);
        let pa = self.aligner.params.bind(&mut tape, true);
        let zv = tape.constant(xt);
        let opts = ForwardOptions {
            keep_features: cfg.align != AlignVariant::Naive,
            ..ForwardOptions::default()
        };
        let step = self.step;
        let non_finite = |e: MupadError| match e {
            MupadError::Tensor(TensorError::NonFinite { .. }) => MupadError::NonFiniteLoss { step },
            e => e,
        };
        let out = self.model.forward(&mut tape, &pm, zv, &t, &cond, &opts).map_err(non_finite)?;
        let terms = total_loss(&mut tape, &out, &v_star, &cls_star, &cfg.loss, &self.aligner, &pa, &teacher)
            .map_err(non_finite)?;
        let log = StepLog {
            step: self.step,
            total: tape.value(terms.total).item(),
            patch: tape.value(terms.patch).item(),
            cls: tape.value(terms.cls).item(),
            align: terms.align.map(|a| tape.value(a).item()),
        };
        if !log.total.is_finite() {
            return Err(MupadError::NonFiniteLoss { step: self.step });
        }
        let grads = tape.backward(terms.total)?;
        let gm = self.model.params.collect_grads(&pm, &grads);
        let ga = self.aligner.params.collect_grads(&pa, &grads);
        if !gm.iter().chain(&ga).all(Tensor::all_finite) {
            return Err(MupadError::NonFiniteLoss { step });
        }
        self.opt_model.step(self.model.params.tensors_mut(), &gm)?;
        self.opt_align.step(self.aligner.params.tensors_mut(), &ga)?;
        let decay = self.ema.warmup_decay(self.step);
        self.ema.update_with(self.model.params.tensors(), decay)?;
        self.step += 1;
        Ok(log)
    }

    /// Runs until `config.steps`, logging every step and checkpointing every `checkpoint_every`.
    /// A non-finite loss aborts after saving the last good state.
    pub fn run(&mut self, records: &[TrainingRecord], out: &RunOutput) -> Result<Vec<StepLog>> {
        let mut log = out.log.as_deref().map(LossLog::open).transpose()?;
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let l = match self.train_step(records) {
                Ok(l) => l,
                Err(e @ MupadError::NonFiniteLoss { .. }) => {
                    if let Some(dir) = &out.checkpoint_dir {
                        self.checkpoint().save(&dir.join(LAST_GOOD))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log.as_mut() {
                f.append(&l)?;
            }
            logs.push(l);
            let every = self.config.checkpoint_every;
            if let Some(dir) = &out.checkpoint_dir {
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(&dir.join(checkpoint_name(self.step)))?;
                }
            }
        }
        if let Some(dir) = &out.checkpoint_dir {
            self.checkpoint().save(&dir.join(LATEST))?;
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut put = |prefix: &str, names: &[String], ts: &[Tensor]| {
            for (n, t) in names.iter().zip(ts) {
                tensors.push((format!("{prefix}/{n}"), t.clone()));
            }
        };
        let mn = self.model.params.names();
        let an = self.aligner.params.names();
        put("model", mn, self.model.params.tensors());
        put("align", an, self.aligner.params.tensors());
        put("ema", mn, &self.ema.shadow);
        put("adam.model.m", mn, &self.opt_model.m);
        put("adam.model.v", mn, &self.opt_model.v);
        put("adam.align.m", an, &self.opt_align.m);
        put("adam.align.v", an, &self.opt_align.v);
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            counters: vec![self.opt_model.step, self.opt_align.step],
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut tr = Trainer::new(ck.config.clone())?;
        if ck.counters.len() != 2 {
            return Err(MupadError::Corrupt(format!("{} optimizer counters, expected 2", ck.counters.len())));
        }
        let known = ["model", "align", "ema", "adam.model.m", "adam.model.v", "adam.align.m", "adam.align.v"];
        for (n, _) in &ck.tensors {
            if !known.iter().any(|k| n.strip_prefix(k).is_some_and(|r| r.starts_with('/'))) {
                return Err(MupadError::Corrupt(format!("unexpected tensor `{n}`")));
            }
        }
        let corrupt = |e: MupadError| MupadError::Corrupt(e.to_string());
        let load = |store: &mut mupad_tensor::ParamStore, prefix: &str| -> Result<Vec<Tensor>> {
            store.load(ck.section(prefix)).map_err(|e| corrupt(e.into()))?;
            Ok(store.tensors().to_vec())
        };
        load(&mut tr.model.params, "model")?;
        load(&mut tr.aligner.params, "align")?;
        let mut scratch = tr.model.params.clone();
        tr.ema.shadow = load(&mut scratch, "ema")?;
        tr.opt_model.m = load(&mut scratch, "adam.model.m")?;
        tr.opt_model.v = load(&mut scratch, "adam.model.v")?;
        let mut scratch = tr.aligner.params.clone();
        tr.opt_align.m = load(&mut scratch, "adam.align.m")?;
        tr.opt_align.v = load(&mut scratch, "adam.align.v")?;
        tr.opt_model.step = ck.counters[0];
        tr.opt_align.step = ck.counters[1];
        tr.step = ck.step;
        Ok(tr)
    }
}

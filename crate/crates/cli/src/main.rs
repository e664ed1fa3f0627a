use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mupad::conditioning::{group_count, PATHWAY_COUNT};
use mupad::data::{gen_dataset, Dataset, MANIFEST, MARKER_CHANNELS};
use mupad::harness::{
    run_ablation, Arm, Checkpoint, Encoders, EvalSet, RunConfig, RunOutput, Task, Trainer, SEED_ENV,
};
use mupad::io::{read_ppm, write_ppm};
use mupad::metrics::{bootstrap, fid, kid, DEFAULT_BOOTSTRAP};
use mupad::model::{ConditionSet, Denoiser};
use mupad::pipelines::{generate, stain, translate, StainRequest, TranslationRequest};
use mupad::tensor::Tensor;
use mupad::{MupadError, Result};

#[derive(Parser)]
#[command(name = "mupad", version, about = "Multimodal flow-matching diffusion on synthetic histology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        /// Overridden by MUPAD_SEED.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser; writes config.toml, loss.tsv and checkpoints/ under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from any subset of conditions (none gives unconditional samples).
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Reference image (PPM) for the image modality.
        #[arg(long)]
        cond_image: Option<PathBuf>,
        #[arg(long)]
        cond_text: Option<String>,
        /// Whitespace-separated pathway scores.
        #[arg(long)]
        cond_rna: Option<PathBuf>,
    },
    /// Translate an image between prompts by inversion and attention injection.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        src_prompt: String,
        #[arg(long)]
        tgt_prompt: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Comma-separated layer indices, or `none`; defaults to the upper half.
        #[arg(long)]
        inject: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Virtual staining of an H&E patch into marker channel groups.
    Stain {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        he: PathBuf,
        /// One group (output is a PPM file); without it every group is written into --out as a directory.
        #[arg(long)]
        group: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-feature FID and KID between two image sets, with bootstrap intervals.
    Eval {
        /// Dataset directory or directory of PPM files.
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score every arm of {dca, shared} x {mupad, repa, naive} on shared seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Held-out references generated for scoring.
        #[arg(long, default_value_t = 128)]
        eval_n: usize,
        /// Also write the table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    task: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.task.as_deref()) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some("stain")) => RunConfig::stain(),
            (None, Some("generate") | None) => RunConfig::default(),
            (None, Some(t)) => return Err(MupadError::Config(format!("unknown task `{t}`"))),
        };
        if self.config.is_none() {
            c.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Solver steps; defaults to the checkpoint's sampler settings.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deterministic Euler ODE instead of the SDE sampler.
    #[arg(long)]
    ode: bool,
}

struct Loaded {
    model: Denoiser,
    config: RunConfig,
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let ck = Checkpoint::load(&self.checkpoint)?;
        let tr = Trainer::from_checkpoint(&ck)?;
        Ok(Loaded {
            model: tr.ema_model()?,
            config: tr.config,
        })
    }

    fn sampler(&self, config: &RunConfig) -> mupad::flow::SamplerConfig {
        let mut s = config.sampler.sampler(self.seed);
        if let Some(n) = self.steps {
            s.steps = n;
        }
        if self.ode {
            s.mode = mupad::flow::SamplerMode::Ode;
            s.noise_scale = 0.0;
        }
        s
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, n, mut seed } => {
            if let Ok(v) = std::env::var(SEED_ENV) {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| MupadError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            }
            let ds = gen_dataset(n, seed, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, run, resume } => train(&data, &out, &run, resume.as_deref()),
        Command::Sample { model, out, n, cond_image, cond_text, cond_rna } => {
            let m = model.load()?;
            let enc = Encoders::default();
            let mut cond = ConditionSet::empty();
            if let Some(p) = cond_image {
                let e = enc.condition.encode(&read_ppm(&p)?)?;
                cond = cond.with_image(e.tokens).with_z_cls(e.cls);
            }
            if let Some(t) = cond_text {
                cond = cond.with_text(enc.vocab.tokenize(&t));
            }
            if let Some(p) = cond_rna {
                cond = cond.with_rna(read_vector(&p, PATHWAY_COUNT)?);
            }
            let sets = vec![cond; n];
            let images = generate(&m.model, &sets, &model.sampler(&m.config), &m.config.sampler.guidance())?;
            for (i, img) in images.iter().enumerate() {
                write_ppm(&out.join(format!("sample_{i:04}.ppm")), img)?;
            }
            println!("wrote {} samples to {}", images.len(), out.display());
            Ok(())
        }
        Command::Translate { checkpoint, src, src_prompt, tgt_prompt, steps, inject, out } => {
            let tr = Trainer::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let model = tr.ema_model()?;
            let mut req = TranslationRequest::new(read_ppm(&src)?, &src_prompt, &tgt_prompt, steps, model.config.depth);
            if let Some(layers) = inject {
                req.inject_layers = parse_layers(&layers)?;
            }
            let t = translate(&model, &Encoders::default().vocab, &req)?;
            write_ppm(&out, &t.image)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Stain { model, he, group, out } => {
            let m = model.load()?;
            let structure = read_ppm(&he)?;
            let semantic = Encoders::default().condition.encode(&structure)?.tokens;
            let groups: Vec<usize> = match group {
                Some(g) => vec![g],
                None => (0..group_count(MARKER_CHANNELS)).collect(),
            };
            let reqs: Vec<StainRequest> = groups
                .iter()
                .map(|&g| StainRequest { structure: structure.clone(), group: g, semantic: semantic.clone() })
                .collect();
            let imgs = stain(&m.model, &reqs, &model.sampler(&m.config), &m.config.sampler.guidance())?;
            if group.is_some() {
                write_ppm(&out, &imgs[0])?;
            } else {
                for (g, img) in groups.iter().zip(&imgs) {
                    write_ppm(&out.join(format!("group_{g}.ppm")), img)?;
                }
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { real, fake, bootstrap: iters, seed } => eval(&real, &fake, iters, seed),
        Command::Ablate { data, run, seeds, eval_n, table } => {
            let base = run.load()?;
            if base.task != Task::Generate {
                return Err(MupadError::Config("ablation runs the generate task".into()));
            }
            let enc = Encoders::default();
            let ds = Dataset::open(&data)?;
            let records = enc.records(Task::Generate, &ds.load_all()?)?;
            // references come from a seed the training set never used
            let m = mupad::data::pathway_matrix();
            let refs: Vec<_> = (0..eval_n as u64)
                .map(|i| mupad::data::SyntheticSample::generate(ds.seed.wrapping_add(1), i, &m))
                .collect();
            let eval = EvalSet::image_conditioned(&enc, &refs)?;
            let seeds: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let result = run_ablation(&base, &Arm::matrix(), &seeds, &records, &enc, &eval, |r| {
                eprintln!(
                    "{}\tseed {}\tfid {:.4}\tsimilarity {:.4}\tloss {:.4}",
                    r.arm.name(),
                    r.seed,
                    r.score.fid,
                    r.score.similarity,
                    r.final_loss
                );
            })?;
            let text = result.to_tsv();
            print!("{text}");
            if let Some(p) = table {
                mupad::io::binary::write_file(&p, text.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn train(data: &Path, out: &Path, run: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let mut tr = match resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            if let Some(s) = run.steps {
                ck.config.steps = s;
            }
            Trainer::from_checkpoint(&ck)?
        }
        None => Trainer::new(run.load()?)?,
    };
    let ds = Dataset::open(data)?;
    let records = Encoders::default().records(tr.config.task, &ds.load_all()?)?;
    tr.config.save(&out.join("config.toml"))?;
    let output = RunOutput {
        log: Some(out.join("loss.tsv")),
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let logs = tr.run(&records, &output)?;
    if let Some(last) = logs.last() {
        println!("step {}\tloss {:.6}", last.step + 1, last.total);
    }
    println!("checkpoints in {}", out.join("checkpoints").display());
    Ok(())
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| MupadError::Invalid(format!("bad layer index `{p}`"))))
        .collect()
}

fn read_vector(path: &Path, len: usize) -> Result<Vec<f64>> {
    let text = String::from_utf8(mupad::io::binary::read_file(path)?)
        .map_err(|_| MupadError::Format(format!("{}: not utf-8", path.display())))?;
    let v = text
        .split_whitespace()
        .map(|w| w.parse::<f64>().map_err(|_| MupadError::Format(format!("{}: bad number `{w}`", path.display()))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != len {
        return Err(MupadError::Format(format!("{}: {} values, expected {len}", path.display(), v.len())));
    }
    Ok(v)
}

/// Images of a dataset directory, or every `.ppm` in a directory in name order.
fn load_images(path: &Path) -> Result<Vec<Tensor>> {
    if path.join(MANIFEST).exists() {
        return Ok(Dataset::open(path)?.load_all()?.into_iter().map(|s| s.image).collect());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| MupadError::Invalid(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MupadError::Invalid(format!("{}: no images", path.display())));
    }
    files.iter().map(|p| read_ppm(p)).collect()
}

fn eval(real: &Path, fake: &Path, iters: usize, seed: u64) -> Result<()> {
    let teacher = Encoders::default().teacher;
    let features = |p: &Path| -> Result<Tensor> { teacher.pooled(&Tensor::stack(&load_images(p)?)?) };
    let (r, f) = (features(real)?, features(fake)?);
    let d = r.shape()[1];
    let n = f.shape()[0];
    let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().flat_map(|&i| f.data()[i * d..(i + 1) * d].to_vec()).collect() };
    let fid_report = bootstrap("fid", n, iters, seed, |idx| fid(r.data(), &pick(idx), d))?;
    let kid_report = bootstrap("kid", n, iters, seed, |idx| kid(r.data(), &pick(idx), d))?;
    println!("metric\tvalue\tci_low\tci_high");
    println!("{}", fid_report.to_line());
    println!("{}", kid_report.to_line());
    Ok(())
}

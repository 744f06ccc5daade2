//! Command implementations behind the `jco` binary.
//!
//! Every command returns a JSON summary; the binary prints it on stdout.
//! Artifacts embed the `config_hash` of the run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionKernel, FlopReport, SCORE_MACS};
use crate::data::{
    bootstrap_round, filter_pool, gen_pool, read_pool, round_dir, style_expand, write_pool, GenConfig, OracleReplay,
    PoolRecord, Thresholds, TryOnGenerator,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{psnr, ssim, toy_frechet, MetricReport};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, FrozenAudit, JcoModel, LoraConfig, ModelConfig, ModelSampler,
    TrainConfig, TrainItem, TrainPolicy, Trainer,
};
use crate::rope::PosScheme;
use crate::tensor::Tape;

/// Data-side knobs of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub thresholds: Thresholds,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gen: GenConfig::default(),
            thresholds: Thresholds { g: 0.9, p: 0.9, r: 0.5 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialisation.
    pub init: u64,
    /// Sampler noise in `eval` and `ablate`.
    pub sample: u64,
}

/// One JSON document describing a run. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_slice(&bytes)?
            }
        };
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "jco", about = "Desk-scale jointly-conditional try-on diffusion transformer")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, score and filter a synthetic triplet pool.
    GenData(GenDataArgs),
    /// Train a checkpoint on a pool.
    Train(TrainArgs),
    /// Draw one try-on result from a checkpoint.
    Sample(SampleArgs),
    /// Paired runs that differ on one axis.
    Ablate(AblateArgs),
    /// SSIM / PSNR / toy Fréchet of sampled results against the pool.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Extra recoloured triplets added before filtering.
    #[arg(long, default_value_t = 0)]
    pub style_expand: usize,
    /// Bootstrap rounds after the initial pool.
    #[arg(long, default_value_t = 0)]
    pub rounds: usize,
    /// Checkpoint used to regenerate references in bootstrap rounds.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Regenerate with the ground truth instead of a model.
    #[arg(long)]
    pub oracle_replay: bool,
    #[arg(long)]
    pub sample_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Full)]
    pub policy: PolicyArg,
    /// Train without person and garment tokens (backbone pretraining).
    #[arg(long)]
    pub unconditional: bool,
    /// Use only the first N records.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub person: PathBuf,
    #[arg(long)]
    pub garment: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Records evaluated per run.
    #[arg(long, default_value_t = 4)]
    pub eval_limit: usize,
    #[arg(long, default_value_t = 10)]
    pub sample_steps: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required unless `--oracle-replay` is given.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub oracle_replay: bool,
    /// Config for the oracle run's hash.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Evaluate only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PolicyArg {
    Full,
    ConditionalOnly,
    ConditionalLora,
}

impl From<PolicyArg> for TrainPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Full => TrainPolicy::Full,
            PolicyArg::ConditionalOnly => TrainPolicy::ConditionalOnly,
            PolicyArg::ConditionalLora => TrainPolicy::ConditionalLora,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AxisArg {
    Mask,
    PosScheme,
    Policy,
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// `dir/index.json` if present, otherwise the highest `round_k`.
pub fn load_pool(dir: &Path) -> Result<Vec<PoolRecord>> {
    if dir.join("index.json").is_file() {
        return read_pool(dir, 0);
    }
    let mut k = None;
    while round_dir(dir, k.map_or(0, |v: usize| v + 1)).join("index.json").is_file() {
        k = Some(k.map_or(0, |v| v + 1));
    }
    match k {
        Some(k) => read_pool(round_dir(dir, k), k),
        None => Err(Error::Refused(format!("no pool (index.json or round_0) under {}", dir.display()))),
    }
}

fn check_pool_matches(pool: &[PoolRecord], cfg: &ModelConfig) -> Result<()> {
    for r in pool {
        let s = &r.sample;
        let want_p = (cfg.image[0], cfg.image[1]);
        let want_g = (cfg.garment[0], cfg.garment[1]);
        if s.person.dims() != want_p || s.reference.dims() != want_p || s.garment.dims() != want_g {
            return Err(Error::Refused(format!(
                "record {} has person {:?} / garment {:?}, config expects {want_p:?} / {want_g:?}",
                r.id,
                s.person.dims(),
                s.garment.dims()
            )));
        }
        if s.person.channels() != cfg.channels {
            return Err(Error::Refused(format!("record {} channel count differs from config", r.id)));
        }
    }
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Value> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    if dir_is_nonempty(&a.out) && !a.force {
        return Err(Error::Refused(format!("{} exists and is not empty (use --force)", a.out.display())));
    }
    if a.rounds > 0 && a.ckpt.is_none() && !a.oracle_replay {
        return Err(Error::Refused("bootstrap rounds need --ckpt or --oracle-replay".into()));
    }
    if a.force && a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    }
    let hash = cfg.hash();
    let t = cfg.data.thresholds;
    let pool = gen_pool(a.seed, a.count, &cfg.data.gen)?;
    let pool = style_expand(&pool, a.style_expand, a.seed ^ 0x5717_1E00)?;
    let (mut pool, stats) = filter_pool(&pool, &t);
    write_pool(round_dir(&a.out, 0), &pool)?;
    log::info!("round 0: {} of {} records kept", stats.retained, stats.total);
    let mut rounds = vec![json!({"round": 0, "filter": stats})];

    let ckpt = a.ckpt.as_deref().map(load_checkpoint).transpose()?;
    for k in 1..=a.rounds {
        let (next, report) = match &ckpt {
            Some(c) if !a.oracle_replay => {
                let steps = a.sample_steps.unwrap_or(c.model.config.rf.sampler_steps);
                let g = ModelSampler {
                    model: &c.model,
                    steps,
                };
                bootstrap_round(&pool, &g, &t, k, a.seed)?
            }
            _ => bootstrap_round(&pool, &OracleReplay, &t, k, a.seed)?,
        };
        log::info!("round {k}: retention {:.3}", report.retention_rate);
        write_pool(round_dir(&a.out, k), &next)?;
        rounds.push(serde_json::to_value(&report)?);
        pool = next;
    }
    let summary = json!({
        "command": "gen-data",
        "config_hash": hash,
        "seed": a.seed,
        "count": a.count,
        "style_expand": a.style_expand,
        "final_pool": pool.len(),
        "rounds": rounds,
    });
    write_json(&a.out.join("pipeline.json"), &summary)?;
    Ok(summary)
}

/// Loss curve plus frozen-parameter audit of one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub frozen_checked: usize,
    pub frozen_changed: Vec<String>,
}

/// Mean of the last `window` values.
pub fn moving_average(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

pub const LOSS_WINDOW: usize = 50;

/// Runs `steps` updates on `pool` with minibatches drawn by the trainer.
pub fn train_loop(
    model: &mut JcoModel,
    pool: &[PoolRecord],
    train: &TrainConfig,
    steps: usize,
    unconditional: bool,
) -> Result<TrainOutcome> {
    if pool.is_empty() {
        return Err(Error::Refused("empty training pool".into()));
    }
    let audit = FrozenAudit::capture(model);
    let mut trainer = Trainer::new(*train).with_horizon(steps as u64);
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let idx = trainer.batch_indices(pool.len());
        let items: Vec<TrainItem<'_>> = idx
            .iter()
            .map(|&i| {
                let r = &pool[i].sample;
                TrainItem {
                    target: &r.reference,
                    person: (!unconditional).then_some(&r.person),
                    garment: (!unconditional).then_some(&r.garment),
                }
            })
            .collect();
        losses.push(trainer.train_step(model, &items)?);
        if s % 100 == 0 {
            log::info!("step {s}: loss {:.5}", losses[s]);
        }
    }
    Ok(TrainOutcome {
        losses,
        frozen_checked: audit.checked(),
        frozen_changed: audit.changed(model),
    })
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let policy: TrainPolicy = a.policy.into();
    if a.unconditional && policy != TrainPolicy::Full {
        return Err(Error::Refused(format!(
            "--unconditional trains the backbone; policy {} would have nothing to learn",
            policy.as_str()
        )));
    }
    let hash = cfg.hash();
    let mut pool = load_pool(&a.data)?;
    if let Some(n) = a.subset {
        pool.truncate(n);
    }
    check_pool_matches(&pool, &cfg.model)?;

    let mut model = match &a.init_from {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut m = ck.model.transfer_resolution(&cfg.model).map_err(|e| Error::Refused(e.to_string()))?;
            if ck.meta.unconditional && !a.unconditional {
                m.init_conditional_branches();
            }
            m
        }
        None => JcoModel::init(cfg.model.clone(), cfg.seeds.init)?,
    };
    model.set_trainable(policy)?;
    let outcome = train_loop(&mut model, &pool, &cfg.train, a.steps, a.unconditional)?;

    let meta = CheckpointMeta {
        step: a.steps as u64,
        seed: cfg.train.seed,
        policy: Some(policy),
        unconditional: a.unconditional,
        config_hash: Some(hash.clone()),
    };
    save_checkpoint(&a.out, &model, &meta)?;
    let csv = a.out.join("loss.csv");
    fs::write(&csv, loss_csv(&outcome.losses)).map_err(|e| Error::io(&csv, e))?;
    let first = outcome.losses.first().copied();
    let head = &outcome.losses[..outcome.losses.len().min(LOSS_WINDOW)];
    let summary = json!({
        "command": "train",
        "config_hash": hash,
        "policy": policy.as_str(),
        "unconditional": a.unconditional,
        "steps": a.steps,
        "records": pool.len(),
        "trainable_params": model.params.trainable_count(),
        "initial_loss": first,
        "initial_loss_ma": (!head.is_empty()).then(|| moving_average(head, LOSS_WINDOW)),
        "final_loss_ma": (!outcome.losses.is_empty()).then(|| moving_average(&outcome.losses, LOSS_WINDOW)),
        "frozen_audit": {
            "checked": outcome.frozen_checked,
            "changed": outcome.frozen_changed,
            "passed": outcome.frozen_changed.is_empty(),
        },
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    if !outcome.frozen_changed.is_empty() {
        return Err(Error::Contract {
            op: "train",
            detail: format!("frozen parameters changed: {:?}", outcome.frozen_changed),
        });
    }
    Ok(summary)
}

fn ckpt_hash(meta: &CheckpointMeta, model: &JcoModel) -> String {
    meta.config_hash.clone().unwrap_or_else(|| {
        RunConfig {
            model: model.config.clone(),
            ..RunConfig::default()
        }
        .hash()
    })
}

pub fn cmd_sample(a: &SampleArgs) -> Result<Value> {
    let ck = load_checkpoint(&a.ckpt).map_err(|e| Error::Refused(format!("cannot load checkpoint: {e}")))?;
    let person = ImageTensor::read_ppm(&a.person)?;
    let garment = ImageTensor::read_ppm(&a.garment)?;
    let (h, w) = person.dims();
    let out = ck
        .model
        .sample(Some(&person), Some(&garment), h, w, a.seed, a.steps)
        .map_err(|e| match e {
            Error::Contract { .. } | Error::Dimension { .. } => Error::Refused(format!("incompatible inputs: {e}")),
            other => other,
        })?;
    out.write_ppm(&a.out)?;
    let hash = ckpt_hash(&ck.meta, &ck.model);
    let sidecar = json!({ "steps": a.steps, "seed": a.seed, "config_hash": hash });
    let mut side_path = a.out.clone().into_os_string();
    side_path.push(".json");
    write_json(Path::new(&side_path), &sidecar)?;
    Ok(json!({"command": "sample", "out": a.out, "steps": a.steps, "seed": a.seed, "config_hash": hash}))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleScore {
    pub id: usize,
    pub ssim: f64,
    /// `null` when the sample reproduces the reference exactly.
    pub psnr: Option<f64>,
}

/// Schema of `eval --report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config_hash: String,
    pub generator: String,
    pub count: usize,
    pub sampler_steps: Option<usize>,
    pub metrics: Vec<MetricReport>,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).and_then(|m| m.value)
    }
}

/// Samples `R'` for every record and scores it against `R`.
pub fn evaluate<G: TryOnGenerator + ?Sized>(
    pool: &[PoolRecord],
    generator: &G,
    seed: u64,
    hash: &str,
) -> Result<(Vec<SampleScore>, Vec<MetricReport>)> {
    use rayon::prelude::*;
    let outs: Vec<ImageTensor> = pool
        .par_iter()
        .map(|r| generator.generate(&r.sample, seed ^ r.sample.seed).map(|x| x.clamped()))
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(pool.len());
    let (mut s_sum, mut p_sum) = (0.0, 0.0);
    for (r, o) in pool.iter().zip(&outs) {
        let s = ssim(o, &r.sample.reference)?;
        let p = psnr(o, &r.sample.reference)?;
        s_sum += s;
        p_sum += p;
        scores.push(SampleScore {
            id: r.id,
            ssim: s,
            psnr: p.is_finite().then_some(p),
        });
    }
    let n = pool.len() as f64;
    let refs: Vec<ImageTensor> = pool.iter().map(|r| r.sample.reference.clone()).collect();
    let fd = if pool.len() >= 2 { toy_frechet(&outs, &refs)? } else { f64::NAN };
    let metrics = vec![
        MetricReport::new("ssim", s_sum / n, hash),
        MetricReport::new("psnr", p_sum / n, hash),
        MetricReport::new("toy_frechet", fd, hash),
    ];
    Ok((scores, metrics))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let mut pool = load_pool(&a.data)?;
    if let Some(n) = a.limit {
        pool.truncate(n);
    }
    if pool.is_empty() {
        return Err(Error::Refused(format!("dataset at {} is empty", a.data.display())));
    }
    let report = if a.oracle_replay {
        let hash = RunConfig::load(a.config.as_deref())?.hash();
        let (per_sample, metrics) = evaluate(&pool, &OracleReplay, a.seed, &hash)?;
        EvalReport {
            config_hash: hash,
            generator: "oracle_replay".into(),
            count: pool.len(),
            sampler_steps: None,
            metrics,
            per_sample,
        }
    } else {
        let path = a.ckpt.as_ref().ok_or_else(|| Error::Refused("eval needs --ckpt or --oracle-replay".into()))?;
        let ck = load_checkpoint(path).map_err(|e| Error::Refused(format!("cannot load checkpoint: {e}")))?;
        check_pool_matches(&pool, &ck.model.config)?;
        let hash = ckpt_hash(&ck.meta, &ck.model);
        let steps = a.steps.unwrap_or(ck.model.config.rf.sampler_steps);
        let g = ModelSampler {
            model: &ck.model,
            steps,
        };
        let (per_sample, metrics) = evaluate(&pool, &g, a.seed, &hash)?;
        EvalReport {
            config_hash: hash,
            generator: "model".into(),
            count: pool.len(),
            sampler_steps: Some(steps),
            metrics,
            per_sample,
        }
    };
    write_json(&a.report, &report)?;
    Ok(serde_json::to_value(&report)?)
}

/// FLOPs of one conditional forward on `rec`.
fn forward_flops(model: &JcoModel, rec: &PoolRecord) -> Result<FlopReport> {
    let mut tape = Tape::new();
    let vars: Vec<_> = model.params.iter().map(|p| tape.constant(p.value.clone())).collect();
    let s = &rec.sample;
    let f = model.forward_on_tape(&mut tape, &vars, &s.reference, Some(&s.person), Some(&s.garment), 0.5)?;
    Ok(f.flops)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Value> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let hash = cfg.hash();
    let pool = load_pool(&a.data)?;
    check_pool_matches(&pool, &cfg.model)?;
    let eval_pool = &pool[..a.eval_limit.min(pool.len())];

    let mut variants: Vec<(String, ModelConfig, TrainPolicy)> = Vec::new();
    match a.axis {
        AxisArg::Mask => {
            let on = ModelConfig {
                mask_enabled: true,
                kernel: AttentionKernel::BlockSkip,
                ..cfg.model.clone()
            };
            let off = ModelConfig {
                mask_enabled: false,
                kernel: AttentionKernel::DenseMasked,
                ..cfg.model.clone()
            };
            variants.push(("mask_on".into(), on, TrainPolicy::Full));
            variants.push(("mask_off".into(), off, TrainPolicy::Full));
        }
        AxisArg::PosScheme => {
            for s in [PosScheme::Disjoint, PosScheme::Shared] {
                let m = ModelConfig {
                    pos_scheme: s,
                    ..cfg.model.clone()
                };
                variants.push((s.tag().into(), m, TrainPolicy::Full));
            }
        }
        AxisArg::Policy => {
            let lora = cfg.model.lora.unwrap_or(LoraConfig { rank: 4, alpha: 4.0 });
            let m = ModelConfig {
                lora: Some(lora),
                ..cfg.model.clone()
            };
            for p in [TrainPolicy::Full, TrainPolicy::ConditionalOnly, TrainPolicy::ConditionalLora] {
                variants.push((p.as_str().into(), m.clone(), p));
            }
        }
    }

    let mut rows = Vec::new();
    let mut flop_reports = Vec::new();
    for (tag, mcfg, policy) in &variants {
        let mut model = JcoModel::init(mcfg.clone(), cfg.seeds.init)?;
        model.set_trainable(*policy)?;
        let trainable = model.params.trainable_count();
        let outcome = train_loop(&mut model, &pool, &cfg.train, a.steps, false)?;
        let g = ModelSampler {
            model: &model,
            steps: a.sample_steps,
        };
        let (_, metrics) = evaluate(eval_pool, &g, cfg.seeds.sample, &hash)?;
        let value = |name: &str| metrics.iter().find(|m| m.metric == name).and_then(|m| m.value);
        let flops = forward_flops(&model, &pool[0])?;
        log::info!("ablate {tag}: done");
        rows.push(json!({
            "tag": tag,
            "policy": policy.as_str(),
            "trainable_params": trainable,
            "final_loss": (!outcome.losses.is_empty()).then(|| moving_average(&outcome.losses, LOSS_WINDOW)),
            "ssim": value("ssim"),
            "psnr": value("psnr"),
            "flops": flops,
        }));
        flop_reports.push(flops);
    }

    let seg_ref = cfg.model.image_grid()?.area();
    let seg_gar = cfg.model.garment_grid()?.area();
    let checks = match a.axis {
        AxisArg::Mask => {
            let saved = flop_reports[1].get(SCORE_MACS) - flop_reports[0].get(SCORE_MACS);
            let per = (cfg.model.heads * cfg.model.blocks) as u64;
            let expected = (2 * seg_ref * seg_gar * cfg.model.head_dim()) as u64;
            json!({
                "saved_score_macs": saved,
                "saved_score_macs_per_head_per_block": saved / per,
                "expected_per_head_per_block": expected,
                "matches": saved == expected * per,
            })
        }
        AxisArg::PosScheme => json!({ "tags": ["scheme_I", "scheme_II"] }),
        AxisArg::Policy => {
            let m = &variants[2].1;
            let r = m.lora.map(|l| l.rank).unwrap_or(0);
            let closed = m.blocks * 2 * 4 * r * (m.dim + m.dim);
            let got = rows[2]["trainable_params"].as_u64().unwrap_or(0) as usize;
            json!({ "lora_trainable_params": got, "closed_form": closed, "matches": got == closed })
        }
    };
    let axis = match a.axis {
        AxisArg::Mask => "mask",
        AxisArg::PosScheme => "pos_scheme",
        AxisArg::Policy => "policy",
    };
    let report = json!({
        "command": "ablate",
        "axis": axis,
        "config_hash": hash,
        "steps": a.steps,
        "rows": rows,
        "checks": checks,
    });
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&a.out.join("comparison.json"), &report)?;
    Ok(report)
}

/// Machine-readable error document for stderr.
pub fn error_json(kind: &str, message: &str) -> Value {
    json!({ "error": { "kind": kind, "message": message } })
}

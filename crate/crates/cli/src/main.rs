use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparsecap::baseline::{self, HardScheme};
use sparsecap::checkpoint::Checkpoint;
use sparsecap::config::RunConfig;
use sparsecap::data::{preprocess, Corpus, DataConfig, Dataset};
use sparsecap::decoder::CellKind;
use sparsecap::eval::{evaluate, EvalRow};
use sparsecap::gating::lambda_heuristic;
use sparsecap::sparse::{PruneReport, SparseModel};
use sparsecap::train::{self, EpochMetrics, GatedSettings, Method, TrainConfig, TrainState};

/// Captioning decoders with learnable-gate pruning.
#[derive(Parser, Debug)]
#[command(name = "sparsecap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene-captioning dataset (JSON lines).
    GenData(GenDataArgs),
    /// Stage-1 decoder training: dense, gated or gradual pruning.
    Train(TrainArgs),
    /// Stage-2 fine-tuning of a gated checkpoint (gates frozen, encoder trainable).
    Finetune(FinetuneArgs),
    /// One-shot magnitude pruning of a dense checkpoint, then retraining.
    PruneHard(PruneHardArgs),
    /// Export a checkpoint to a sparse model file (W * round(sigmoid(G))).
    Export(ExportArgs),
    /// Beam-search decode a split and write a metrics CSV.
    Eval(EvalArgs),
    /// Per-layer sparsity and compression report.
    Report(ReportArgs),
}

/// Options shared by the commands that read a run configuration.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra overrides, e.g. `--set rnn_size=32` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Seed for scene generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total scenes; a twelfth each go to validation and test.
    #[arg(long, default_value_t = 2400)]
    scenes: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// dense | gated | gradual [default: dense]
    #[arg(long)]
    method: Option<String>,
    /// lstm | gru [default: lstm]
    #[arg(long)]
    cell: Option<String>,
    /// Target sparsity for gated or gradual pruning [default: 0.9]
    #[arg(long)]
    starget: Option<String>,
    /// Sparsity-loss weight, or `auto` for max(5, 0.5/(1 - starget)) [default: auto]
    #[arg(long)]
    lambda_s: Option<String>,
    /// Initial gate logit [default: 5.0]
    #[arg(long)]
    gate_init: Option<String>,
    /// Run seed [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<String>,
    /// Continue from `<out>/last.gckp` if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Gated stage-1 checkpoint (or a stage-2 checkpoint to resume).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fine-tuning epochs [default: 10]
    #[arg(long)]
    epochs: Option<String>,
}

#[derive(Args, Debug)]
struct PruneHardArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dense checkpoint (or a retraining checkpoint to resume).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// blind | uniform | distribution [default: blind]
    #[arg(long)]
    scheme: Option<String>,
    /// Target sparsity [default: 0.9]
    #[arg(long)]
    starget: Option<String>,
    /// Retraining epochs [default: 10]
    #[arg(long)]
    retrain_epochs: Option<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sparse model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Sparse model file written by `export`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics CSV; the resolved config is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Beam width [default: 3]
    #[arg(long)]
    beam: Option<String>,
    /// Parallel decoding threads; output order is unaffected.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// test | val
    #[arg(long, default_value = "test")]
    split: String,
    /// Row label in the CSV [default: model file stem]
    #[arg(long)]
    model_id: Option<String>,
    /// Also write the generated captions, one per line.
    #[arg(long)]
    captions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Sparse model file or checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Layer CSV; a JSON summary is written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::PruneHard(a) => prune_hard_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// Defaults, then `base` (a config echoed into a checkpoint), then the
/// config file, then `--set`, then the explicit flags.
fn resolve_config(base: Option<&str>, args: &ConfigArgs, flags: &[(&str, &Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match base {
        Some(text) => RunConfig::parse(text).context("config stored in checkpoint")?,
        None => RunConfig::default(),
    };
    if let Some(path) = &args.config {
        let file = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay = RunConfig::parse(&file).with_context(|| format!("parsing {}", path.display()))?;
        for line in file.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let key = line.split_once('=').map(|(k, _)| k.trim()).unwrap_or(line);
            cfg.set(key, overlay.get(key)?)?;
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig, sparsecap::data::Vocabulary)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (state, echo, vocab) = TrainState::from_checkpoint(&ck)?;
    let cfg = RunConfig::parse(&echo).context("config stored in checkpoint")?;
    Ok((state, cfg, vocab))
}

fn check_sparsity(s: f64, what: &str) -> Result<()> {
    ensure!((0.0..1.0).contains(&s), "{what} must be in [0, 1), got {s}");
    Ok(())
}

/// Writes per-epoch metrics and `last.gckp` as training progresses.
struct RunOutput {
    dir: PathBuf,
    metrics: File,
    echo: String,
    vocab: sparsecap::data::Vocabulary,
}

impl RunOutput {
    fn create(dir: &Path, cfg: &RunConfig, vocab: &sparsecap::data::Vocabulary, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let echo = cfg.echo();
        fs::write(dir.join("config.txt"), &echo)?;
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(dir.join("metrics.jsonl"))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            metrics,
            echo,
            vocab: vocab.clone(),
        })
    }

    fn epoch(&mut self, state: &TrainState, m: &EpochMetrics) -> sparsecap::Result<()> {
        writeln!(self.metrics, "{}", m.json_line())?;
        self.metrics.flush()?;
        state.to_checkpoint(&self.echo, &self.vocab).save(&self.dir.join("last.gckp"))?;
        eprintln!(
            "epoch {:>3}  step {:>6}  loss {:.4}  weighted sparsity loss {:.4}  sparsity {:.4}  lr {:.2e}",
            m.epoch, m.step, m.loss_caption, m.loss_sparsity, m.sparsity_ml, m.lr
        );
        Ok(())
    }

    fn finish(&self, state: &TrainState) -> Result<()> {
        let path = self.dir.join("final.gckp");
        let ck = state.to_checkpoint(&self.echo, &self.vocab);
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        ensure!(back == ck, "checkpoint {} did not read back identically", path.display());
        let report = PruneReport::of_model(&state.model)?;
        println!("{}", report.summary());
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = DataConfig {
        noise: a.noise,
        ..DataConfig::with_total(a.seed, a.scenes)?
    };
    let data = Dataset::generate(&cfg);
    data.write_jsonl(&a.out)?;
    let back = Dataset::read_jsonl(&a.out)?;
    ensure!(back.scenes.len() == data.scenes.len(), "dataset did not read back");
    println!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        data.scenes.len(),
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        a.out.display()
    );
    Ok(())
}

/// Turns the method keys of `cfg` into a [`Method`], replacing
/// `lambda_s=auto` with the resolved value.
fn resolve_method(cfg: &mut RunConfig) -> Result<Method> {
    let s_target: f64 = cfg.parsed("s_target")?;
    Ok(match cfg.get("method")? {
        "dense" => Method::Dense,
        "gated" => {
            check_sparsity(s_target, "--starget")?;
            ensure!(s_target > 0.0, "--starget must be positive for gated training");
            let lambda_s = match cfg.parsed_or_auto::<f64>("lambda_s")? {
                Some(l) => l,
                None => lambda_heuristic(s_target)?,
            };
            ensure!(lambda_s >= 0.0, "--lambda-s must be non-negative");
            cfg.set("lambda_s", &lambda_s.to_string())?;
            Method::Gated(GatedSettings {
                s_target,
                lambda_s,
                gate_init: cfg.parsed("gate_init")?,
            })
        }
        "gradual" => {
            check_sparsity(s_target, "--starget")?;
            Method::Gradual {
                s_final: s_target,
                freq: cfg.parsed_or_auto("gradual_freq")?,
            }
        }
        other => bail!("unknown --method `{other}` (expected dense, gated or gradual)"),
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let flags = [
        ("method", &a.method),
        ("cell", &a.cell),
        ("s_target", &a.starget),
        ("lambda_s", &a.lambda_s),
        ("gate_init", &a.gate_init),
        ("seed", &a.seed),
        ("epochs_stage1", &a.epochs),
    ];
    let resume_path = a.out.join("last.gckp");
    let resumed = if a.resume && resume_path.exists() {
        let (state, stored, vocab) = load_checkpoint(&resume_path)?;
        ensure!(state.stage == 1, "{} is not a stage-1 checkpoint", resume_path.display());
        Some((state, stored, vocab))
    } else {
        None
    };
    let base = resumed.as_ref().map(|(_, stored, _)| stored.echo());
    let mut cfg = resolve_config(base.as_deref(), &a.cfg, &flags)?;
    let method = resolve_method(&mut cfg)?;
    if let Some((_, stored, _)) = &resumed {
        ensure!(
            &cfg == stored,
            "resuming with settings that differ from {}; start a new run instead",
            resume_path.display()
        );
    }
    if let Method::Gated(g) = &method {
        eprintln!("lambda_s = {}", g.lambda_s);
    }
    let tc = TrainConfig::from_run(&cfg)?;
    let data = Dataset::read_jsonl(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let (mut state, corpus) = match resumed {
        Some((state, _, vocab)) => (state, Corpus::encode(&data, vocab, cfg.parsed("max_len")?)?),
        None => {
            let corpus = preprocess(&data, cfg.parsed("min_freq")?, cfg.parsed("max_len")?)?;
            let dims = train::dims_from_run(&cfg, corpus.vocab.len(), corpus.feature_dim())?;
            let cell = CellKind::parse(cfg.get("cell")?)?;
            (TrainState::init(dims, cell, &method, &tc), corpus)
        }
    };
    let append = state.epoch > 0;
    let mut out = RunOutput::create(&a.out, &cfg, &corpus.vocab, append)?;
    eprintln!("{}", state.model.describe(&corpus.vocab));
    train::train_stage1(&mut state, &corpus, &tc, &method, &mut |s, m| out.epoch(s, m))?;
    out.finish(&state)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let (mut state, stored, vocab) = load_checkpoint(&a.ckpt)?;
    ensure!(state.model.is_gated(), "{} has no gate logits; fine-tuning needs a gated checkpoint", a.ckpt.display());
    let cfg = resolve_config(Some(&stored.echo()), &a.cfg, &[("epochs_stage2", &a.epochs)])?;
    let tc = TrainConfig::from_run(&cfg)?;
    let data = Dataset::read_jsonl(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let corpus = Corpus::encode(&data, vocab, cfg.parsed("max_len")?)?;
    let append = state.stage == 2 && state.epoch > 0;
    let mut out = RunOutput::create(&a.out, &cfg, &corpus.vocab, append)?;
    let before = state.sparsity();
    train::train_stage2(&mut state, &corpus, &tc, &mut |s, m| out.epoch(s, m))?;
    ensure!(state.sparsity() == before, "sparsity changed during fine-tuning");
    out.finish(&state)
}

fn prune_hard_cmd(a: PruneHardArgs) -> Result<()> {
    let (mut state, stored, vocab) = load_checkpoint(&a.ckpt)?;
    ensure!(
        !state.model.is_gated(),
        "{} is a gated checkpoint; hard pruning starts from a dense model",
        a.ckpt.display()
    );
    let cfg = resolve_config(
        Some(&stored.echo()),
        &a.cfg,
        &[
            ("scheme", &a.scheme),
            ("s_target", &a.starget),
            ("retrain_epochs", &a.retrain_epochs),
        ],
    )?;
    let tc = TrainConfig::from_run(&cfg)?;
    let s: f64 = cfg.parsed("s_target")?;
    check_sparsity(s, "--starget")?;
    let scheme = HardScheme::parse(cfg.get("scheme")?)?;
    let epochs: usize = cfg.parsed("retrain_epochs")?;
    let data = Dataset::read_jsonl(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let corpus = Corpus::encode(&data, vocab, cfg.parsed("max_len")?)?;
    if state.stage != 3 {
        let masks = baseline::hard_prune(&state.model, s, scheme)?;
        eprintln!("{} pruning to {:.4}: mask sparsity {:.4}", scheme.as_str(), s, baseline::mask_sparsity(&masks));
        baseline::apply_masks(&mut state.model, masks)?;
    }
    let append = state.stage == 3 && state.epoch > 0;
    let mut out = RunOutput::create(&a.out, &cfg, &corpus.vocab, append)?;
    train::retrain(&mut state, &corpus, &tc, epochs, &mut |s, m| out.epoch(s, m))?;
    out.finish(&state)
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let (state, _, vocab) = load_checkpoint(&a.ckpt)?;
    let sparse = SparseModel::from_model(&state.model, vocab.tokens().to_vec())?;
    sparse.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let back = SparseModel::load(&a.out)?;
    ensure!(
        back.to_dense()? == state.model.export_dense(),
        "sparse model file does not reproduce the masked weights"
    );
    println!("{}", PruneReport::of_sparse(&back)?.summary());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(None, &a.cfg, &[("beam", &a.beam)])?;
    let beam: usize = cfg.parsed("beam")?;
    ensure!(beam >= 1, "--beam must be at least 1");
    ensure!(a.workers >= 1, "--workers must be at least 1");
    let model = SparseModel::load(&a.model).with_context(|| format!("reading model {}", a.model.display()))?;
    let vocab = sparsecap::data::Vocabulary::from_tokens(model.vocab.clone())?;
    let data = Dataset::read_jsonl(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let corpus = Corpus::encode(&data, vocab, cfg.parsed("max_len")?)?;
    let scenes = match a.split.as_str() {
        "test" => &corpus.test,
        "val" => &corpus.val,
        other => bail!("unknown --split `{other}` (expected test or val)"),
    };
    let report = evaluate(
        &model,
        scenes,
        &corpus.vocab,
        &corpus.training_caption_set(),
        beam,
        corpus.max_len,
        a.workers,
    )?;
    let prune = PruneReport::of_sparse(&model)?;
    let model_id = match a.model_id {
        Some(id) => id,
        None => a
            .model
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string(),
    };
    let row = EvalRow {
        model_id,
        sparsity: prune.sparsity,
        cr: prune.compression_ratio,
        b: report.bleu.b,
        uniqueness_pct: report.uniqueness_pct,
        avg_len: report.avg_len,
    };
    fs::write(&a.out, format!("{}\n{}\n", EvalRow::HEADER, row.csv_line()))?;
    let sidecar = sidecar_path(&a.out, "config");
    fs::write(
        &sidecar,
        format!(
            "# model={} data={} split={} workers={}\n{}",
            a.model.display(),
            a.data.display(),
            a.split,
            a.workers,
            cfg.echo()
        ),
    )?;
    if let Some(path) = &a.captions {
        let text: String = report
            .captions
            .iter()
            .map(|c| format!("{}\n", corpus.vocab.decode(c)))
            .collect();
        fs::write(path, text)?;
    }
    println!("{}", EvalRow::HEADER);
    println!("{}", row.csv_line());
    Ok(())
}

fn sidecar_path(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let report = match SparseModel::load(&a.model) {
        Ok(m) => PruneReport::of_sparse(&m)?,
        Err(sparse_err) => match load_checkpoint(&a.model) {
            Ok((state, _, _)) => PruneReport::of_model(&state.model)?,
            Err(_) => {
                return Err(anyhow!(sparse_err))
                    .with_context(|| format!("{} is neither a sparse model nor a checkpoint", a.model.display()))
            }
        },
    };
    fs::write(&a.out, report.layer_csv())?;
    fs::write(sidecar_path(&a.out, "json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.layer_csv());
    println!("{}", report.summary());
    Ok(())
}

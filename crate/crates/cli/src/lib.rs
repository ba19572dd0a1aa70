//! Subcommands behind the `refgame` binary. Every command works inside one
//! run directory (`<run root>/<run name>`) and refreshes its manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use refgame::agents::{ListenerNet, PretrainConfig};
use refgame::config::RunConfig;
use refgame::distractors::{build_index, Difficulty, Scorer, SimilarityIndex};
use refgame::evalkit::{gold_standard_eval, FluencyModels, GoldConfig, MetricsReport};
use refgame::seed::{self, tag};
use refgame::tom::LISTENER_ROLE;
use refgame::trainer::{EpisodeRecord, EvalSplit, TrainContext, Trainer, CHECKPOINT_DIR, CSV_HEADER, STATE_FILE};
use refgame::world::{bytes_fingerprint, file_fingerprint, Split, Vocabulary, World, CORPUS_FILE};
use refgame::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const RUN_ROOT_ENV: &str = "REFGAME_RUN_ROOT";
pub const WORLD_DIR: &str = "world";
pub const WORLD_CONFIG_FILE: &str = "world.json";
pub const LISTENER_FILE: &str = "listener.rgtm";
pub const LISTENER_META_FILE: &str = "listener.json";
pub const PRETRAIN_CURVE_FILE: &str = "pretrain_curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.conf";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

#[derive(Debug, Parser)]
#[command(name = "refgame", version, about = "Referential-game speaker training with a learned internal listener")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and vocabulary.
    GenWorld(Common),
    /// Pretrain the external listener on ground-truth captions.
    PretrainListener(Common),
    /// Build top-K similarity indices for hard distractors.
    BuildIndex(Common),
    /// Train the speaker (and internal listener); resumes if interrupted.
    Train(Common),
    /// Evaluate the trained speaker, or the ground-truth captions with `eval.gold = true`.
    Evaluate(Common),
    /// Play games and dump full episode traces as JSON.
    Play {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    ShowConfig(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key = value` config file; `include = other.conf` lines are honored.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Extra override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory name under the run root.
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Directory holding runs.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(&self.run)
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Stale(_) => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let started = unix_now();
    let (name, common) = match &cli.command {
        Command::GenWorld(c) => ("gen-world", c),
        Command::PretrainListener(c) => ("pretrain-listener", c),
        Command::BuildIndex(c) => ("build-index", c),
        Command::Train(c) => ("train", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Play { common, .. } => ("play", common),
        Command::ShowConfig(c) => ("show-config", c),
    };
    let cfg = common.resolve()?;
    if let Command::ShowConfig(_) = cli.command {
        return emit(&cfg.to_text());
    }
    let dir = common.run_dir();
    fs::create_dir_all(&dir)?;
    let report = match &cli.command {
        Command::GenWorld(_) => {
            gen_world(&cfg, &dir)?;
            None
        }
        Command::PretrainListener(_) => {
            pretrain(&cfg, &dir)?;
            None
        }
        Command::BuildIndex(_) => {
            build_indices(&cfg, &dir)?;
            None
        }
        Command::Train(_) => train(&cfg, &dir)?,
        Command::Evaluate(_) => Some(evaluate(&cfg, &dir)?),
        Command::Play { episodes, out, .. } => {
            let trace = play(&cfg, &dir, *episodes)?;
            let text = serde_json::to_string_pretty(&trace)?;
            match out {
                Some(p) => fs::write(p, text)?,
                None => emit(&format!("{text}\n"))?,
            }
            None
        }
        Command::ShowConfig(_) => unreachable!("handled above"),
    };
    write_manifest(&dir, &cfg, name, started, report.as_ref())
}

/// Writes to stdout; a closed pipe (`refgame play | head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

pub fn gen_world(cfg: &RunConfig, dir: &Path) -> Result<World> {
    let world = refgame::world::build_dataset(&cfg.world)?;
    let wdir = dir.join(WORLD_DIR);
    world.save(&wdir)?;
    fs::write(wdir.join(WORLD_CONFIG_FILE), serde_json::to_vec_pretty(&cfg.world)?)?;
    info!(
        "world: {} train / {} val / {} test items, vocabulary {}",
        world.data.train.len(),
        world.data.val.len(),
        world.data.test.len(),
        world.vocab.len()
    );
    Ok(world)
}

/// Loads the corpus, refusing one generated under a different world config.
pub fn load_world(cfg: &RunConfig, dir: &Path) -> Result<World> {
    let wdir = dir.join(WORLD_DIR);
    let stored = wdir.join(WORLD_CONFIG_FILE);
    if !stored.exists() {
        return Err(Error::Config(format!("no corpus in {}; run gen-world first", wdir.display())));
    }
    let saved: Value = serde_json::from_slice(&fs::read(&stored)?)?;
    if saved != serde_json::to_value(&cfg.world)? {
        return Err(Error::Stale("corpus was generated with a different world config".into()));
    }
    World::load(&wdir, &cfg.world)
}

fn corpus_fingerprint(dir: &Path) -> Result<u64> {
    file_fingerprint(&dir.join(WORLD_DIR).join(CORPUS_FILE))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ListenerMeta {
    corpus_fingerprint: u64,
    listener: refgame::agents::ListenerConfig,
    pretrain: PretrainConfig,
    final_val_acc: f64,
}

fn read_listener_meta(dir: &Path) -> Result<Option<ListenerMeta>> {
    let path = dir.join(LISTENER_META_FILE);
    if !path.exists() || !dir.join(LISTENER_FILE).exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

/// Pretrains and saves the listener; returns the final validation accuracy.
/// A finished checkpoint for the same corpus and settings is reused.
pub fn pretrain(cfg: &RunConfig, dir: &Path) -> Result<f64> {
    let world = load_world(cfg, dir)?;
    let corpus = corpus_fingerprint(dir)?;
    if let Some(meta) = read_listener_meta(dir)? {
        if meta.corpus_fingerprint == corpus && meta.listener == cfg.listener && meta.pretrain == cfg.pretrain {
            info!("listener already pretrained (val acc {:.4}); reusing it", meta.final_val_acc);
            return Ok(meta.final_val_acc);
        }
    }
    let d_img = cfg.world.d_img;
    let init = seed::derive(cfg.pretrain.seed, &[tag::INIT_LISTENER]);
    let mut listener = ListenerNet::new(cfg.listener, world.vocab.len(), d_img, init)?;
    let report = refgame::agents::pretrain_listener(&mut listener, &world.data.train, &world.data.val, &cfg.pretrain)?;
    for p in &report.curve {
        info!("pretrain step {:>5}  val acc {:.4}", p.step, p.val_acc);
    }
    listener.checkpoint(LISTENER_ROLE).save(&dir.join(LISTENER_FILE))?;
    let meta = ListenerMeta {
        corpus_fingerprint: corpus,
        listener: cfg.listener,
        pretrain: cfg.pretrain,
        final_val_acc: report.final_val_acc,
    };
    fs::write(dir.join(LISTENER_META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    let mut csv = String::from("step,val_acc\n");
    for p in &report.curve {
        csv.push_str(&format!("{},{:.6}\n", p.step, p.val_acc));
    }
    fs::write(dir.join(PRETRAIN_CURVE_FILE), csv)?;
    Ok(report.final_val_acc)
}

pub fn load_listener(cfg: &RunConfig, dir: &Path, world: &World) -> Result<ListenerNet> {
    let meta = read_listener_meta(dir)?
        .ok_or_else(|| Error::Config("no listener checkpoint; run pretrain-listener first".into()))?;
    if meta.corpus_fingerprint != corpus_fingerprint(dir)? {
        return Err(Error::Stale("listener was pretrained on a different corpus".into()));
    }
    if meta.listener != cfg.listener {
        return Err(Error::Stale("listener checkpoint does not match listener config".into()));
    }
    ListenerNet::load(&dir.join(LISTENER_FILE), LISTENER_ROLE, cfg.listener, world.vocab.len(), cfg.world.d_img)
        .map_err(|e| Error::Stale(format!("listener checkpoint: {e}")))
}

pub fn index_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("index_{}.rgix", split.as_str()))
}

/// Ties an index to the corpus, the metric, K and (for dense metrics) the
/// listener checkpoint it was encoded with.
fn index_fingerprint(cfg: &RunConfig, dir: &Path) -> Result<u64> {
    let listener = if cfg.index.metric.needs_encoder() {
        file_fingerprint(&dir.join(LISTENER_FILE))?
    } else {
        0
    };
    let key = format!("{}:{}:{}:{}", corpus_fingerprint(dir)?, listener, cfg.index.metric, cfg.index.k);
    Ok(bytes_fingerprint(key.as_bytes()))
}

pub fn build_indices(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let world = load_world(cfg, dir)?;
    let encoder = if cfg.index.metric.needs_encoder() {
        Some(load_listener(cfg, dir, &world)?)
    } else {
        None
    };
    let fp = index_fingerprint(cfg, dir)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let items = world.items(split);
        let scorer = Scorer::new(cfg.index.metric, items, &world.data.train, world.vocab.len(), encoder.as_ref())?;
        let index = build_index(items, split, &scorer, cfg.index.k, fp)?;
        index.save(&index_path(dir, split))?;
        info!("index {} ({}, K={}): {} items", split.as_str(), cfg.index.metric, cfg.index.k, items.len());
    }
    Ok(())
}

pub fn load_index(cfg: &RunConfig, dir: &Path, split: Split) -> Result<SimilarityIndex> {
    let path = index_path(dir, split);
    if !path.exists() {
        return Err(Error::Config(format!("no index at {}; run build-index first", path.display())));
    }
    let index = SimilarityIndex::load(&path, index_fingerprint(cfg, dir)?)?;
    if index.descriptor.split != split {
        return Err(Error::Stale(format!("{} holds a different split", path.display())));
    }
    Ok(index)
}

/// Everything training and evaluation read but never modify.
pub struct Frozen {
    pub world: World,
    pub listener: ListenerNet,
    pub lms: FluencyModels,
    pub tags: Vec<Option<refgame::world::PosTag>>,
    pub indices: Option<[SimilarityIndex; 3]>,
}

pub fn load_frozen(cfg: &RunConfig, dir: &Path, need_index: bool) -> Result<Frozen> {
    let world = load_world(cfg, dir)?;
    let listener = load_listener(cfg, dir, &world)?;
    let lms = FluencyModels::train(&world.data.train, world.vocab.len(), cfg.fluency)?;
    let tags = world.tag_table();
    let indices = if need_index {
        Some([
            load_index(cfg, dir, Split::Train)?,
            load_index(cfg, dir, Split::Val)?,
            load_index(cfg, dir, Split::Test)?,
        ])
    } else {
        None
    };
    Ok(Frozen {
        world,
        listener,
        lms,
        tags,
        indices,
    })
}

fn split_slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

impl Frozen {
    /// Trainer whose evaluation split is `eval`.
    pub fn trainer(&self, cfg: &RunConfig, eval: Split) -> Result<Trainer<'_>> {
        let idx = |s: Split| self.indices.as_ref().map(|i| &i[split_slot(s)]);
        let ctx = TrainContext {
            train: self.world.items(Split::Train),
            val: self.world.items(eval),
            train_index: idx(Split::Train),
            val_index: idx(eval),
            listener: &self.listener,
            lms: &self.lms,
            tag_table: &self.tags,
        };
        let mut tc = cfg.train.clone();
        tc.eval_split = EvalSplit::Val;
        Trainer::new(tc, ctx)
    }
}

pub fn train(cfg: &RunConfig, dir: &Path) -> Result<Option<MetricsReport>> {
    let hard = cfg.train.game.difficulty == Difficulty::Hard;
    let frozen = load_frozen(cfg, dir, hard)?;
    let eval_split = match cfg.train.eval_split {
        EvalSplit::Train => Split::Train,
        EvalSplit::Val => Split::Val,
    };
    let mut trainer = frozen.trainer(cfg, eval_split)?;
    let summary = trainer
        .run_observed(Some(dir), &mut |row| {
            info!(
                "step {:>6}  acc {:.3}  reward {:+.3}  noop {:.3}  len {:.2}  sigma {:.3}  w_l {:.3}",
                row.step, row.report.acc, row.report.reward_mean, row.report.noop_rate, row.report.avg_len, row.sigma, row.w_l_effective
            )
        })
        .map_err(|e| match e {
            Error::Nn(_) if dir.join(CHECKPOINT_DIR).join(STATE_FILE).exists() => {
                Error::Stale(format!("checkpoint does not match config: {e}"))
            }
            other => other,
        })?;
    Ok(summary.eval_rows.last().map(|r| r.report.clone()))
}

fn with_trained<T>(
    cfg: &RunConfig,
    dir: &Path,
    split: Split,
    episodes: usize,
    f: impl FnOnce(&Trainer<'_>, &Frozen) -> Result<T>,
) -> Result<T> {
    let ck = dir.join(CHECKPOINT_DIR);
    if !ck.join(STATE_FILE).exists() {
        return Err(Error::Config("no speaker checkpoint; run train first".into()));
    }
    let hard = cfg.train.game.difficulty == Difficulty::Hard;
    let frozen = load_frozen(cfg, dir, hard)?;
    let mut run_cfg = cfg.clone();
    run_cfg.train.eval_episodes = episodes;
    let mut trainer = frozen.trainer(&run_cfg, split)?;
    trainer
        .load_checkpoint(&ck)
        .map_err(|e| Error::Stale(format!("checkpoint does not match config: {e}")))?;
    f(&trainer, &frozen)
}

pub fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<MetricsReport> {
    let report = if cfg.eval.gold {
        let hard = cfg.train.game.difficulty == Difficulty::Hard;
        let frozen = load_frozen(cfg, dir, hard)?;
        let g = &cfg.train.game;
        let gold = GoldConfig {
            n_candidates: g.n_candidates,
            episodes: cfg.eval.episodes,
            difficulty: g.difficulty,
            thresholds: g.thresholds,
            reward: g.reward,
            seed: cfg.eval.seed,
        };
        let index = frozen.indices.as_ref().map(|i| &i[split_slot(cfg.eval.split)]);
        let (report, _) = gold_standard_eval(
            &frozen.listener,
            frozen.world.items(cfg.eval.split),
            index,
            &gold,
            &frozen.lms,
            &frozen.tags,
        )?;
        let row = refgame::trainer::EvalRow {
            step: 0,
            report,
            sigma: 0.0,
            w_l_effective: 0.0,
        };
        append_eval(dir, &row)?;
        row.report
    } else {
        with_trained(cfg, dir, cfg.eval.split, cfg.eval.episodes, |t, _| {
            let (row, _) = t.evaluate()?;
            append_eval(dir, &row)?;
            Ok(row.report)
        })?
    };
    fs::write(dir.join(EVAL_JSON_FILE), serde_json::to_vec_pretty(&report)?)?;
    info!(
        "{} split: acc {:.4}  bleu {:.4}  fluency {:.4}  len {:.2}  noop {:.4}",
        cfg.eval.split.as_str(),
        report.acc,
        report.bleu,
        report.fluency,
        report.avg_len,
        report.noop_rate
    );
    Ok(report)
}

fn append_eval(dir: &Path, row: &refgame::trainer::EvalRow) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(EVAL_CSV_FILE))?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{CSV_HEADER}")?;
    }
    writeln!(f, "{}", row.csv())?;
    Ok(())
}

/// Decoded episode traces from the evaluation split.
pub fn play(cfg: &RunConfig, dir: &Path, episodes: usize) -> Result<Value> {
    if episodes == 0 {
        return Err(Error::Argument("--episodes must be >= 1".into()));
    }
    with_trained(cfg, dir, cfg.eval.split, episodes, |t, frozen| {
        let (_, records) = t.evaluate()?;
        Ok(Value::Array(
            records.iter().map(|r| episode_json(t.ctx.val, &frozen.world.vocab, r)).collect(),
        ))
    })
}

fn episode_json(items: &[refgame::world::Item], vocab: &Vocabulary, r: &EpisodeRecord) -> Value {
    let tr = &r.trace;
    json!({
        "target_item": items[r.game.target].id,
        "candidate_items": r.game.candidates.iter().map(|&c| items[c].id).collect::<Vec<_>>(),
        "target_index": r.game.target_index,
        "utterance": vocab.decode(&r.utterance.tokens),
        "reference": vocab.decode(&items[r.game.target].caption.tokens),
        "listener_probs": r.response.probs,
        "choice": r.response.choice,
        "linguistic_input": r.linguistic_input.is_some(),
        "reward": r.reward,
        "pool": tr.candidates.iter().enumerate().map(|(i, u)| json!({
            "utterance": vocab.decode(&u.tokens),
            "speaker_score": tr.speaker_scores[i],
            "listener_score": tr.listener_scores.get(i),
            "combined": tr.combined[i],
        })).collect::<Vec<_>>(),
        "chosen": tr.chosen,
        "randomized": tr.randomized,
        "w_l": tr.w_l,
        "sigma": tr.sigma,
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Content hashes of every artifact present in the run directory.
fn artifact_hashes(dir: &Path) -> Result<serde_json::Map<String, Value>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE && !n.to_string_lossy().ends_with(".tmp")) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut out = serde_json::Map::new();
    for p in files {
        let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        out.insert(rel, Value::String(sha256_hex(&p)?));
    }
    Ok(out)
}

/// Rewrites `manifest.json` via a temp file and rename. The last report is
/// carried over when the current command produced none.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str, started: u64, report: Option<&MetricsReport>) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let path = dir.join(MANIFEST_FILE);
    let previous: Option<Value> = fs::read(&path).ok().and_then(|b| serde_json::from_slice(&b).ok());
    let report = match report {
        Some(r) => serde_json::to_value(r)?,
        None => previous.as_ref().and_then(|p| p.get("report").cloned()).unwrap_or(Value::Null),
    };
    let manifest = json!({
        "command": command,
        "config": refgame::config::to_json(cfg),
        "config_file": CONFIG_FILE,
        "artifacts": artifact_hashes(dir)?,
        "started_unix": started,
        "finished_unix": unix_now(),
        "report": report,
    });
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

//! Command-line harness: data generation, embedder pretraining, index
//! building, agent training, evaluation, augmentation studies, sweeps, and
//! reporting.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retrigo::ann::{default_partitions, ExclusionFilter, IndexConfig, RetrievalIndex};
use retrigo::datastore::{PositionRef, Store};
use retrigo::embedder::{
    embed_refs, embedder_model_config, fit_pca, pretrain, Embedder, PcaProjection,
    DEFAULT_TAP_BLOCK,
};
use retrigo::gtp::GtpClient;
use retrigo::harness::{
    append_sweep_csv, dump_neighbors, evaluate, eval_accuracy, histogram, nearest_distances,
    run_sweep, selfplay_generate, write_histogram_csv, EvalProtocol, InternalAgent, Opponent,
    RetrievalContext, SelfplayConfig, SweepRow,
};
use retrigo::model::{AgentModel, ModelConfig, Params};
use retrigo::search::SearchConfig;
use retrigo::trainer::{
    load_checkpoint, parse_kv, precompute_neighbors, save_checkpoint, train, NeighborRefs,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "retrigo", about = "Retrieval-augmented model-based Go agent")]
struct Cli {
    /// Seed for every random choice in the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate self-play games into a game file.
    GenData(GenDataArgs),
    /// Pretrain the embedder network on stored games.
    TrainEmbedder(TrainEmbedderArgs),
    /// Fit PCA and build the retrieval index from stored games.
    BuildIndex(BuildIndexArgs),
    /// Train an agent (retrieval or baseline) on stored games.
    Train(TrainArgs),
    /// Evaluate a checkpoint against an internal or GTP opponent.
    Eval(EvalArgs),
    /// Copy an index and extend it with positions from extra games.
    Augment(AugmentArgs),
    /// Run one experiment axis and append rows to a CSV report.
    Sweep(SweepArgs),
    /// Nearest-neighbor distance histogram for stored positions.
    Histogram(HistogramArgs),
    /// Render a query position and its retrieved neighbors as text boards.
    DumpNeighbors(DumpNeighborsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output game file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    games: usize,
    #[arg(long, default_value_t = 5)]
    board_size: usize,
    #[arg(long, default_value_t = 4.5)]
    komi: f32,
    #[arg(long, default_value_t = 64)]
    n_sims: usize,
    #[arg(long, default_value_t = 6)]
    opening_moves: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Move cap; defaults to 2 * board area.
    #[arg(long)]
    max_moves: Option<usize>,
    /// Bootstrap checkpoint; a random-initialized model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Channels for the random-initialized bootstrap model.
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// First game id to assign.
    #[arg(long, default_value_t = 0)]
    game_id_base: u64,
}

#[derive(Args)]
struct TrainEmbedderArgs {
    /// Input game file.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Position subsample rate.
    #[arg(long, default_value_t = 0.15)]
    subsample: f64,
    /// Extra key=value config overrides.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    data: PathBuf,
    /// Embedder checkpoint from train-embedder.
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    /// Output index file.
    #[arg(long)]
    out: PathBuf,
    /// Output PCA file.
    #[arg(long)]
    pca_out: PathBuf,
    /// Embedding dimensionality after PCA.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Position subsample rate for index entries.
    #[arg(long, default_value_t = 0.15)]
    subsample: f64,
    /// Inverted-file partition count; defaults to sqrt of the entry count.
    #[arg(long)]
    partitions: Option<usize>,
    /// Partitions probed per query.
    #[arg(long, default_value_t = 12)]
    probes: usize,
    #[arg(long, default_value_t = 10)]
    kmeans_iters: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (same keys as --set).
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after --config.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Position subsample rate.
    #[arg(long, default_value_t = 0.15)]
    subsample: f64,
    /// Retrieval artifacts; required unless the config disables retrieval.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Agent checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Internal opponent checkpoint.
    #[arg(long)]
    opponent_checkpoint: Option<PathBuf>,
    /// GTP opponent command (first token is the binary).
    #[arg(long)]
    gtp: Option<String>,
    #[arg(long, default_value_t = 200)]
    games: usize,
    #[arg(long, default_value_t = 64)]
    n_sims: usize,
    /// Act from the raw policy head instead of searching.
    #[arg(long, default_value_t = false)]
    policy_only: bool,
    #[arg(long, default_value_t = 6)]
    opening_moves: usize,
    #[arg(long, default_value_t = 0.995)]
    early_stop: f64,
    #[arg(long)]
    max_moves: Option<usize>,
    /// Retrieval artifacts for retrieval-enabled checkpoints.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    embedder: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
}

#[derive(Args)]
struct AugmentArgs {
    /// Base index file; never modified.
    #[arg(long)]
    index: PathBuf,
    /// Output index file (copy-on-augment).
    #[arg(long)]
    out: PathBuf,
    /// Game file with the positions to add.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    pca: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    /// Position subsample rate for the added games.
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// Axis: num_neighbors, model_size, dataset_fraction, n_sims,
    /// regularisation_flags, or random_neighbors.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long)]
    values: String,
    /// Comma-separated seeds per point.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Output CSV (appended, header written once).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    pca: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    /// Base training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long, default_value_t = 0.15)]
    subsample: f64,
    /// Held-out fraction of subsampled positions used for accuracy rows.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    /// Reference checkpoint for win-rate rows (n_sims and random_neighbors
    /// axes).
    #[arg(long)]
    ref_checkpoint: Option<PathBuf>,
    /// Games per win-rate measurement; 0 skips win-rate columns.
    #[arg(long, default_value_t = 0)]
    eval_games: usize,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    pca: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    #[arg(long, default_value_t = 1.0)]
    subsample: f64,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// Exclude matches from the query's own half: none or half.
    #[arg(long, default_value = "none")]
    exclude: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpNeighborsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    pca: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAP_BLOCK)]
    tap_block: usize,
    /// Query game id.
    #[arg(long)]
    game: u64,
    /// Query move index.
    #[arg(long)]
    move_index: u32,
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// none, half, or game.
    #[arg(long, default_value = "none")]
    exclude: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::TrainEmbedder(a) => train_embedder(a, cli.seed),
        Command::BuildIndex(a) => build_index(a, cli.seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Eval(a) => run_eval(a, cli.seed),
        Command::Augment(a) => run_augment(a, cli.seed),
        Command::Sweep(a) => run_sweep_cmd(a, cli.seed),
        Command::Histogram(a) => run_histogram(a, cli.seed),
        Command::DumpNeighbors(a) => run_dump(a),
    }
}

/// Rebuild a model from the key=value config text stored in a checkpoint.
fn model_config_from_kv(kv: &str) -> Result<ModelConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&parse_kv(kv)?)?;
    Ok(cfg.model)
}

fn load_agent(path: &Path) -> Result<(AgentModel, Params<f32>)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let model = AgentModel::new(model_config_from_kv(&ckpt.config_kv)?);
    Ok((model, ckpt.params))
}

/// Embedder checkpoints store the generic config keys; the embedder network
/// shape itself is fixed, so only board size and channels are read back.
fn load_embedder(path: &Path, tap_block: usize) -> Result<Embedder> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let base = model_config_from_kv(&ckpt.config_kv)?;
    let cfg = embedder_model_config(base.board_size, base.channels);
    Ok(Embedder::new(cfg, ckpt.params, tap_block)?)
}

fn parse_exclusion(s: &str, seed_game: Option<u64>) -> Result<ExclusionFilter> {
    Ok(match s {
        "none" => ExclusionFilter::None,
        "half" => ExclusionFilter::ExcludeHalf(0),
        "game" => match seed_game {
            Some(g) => ExclusionFilter::ExcludeGame(g),
            None => bail!("game exclusion needs a query game id"),
        },
        other => bail!("unknown exclusion {other:?} (expected none, half, or game)"),
    })
}

fn bootstrap_model_config(board_size: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        board_size,
        channels,
        m_enc: 1,
        m_nn: 1,
        m_root: 2,
        m_tran: 1,
        num_neighbors: 0,
        retrieval_enabled: false,
        ..ModelConfig::default()
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let (model, params) = match &a.checkpoint {
        Some(p) => load_agent(p)?,
        None => {
            let model = AgentModel::new(bootstrap_model_config(a.board_size, a.channels));
            let params = model.init_params::<f32>(seed);
            (model, params)
        }
    };
    if model.cfg.retrieval_enabled {
        bail!("gen-data needs a non-retrieval bootstrap model");
    }
    let cfg = SelfplayConfig {
        n_games: a.games,
        board_size: a.board_size,
        komi: a.komi,
        search: SearchConfig {
            n_sims: a.n_sims,
            root_noise: true,
            ..SearchConfig::default()
        },
        opening_moves: a.opening_moves,
        temperature: a.temperature,
        max_moves: a.max_moves.unwrap_or(2 * a.board_size * a.board_size),
        seed,
        game_id_base: a.game_id_base,
    };
    let games = selfplay_generate(&model, &params, &cfg)?;
    let positions: usize = games.iter().map(|g| g.moves.len()).sum();
    let mean_len = positions as f64 / games.len().max(1) as f64;
    let mut store = Store::new();
    store.ingest(games)?;
    store.save(&a.out)?;
    log::info!(
        "wrote {} games ({} positions, mean length {mean_len:.1}) to {}",
        store.games().len(),
        positions,
        a.out.display()
    );
    Ok(())
}

fn train_embedder(a: TrainEmbedderArgs, seed: u64) -> Result<()> {
    let store = Store::load(&a.data)?;
    let board_size = store
        .games()
        .first()
        .map(|g| g.board_size)
        .context("empty game file")?;
    let mut cfg = TrainConfig {
        model: embedder_model_config(board_size, a.channels),
        steps: a.steps,
        batch_size: a.batch,
        base_lr: a.lr,
        seed,
        checkpoint_path: Some(a.out.clone()),
        metrics_path: a.metrics.clone(),
        ..TrainConfig::default()
    };
    apply_overrides(&mut cfg, &a.set)?;
    cfg.model.retrieval_enabled = false;
    let positions = store.subsample(a.subsample, seed);
    log::info!("pretraining embedder on {} positions", positions.len());
    let result = pretrain(&store, &positions, &cfg)?;
    save_checkpoint(&a.out, &result.params, Some(&result.opt), &cfg.to_kv())?;
    log::info!("wrote embedder checkpoint to {}", a.out.display());
    Ok(())
}

fn build_index(a: BuildIndexArgs, seed: u64) -> Result<()> {
    let store = Store::load(&a.data)?;
    let embedder = load_embedder(&a.embedder, a.tap_block)?;
    let positions = store.subsample(a.subsample, seed);
    log::info!("embedding {} index positions", positions.len());
    let pre: Vec<Vec<f32>> = {
        // pre-embeddings first so PCA and keys share one pass
        let identity = PcaProjection::identity(embedder.pre_dim());
        embed_refs(&store, &positions, &embedder, &identity)?
    };
    let pca = fit_pca(&pre, a.d)?;
    let keys: Vec<Vec<f32>> = pre
        .iter()
        .map(|v| pca.project(v))
        .collect::<std::result::Result<_, _>>()?;
    let cfg = IndexConfig {
        partitions: a.partitions.unwrap_or_else(|| default_partitions(keys.len())),
        probes: a.probes,
        kmeans_iters: a.kmeans_iters,
        seed,
    };
    let index = RetrievalIndex::build(&keys, &positions, &cfg)?;
    pca.save(&a.pca_out)?;
    index.save(&a.out)?;
    log::info!(
        "wrote {}-entry index ({} partitions) to {} and PCA to {}",
        index.len(),
        index.partitions(),
        a.out.display(),
        a.pca_out.display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        cfg.apply_kv(&parse_kv(s)?)?;
    }
    Ok(())
}

fn run_train(a: TrainArgs, seed: u64) -> Result<()> {
    let store = Store::load(&a.data)?;
    let mut cfg = TrainConfig {
        seed,
        checkpoint_path: Some(a.out.clone()),
        metrics_path: a.metrics.clone(),
        ..TrainConfig::default()
    };
    if let Some(p) = &a.config {
        cfg.apply_kv(&parse_kv(&std::fs::read_to_string(p)?)?)?;
    }
    apply_overrides(&mut cfg, &a.set)?;
    if let Some(g) = store.games().first() {
        cfg.model.board_size = g.board_size;
    }
    let positions = store.subsample(a.subsample, seed);
    let neighbors: Option<NeighborRefs> = if cfg.model.retrieval_enabled {
        let (Some(index), Some(embedder), Some(pca)) = (&a.index, &a.embedder, &a.pca) else {
            bail!("retrieval training needs --index, --embedder, and --pca");
        };
        let index = RetrievalIndex::load(index)?;
        let embedder = load_embedder(embedder, a.tap_block)?;
        let pca = PcaProjection::load(pca)?;
        log::info!("precomputing neighbors for {} positions", positions.len());
        Some(precompute_neighbors(
            &store,
            &positions,
            &embedder,
            &pca,
            &index,
            cfg.model.num_neighbors,
        )?)
    } else {
        None
    };
    log::info!(
        "training {} steps on {} positions (retrieval={})",
        cfg.steps,
        positions.len(),
        cfg.model.retrieval_enabled
    );
    let result = train(&store, &positions, neighbors.as_ref(), &cfg)?;
    save_checkpoint(&a.out, &result.params, Some(&result.opt), &cfg.to_kv())?;
    let last = result.metrics.last().context("no training steps")?;
    log::info!(
        "wrote checkpoint to {} (final loss {:.4})",
        a.out.display(),
        last.loss
    );
    Ok(())
}

struct RetrievalFiles {
    store: Store,
    index: RetrievalIndex,
    embedder: Embedder,
    pca: PcaProjection,
}

fn load_retrieval_files(
    data: &Path,
    index: &Path,
    embedder: &Path,
    pca: &Path,
    tap_block: usize,
) -> Result<RetrievalFiles> {
    Ok(RetrievalFiles {
        store: Store::load(data)?,
        index: RetrievalIndex::load(index)?,
        embedder: load_embedder(embedder, tap_block)?,
        pca: PcaProjection::load(pca)?,
    })
}

fn run_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let (model, params) = load_agent(&a.checkpoint)?;
    let board_size = model.cfg.board_size;
    let files = if model.cfg.retrieval_enabled {
        let (Some(data), Some(index), Some(embedder), Some(pca)) =
            (&a.data, &a.index, &a.embedder, &a.pca)
        else {
            bail!("retrieval checkpoint needs --data, --index, --embedder, and --pca");
        };
        Some(load_retrieval_files(data, index, embedder, pca, a.tap_block)?)
    } else {
        None
    };
    let agent = InternalAgent {
        model: &model,
        params: &params,
        search: SearchConfig {
            n_sims: a.n_sims,
            ..SearchConfig::default()
        },
        retrieval: files.as_ref().map(|f| RetrievalContext {
            store: &f.store,
            index: &f.index,
            embedder: &f.embedder,
            pca: &f.pca,
            num_neighbors: model.cfg.num_neighbors,
            filter: ExclusionFilter::None,
            random_neighbors: false,
        }),
        policy_only: a.policy_only,
    };
    let opp_loaded; // keeps the opponent model alive across the match
    let mut opponent = match (&a.opponent_checkpoint, &a.gtp) {
        (Some(p), None) => {
            opp_loaded = load_agent(p)?;
            if opp_loaded.0.cfg.retrieval_enabled {
                bail!("internal opponents must be non-retrieval checkpoints");
            }
            Opponent::Internal(InternalAgent {
                model: &opp_loaded.0,
                params: &opp_loaded.1,
                search: SearchConfig {
                    n_sims: a.n_sims,
                    ..SearchConfig::default()
                },
                retrieval: None,
                policy_only: false,
            })
        }
        (None, Some(cmd)) => {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            let (bin, args) = parts.split_first().context("empty --gtp command")?;
            Opponent::Gtp(GtpClient::spawn(bin, args)?)
        }
        _ => bail!("provide exactly one of --opponent-checkpoint or --gtp"),
    };
    let protocol = EvalProtocol {
        n_games: a.games,
        opening_seed_moves: a.opening_moves,
        early_stop_threshold: a.early_stop,
        max_moves: a.max_moves.unwrap_or(6 * board_size * board_size),
        ..EvalProtocol::default()
    };
    let komi = files
        .as_ref()
        .and_then(|f| f.store.games().first().map(|g| g.komi))
        .unwrap_or(4.5);
    let report = evaluate(&agent, &mut opponent, &protocol, board_size, komi, seed)?;
    println!(
        "wins {} losses {} voided {} win_rate {:.4} wilson95 [{:.4}, {:.4}]",
        report.wins,
        report.losses,
        report.voided,
        report.win_rate,
        report.wilson_low,
        report.wilson_high
    );
    Ok(())
}

fn run_augment(a: AugmentArgs, seed: u64) -> Result<()> {
    if a.index == a.out {
        bail!("--out must differ from --index (the base index is never modified)");
    }
    let mut index = RetrievalIndex::load(&a.index)?;
    let store = Store::load(&a.data)?;
    let embedder = load_embedder(&a.embedder, a.tap_block)?;
    let pca = PcaProjection::load(&a.pca)?;
    let existing: std::collections::HashSet<(u64, u32)> = index
        .entries()
        .iter()
        .map(|e| (e.game_id, e.move_index))
        .collect();
    let positions: Vec<PositionRef> = store
        .subsample(a.subsample, seed)
        .into_iter()
        .filter(|r| !existing.contains(&(r.game_id, r.move_index)))
        .collect();
    let keys = embed_refs(&store, &positions, &embedder, &pca)?;
    let before = index.len();
    index.augment(&keys, &positions)?;
    index.save(&a.out)?;
    log::info!(
        "augmented index {} -> {} entries, wrote {}",
        before,
        index.len(),
        a.out.display()
    );
    Ok(())
}

fn run_histogram(a: HistogramArgs, seed: u64) -> Result<()> {
    let files = load_retrieval_files(&a.data, &a.index, &a.embedder, &a.pca, a.tap_block)?;
    let positions = files.store.subsample(a.subsample, seed);
    let queries = embed_refs(&files.store, &positions, &files.embedder, &files.pca)?;
    let distances: Vec<f32> = if a.exclude == "half" {
        positions
            .iter()
            .zip(&queries)
            .filter_map(|(r, q)| {
                files
                    .index
                    .query(q, 1, ExclusionFilter::ExcludeHalf(r.half_tag))
                    .first()
                    .map(|&(_, d)| d)
            })
            .collect()
    } else {
        let filter = parse_exclusion(&a.exclude, None)?;
        nearest_distances(&files.index, &queries, filter)
    };
    let h = histogram(&distances, a.bins);
    write_histogram_csv(&a.out, &h)?;
    println!("queries {} median {:.6}", distances.len(), h.median);
    Ok(())
}

fn run_dump(a: DumpNeighborsArgs) -> Result<()> {
    let files = load_retrieval_files(&a.data, &a.index, &a.embedder, &a.pca, a.tap_block)?;
    let query = PositionRef {
        game_id: a.game,
        move_index: a.move_index,
        half_tag: Store::half_tag(a.game),
    };
    let filter = parse_exclusion(&a.exclude, Some(a.game))?;
    let text = dump_neighbors(
        &files.store,
        &files.index,
        &files.embedder,
        &files.pca,
        query,
        a.n,
        filter,
    )?;
    println!("{text}");
    Ok(())
}

fn run_sweep_cmd(a: SweepArgs, seed: u64) -> Result<()> {
    let files = load_retrieval_files(&a.data, &a.index, &a.embedder, &a.pca, a.tap_block)?;
    let mut base = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(p) = &a.config {
        base.apply_kv(&parse_kv(&std::fs::read_to_string(p)?)?)?;
    }
    apply_overrides(&mut base, &a.set)?;
    if let Some(g) = files.store.games().first() {
        base.model.board_size = g.board_size;
    }
    let all = files.store.subsample(a.subsample, seed);
    let holdout_n = ((all.len() as f64) * a.holdout).round() as usize;
    let (eval_positions, train_positions) = all.split_at(holdout_n.clamp(1, all.len() - 1));
    log::info!(
        "sweep axis {} over {} train / {} eval positions",
        a.axis,
        train_positions.len(),
        eval_positions.len()
    );

    let values: Vec<String> = a.values.split(',').map(|s| s.trim().to_string()).collect();
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().context("bad seed list"))
        .collect::<Result<_>>()?;

    let sweep = SweepTask {
        files: &files,
        base: &base,
        train_positions,
        eval_positions,
        ref_checkpoint: a.ref_checkpoint.as_deref(),
        eval_games: a.eval_games,
    };
    let axis = a.axis.clone();
    let rows = run_sweep(&axis, &values, &seeds, |value, run_seed| {
        sweep
            .run_point(&axis, value, run_seed)
            .map_err(retrigo::harness::HarnessError::from)
    })?;
    append_sweep_csv(&a.out, &rows)?;
    log::info!("appended {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

struct SweepTask<'a> {
    files: &'a RetrievalFiles,
    base: &'a TrainConfig,
    train_positions: &'a [PositionRef],
    eval_positions: &'a [PositionRef],
    ref_checkpoint: Option<&'a Path>,
    eval_games: usize,
}

impl SweepTask<'_> {
    fn run_point(&self, axis: &str, value: &str, seed: u64) -> std::io::Result<SweepRow> {
        self.run_point_inner(axis, value, seed)
            .map_err(|e| std::io::Error::other(e.to_string()))
    }

    fn run_point_inner(&self, axis: &str, value: &str, seed: u64) -> Result<SweepRow> {
        let f = self.files;
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        let mut n_sims = 64usize;
        let mut random_neighbors = false;
        let mut eval_index: Option<RetrievalIndex> = None;
        match axis {
            "num_neighbors" => {
                cfg.model.num_neighbors = value.parse()?;
                cfg.model.retrieval_enabled = cfg.model.num_neighbors > 0;
                cfg.model.baseline_mode = cfg.model.num_neighbors == 0;
            }
            "model_size" => cfg.model.size_multiplier = value.parse()?,
            "n_sims" => n_sims = value.parse()?,
            "random_neighbors" => random_neighbors = value.parse()?,
            "regularisation_flags" => {
                // value: none, dropout, randomisation, or both
                cfg.loss.neighbor_dropout = value == "dropout" || value == "both";
                cfg.loss.neighbor_randomisation = value == "randomisation" || value == "both";
            }
            "dataset_fraction" => {
                // evaluation-only reindexing: the model trains on the full
                // index; only the eval-time index shrinks
                let fraction: f64 = value.parse()?;
                let keep = ((f.index.len() as f64) * fraction).round().max(1.0) as usize;
                let keys: Vec<Vec<f32>> =
                    (0..keep).map(|i| f.index.key(i).to_vec()).collect();
                let entries = f.index.entries()[..keep].to_vec();
                let icfg = IndexConfig {
                    partitions: default_partitions(keep),
                    seed,
                    ..IndexConfig::default()
                };
                eval_index = Some(RetrievalIndex::build(&keys, &entries, &icfg)?);
            }
            other => bail!("unknown sweep axis {other:?}"),
        }

        let neighbors = if cfg.model.retrieval_enabled && !cfg.model.baseline_mode {
            Some(precompute_neighbors(
                &f.store,
                self.train_positions,
                &f.embedder,
                &f.pca,
                &f.index,
                cfg.model.num_neighbors,
            )?)
        } else {
            None
        };
        let result = train(&f.store, self.train_positions, neighbors.as_ref(), &cfg)?;
        let model = AgentModel::new(cfg.model.clone());

        let eval_index = eval_index.as_ref().unwrap_or(&f.index);
        let eval_neighbors = if cfg.model.retrieval_enabled && !cfg.model.baseline_mode {
            Some(precompute_neighbors(
                &f.store,
                self.eval_positions,
                &f.embedder,
                &f.pca,
                eval_index,
                cfg.model.num_neighbors,
            )?)
        } else {
            None
        };
        let (top1, mse) = eval_accuracy(
            &f.store,
            self.eval_positions,
            eval_neighbors.as_ref(),
            &model,
            &result.params,
        )?;

        let mut win_rate_search = None;
        let mut win_rate_policy = None;
        if self.eval_games > 0 {
            if let Some(ref_path) = self.ref_checkpoint {
                let (ref_model, ref_params) = load_agent(ref_path)?;
                let board_size = cfg.model.board_size;
                let komi = f.store.games().first().map(|g| g.komi).unwrap_or(4.5);
                let protocol = EvalProtocol {
                    n_games: self.eval_games,
                    max_moves: 2 * board_size * board_size,
                    ..EvalProtocol::default()
                };
                for policy_only in [false, true] {
                    let agent = InternalAgent {
                        model: &model,
                        params: &result.params,
                        search: SearchConfig {
                            n_sims,
                            ..SearchConfig::default()
                        },
                        retrieval: if cfg.model.retrieval_enabled {
                            Some(RetrievalContext {
                                store: &f.store,
                                index: eval_index,
                                embedder: &f.embedder,
                                pca: &f.pca,
                                num_neighbors: cfg.model.num_neighbors,
                                filter: ExclusionFilter::None,
                                random_neighbors,
                            })
                        } else {
                            None
                        },
                        policy_only,
                    };
                    let mut opponent = Opponent::Internal(InternalAgent {
                        model: &ref_model,
                        params: &ref_params,
                        search: SearchConfig {
                            n_sims,
                            ..SearchConfig::default()
                        },
                        retrieval: None,
                        policy_only: false,
                    });
                    let report =
                        evaluate(&agent, &mut opponent, &protocol, board_size, komi, seed)?;
                    if policy_only {
                        win_rate_policy = Some(report.win_rate);
                    } else {
                        win_rate_search = Some(report.win_rate);
                    }
                }
            }
        }

        Ok(SweepRow {
            axis: axis.to_string(),
            value: value.to_string(),
            seed,
            top1_accuracy: top1,
            value_mse: mse,
            win_rate_search,
            win_rate_policy,
            evals_per_decision: 1 + n_sims,
        })
    }
}

//! `affground`: grounding, evaluation, knowledge-base tooling and the
//! HTTP service from the command line.
//!
//! Documents go to stdout (or `--output`), diagnostics to stderr. Exit
//! status: 0 success, 1 domain failure, 2 input or usage failure.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use affground_core::dataio::{self, DataError, EpisodeInput};
use affground_core::engine::{explain, ground, EnergyWeights, GroundError, GroundingConfig, HypothesisMode};
use affground_core::eval::{self, EpisodeMode, EvalError, SamplingConfig, StaticTier};
use affground_core::ingest::{self, IngestError, MergePolicy};
use affground_core::kb::{diff, PathCombiner};
use affground_core::percept::DEFAULT_TEMPERATURE;
use affground_core::synth;
use affground_service::{Service, DEFAULT_PORT};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "affground", version, about = "Verb-conditioned object selection by energy minimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the candidate region that best affords a verb.
    Ground(GroundArgs),
    /// Run an evaluation protocol.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Knowledge-base lifecycle.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Serve the HTTP API over a data directory.
    Serve(ServeArgs),
    /// Write a seeded synthetic data directory.
    Fixtures(FixturesArgs),
}

#[derive(Args, Clone)]
struct GroundingOpts {
    /// Energy weights `alpha,beta,gamma` (grasp, affordance, alignment).
    #[arg(long, default_value = "1,1,1")]
    weights: EnergyWeights,
    /// How regions are linked to knowledge-base objects.
    #[arg(long, value_parser = parse_hypothesis, default_value = "posterior")]
    hypothesis: HypothesisMode,
    /// Softmax temperature of the posterior hypothesis mode.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Per-path combination of `w_vp` and `w_po`.
    #[arg(long, value_parser = parse_combiner, default_value = "sum")]
    combiner: PathCombiner,
}

impl GroundingOpts {
    fn config(&self) -> Result<GroundingConfig, CliError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CliError::input(format!("--temperature must be positive, got {}", self.temperature)));
        }
        Ok(GroundingConfig { mode: self.hypothesis, temperature: self.temperature, combiner: self.combiner })
    }
}

fn parse_hypothesis(s: &str) -> Result<HypothesisMode, String> {
    s.parse()
}

fn parse_combiner(s: &str) -> Result<PathCombiner, String> {
    s.parse()
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    /// Embedding table, binary sidecar or affemb/1 text.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    verb: String,
    #[command(flatten)]
    grounding: GroundingOpts,
    /// Add one explanation record per candidate.
    #[arg(long)]
    explain: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Tiered static evaluation over `<dataset>/<tier>/*.json`.
    Static(StaticArgs),
    /// Episode evaluation with accuracy, MRR and nDCG.
    Episodes(EpisodeArgs),
}

#[derive(Args)]
struct ReportOut {
    /// Structured report (affreport/1); stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the report as a tab-separated table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct StaticArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Tiers to run; all three when omitted.
    #[arg(long = "tier", value_parser = parse_tier)]
    tiers: Vec<StaticTier>,
    #[command(flatten)]
    grounding: GroundingOpts,
    #[command(flatten)]
    out: ReportOut,
}

fn parse_tier(s: &str) -> Result<StaticTier, String> {
    s.parse()
}

#[derive(Args)]
struct EpisodeArgs {
    /// affepisodes/1 episodes, or an affpool/1 pool to sample from.
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_parser = parse_episode_mode, default_value = "single")]
    mode: EpisodeMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episodes sampled per verb from a pool.
    #[arg(long, default_value_t = eval::DEFAULT_EPISODES_PER_VERB)]
    per_verb: usize,
    /// Candidates per sampled episode.
    #[arg(long, default_value_t = eval::DEFAULT_EPISODE_CANDIDATES)]
    candidates: usize,
    #[command(flatten)]
    grounding: GroundingOpts,
    #[command(flatten)]
    out: ReportOut,
}

fn parse_episode_mode(s: &str) -> Result<EpisodeMode, String> {
    s.parse()
}

#[derive(Subcommand)]
enum KbCommand {
    /// Print invariant violations; exit 1 if there are any.
    Validate { kb: PathBuf },
    /// Union two knowledge bases.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_parser = parse_policy, default_value = "max")]
        policy: MergePolicy,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Build a knowledge base from `verb,object,weight` rows.
    ImportFlat {
        pairs: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Build a knowledge base from `verb,property,weight` and
    /// `property,object,weight` tables.
    Ingest {
        #[arg(long)]
        properties: PathBuf,
        #[arg(long)]
        objects: PathBuf,
        /// Drop edges whose weight is at most this value.
        #[arg(long, default_value_t = 0.0)]
        prune_epsilon: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Print edge-level weight changes from `a` to `b`.
    Diff { a: PathBuf, b: PathBuf },
}

fn parse_policy(s: &str) -> Result<MergePolicy, String> {
    s.parse()
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "AFFGROUND_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Directory with kb.json, embeddings.bin or embeddings.json, and scenes/.
    #[arg(long, env = "AFFGROUND_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes in the serving set and per static tier.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    fn domain(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Unresolved(_) => CliError::domain(e.to_string()),
            e => CliError::input(e.to_string()),
        }
    }
}

impl From<GroundError> for CliError {
    fn from(e: GroundError) -> Self {
        if e.is_resolution() {
            CliError::domain(e.to_string())
        } else {
            CliError::input(e.to_string())
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Ground { ref source, .. } if source.is_resolution() => CliError::domain(e.to_string()),
            EvalError::Protocol(_) => CliError::domain(e.to_string()),
            e => CliError::input(e.to_string()),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::input(e.to_string())
    }
}

fn emit(bytes: &[u8], output: Option<&Path>) -> Result<(), CliError> {
    use std::io::Write;
    match output {
        Some(p) => dataio::write_file(p, bytes)?,
        None => std::io::stdout().write_all(bytes).map_err(|e| CliError::input(format!("stdout: {e}")))?,
    }
    Ok(())
}

fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn cmd_ground(a: GroundArgs) -> Result<(), CliError> {
    let config = a.grounding.config()?;
    let scene = dataio::load_scene_file(&a.scene)?;
    let kb = dataio::load_kb_file(&a.kb)?;
    let emb = dataio::load_embeddings_file(&a.embeddings)?;
    let result = ground(&scene, &a.verb, &kb, &emb, &a.grounding.weights, &config)?;
    let explanations = if a.explain {
        Some(result.ranked.iter().map(|b| explain(&result, &b.roi_id)).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    emit(&dataio::save_result(&result, explanations.as_deref()), a.output.as_deref())?;
    eprintln!("selected {} for `{}`", result.selected_roi_id, result.verb);
    Ok(())
}

fn write_report(report: &eval::Report, out: &ReportOut) -> Result<(), CliError> {
    emit(&dataio::save_report(report), out.output.as_deref())?;
    if let Some(t) = &out.table {
        dataio::write_file(t, dataio::render_table(report).as_bytes())?;
    }
    Ok(())
}

fn cmd_eval_static(a: StaticArgs) -> Result<(), CliError> {
    let config = a.grounding.config()?;
    let kb = dataio::load_kb_file(&a.kb)?;
    let emb = dataio::load_embeddings_file(&a.embeddings)?;
    let tiers = if a.tiers.is_empty() { StaticTier::ALL.to_vec() } else { a.tiers.clone() };
    let report = eval::run_static(&a.dataset, &tiers, &kb, &emb, &a.grounding.weights, &config)?;
    for t in &report.tiers {
        eprintln!("{:<24} {}/{} = {}", t.tier.label(), t.successes, t.scenes, dataio::format_real(t.accuracy));
    }
    write_report(&report.to_report(), &a.out)
}

fn cmd_eval_episodes(a: EpisodeArgs) -> Result<(), CliError> {
    let config = a.grounding.config()?;
    let kb = dataio::load_kb_file(&a.kb)?;
    let emb = dataio::load_embeddings_file(&a.embeddings)?;
    let bytes = dataio::read_file(&a.episodes)?;
    let episodes = match dataio::load_episode_input(&bytes).map_err(|e| CliError::input(format!("{}: {e}", a.episodes.display())))? {
        EpisodeInput::Episodes(e) => e,
        EpisodeInput::Pool(pool) => eval::sample_episodes(
            &pool,
            &SamplingConfig { per_verb: a.per_verb, candidates: a.candidates, mode: a.mode, seed: a.seed },
        )?,
    };
    let report = eval::run_episodes(&episodes, &kb, &emb, &a.grounding.weights, &config, a.mode, a.seed)?;
    let o = &report.overall;
    eprintln!(
        "{} episodes: accuracy {} mrr {} ndcg {}",
        o.episodes,
        dataio::format_real(o.accuracy),
        dataio::format_real(o.mrr),
        dataio::format_real(o.ndcg)
    );
    write_report(&report.to_report(), &a.out)
}

fn cmd_kb(c: KbCommand) -> Result<ExitCode, CliError> {
    match c {
        KbCommand::Validate { kb } => {
            let bytes = dataio::read_file(&kb)?;
            let ins = dataio::inspect_kb(&bytes).map_err(|e| CliError::input(format!("{}: {e}", kb.display())))?;
            for issue in &ins.issues {
                println!("{issue}");
            }
            return Ok(if ins.issues.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        KbCommand::Merge { a, b, policy, output } => {
            let (a, b) = (dataio::load_kb_file(&a)?, dataio::load_kb_file(&b)?);
            emit(&dataio::save_kb(&ingest::merge(&a, &b, policy)), output.as_deref())?;
        }
        KbCommand::ImportFlat { pairs, output } => {
            let rows = ingest::read_flat_pairs(open(&pairs)?)?;
            emit(&dataio::save_kb(&ingest::import_flat(&rows)?), output.as_deref())?;
        }
        KbCommand::Ingest { properties, objects, prune_epsilon, output } => {
            let s1 = ingest::read_property_scores(open(&properties)?)?;
            let s2 = ingest::read_object_scores(open(&objects)?)?;
            let kb = ingest::ingest(&s1, &s2, prune_epsilon)?;
            let (vp, po) = kb.edge_count();
            eprintln!("{vp} vp edges, {po} po edges");
            emit(&dataio::save_kb(&kb), output.as_deref())?;
        }
        KbCommand::Diff { a, b } => {
            let (a, b) = (dataio::load_kb_file(&a)?, dataio::load_kb_file(&b)?);
            let show = |w: Option<f64>| w.map(dataio::format_real).unwrap_or_else(|| "-".into());
            for d in diff(&a, &b) {
                println!(
                    "{} {} {}\t{} -> {}\t{}",
                    d.edge.kind,
                    d.edge.from,
                    d.edge.to,
                    show(d.before),
                    show(d.after),
                    dataio::format_real(d.delta())
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let service = Service::load(&a.data_dir).map_err(|e| CliError::input(e.to_string()))?;
    eprintln!("kb version {}, {} scenes", service.kb_version(), service.scene_ids().len());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::domain(format!("runtime: {e}")))?;
    runtime
        .block_on(affground_service::serve(Arc::new(service), SocketAddr::new(a.host, a.port)))
        .map_err(|e| CliError::domain(format!("server: {e}")))
}

fn cmd_fixtures(a: FixturesArgs) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut world = synth::random_world(&mut rng, &synth::WorldSpec::default());
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())));
    let scenes_dir = a.out.join("scenes");
    mkdir(&scenes_dir)?;
    let spec = synth::SceneSpec { empty_grasp_p: 0.1, ..Default::default() };
    for n in 0..a.scenes {
        let s = synth::random_scene(&mut rng, &mut world, &format!("desk_{n:03}"), &spec);
        dataio::write_file(&scenes_dir.join(format!("{}.json", s.scene_id)), &dataio::save_scene(&s))?;
    }
    let config = GroundingConfig::default();
    let tiers = synth::static_dataset(
        &mut rng,
        &mut world,
        a.scenes,
        &synth::SceneSpec::default(),
        &synth::TierNoise::default(),
        &EnergyWeights::default(),
        &config,
    )?;
    for (tier, scenes) in &tiers {
        let dir = a.out.join("static").join(tier.id());
        mkdir(&dir)?;
        for s in scenes {
            dataio::write_file(&dir.join(format!("{}.json", s.scene_id)), &dataio::save_scene(s))?;
        }
    }
    let pool = synth::episode_pool(&mut rng, &mut world, 4, 0.4, -0.5);
    dataio::write_file(&a.out.join("pool.json"), &dataio::save_pool(&pool))?;
    dataio::write_file(&a.out.join("kb.json"), &dataio::save_kb(&world.kb))?;
    dataio::write_file(&a.out.join("embeddings.bin"), &dataio::save_embeddings_binary(&world.embeddings))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Ground(a) => cmd_ground(a)?,
        Command::Eval(EvalCommand::Static(a)) => cmd_eval_static(a)?,
        Command::Eval(EvalCommand::Episodes(a)) => cmd_eval_episodes(a)?,
        Command::Kb(c) => return cmd_kb(c),
        Command::Serve(a) => cmd_serve(a)?,
        Command::Fixtures(a) => cmd_fixtures(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use topicdt::alliance::RewardScale;
use topicdt::corpus::ConditionFilter;

mod commands;
mod config;

use config::PipelineConfig;

/// Dialogue-topic recommendation with a return-conditioned transformer.
#[derive(Debug, Parser)]
#[command(name = "topicdt", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML pipeline config; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Data root for relative paths (default: $ADT_DATA_DIR, then ./data).
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    /// Base seed for splits and models; also seeds gen-synthetic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reward scale: full, task, bond or goal.
    #[arg(long, global = true)]
    scale: Option<RewardScale>,
    /// Context length in timesteps.
    #[arg(long, global = true, value_name = "N")]
    context_k: Option<usize>,
    /// Condition filter: a condition name or `all`.
    #[arg(long, global = true, value_name = "NAME")]
    condition: Option<ConditionFilter>,
    /// Worker threads for the ablation grid.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and its planted-topic sidecar.
    GenSynthetic {
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        turns: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
    },
    /// Segment transcripts into turn-pairs.
    Ingest,
    /// Train word vectors on the corpus.
    Embed,
    /// Fit the topic model; reports planted-topic agreement when a sidecar exists.
    Topics,
    /// Score every turn-pair against the alliance inventory.
    Rewards,
    /// Build trajectories for the sessions admitted by the condition filter.
    Trajectories,
    /// Train one model and save its checkpoint.
    Train,
    /// Evaluate the saved checkpoint against the baseline on its held-out split.
    Eval {
        /// Train and evaluate once per configured seed instead.
        #[arg(long)]
        all_seeds: bool,
    },
    /// Context-length by reward-scale table.
    Ablate,
    /// Attention reports for the saved checkpoint.
    Attn,
    /// Synthetic and gold fine-tuning records on a 40/40/20 split.
    Labelgen,
    /// Serve live recommendations over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn load_config(g: &GlobalArgs) -> topicdt::Result<PipelineConfig> {
    let mut c = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &g.data_dir {
        c.data_dir = Some(d.clone());
    }
    if let Some(s) = g.seed {
        c.seeds.base = s;
        c.synthetic.seed = s;
    }
    if let Some(s) = g.scale {
        c.experiment.scale = s;
    }
    if let Some(k) = g.context_k {
        c.experiment.model.context_k = k;
    }
    if let Some(f) = g.condition {
        c.stages.condition = f;
    }
    if let Some(j) = g.jobs {
        c.jobs = j;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> topicdt::Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenSynthetic { sessions, turns, topics } => commands::gen_synthetic(&cfg, sessions, turns, topics),
        Command::Ingest => commands::ingest(&cfg),
        Command::Embed => commands::embed(&cfg),
        Command::Topics => commands::topics(&cfg),
        Command::Rewards => commands::rewards(&cfg),
        Command::Trajectories => commands::trajectories(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval { all_seeds } => commands::eval(&cfg, all_seeds),
        Command::Ablate => commands::ablate(&cfg),
        Command::Attn => commands::attn(&cfg),
        Command::Labelgen => commands::labelgen(&cfg),
        Command::Serve { addr } => commands::serve(&cfg, &addr),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}

//! `mirl`: generate data, tokenize embeddings, train, evaluate and inspect
//! multi-intention IRL models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mirl_core::em::{
    e_step, verify_decomposition, verify_posterior_factorization, EmState, RewardSet,
};
use mirl_core::env::FrustrationGridworld;
use mirl_core::eval::{
    cross_validate, estimate_transitions, export_maps, segment, train_run, Checkpoint, GroundTruth,
    RunConfig,
};
use mirl_core::gate::{gradient_check, min_output_gap, Architecture, GatingNetwork, Penalties};
use mirl_core::tokenizer::{self, KMeansOptions};
use mirl_core::{TabularMdp, Trajectory, TrajectoryDataset};

#[derive(Debug, Parser)]
#[command(name = "mirl", version, about = "Multi-intention inverse reinforcement learning")]
struct Cli {
    /// TOML run configuration. Keys not given fall back to its profile.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Profile used when no --config is given.
    #[arg(long, global = true, default_value = "gridworld")]
    profile: String,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: `paths.out` from the config, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample frustration-gridworld demonstrations.
    Generate {
        #[arg(long, default_value_t = 1024)]
        num: usize,
        /// Steps per trajectory (default: the environment's horizon).
        #[arg(long)]
        horizon: Option<usize>,
        /// Gridworld description as JSON (default: the 5x5 layout).
        #[arg(long, value_name = "PATH")]
        env: Option<PathBuf>,
    },
    /// Cluster state and action embeddings into tokens.
    Tokenize {
        #[arg(long, value_name = "PATH")]
        states: PathBuf,
        #[arg(long, value_name = "PATH")]
        actions: PathBuf,
        /// Whitespace-separated trajectory lengths (default: one trajectory).
        #[arg(long, value_name = "PATH")]
        lengths: Option<PathBuf>,
        #[arg(long, default_value_t = 2048)]
        num_states: usize,
        #[arg(long, default_value_t = 32)]
        num_actions: usize,
        #[arg(long, default_value_t = 300)]
        max_iters: usize,
    },
    /// Estimate a transition model from a token dataset.
    EstimateP {
        #[command(flatten)]
        data: DataArgs,
        /// Vocabulary sizes (default: the dataset header).
        #[arg(long)]
        num_states: Option<usize>,
        #[arg(long)]
        num_actions: Option<usize>,
    },
    /// Fit the model on a whole dataset and write a run directory.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: MdpArgs,
        /// Also write per-step responsibilities.
        #[arg(long)]
        responsibilities: bool,
    },
    /// Cross-validated held-out log-likelihood (and EVD for gridworld data).
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: MdpArgs,
    },
    /// Per-step intention posteriors and argmax labels from a checkpoint.
    Segment {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: MdpArgs,
    },
    /// Per-intention reward, value, greedy action and confidence tables.
    ExportMaps {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        model: MdpArgs,
    },
    /// Check the E-step and gate gradients against brute-force oracles.
    Verify,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Trajectory dataset (default: `paths.dataset` from the config).
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MdpArgs {
    /// Transition model (default: `paths.mdp`, else the default gridworld).
    #[arg(long, value_name = "PATH")]
    mdp: Option<PathBuf>,
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn dataset(&self, args: &DataArgs) -> Result<TrajectoryDataset> {
        let path = args
            .dataset
            .as_ref()
            .or(self.config.paths.dataset.as_ref())
            .context("no dataset given (use --dataset or paths.dataset)")?;
        TrajectoryDataset::load(path).with_context(|| format!("loading {}", path.display()))
    }

    /// The MDP and whether it is the built-in gridworld.
    fn mdp(&self, args: &MdpArgs) -> Result<(TabularMdp, bool)> {
        match args.mdp.as_ref().or(self.config.paths.mdp.as_ref()) {
            Some(p) => Ok((
                TabularMdp::load(p).with_context(|| format!("loading {}", p.display()))?,
                false,
            )),
            None => Ok((FrustrationGridworld::default().build_mdp()?, true)),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some errors already spell out their cause; print each text once.
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg += ": ";
                    }
                    msg += &cause;
                }
            }
            eprintln!("error: {msg}");
            let non_convergence = e
                .chain()
                .filter_map(|c| c.downcast_ref::<mirl_core::Error>())
                .any(mirl_core::Error::is_non_convergence);
            ExitCode::from(if non_convergence { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::profile(&cli.profile)?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx { config, out };

    match cli.command {
        Command::Generate { num, horizon, env } => generate(&ctx, num, horizon, env.as_deref()),
        Command::Tokenize {
            states,
            actions,
            lengths,
            num_states,
            num_actions,
            max_iters,
        } => tokenize(
            &ctx,
            &states,
            &actions,
            lengths.as_deref(),
            (num_states, num_actions),
            max_iters,
        ),
        Command::EstimateP {
            data,
            num_states,
            num_actions,
        } => {
            let d = ctx.dataset(&data)?;
            let mdp = estimate_transitions(
                &d,
                num_states.unwrap_or(d.num_states),
                num_actions.unwrap_or(d.num_actions),
                ctx.config.prior_strength,
                ctx.config.discount,
            )?;
            let path = ctx.out_dir()?.join("mdp.json");
            mdp.save_sparse(&path)?;
            println!(
                "estimated {}x{} transitions from {} steps -> {}",
                mdp.num_states(),
                mdp.num_actions(),
                d.total_steps(),
                path.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            model,
            responsibilities,
        } => {
            let d = ctx.dataset(&data)?;
            let (mdp, _) = ctx.mdp(&model)?;
            let (_, summary) = train_run(&ctx.config, &mdp, &d, ctx.out_dir()?, responsibilities)?;
            println!(
                "trained K = {} on {} trajectories: {} iterations, converged {}, train LL {:.5} per step -> {}",
                ctx.config.num_intentions,
                summary.num_trajectories,
                summary.iterations,
                summary.converged,
                summary.train_ll,
                ctx.out.display()
            );
            Ok(())
        }
        Command::Evaluate { data, model } => evaluate(&ctx, &data, &model),
        Command::Segment {
            checkpoint,
            data,
            model,
        } => {
            let d = ctx.dataset(&data)?;
            let (mdp, _) = ctx.mdp(&model)?;
            let state = load_checkpoint(&checkpoint, &mdp)?;
            let seg = segment(&state, &d)?;
            let path = ctx.out_dir()?.join("segmentation.json");
            write_json(&path, &seg)?;
            let total: usize = seg.switches.iter().sum();
            print!(
                "{} trajectories, {total} switches ({:.2} per trajectory)",
                seg.labels.len(),
                total as f64 / seg.labels.len().max(1) as f64
            );
            if let Some(acc) = seg.accuracy {
                print!(", accuracy {acc:.4}");
            }
            println!(" -> {}", path.display());
            Ok(())
        }
        Command::ExportMaps { checkpoint, model } => {
            let (mdp, _) = ctx.mdp(&model)?;
            let state = load_checkpoint(&checkpoint, &mdp)?;
            for path in export_maps(&state, ctx.out_dir()?.join("maps"))? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Verify => verify(&ctx),
    }
}

fn load_checkpoint(path: &Path, mdp: &TabularMdp) -> Result<EmState> {
    let cp = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cp.to_state(mdp)?)
}

fn generate(ctx: &Ctx, num: usize, horizon: Option<usize>, env: Option<&Path>) -> Result<()> {
    let g: FrustrationGridworld = match env {
        Some(p) => serde_json::from_str(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => FrustrationGridworld::default(),
    };
    g.validate()?;
    let data = g.generate(num, horizon.unwrap_or(g.horizon), ctx.config.seed)?;
    let dir = ctx.out_dir()?;
    data.save(dir.join("dataset.jsonl"))?;
    g.build_mdp()?.save_sparse(dir.join("mdp.json"))?;
    println!(
        "generated {} trajectories ({} steps) -> {}",
        data.len(),
        data.total_steps(),
        dir.join("dataset.jsonl").display()
    );
    Ok(())
}

fn read_lengths(path: &Path) -> Result<Vec<usize>> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .split_whitespace()
        .map(|w| w.parse().with_context(|| format!("bad length {w:?}")))
        .collect()
}

#[derive(Serialize)]
struct TokenizeReport<'a> {
    num_states: usize,
    num_actions: usize,
    state_inertia: f64,
    action_inertia: f64,
    stats: &'a tokenizer::DiscretizationStats,
}

fn tokenize(
    ctx: &Ctx,
    states: &Path,
    actions: &Path,
    lengths: Option<&Path>,
    (num_states, num_actions): (usize, usize),
    max_iters: usize,
) -> Result<()> {
    let xs = tokenizer::read_embeddings(states)?;
    let xa = tokenizer::read_embeddings(actions)?;
    if xs.rows() != xa.rows() {
        bail!(
            "{} state embeddings but {} action embeddings",
            xs.rows(),
            xa.rows()
        );
    }
    let lengths = match lengths {
        Some(p) => read_lengths(p)?,
        None => vec![xs.rows()],
    };
    let opts = KMeansOptions {
        max_iters,
        ..KMeansOptions::default()
    };
    let cs = tokenizer::fit(&xs, num_states, ctx.config.seed, &opts)?;
    let ca = tokenizer::fit(&xa, num_actions, ctx.config.seed.wrapping_add(1), &opts)?;
    let s_seqs = tokenizer::split_lengths(&tokenizer::assign(&cs, &xs)?, &lengths)?;
    let a_seqs = tokenizer::split_lengths(&tokenizer::assign(&ca, &xa)?, &lengths)?;
    let stats = tokenizer::discretization_stats(&s_seqs, num_states)?;

    let mut data = TrajectoryDataset::new(
        num_states,
        num_actions,
        s_seqs
            .into_iter()
            .zip(a_seqs)
            .map(|(s, a)| Trajectory::new(s, a))
            .collect(),
    );
    data.generator = "kmeans-tokenizer".into();
    data.seed = Some(ctx.config.seed);

    let dir = ctx.out_dir()?;
    data.save(dir.join("tokens.jsonl"))?;
    write_json(&dir.join("state_codebook.json"), &cs)?;
    write_json(&dir.join("action_codebook.json"), &ca)?;
    write_json(
        &dir.join("stats.json"),
        &TokenizeReport {
            num_states,
            num_actions,
            state_inertia: cs.inertia,
            action_inertia: ca.inertia,
            stats: &stats,
        },
    )?;
    let mut tsv = String::from("trajectory\tcoverage_pct_of_vocabulary\tavg_revisits\tsingleton_pct_of_visited\n");
    for (i, t) in stats.per_trajectory.iter().enumerate() {
        tsv += &format!(
            "{i}\t{}\t{}\t{}\n",
            t.coverage_pct, t.avg_revisits, t.singleton_pct
        );
    }
    std::fs::write(dir.join("stats.tsv"), tsv)?;

    println!("|S| = {num_states}, {} trajectories (mean ± std)", data.len());
    println!(
        "  coverage       {:.4} ± {:.4} % of the state vocabulary",
        stats.coverage_pct.mean, stats.coverage_pct.std
    );
    println!(
        "  avg revisits   {:.2} ± {:.2} occurrences per visited token",
        stats.avg_revisits.mean, stats.avg_revisits.std
    );
    println!(
        "  singletons     {:.1} ± {:.1} % of visited tokens",
        stats.singleton_pct.mean, stats.singleton_pct.std
    );
    Ok(())
}

fn evaluate(ctx: &Ctx, data: &DataArgs, model: &MdpArgs) -> Result<()> {
    let d = ctx.dataset(data)?;
    let (mdp, builtin) = ctx.mdp(model)?;
    // EVD needs the true rewards, which are known only for the built-in gridworld.
    let truth = if builtin && d.has_labels() && d.generator.starts_with("frustration-gridworld") {
        let g = FrustrationGridworld::default();
        Some(GroundTruth {
            rewards: g
                .expert_intentions(&mdp)?
                .into_iter()
                .map(|e| e.reward)
                .collect(),
            start_state: g.state_of((0, 0)),
        })
    } else {
        None
    };
    let report = cross_validate(&mdp, &d, &ctx.config, truth.as_ref())?;
    let path = ctx.out_dir()?.join("cv.json");
    write_json(&path, &report)?;
    for f in &report.folds {
        print!(
            "fold {}: train LL {:.5}, test LL {:.5}, {} iterations",
            f.fold, f.train_ll, f.test_ll, f.iterations
        );
        if let Some(evd) = &f.evd {
            let maes: Vec<String> = evd.iter().map(|e| format!("{:.3}", e.mae)).collect();
            print!(", EVD(MAE) per label [{}]", maes.join(", "));
        }
        println!();
    }
    println!(
        "K = {}: test LL {:.5} ± {:.5} per step -> {}",
        ctx.config.num_intentions,
        report.test_ll.mean,
        report.test_ll.std,
        path.display()
    );
    Ok(())
}

const DECOMPOSITION_TOL: f64 = 1e-10;
const FACTORIZATION_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-4;

fn verify(ctx: &Ctx) -> Result<()> {
    let g = FrustrationGridworld::default();
    let mdp = g.build_mdp()?;
    let seed = ctx.config.seed;
    let short = g.generate(6, 6, seed)?;
    let (mut decomp, mut factor, mut grad): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut checked = 0usize;
    let targets = [(4, 4), (0, 0), (4, 0)];

    for (i, traj) in short.trajectories.iter().enumerate() {
        let k = 1 + i % 3;
        decomp = decomp.max(verify_decomposition(&mdp, traj, k, 3, seed + i as u64)?);
    }
    let pen = Penalties {
        l1: ctx.config.lambda_l1,
        kl: ctx.config.lambda_kl,
    };
    for arch in [Architecture::Rnn, Architecture::Lstm] {
        for k in 2..=3 {
            let mut cfg = ctx.config.clone();
            cfg.architecture = arch;
            cfg.num_intentions = k;
            cfg.embed_dim = 4;
            cfg.hidden_dim = 4;
            let em = cfg.em_config();
            // Near-uniform policies make responsibilities track the gate and
            // the gradient vanish, so use sharp target rewards and a
            // non-trivial gate instead of the training initialization.
            let net = GatingNetwork::random(
                arch,
                em.gate_dims(mdp.num_states(), mdp.num_actions()),
                seed + k as u64,
                0.5,
            );
            let rewards = targets[..k].iter().map(|&c| g.target_reward(c)).collect();
            let state = EmState::from_parts(em, net, RewardSet::new(&mdp, rewards)?);
            for traj in &short.trajectories {
                factor = factor.max(verify_posterior_factorization(&state, traj)?);
            }
            let obs = state.observations(&short);
            let w = e_step(&state, &short)?.responsibilities;
            for (seq, w) in obs.iter().zip(w.iter()) {
                // The L1 term has kinks where consecutive outputs tie.
                if pen.l1 > 0.0 && min_output_gap(&state.net, seq)? < 1e-2 {
                    continue;
                }
                grad = grad.max(gradient_check(&state.net, seq, w, pen, 1e-3)?);
                checked += 1;
            }
        }
    }

    println!("objective decomposition   max gap {decomp:.3e} (tolerance {DECOMPOSITION_TOL:e})");
    println!("posterior factorization   max gap {factor:.3e} (tolerance {FACTORIZATION_TOL:e})");
    println!("gate gradient             max relative error {grad:.3e} over {checked} sequences (tolerance {GRADIENT_TOL:e})");
    if decomp > DECOMPOSITION_TOL || factor > FACTORIZATION_TOL || grad > GRADIENT_TOL {
        bail!("verification failed");
    }
    Ok(())
}

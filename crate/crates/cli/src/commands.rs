//! Verb definitions and dispatch.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use dyadic_core::annotation::AnnotationStore;
use dyadic_core::codec::{DEFAULT_BINS, DEFAULT_TRUNC};
use dyadic_core::dataset::{self, synthesize, write_dataset};
use dyadic_core::dpo::train_dpo;
use dyadic_core::face::{export_playback, PlaybackMode, ShapeCoeffs};
use dyadic_core::pipeline::{self as pl, AblationInputs, RunLayout};
use dyadic_core::policy::SamplingConfig;
use dyadic_core::preference::{
    append_ratings, read_jsonl, read_rating_log, write_jsonl, CandidateGroup, PairMode, PreferencePair,
};
use dyadic_core::{BinSpec, Checkpoint, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "dyadic", version, about = "Listener facial-expression generation pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ranked,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/pool/test splits into the data directory.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-dimension bin edges on the train split.
    FitBins {
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_TRUNC)]
        trunc: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised training on the train split.
    TrainSft {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample candidate groups for the pool split.
    SampleCandidates {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Serve the annotation API over the candidate groups.
    ServeAnnotation {
        /// Overrides the port from the environment.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Rate every unrated candidate group with the synthetic rater.
    OracleRate,
    /// Build the preference dataset from the rating log.
    BuildPrefs {
        #[arg(long, value_enum, default_value_t = ModeArg::Ranked)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Preference training starting from the supervised checkpoint.
    TrainDpo {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint against a split.
    Evaluate {
        /// Checkpoint file, `.ckpt` may be omitted.
        #[arg(long)]
        pred: PathBuf,
        /// Split file, `.jsonl` may be omitted.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a playback file for one clip, sampled from a checkpoint or from the recorded track.
    Render {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the text playback format instead of binary.
        #[arg(long)]
        text: bool,
    },
    /// Train and compare the four ablation variants.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    if p.exists() || p.extension().is_some() {
        p.to_path_buf()
    } else {
        p.with_extension(ext)
    }
}

fn train_split(cfg: &PipelineConfig) -> anyhow::Result<Vec<dataset::LoadedClip>> {
    cfg.check_paths(true)?;
    Ok(pl::load_clips(cfg, &dataset::split_paths(&cfg.paths.data_dir)[0])?)
}

fn split(cfg: &PipelineConfig, i: usize) -> anyhow::Result<Vec<dataset::LoadedClip>> {
    cfg.check_paths(true)?;
    Ok(pl::load_clips(cfg, &dataset::split_paths(&cfg.paths.data_dir)[i])?)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let layout = RunLayout::new(&cfg.paths.run_dir);
    match cli.command {
        Command::SynthData { out } => {
            let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let data = synthesize(&cfg.synth)?;
            write_dataset(&dir, &data)?;
            println!(
                "wrote {} train, {} pool, {} test clips to {}",
                data.train.len(),
                data.pool.len(),
                data.test.len(),
                dir.display()
            );
        }
        Command::FitBins { bins, trunc, out } => {
            cfg.codec.bins = bins;
            cfg.codec.trunc = trunc;
            cfg.validate()?;
            let spec = pl::fit_bin_spec(&cfg, &train_split(&cfg)?)?;
            let out = out.unwrap_or_else(|| layout.bins());
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, spec.to_json())?;
            println!("wrote {} ({} bins, hash {})", out.display(), spec.bin_count, spec.hash());
        }
        Command::TrainSft { steps } => {
            if let Some(s) = steps {
                cfg.sft.steps = s;
            }
            cfg.validate()?;
            let train = train_split(&cfg)?;
            let spec = if layout.bins().exists() {
                BinSpec::from_json(&fs::read_to_string(layout.bins())?)?
            } else {
                let spec = pl::fit_bin_spec(&cfg, &train)?;
                fs::create_dir_all(&layout.dir)?;
                fs::write(layout.bins(), spec.to_json())?;
                spec
            };
            if cfg.sft.checkpoint_dir.is_none() && cfg.sft.checkpoint_every.is_some() {
                cfg.sft.checkpoint_dir = Some(layout.dir.clone());
            }
            let mut log = Vec::new();
            let result = pl::run_sft_with_bins(&cfg, &train, spec, |l| {
                if l.step % 50 == 0 {
                    log::info!("sft step {} loss {:.4}", l.step, l.total);
                }
                log.push(l.clone());
            });
            write_jsonl(layout.sft_log(), &log)?;
            let (ck, _) = result?;
            ck.save(layout.sft())?;
            println!("wrote {} (step {})", layout.sft().display(), ck.step);
        }
        Command::SampleCandidates { ckpt } => {
            let ck = Checkpoint::load(ckpt.unwrap_or_else(|| layout.sft()))?;
            let playback = cfg.candidates.render.then(|| layout.playback());
            let groups = pl::sample_candidate_groups(&cfg, &ck, &split(&cfg, 1)?, playback.as_deref())?;
            write_jsonl(layout.groups(), &groups)?;
            println!("wrote {} groups to {}", groups.len(), layout.groups().display());
        }
        Command::ServeAnnotation { port } => {
            let groups: Vec<CandidateGroup> = read_jsonl(layout.groups())?;
            let mut store = AnnotationStore::open(groups, cfg.rating_log_path(), cfg.annotation.blind_seed, cfg.annotation.min_raters)?
                .with_playback_dir(layout.playback());
            if layout.prefs().exists() {
                let pairs: Vec<PreferencePair> = read_jsonl(layout.prefs())?;
                store.mark_paired(pairs.iter().map(|p| p.group_id.as_str()));
            }
            let port = match port {
                Some(p) => p,
                None => crate::service::port_from_env()?,
            };
            tokio::runtime::Runtime::new()?.block_on(crate::service::serve(store, port))?;
        }
        Command::OracleRate => {
            let groups: Vec<CandidateGroup> = read_jsonl(layout.groups())?;
            let ck = Checkpoint::load(layout.sft())?;
            let log_path = cfg.rating_log_path();
            let est = pl::affect(&cfg);
            let rater = dyadic_core::preference::OracleRater::new(&est).rater_id;
            let done: BTreeSet<String> = read_rating_log(&log_path)?
                .into_iter()
                .filter(|r| r.rater_id == rater)
                .map(|r| r.group_id)
                .collect();
            let todo: Vec<CandidateGroup> = groups.into_iter().filter(|g| !done.contains(&g.group_id)).collect();
            let records = pl::oracle_rate_groups(&ck.bin_spec, &todo, &split(&cfg, 1)?, &est)?;
            append_ratings(&log_path, &records)?;
            println!("appended {} ratings for {} groups to {}", records.len(), todo.len(), log_path.display());
        }
        Command::BuildPrefs { mode, seed } => {
            let mut groups: Vec<CandidateGroup> = read_jsonl(layout.groups())?;
            pl::apply_ratings(&mut groups, &read_rating_log(cfg.rating_log_path())?, cfg.annotation.min_raters)?;
            let mode = match mode {
                ModeArg::Ranked => PairMode::Ranked,
                ModeArg::Random => PairMode::RandomPrefer { seed },
            };
            let (pairs, summary) = pl::build_prefs(&groups, &cfg.weights, mode)?;
            write_jsonl(layout.prefs(), &pairs)?;
            pl::write_json(layout.prefs_summary(), &summary)?;
            print_json(&summary)?;
        }
        Command::TrainDpo { ckpt, prefs, steps } => {
            if let Some(s) = steps {
                cfg.dpo.steps = s;
            }
            cfg.validate()?;
            let sft = Checkpoint::load(ckpt.unwrap_or_else(|| layout.sft()))?;
            let pairs: Vec<PreferencePair> = read_jsonl(prefs.unwrap_or_else(|| layout.prefs()))?;
            let data = pl::dpo_examples(&sft, &pairs, &split(&cfg, 1)?)?;
            if cfg.dpo.checkpoint_dir.is_none() && cfg.dpo.checkpoint_every.is_some() {
                cfg.dpo.checkpoint_dir = Some(layout.dir.clone());
            }
            let mut log = Vec::new();
            let result = train_dpo(sft, &data, &cfg.dpo, |l| {
                if l.step % 50 == 0 {
                    log::info!("dpo step {} loss {:.4} margin {:.3}", l.step, l.loss, l.mean_margin);
                }
                log.push(l.clone());
            });
            write_jsonl(layout.dpo_log(), &log)?;
            let (ck, _) = result?;
            ck.save(layout.dpo())?;
            println!("wrote {} (step {})", layout.dpo().display(), ck.step);
        }
        Command::Evaluate { pred, gt, out } => {
            let pred = with_ext(&pred, "ckpt");
            let gt = with_ext(&gt, "jsonl");
            let ck = Checkpoint::load(&pred)?;
            let clips = pl::load_clips(&cfg, &gt)?;
            let name = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = pl::evaluate_checkpoint(&cfg, &ck, &clips, &name(&gt), &name(&pred))?;
            let out = out.unwrap_or_else(|| layout.eval(&name(&pred)));
            pl::write_json(&out, &report)?;
            print_json(&report)?;
        }
        Command::Render { split, clip, ckpt, out, text } => {
            let clips = pl::load_clips(&cfg, &with_ext(&split, "jsonl"))?;
            let c = clips
                .iter()
                .find(|c| c.record.clip_id == clip)
                .with_context(|| format!("clip {clip} not in {}", split.display()))?;
            let actions = match ckpt {
                Some(p) => {
                    let ck = Checkpoint::load(with_ext(&p, "ckpt"))?;
                    let ctx = pl::make_context(&ck, c)?;
                    let sc = SamplingConfig {
                        temperature: cfg.eval.temperature,
                        seed: cfg.eval.seed,
                        ..SamplingConfig::default()
                    };
                    ck.bin_spec.decode_sequence(&ck.params.sample_actions(&ctx, c.record.frames, &sc)?)?
                }
                None => c.record.actions()?,
            };
            let basis = pl::face_basis(&cfg)?;
            let seq = basis.render_sequence(&ShapeCoeffs(c.record.shape.clone()), &actions, c.record.fps)?;
            export_playback(&seq, &out, if text { PlaybackMode::Text } else { PlaybackMode::Binary })?;
            println!("wrote {} ({} frames)", out.display(), actions.len());
        }
        Command::Ablate { out } => {
            let sft = Checkpoint::load(layout.sft())?;
            let mut groups: Vec<CandidateGroup> = read_jsonl(layout.groups())?;
            pl::apply_ratings(&mut groups, &read_rating_log(cfg.rating_log_path())?, cfg.annotation.min_raters)?;
            let (pool, test) = (split(&cfg, 1)?, split(&cfg, 2)?);
            let rows = pl::ablate(
                &cfg,
                &AblationInputs {
                    sft: &sft,
                    rated_groups: &groups,
                    pool: &pool,
                    test: &test,
                },
                |stage| log::info!("ablate: {stage}"),
            )?;
            let out = out.unwrap_or_else(|| layout.ablation());
            pl::write_json(&out, &rows)?;
            println!("{:<14} {:>8} {:>8} {:>9} {:>9} {:>8} {:>10} {:>8}", "variant", "L2", "FD", "Var", "Div", "P-FD", "Affect", "WinRate");
            for r in &rows {
                let m = &r.report;
                println!(
                    "{:<14} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>8.4} {:>10.3} {:>8.3}",
                    r.variant, m.l2, m.fd, m.variation, m.diversity, m.p_fd, m.l2_affect_x100, r.win_rate_vs_sft.rate
                );
            }
        }
    }
    Ok(())
}

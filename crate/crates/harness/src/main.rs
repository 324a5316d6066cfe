use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trady_core::analysis::{paired_t_test, spearman_matrix, t_test_matrix, TestResult, TwoSample};
use trady_core::metrics::{cumulative_rgn_curve, CurvePoint, LayerRgnProfile};
use trady_core::selection::{Mode, StrategyKind};
use trady_harness::data::export_idx;
use trady_harness::experiment::{load_data, profile_layers, starting_point, RunRecord, TopologyField};
use trady_harness::output::{
    read_metrics_csv, read_record, render_svg_curves, render_svg_matrix, write_json, write_matrix_csv, write_text, Series,
};
use trady_harness::sweep::{jobs_for, run_sweep};
use trady_harness::{Budget, DataSource, ExperimentConfig};

/// Budgeted channel-sparse fine-tuning experiments.
#[derive(Parser)]
#[command(name = "trady", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the configured synthetic task as IDX files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train every channel from scratch and save the weights.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Budgeted fine-tuning under a channel-selection strategy.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Budget in memory slots, overriding the config.
        #[arg(long)]
        budget: Option<usize>,
        /// full_random, topk_random, det_rgn, det_raw_norm or threshold.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Layer RGN profile and cumulative curve of the starting weights.
    ProfileLayers {
        #[command(flatten)]
        common: Common,
    },
    /// Spearman and t-test matrices over run records.
    Analyze {
        /// `record.json` files written by pretrain or finetune.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Two strategy names whose final accuracies are compared with a one-sided paired t-test.
        #[arg(long, num_args = 2, value_names = ["BETTER", "OTHER"])]
        compare: Option<Vec<String>>,
        #[arg(long, value_enum, default_value_t = VariantArg::Student)]
        variant: VariantArg,
    },
    /// Test-accuracy curves of several metrics CSVs as one SVG.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Student,
    Welch,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

fn parse_strategy(name: &str, current: StrategyKind) -> Result<StrategyKind> {
    Ok(match name {
        "full_random" => StrategyKind::FullRandom,
        "topk_random" => StrategyKind::TopKRandom,
        "det_rgn" => StrategyKind::DetRgn,
        "det_raw_norm" => StrategyKind::DetRawNorm,
        "threshold" => match current {
            k @ StrategyKind::Threshold { .. } => k,
            _ => bail!("the threshold strategy needs eps and metric in the config file"),
        },
        other => bail!("unknown strategy {other:?}"),
    })
}

fn run(cfg: &ExperimentConfig, pretrain: bool, out: &Path) -> Result<()> {
    let jobs = jobs_for(cfg, pretrain, Some(out));
    let mut failed = 0;
    for (job, res) in jobs.iter().zip(run_sweep(&jobs)) {
        match res {
            Ok(rec) => println!(
                "seed {}: final test accuracy {:.4}, {} checked backward passes -> {}",
                job.seed,
                rec.final_test_acc(),
                rec.checked_backwards,
                job.out.as_deref().unwrap_or(out).display()
            ),
            Err(e) => {
                eprintln!("seed {}: {e}", job.seed);
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} runs failed", jobs.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct ProfileOutput {
    profile: LayerRgnProfile,
    curve: Vec<CurvePoint>,
}

fn profile(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train, _) = load_data(cfg)?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    for &seed in &cfg.seeds {
        let (spec, params) = starting_point(cfg, &train, seed)?;
        let profile = profile_layers(&spec, &params, &train, cfg.batch_size)?;
        let curve = cumulative_rgn_curve(&profile.rgn)?;
        let path = out.join(format!("profile-seed-{seed}.json"));
        write_json(&ProfileOutput { profile, curve: curve.clone() }, &path)?;
        let svg = render_svg_curves(
            "cumulative layer RGN",
            "layers included",
            "fraction of total",
            &[Series {
                name: format!("seed {seed}"),
                points: curve.iter().map(|p| (p.k as f64, p.fraction)).collect(),
            }],
        );
        write_text(&out.join(format!("profile-seed-{seed}.svg")), &svg)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct Comparison {
    better: String,
    other: String,
    pairs: Vec<String>,
    better_mean: f64,
    other_mean: f64,
    test: TestResult,
}

fn analyze(paths: &[PathBuf], out: &Path, compare: Option<&[String]>, variant: TwoSample) -> Result<()> {
    let records: Vec<RunRecord> = paths.iter().map(|p| read_record(p)).collect::<Result<_, _>>()?;
    std::fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let labels: Vec<String> = records
        .iter()
        .map(|r| format!("{}/{}/s{}", r.label, r.strategy, r.seed))
        .collect();
    for (name, field) in [
        ("layer_raw", TopologyField::LayerRaw),
        ("layer_rgn", TopologyField::LayerRgn),
        ("channel_raw", TopologyField::ChannelRaw),
    ] {
        if records.len() < 2 {
            break;
        }
        let runs: Vec<_> = records.iter().zip(&labels).map(|(r, l)| r.topology(field, l.clone())).collect();
        let rho = spearman_matrix(&runs)?;
        write_matrix_csv(&labels, &rho, &out.join(format!("spearman_{name}.csv")))?;
        write_text(
            &out.join(format!("spearman_{name}.svg")),
            &render_svg_matrix(&format!("Spearman, {name}"), &labels, &rho, -1.0, 1.0),
        )?;
        let p = t_test_matrix(&runs, variant)?;
        write_matrix_csv(&labels, &p, &out.join(format!("ttest_{name}.csv")))?;
    }
    if let Some([better, other]) = compare {
        let key = |r: &RunRecord| (r.label.clone(), r.seed, r.budget);
        let mut pairs = Vec::new();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for x in records.iter().filter(|r| &r.strategy == better) {
            if let Some(y) = records.iter().find(|r| &r.strategy == other && key(r) == key(x)) {
                pairs.push(format!("{}/s{}", x.label, x.seed));
                a.push(x.final_test_acc());
                b.push(y.final_test_acc());
            }
        }
        let test = paired_t_test(&a, &b)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let cmp = Comparison {
            better: better.clone(),
            other: other.clone(),
            better_mean: mean(&a),
            other_mean: mean(&b),
            pairs,
            test,
        };
        println!(
            "{better} vs {other}: t = {:.4}, df = {}, one-sided p = {:.4e}",
            cmp.test.statistic, cmp.test.degrees_of_freedom, cmp.test.p_value
        );
        write_json(&cmp, &out.join("comparison.json"))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn report(paths: &[PathBuf], out: &Path) -> Result<()> {
    let series = paths
        .iter()
        .map(|p| {
            let rows = read_metrics_csv(p)?;
            Ok(Series {
                name: p.parent().and_then(|d| d.file_name()).unwrap_or(p.as_os_str()).to_string_lossy().into_owned(),
                points: rows.iter().map(|r| (r.epoch as f64, r.test_acc)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_text(out, &render_svg_curves("test accuracy", "epoch", "accuracy", &series))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let DataSource::Synthetic(task) = &cfg.data else {
                bail!("gen-data needs a synthetic data source");
            };
            let (train, test) = task.generate()?;
            let paths = export_idx(&train, &test, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&paths)?);
        }
        Command::Pretrain { common } => run(&common.load()?, true, &common.out)?,
        Command::Finetune {
            common,
            budget,
            strategy,
            mode,
        } => {
            let mut cfg = common.load()?;
            if let Some(b) = budget {
                cfg.budget = Budget::Slots(b);
            }
            if let Some(s) = strategy {
                cfg.strategy = parse_strategy(&s, cfg.strategy)?;
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Static => Mode::Static,
                    ModeArg::Dynamic => Mode::Dynamic,
                };
            }
            run(&cfg, false, &common.out)?;
        }
        Command::ProfileLayers { common } => profile(&common.load()?, &common.out)?,
        Command::Analyze {
            records,
            out,
            compare,
            variant,
        } => {
            let variant = match variant {
                VariantArg::Student => TwoSample::StudentPooled,
                VariantArg::Welch => TwoSample::Welch,
            };
            analyze(&records, &out, compare.as_deref(), variant)?;
        }
        Command::Report { metrics, out } => report(&metrics, &out)?,
    }
    Ok(())
}

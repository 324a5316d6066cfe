//! Runs independent experiments in parallel, each with its own output directory.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{run_experiment, run_pretrain, RunRecord};
use crate::output::write_run;

/// Worker count: `TRADY_THREADS` if set to a positive integer, else the number
/// of available cores.
pub fn thread_cap() -> usize {
    std::env::var("TRADY_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `jobs` on at most `thread_cap()` threads, keeping input order.
pub fn run_parallel<T, R, F>(jobs: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_cap()).build();
    match pool {
        Ok(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
        Err(_) => jobs.iter().map(f).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepJob {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub pretrain: bool,
    pub out: Option<PathBuf>,
}

/// One job per configured seed.
pub fn jobs_for(config: &ExperimentConfig, pretrain: bool, out: Option<&std::path::Path>) -> Vec<SweepJob> {
    config
        .seeds
        .iter()
        .map(|&seed| SweepJob {
            config: config.clone(),
            seed,
            pretrain,
            out: out.map(|o| {
                if config.seeds.len() == 1 {
                    o.to_path_buf()
                } else {
                    o.join(format!("seed-{seed}"))
                }
            }),
        })
        .collect()
}

pub fn run_sweep(jobs: &[SweepJob]) -> Vec<Result<RunRecord>> {
    run_parallel(jobs, |job| {
        let (record, params) = if job.pretrain {
            run_pretrain(&job.config, job.seed)?
        } else {
            run_experiment(&job.config, job.seed)?
        };
        if let Some(dir) = &job.out {
            write_run(dir, &record, &params)?;
        }
        Ok::<_, HarnessError>(record)
    })
}

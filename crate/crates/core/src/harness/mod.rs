//! Experiment orchestration: configs, the three policies, closed-loop
//! episodes and exported artifacts.
//!
//! Batches run episodes in parallel on a pool sized by `AIF_LOOP_THREADS`
//! (unset or `0` means one thread per core). Results always come back in
//! submission order, so exports do not depend on scheduling.

pub mod config;
pub mod episode;
pub mod export;
pub mod policy;

use rayon::prelude::*;

pub use config::{ExperimentConfig, Policy, Scenario};
pub use episode::{run_episode, run_episode_in, Aggregates, EpisodeLog, StepRecord};
pub use export::{export, export_all, summarize, Format, SummaryRow};
pub use policy::{policy_greedy_u, policy_prior_k};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "AIF_LOOP_THREADS";

/// Parses a thread-count setting; `None` and `0` select the default.
pub fn parse_threads(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(0),
        Some(v) => v.trim().parse::<usize>().map_err(|_| Error::Config {
            path: THREADS_ENV.into(),
            message: format!("expected a non-negative integer, got `{v}`"),
        }),
    }
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = parse_threads(std::env::var(THREADS_ENV).ok().as_deref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config { path: THREADS_ENV.into(), message: e.to_string() })
}

/// Runs every `(config, seed)` pair; output order matches input order.
pub fn run_batch(jobs: &[(ExperimentConfig, u64)]) -> Result<Vec<EpisodeLog>> {
    let pool = thread_pool()?;
    pool.install(|| jobs.par_iter().map(|(cfg, seed)| run_episode(cfg, *seed)).collect())
}

/// All seeds of one config.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<EpisodeLog>> {
    let jobs: Vec<_> = config.seeds.iter().map(|&s| (config.clone(), s)).collect();
    run_batch(&jobs)
}

/// The three policies on one config, policy-major then seed order.
pub fn compare(config: &ExperimentConfig) -> Result<Vec<EpisodeLog>> {
    let jobs: Vec<_> = Policy::ALL
        .iter()
        .flat_map(|&p| {
            let mut cfg = config.clone();
            cfg.policy = p;
            cfg.seeds.clone().into_iter().map(move |s| (cfg.clone(), s))
        })
        .collect();
    run_batch(&jobs)
}

/// Horizons `1..=h_max` for each policy, policy-major then horizon then seed.
pub fn sweep_horizon(config: &ExperimentConfig, h_max: usize, policies: &[Policy]) -> Result<Vec<EpisodeLog>> {
    if h_max == 0 {
        return Err(Error::Config { path: "planner.horizon".into(), message: "sweep needs H_max >= 1".into() });
    }
    let mut jobs = Vec::new();
    for &p in policies {
        for h in 1..=h_max {
            let mut cfg = config.clone();
            cfg.policy = p;
            cfg.planner.horizon = h;
            jobs.extend(cfg.seeds.iter().map(|&s| (cfg.clone(), s)));
        }
    }
    run_batch(&jobs)
}

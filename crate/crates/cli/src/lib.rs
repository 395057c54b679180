//! Configuration, orchestration and reporting for the experiments.

pub mod analyses;
pub mod campaign;
pub mod config;
pub mod run;
pub mod summarize;

/// Sizes the global worker pool from `--threads`, else `MANL_THREADS`.
pub fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("MANL_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| anyhow::anyhow!("MANL_THREADS must be a positive integer, got {v:?}"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            anyhow::bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

//! The five subcommands. Each returns `Ok` for exit status 0; errors map to
//! exit codes through [`CliError::exit_code`].

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use itn_core::checkpoint::Container;
use itn_core::gradcheck;
use itn_core::trainer::{discriminator_from_container, evaluate, save_state, state_from_container, synthesize, Trainer};

use crate::config::RunConfig;
use crate::datasets::Resolver;
use crate::error::CliError;
use crate::images::write_grid;
use crate::protocol::{self, Protocol};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.itn";
pub const SAMPLES_FILE: &str = "samples.png";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// `--out`, else `$ITN_OUT`.
pub fn out_dir(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.or_else(|| std::env::var_os("ITN_OUT").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set ITN_OUT".into()))
}

fn prepare(out: &Path, rc: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {}", out.display(), e)))?;
    std::fs::write(out.join(CONFIG_FILE), rc.to_text())?;
    Ok(())
}

pub fn train(config: Option<&Path>, out: Option<PathBuf>, overrides: &[String]) -> Result<(), CliError> {
    let rc = RunConfig::load(config, overrides)?;
    let out = out_dir(out)?;
    let resolver = Resolver::new(&rc.data_root);
    let train = resolver.resolve(&rc.train_data)?;
    let val = resolver.resolve(&rc.val_data)?;
    prepare(&out, &rc)?;

    let mut trainer = Trainer::new(rc.train.clone(), &train, &val)?;
    trainer.abort_checkpoint = Some(out.join(CHECKPOINT_FILE));
    let result = trainer.run().map(|_| ());
    std::fs::write(out.join(METRICS_FILE), trainer.metrics.to_csv())?;
    result?;

    save_state(&out.join(CHECKPOINT_FILE), &trainer.config, &trainer.state)?;
    let pool = &trainer.state.pool;
    if !pool.is_empty() && rc.sample_grid > 0 {
        let n = rc.sample_grid.min(pool.len());
        let rows: Vec<usize> = (pool.len() - n..pool.len()).collect();
        write_grid(&out.join(SAMPLES_FILE), &pool.gather(&rows)?.0)?;
    }
    if let Some(err) = trainer.metrics.last_val_error() {
        println!("trained {} iterations, validation error {:.6}", trainer.state.iteration, err);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Container, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Container::load(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {}", path.display(), e)))
}

/// Prints the error rate with six decimals.
pub fn eval(checkpoint: &Path, dataset: &str, data_root: &Path) -> Result<f64, CliError> {
    let c = load_checkpoint(checkpoint)?;
    let (config, disc) = discriminator_from_container(&c)?;
    let ds = Resolver::new(data_root).resolve(dataset)?;
    let err = evaluate(&disc, &ds, config.eval_chunk)?;
    println!("{:.6}", err);
    Ok(err)
}

pub fn sample(checkpoint: &Path, count: usize, out_path: &Path, seed: u64) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let c = load_checkpoint(checkpoint)?;
    let (config, state) = state_from_container(&c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = synthesize(&state, &config.sampler, count, &mut rng)?;
    let img = write_grid(out_path, &samples)?;
    println!("wrote {}×{} grid of {} samples to {}", img.width, img.height, count, out_path.display());
    Ok(())
}

pub fn gradcheck(seed: u64, corrupt: Option<&str>) -> Result<(), CliError> {
    let reports = gradcheck::run_all(seed, corrupt).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for r in &reports {
        writeln!(
            stdout,
            "{:<32} {:<4} worst_rel={:.3e} worst_abs={:.3e} coords={} {}",
            r.name,
            r.kind.as_str(),
            r.worst_rel,
            r.worst_abs,
            r.coords,
            if r.passed { "PASS" } else { "FAIL" }
        )?;
        if !r.passed {
            failed.push(r.name.to_string());
        }
    }
    if failed.is_empty() {
        writeln!(stdout, "all {} checks passed", reports.len())?;
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

pub fn reproduce(protocol: &str, config: Option<&Path>, out: Option<PathBuf>, overrides: &[String]) -> Result<bool, CliError> {
    let protocol: Protocol = protocol.parse()?;
    let rc = RunConfig::load(config, overrides)?;
    let out = out_dir(out)?;
    prepare(&out, &rc)?;
    let resolver = Resolver::new(&rc.data_root);
    let rows = protocol::reproduce(protocol, &rc, &resolver)?;
    std::fs::write(out.join(COMPARISON_FILE), protocol::rows_csv(&rows))?;
    let (line, ok) = protocol::verdict(protocol, &rows, &rc.t_u_values);
    if !ok {
        warn!("mean ordering does not hold");
    }
    info!("comparison written to {}", out.join(COMPARISON_FILE).display());
    println!("{}", line);
    Ok(ok)
}

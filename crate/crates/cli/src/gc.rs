use std::time::Duration;

use ckpt_core::storage::Storage;
use ckpt_core::training::{garbage_collect, sweep_incomplete, RetentionPolicy, StepCatalog, StepEntry};
use ckpt_core::Error;
use clap::Args;
use serde::Serialize;

use crate::{runtime, GlobalArgs, Outcome, EXIT_OK};

#[derive(Debug, Args)]
pub struct GcArgs {
    pub root: String,
    #[arg(long)]
    pub keep_last: Option<usize>,
    /// Also keep every step divisible by this.
    #[arg(long)]
    pub keep_period: Option<u64>,
    /// Remove temporary directories of failed saves and stale unfinalized steps.
    #[arg(long)]
    pub sweep_tmp: bool,
    /// Only sweep temporary directories at least this old.
    #[arg(long, default_value_t = 3600)]
    pub max_age_secs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GcReport {
    pub root: String,
    pub deleted_steps: Vec<u64>,
    pub swept: Vec<String>,
    pub remaining: Vec<StepEntry>,
}

pub fn run(g: &GlobalArgs, storage: &Storage, a: &GcArgs) -> Result<Outcome, Error> {
    if a.keep_last.is_none() && !a.sweep_tmp {
        return Err(Error::InvalidOption("gc needs --keep-last and/or --sweep-tmp".into()));
    }
    if a.keep_period.is_some() && a.keep_last.is_none() {
        return Err(Error::InvalidOption("--keep-period needs --keep-last".into()));
    }
    let rt = runtime(g, storage, g.processes.unwrap_or(1))?;
    let swept = if a.sweep_tmp { sweep_incomplete(&rt, &a.root, Duration::from_secs(a.max_age_secs))? } else { vec![] };
    let mut catalog = StepCatalog::scan(&rt, &a.root)?;
    let deleted_steps = match a.keep_last {
        Some(k) => garbage_collect(&rt, &mut catalog, &RetentionPolicy::new(k, a.keep_period)?)?,
        None => vec![],
    };
    let report = GcReport { root: catalog.root.clone(), deleted_steps, swept, remaining: catalog.steps };
    let mut text = String::new();
    for s in &report.swept {
        text += &format!("swept {s}\n");
    }
    for s in &report.deleted_steps {
        text += &format!("deleted step {s}\n");
    }
    let remaining: Vec<String> =
        report.remaining.iter().map(|e| if e.finalized { e.step.to_string() } else { format!("{} (unfinalized)", e.step) }).collect();
    text += &format!("remaining: {}\n", if remaining.is_empty() { "none".to_string() } else { remaining.join(", ") });
    Ok(Outcome::new(&report, text, EXIT_OK))
}

use std::collections::BTreeMap;

use ckpt_core::chunkstore::Layout;
use ckpt_core::load::{load_checkpointables, metadata, LoadMode, LoadOptions};
use ckpt_core::save::{save, SaveOptions};
use ckpt_core::sharding::{PartitionSpec, Sharding};
use ckpt_core::storage::{with_actor, Actor, Counters, Storage};
use ckpt_core::tree::{AbstractCheckpointable, LeafKind, DOCUMENT_HANDLER, TREE_HANDLER};
use ckpt_core::Error;
use clap::Args;
use serde::Serialize;

use crate::util::{parse_mesh, parse_partition, SubchunkTarget};
use crate::validate::validate_checkpoint;
use crate::{runtime, GlobalArgs, Outcome, EXIT_OK};

#[derive(Debug, Args)]
pub struct ReshardArgs {
    pub src: String,
    pub dst: String,
    /// Target mesh, e.g. `x=64,y=1`. Without it saved shardings are kept.
    #[arg(long)]
    pub mesh: Option<String>,
    /// Mesh axis holding model replicas.
    #[arg(long)]
    pub replica_axis: Option<String>,
    /// `<leaf path>=<spec>`, e.g. `params/w=x,_`; `*` matches every leaf. Repeatable.
    #[arg(long = "partitions")]
    pub partitions: Vec<String>,
    /// `per-leaf` or `aggregated`.
    #[arg(long, default_value = "per-leaf")]
    pub layout: Layout,
    /// Read-subchunk size target in bytes, or `off`.
    #[arg(long, default_value_t = SubchunkTarget::default())]
    pub subchunk_target_bytes: SubchunkTarget,
    #[arg(long)]
    pub replica_parallel: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReshardReport {
    pub src: String,
    pub dst: String,
    pub processes: usize,
    pub arrays: usize,
    pub load_io: Counters,
    pub save_io: Counters,
}

pub fn run(g: &GlobalArgs, storage: &Storage, a: &ReshardArgs) -> Result<Outcome, Error> {
    let meta = with_actor(Actor::Controller, || metadata(storage, &a.src))?;
    let processes = g.processes.unwrap_or(meta.global.process_count);
    let mesh = match &a.mesh {
        Some(m) => {
            let mesh = parse_mesh(m, processes)?;
            Some(match &a.replica_axis {
                Some(axis) => mesh.with_replica_axis(axis)?,
                None => mesh,
            })
        }
        None => None,
    };
    let rules: BTreeMap<String, PartitionSpec> = a.partitions.iter().map(|p| parse_partition(p)).collect::<Result<_, _>>()?;
    if !rules.is_empty() && mesh.is_none() {
        return Err(Error::InvalidOption("--partitions needs --mesh".into()));
    }

    let mut targets = BTreeMap::new();
    let mut arrays = 0;
    for c in &meta.global.checkpointables {
        let target = match c.handler_id.as_str() {
            TREE_HANDLER => {
                let saved = meta.abstract_tree(&c.name)?;
                let tree = saved.try_map_leaves(|path, leaf| {
                    let mut leaf = leaf.clone();
                    if leaf.kind != LeafKind::Array {
                        return Ok(leaf);
                    }
                    arrays += 1;
                    if let Some(mesh) = &mesh {
                        let shape = leaf.shape.clone().unwrap_or_default();
                        let rule = rules.get(&format!("{}/{path}", c.name)).or_else(|| rules.get(path)).or_else(|| rules.get("*"));
                        leaf.sharding = match rule {
                            Some(spec) => Some(Sharding::new(mesh.clone(), spec.clone(), shape)?),
                            None if leaf.sharding.is_some() => Some(Sharding::replicated(mesh.clone(), shape)),
                            None => None,
                        };
                    }
                    Ok(leaf)
                })?;
                AbstractCheckpointable::Tree(tree)
            }
            DOCUMENT_HANDLER => AbstractCheckpointable::Document,
            other => return Err(Error::UnknownHandler(other.to_string())),
        };
        targets.insert(c.name.clone(), target);
    }

    let rt = runtime(g, storage, processes)?;
    let c0 = storage.counters();
    let opts = LoadOptions { mode: LoadMode::Strict, ..LoadOptions::default() };
    let items = load_checkpointables(&rt, &meta.path, Some(&targets), &opts)?;
    let c1 = storage.counters();
    let save_opts = SaveOptions {
        layout: a.layout,
        subchunk_target_bytes: a.subchunk_target_bytes.0,
        replica_parallel: a.replica_parallel,
        ..SaveOptions::sync()
    };
    save(&rt, &a.dst, &items, &save_opts)?;
    let c2 = storage.counters();
    let check = validate_checkpoint(storage, &a.dst)?;
    if !check.ok {
        return Err(Error::Corruption(format!("resharded checkpoint failed validation: {}", check.problems.join("; "))));
    }
    let report = ReshardReport {
        src: meta.path.clone(),
        dst: a.dst.trim_end_matches('/').to_string(),
        processes,
        arrays,
        load_io: c1.since(&c0).total,
        save_io: c2.since(&c1).total,
    };
    let text = format!(
        "resharded {} -> {} ({} arrays, {} processes; read {} payload bytes, wrote {})\n",
        report.src, report.dst, report.arrays, report.processes, report.load_io.payload_bytes_read, report.save_io.payload_bytes_written
    );
    Ok(Outcome::new(&report, text, EXIT_OK))
}

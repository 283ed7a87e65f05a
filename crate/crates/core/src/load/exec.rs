use std::collections::{BTreeMap, BTreeSet};

use super::{LoadPlan, LoadReport, Source};
use crate::chunkstore::{read_range, MergedIndexDoc, ReadStats, MERGED_INDEX};
use crate::coordination::{Mode, ProcessCtx, Runtime};
use crate::error::{Error, Result};
use crate::sharding::{copy_box, Region};
use crate::storage::Storage;
use crate::tree::{cast_leaf, join, DenseArray, Leaf, ShardedTree, Tree};

/// Regions one process holds after its reads: (directive index, region, bytes).
type Held = Vec<(usize, Region, Vec<u8>)>;

struct ProcessOutput {
    held: Held,
    stats: Vec<(usize, ReadStats)>,
}

fn tag(i: usize, r: &Region) -> String {
    format!("{i}:{:?}:{:?}", r.offset, r.shape)
}

fn storage_reads(storage: &Storage, ckpt: &str, index: &MergedIndexDoc, plan: &LoadPlan, p: usize) -> Result<ProcessOutput> {
    let mut out = ProcessOutput { held: vec![], stats: vec![] };
    for (i, d) in plan.directives.iter().enumerate() {
        let Source::Array { key, reads, .. } = &d.source else { continue };
        let entry = index.arrays.get(key).ok_or_else(|| Error::Corruption(format!("merged index has no entry for leaf {key}")))?;
        for r in reads.iter().filter(|r| r.process == p && r.from.is_none()) {
            let (bytes, stats) = read_range(storage, ckpt, key, &r.region, entry)?;
            out.held.push((i, r.region.clone(), bytes));
            out.stats.push((i, stats));
        }
    }
    Ok(out)
}

/// Forwards held regions to processes that receive them, then collects this
/// process's incoming regions.
fn exchange(ctx: &ProcessCtx, plan: &LoadPlan, out: &mut ProcessOutput) -> Result<()> {
    let p = ctx.index();
    for (i, d) in plan.directives.iter().enumerate() {
        let Source::Array { reads, .. } = &d.source else { continue };
        for r in reads.iter().filter(|r| r.from == Some(p)) {
            let bytes = out
                .held
                .iter()
                .find(|(j, reg, _)| *j == i && *reg == r.region)
                .map(|(_, _, b)| b.clone())
                .ok_or_else(|| Error::Io(format!("process {p} lacks region {:?} it must forward", r.region)))?;
            ctx.send(r.process, &tag(i, &r.region), bytes)?;
        }
    }
    for (i, d) in plan.directives.iter().enumerate() {
        let Source::Array { reads, .. } = &d.source else { continue };
        for r in reads.iter().filter(|r| r.process == p) {
            if let Some(q) = r.from {
                let bytes = ctx.recv(q, &tag(i, &r.region))?;
                out.held.push((i, r.region.clone(), bytes));
            }
        }
    }
    Ok(())
}

pub(super) fn execute(runtime: &Runtime, ckpt: &str, plan: &LoadPlan) -> Result<(ShardedTree, LoadReport)> {
    let storage = runtime.storage();
    let index = runtime.as_coordinator(|| {
        let key = join(ckpt, MERGED_INDEX);
        MergedIndexDoc::parse(&key, &storage.get(&key)?)
    })?;
    let outputs: Vec<ProcessOutput> = match runtime.mode() {
        Mode::MultiController => runtime.run_all(|ctx| {
            ctx.schedule_point();
            let mut out = storage_reads(storage, ckpt, &index, plan, ctx.index())?;
            if plan.broadcast {
                exchange(ctx, plan, &mut out)?;
            }
            Ok(out)
        })?,
        Mode::SingleController => {
            if plan.broadcast {
                return Err(Error::WrongMode("broadcast loading needs multi-controller mode".into()));
            }
            let workers: Vec<usize> = (0..runtime.process_count()).collect();
            runtime.run_on_workers(&workers, |w| storage_reads(storage, ckpt, &index, plan, w))?
        }
    };
    assemble(plan, outputs)
}

/// Builds global values from every process's regions. Runs only after all
/// processes have finished.
fn assemble(plan: &LoadPlan, outputs: Vec<ProcessOutput>) -> Result<(ShardedTree, LoadReport)> {
    let mut report = LoadReport { directives: plan.directives.len(), ..LoadReport::default() };
    let mut by_directive: BTreeMap<usize, BTreeMap<Region, Vec<u8>>> = BTreeMap::new();
    for out in outputs {
        for (i, stats) in out.stats {
            report.per_leaf.entry(plan.directives[i].path.clone()).or_default().add(stats);
            report.total.add(stats);
        }
        for (i, region, bytes) in out.held {
            by_directive.entry(i).or_default().entry(region).or_insert(bytes);
        }
    }
    let mut leaves = Vec::with_capacity(plan.directives.len());
    let mut shardings = BTreeMap::new();
    for (i, d) in plan.directives.iter().enumerate() {
        let qualified = |e: Error| match e {
            Error::Cast { reason, .. } => Error::Cast { path: join(&plan.name, &d.path), reason },
            other => other,
        };
        let leaf = match &d.source {
            Source::Placeholder => {
                report.placeholders += 1;
                Leaf::Placeholder(d.target.clone())
            }
            Source::Inline(inline) => cast_leaf(&inline.to_leaf(&d.path)?, &d.target).map_err(qualified)?,
            Source::Array { key, dtype, global_shape, .. } => {
                let width = dtype.width();
                let total: usize = global_shape.iter().product();
                let mut buf = vec![0u8; total * width];
                let regions = by_directive.remove(&i).unwrap_or_default();
                let distinct: BTreeSet<&Region> = regions.keys().collect();
                let covered: usize = distinct.iter().map(|r| r.num_elements()).sum();
                if covered != total {
                    return Err(Error::Corruption(format!("{key}: assembled {covered} of {total} elements")));
                }
                for (region, bytes) in &regions {
                    copy_box(bytes, &region.shape, &vec![0; region.rank()], &mut buf, global_shape, &region.offset, &region.shape, width);
                }
                let array = DenseArray::from_bytes(global_shape.clone(), *dtype, buf)?;
                let leaf = cast_leaf(&Leaf::Array(array), &d.target).map_err(qualified)?;
                if let (Leaf::Array(_), Some(s)) = (&leaf, &d.target.sharding) {
                    shardings.insert(d.path.clone(), s.clone());
                }
                leaf
            }
        };
        leaves.push((d.path.clone(), leaf));
    }
    let tree = Tree::unflatten(&plan.target, leaves)?;
    Ok((ShardedTree { tree, shardings }, report))
}

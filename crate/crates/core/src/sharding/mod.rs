//! Device meshes and partitioning math.
//!
//! A [`Sharding`] places a global array on a [`Mesh`]: every array dimension is
//! either split across one mesh axis or replicated. Devices whose coordinates
//! differ only on axes the spec does not use hold the same range and are
//! numbered by `replica_ordinal`; ordinal 0 is the copy that gets written in
//! single-replica mode.

mod region;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use region::{copy_box, extract, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mesh {
    axes: Vec<(String, usize)>,
    devices: Vec<DeviceId>,
    processes: Vec<usize>,
    replica_axis: Option<String>,
}

impl Mesh {
    /// Devices `0..N` in row-major order, assigned to processes in contiguous
    /// blocks of `devices_per_process`.
    pub fn new(axes: Vec<(String, usize)>, devices_per_process: usize) -> Result<Self> {
        let n: usize = axes.iter().map(|(_, s)| *s).product();
        if devices_per_process == 0 || !n.is_multiple_of(devices_per_process) {
            return Err(Error::InvalidMesh(format!("{n} devices cannot be split into blocks of {devices_per_process}")));
        }
        let devices = (0..n as u32).map(DeviceId).collect();
        let processes = (0..n).map(|i| i / devices_per_process).collect();
        Self::with_layout(axes, devices, processes)
    }

    pub fn with_layout(axes: Vec<(String, usize)>, devices: Vec<DeviceId>, processes: Vec<usize>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for (name, size) in &axes {
            if *size == 0 {
                return Err(Error::InvalidMesh(format!("axis {name} has size 0")));
            }
            if !names.insert(name.as_str()) {
                return Err(Error::InvalidMesh(format!("duplicate axis {name}")));
            }
        }
        let n: usize = axes.iter().map(|(_, s)| *s).product();
        if devices.len() != n || processes.len() != n {
            return Err(Error::InvalidMesh(format!("{} devices / {} process entries for a mesh of {n}", devices.len(), processes.len())));
        }
        if devices.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::InvalidMesh("device ids are not unique".into()));
        }
        let used: BTreeSet<usize> = processes.iter().copied().collect();
        if used.iter().copied().ne(0..used.len()) {
            return Err(Error::InvalidMesh(format!("process indices {used:?} are not contiguous from 0")));
        }
        Ok(Self { axes, devices, processes, replica_axis: None })
    }

    pub fn with_replica_axis(mut self, axis: &str) -> Result<Self> {
        self.axis_index(axis)?;
        self.replica_axis = Some(axis.to_string());
        Ok(self)
    }

    pub fn axes(&self) -> &[(String, usize)] {
        &self.axes
    }

    pub fn devices(&self) -> &[DeviceId] {
        &self.devices
    }

    pub fn replica_axis(&self) -> Option<&str> {
        self.replica_axis.as_deref()
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn process_count(&self) -> usize {
        self.processes.iter().max().map_or(0, |m| m + 1)
    }

    pub fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes.iter().position(|(n, _)| n == name).ok_or_else(|| Error::InvalidMesh(format!("unknown mesh axis {name:?}")))
    }

    pub fn axis_size(&self, name: &str) -> Result<usize> {
        Ok(self.axes[self.axis_index(name)?].1)
    }

    /// Process owning the device at mesh position `pos`.
    pub fn process_at(&self, pos: usize) -> usize {
        self.processes[pos]
    }

    pub fn process_of(&self, device: DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| *d == device).map(|pos| self.processes[pos])
    }

    /// Mesh coordinates of the device at position `pos` (row-major).
    pub fn coords(&self, mut pos: usize) -> Vec<usize> {
        let mut c = vec![0; self.axes.len()];
        for (i, (_, size)) in self.axes.iter().enumerate().rev() {
            c[i] = pos % size;
            pos /= size;
        }
        c
    }

    /// Device positions grouped by replica-axis coordinate; group 0 is the primary.
    pub fn replica_groups(&self) -> Result<Vec<ReplicaGroup>> {
        let axis = self.replica_axis.as_deref().ok_or_else(|| Error::InvalidMesh("mesh has no replica axis".into()))?;
        let a = self.axis_index(axis)?;
        let mut groups: Vec<ReplicaGroup> = (0..self.axes[a].1).map(|ordinal| ReplicaGroup { ordinal, devices: vec![] }).collect();
        for pos in 0..self.devices.len() {
            groups[self.coords(pos)[a]].devices.push(self.devices[pos]);
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaGroup {
    pub ordinal: usize,
    pub devices: Vec<DeviceId>,
}

/// Per array dimension: the mesh axis it is split over, or `None` for replicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionSpec(pub Vec<Option<String>>);

impl PartitionSpec {
    pub fn new(dims: Vec<Option<String>>) -> Self {
        Self(dims)
    }

    pub fn replicated(rank: usize) -> Self {
        Self(vec![None; rank])
    }

    pub fn dims(&self) -> &[Option<String>] {
        &self.0
    }
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|d| d.as_deref().unwrap_or("_")).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sharding {
    mesh: Mesh,
    spec: PartitionSpec,
    global_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shard {
    pub device: DeviceId,
    pub region: Region,
    pub replica_ordinal: usize,
}

impl Sharding {
    pub fn new(mesh: Mesh, spec: PartitionSpec, global_shape: Vec<usize>) -> Result<Self> {
        if spec.0.len() != global_shape.len() {
            return Err(Error::InvalidSharding(format!(
                "spec {spec} has {} entries for an array of rank {}",
                spec.0.len(),
                global_shape.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (dim, axis) in spec.0.iter().enumerate() {
            let Some(axis) = axis else { continue };
            if !seen.insert(axis.clone()) {
                return Err(Error::InvalidSharding(format!("mesh axis {axis} used twice in {spec}")));
            }
            let parts = mesh.axis_size(axis)?;
            if !global_shape[dim].is_multiple_of(parts) {
                return Err(Error::Indivisible { dim, extent: global_shape[dim], parts });
            }
        }
        Ok(Self { mesh, spec, global_shape })
    }

    pub fn replicated(mesh: Mesh, global_shape: Vec<usize>) -> Self {
        let spec = PartitionSpec::replicated(global_shape.len());
        Self { mesh, spec, global_shape }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn global_shape(&self) -> &[usize] {
        &self.global_shape
    }

    pub fn shard_shape(&self) -> Vec<usize> {
        self.spec
            .0
            .iter()
            .zip(&self.global_shape)
            .map(|(axis, &extent)| match axis {
                Some(a) => extent / self.mesh.axis_size(a).expect("validated"),
                None => extent,
            })
            .collect()
    }

    /// Number of devices holding each distinct shard range.
    pub fn replica_count(&self) -> usize {
        let used: BTreeSet<&str> = self.spec.0.iter().flatten().map(String::as_str).collect();
        self.mesh.axes.iter().filter(|(n, _)| !used.contains(n.as_str())).map(|(_, s)| s).product()
    }

    /// One shard per device, in mesh order.
    pub fn shards(&self) -> Vec<Shard> {
        let shard_shape = self.shard_shape();
        let axis_of_dim: Vec<Option<usize>> =
            self.spec.0.iter().map(|a| a.as_ref().map(|a| self.mesh.axis_index(a).expect("validated"))).collect();
        let used: BTreeSet<usize> = axis_of_dim.iter().flatten().copied().collect();
        (0..self.mesh.devices.len())
            .map(|pos| {
                let coords = self.mesh.coords(pos);
                let offset = axis_of_dim.iter().zip(&shard_shape).map(|(axis, &ext)| axis.map_or(0, |a| coords[a] * ext)).collect();
                let mut replica_ordinal = 0;
                for (a, (_, size)) in self.mesh.axes.iter().enumerate() {
                    if !used.contains(&a) {
                        replica_ordinal = replica_ordinal * size + coords[a];
                    }
                }
                Shard { device: self.mesh.devices[pos], region: Region::new(offset, shard_shape.clone()), replica_ordinal }
            })
            .collect()
    }

    /// Shards on process `p`'s devices, paired with their mesh positions.
    pub fn shards_for_process(&self, p: usize) -> Vec<(usize, Shard)> {
        self.shards().into_iter().enumerate().filter(|(pos, _)| self.mesh.processes[*pos] == p).collect()
    }

    /// Replica-0 shards on `p`'s devices. Across all processes these cover every
    /// global index exactly once.
    pub fn unique_shards_for_process(&self, p: usize) -> Vec<Shard> {
        self.shards_for_process(p).into_iter().map(|(_, s)| s).filter(|s| s.replica_ordinal == 0).collect()
    }

    pub fn descriptor(&self) -> ShardingDescriptor {
        ShardingDescriptor {
            axes: self.mesh.axes.clone(),
            replica_axis: self.mesh.replica_axis.clone(),
            devices: self.mesh.devices.clone(),
            processes: self.mesh.processes.clone(),
            spec: self.spec.clone(),
            global_shape: self.global_shape.clone(),
        }
    }

    pub fn from_descriptor(d: &ShardingDescriptor) -> Result<Self> {
        let mut mesh = Mesh::with_layout(d.axes.clone(), d.devices.clone(), d.processes.clone())?;
        if let Some(axis) = &d.replica_axis {
            mesh = mesh.with_replica_axis(axis)?;
        }
        Self::new(mesh, d.spec.clone(), d.global_shape.clone())
    }
}

/// Free-function form of [`Sharding::shards`].
pub fn shards_of(s: &Sharding) -> Vec<Shard> {
    s.shards()
}

pub fn unique_shards_for_process(s: &Sharding, p: usize) -> Vec<Shard> {
    s.unique_shards_for_process(p)
}

pub fn replica_groups(mesh: &Mesh) -> Result<Vec<ReplicaGroup>> {
    mesh.replica_groups()
}

/// Dimension replica-parallel saves split along: the largest extent, lowest index on ties.
pub fn segment_dim(shape: &[usize]) -> Option<usize> {
    (0..shape.len()).rev().max_by_key(|&d| shape[d])
}

/// Segment `ordinal` of `n` when `region` is split along its largest dimension
/// into pieces of `ceil(extent / n)`, the last one short. May be empty.
pub fn replica_segments(region: &Region, n: usize, ordinal: usize) -> Region {
    assert!(n >= 1 && ordinal < n, "ordinal {ordinal} out of range for {n} segments");
    let Some(d) = segment_dim(&region.shape) else {
        // rank 0: the only element goes to segment 0
        return if ordinal == 0 { region.clone() } else { Region::new(vec![], vec![]) };
    };
    let extent = region.shape[d];
    let seg = extent.div_ceil(n);
    let start = (ordinal * seg).min(extent);
    let end = ((ordinal + 1) * seg).min(extent);
    let mut out = region.clone();
    out.offset[d] += start;
    out.shape[d] = end - start;
    out
}

/// Serialized sharding, recorded per array in process metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingDescriptor {
    pub axes: Vec<(String, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica_axis: Option<String>,
    pub devices: Vec<DeviceId>,
    pub processes: Vec<usize>,
    pub spec: PartitionSpec,
    pub global_shape: Vec<usize>,
}

impl ShardingDescriptor {
    fn layout(&self) -> BTreeMap<DeviceId, usize> {
        self.devices.iter().copied().zip(self.processes.iter().copied()).collect()
    }
}

/// Succeeds iff `current` has the same devices on the same processes as the saved layout.
pub fn validate_topology(saved: &ShardingDescriptor, current: &Mesh) -> Result<()> {
    if saved.devices.len() != current.device_count() {
        return Err(Error::TopologyMismatch(format!(
            "saved on {} devices, current mesh has {}",
            saved.devices.len(),
            current.device_count()
        )));
    }
    let now: BTreeMap<DeviceId, usize> = current.devices.iter().copied().zip(current.processes.iter().copied()).collect();
    if saved.layout() != now {
        return Err(Error::TopologyMismatch("device-to-process layout differs".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes(spec: &[(&str, usize)]) -> Vec<(String, usize)> {
        spec.iter().map(|(n, s)| (n.to_string(), *s)).collect()
    }

    fn spec(dims: &[Option<&str>]) -> PartitionSpec {
        PartitionSpec::new(dims.iter().map(|d| d.map(str::to_string)).collect())
    }

    #[test]
    fn grid_16_by_4() {
        let mesh = Mesh::new(axes(&[("x", 16), ("y", 4)]), 8).unwrap();
        let s = Sharding::new(mesh, spec(&[Some("x"), Some("y")]), vec![256, 64]).unwrap();
        let shards = s.shards();
        assert_eq!(shards.len(), 64);
        assert!(shards.iter().all(|sh| sh.region.shape == vec![16, 16] && sh.replica_ordinal == 0));
        for p in 0..8 {
            assert_eq!(s.unique_shards_for_process(p).len(), 8);
        }
    }

    #[test]
    fn full_replication() {
        let mesh = Mesh::new(axes(&[("r", 4)]), 1).unwrap();
        let s = Sharding::new(mesh, spec(&[None]), vec![8]).unwrap();
        let shards = s.shards();
        assert_eq!(shards.iter().map(|s| s.replica_ordinal).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(shards.iter().all(|sh| sh.region == Region::full(&[8])));
        assert_eq!(s.unique_shards_for_process(0).len(), 1);
        for p in 1..4 {
            assert!(s.unique_shards_for_process(p).is_empty());
        }
    }

    #[test]
    fn indivisible_rejected() {
        let mesh = Mesh::new(axes(&[("x", 4), ("y", 1)]), 1).unwrap();
        let err = Sharding::new(mesh, spec(&[Some("x"), Some("y")]), vec![6, 4]).unwrap_err();
        assert_eq!(err, Error::Indivisible { dim: 0, extent: 6, parts: 4 });
    }

    #[test]
    fn single_process_sees_all_cells() {
        let mesh = Mesh::new(axes(&[("x", 2), ("y", 3)]), 6).unwrap();
        let s = Sharding::new(mesh, spec(&[Some("y"), Some("x")]), vec![6, 4]).unwrap();
        let cells: BTreeSet<Region> = s.unique_shards_for_process(0).into_iter().map(|s| s.region).collect();
        assert_eq!(cells.len(), 6);
    }

    #[test]
    fn segments() {
        let r = Region::new(vec![0, 0], vec![1024, 8]);
        assert_eq!(replica_segments(&r, 4, 1), Region::new(vec![256, 0], vec![256, 8]));
        assert_eq!(replica_segments(&r, 1, 0), r);
        let r = Region::new(vec![10], vec![10]);
        let sizes: Vec<usize> = (0..4).map(|o| replica_segments(&r, 4, o).shape[0]).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(replica_segments(&r, 4, 3).offset, vec![19]);
    }

    #[test]
    fn segment_dim_ties_lowest() {
        assert_eq!(segment_dim(&[4, 8, 8]), Some(1));
        assert_eq!(segment_dim(&[8, 8]), Some(0));
        assert_eq!(segment_dim(&[]), None);
    }

    #[test]
    fn replica_groups_by_data_axis() {
        let mesh = Mesh::new(axes(&[("data", 4), ("fsdp", 16)]), 4).unwrap().with_replica_axis("data").unwrap();
        let groups = mesh.replica_groups().unwrap();
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| g.devices.len() == 16));
        assert_eq!(groups[1].devices[0], DeviceId(16));

        let single = Mesh::new(axes(&[("data", 1), ("fsdp", 4)]), 1).unwrap().with_replica_axis("data").unwrap();
        assert_eq!(single.replica_groups().unwrap()[0].devices.len(), 4);
        assert!(Mesh::new(axes(&[("x", 2)]), 1).unwrap().replica_groups().is_err());
    }

    #[test]
    fn topology_validation() {
        let m64 = Mesh::new(axes(&[("x", 16), ("y", 4)]), 8).unwrap();
        let s = Sharding::new(m64.clone(), spec(&[Some("x"), Some("y")]), vec![256, 64]).unwrap();
        let d = s.descriptor();
        assert!(validate_topology(&d, &m64).is_ok());
        let m16 = Mesh::new(axes(&[("x", 16)]), 2).unwrap();
        assert!(matches!(validate_topology(&d, &m16), Err(Error::TopologyMismatch(_))));
        let relaid = Mesh::new(axes(&[("x", 16), ("y", 4)]), 4).unwrap();
        assert!(matches!(validate_topology(&d, &relaid), Err(Error::TopologyMismatch(_))));
    }

    #[test]
    fn descriptor_round_trip() {
        let mesh = Mesh::new(axes(&[("data", 2), ("m", 2)]), 2).unwrap().with_replica_axis("data").unwrap();
        let s = Sharding::new(mesh, spec(&[Some("m"), None]), vec![4, 3]).unwrap();
        let json = serde_json::to_string(&s.descriptor()).unwrap();
        let back: ShardingDescriptor = serde_json::from_str(&json).unwrap();
        assert_eq!(Sharding::from_descriptor(&back).unwrap(), s);
    }
}

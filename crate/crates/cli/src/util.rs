use std::fmt;
use std::str::FromStr;

use ckpt_core::save::DEFAULT_SUBCHUNK_TARGET_BYTES;
use ckpt_core::sharding::{Mesh, PartitionSpec, Sharding};
use ckpt_core::storage::Counters;
use ckpt_core::Error;

/// `--subchunk-target-bytes`: a byte count, or `off` to read whole write chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubchunkTarget(pub Option<u64>);

impl Default for SubchunkTarget {
    fn default() -> Self {
        Self(Some(DEFAULT_SUBCHUNK_TARGET_BYTES))
    }
}

impl FromStr for SubchunkTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "off" => Ok(Self(None)),
            n => match n.parse::<u64>() {
                Ok(b) if b > 0 => Ok(Self(Some(b))),
                _ => Err(Error::InvalidOption(format!("subchunk target {n:?} is not a positive byte count or `off`"))),
            },
        }
    }
}

impl fmt::Display for SubchunkTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(b) => write!(f, "{b}"),
            None => f.write_str("off"),
        }
    }
}

/// `x=16,y=4` -> named axes.
pub fn parse_axes(s: &str) -> Result<Vec<(String, usize)>, Error> {
    s.split(',')
        .map(|part| {
            let (name, size) = part.split_once('=').ok_or_else(|| Error::InvalidOption(format!("mesh axis {part:?} is not name=size")))?;
            let size = size.trim().parse().map_err(|_| Error::InvalidOption(format!("mesh axis {part:?} has a bad size")))?;
            Ok((name.trim().to_string(), size))
        })
        .collect()
}

/// Mesh over `processes` processes with an equal number of devices each.
pub fn parse_mesh(s: &str, processes: usize) -> Result<Mesh, Error> {
    let axes = parse_axes(s)?;
    let devices: usize = axes.iter().map(|(_, n)| n).product();
    if processes == 0 || !devices.is_multiple_of(processes) {
        return Err(Error::InvalidOption(format!("{devices} devices cannot be split over {processes} processes")));
    }
    Mesh::new(axes, devices / processes)
}

/// `x,_` -> per-dimension axes; `_`, `none` or empty means replicated.
pub fn parse_spec(s: &str) -> PartitionSpec {
    let s = s.trim().trim_start_matches('(').trim_end_matches(')');
    if s.is_empty() {
        return PartitionSpec::new(vec![]);
    }
    PartitionSpec::new(
        s.split(',')
            .map(|d| match d.trim() {
                "" | "_" | "none" | "None" | "null" => None,
                axis => Some(axis.to_string()),
            })
            .collect(),
    )
}

/// `leaf/path=x,_`
pub fn parse_partition(s: &str) -> Result<(String, PartitionSpec), Error> {
    let (path, spec) = s.split_once('=').ok_or_else(|| Error::InvalidOption(format!("partition {s:?} is not <leaf>=<spec>")))?;
    Ok((path.trim().to_string(), parse_spec(spec)))
}

pub fn describe_sharding(s: &Sharding) -> String {
    let axes: Vec<String> = s.mesh().axes().iter().map(|(n, k)| format!("{n}={k}")).collect();
    format!("[{}] {}", axes.join(","), s.spec())
}

pub fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("({})", dims.join(","))
}

pub fn add_counters(a: &mut Counters, b: &Counters) {
    for (k, v) in &b.ops {
        *a.ops.entry(*k).or_default() += v;
    }
    a.bytes_read += b.bytes_read;
    a.bytes_written += b.bytes_written;
    a.payload_bytes_read += b.payload_bytes_read;
    a.payload_bytes_written += b.payload_bytes_written;
}

/// Left-aligned plain-text table.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subchunk_target() {
        assert_eq!("off".parse::<SubchunkTarget>().unwrap(), SubchunkTarget(None));
        assert_eq!("256".parse::<SubchunkTarget>().unwrap(), SubchunkTarget(Some(256)));
        assert!("0".parse::<SubchunkTarget>().is_err());
        assert_eq!(SubchunkTarget::default().to_string(), (32u64 << 20).to_string());
    }

    #[test]
    fn specs() {
        assert_eq!(parse_spec("x,_"), PartitionSpec::new(vec![Some("x".into()), None]));
        assert_eq!(parse_spec("(none, y)"), PartitionSpec::new(vec![None, Some("y".into())]));
        let (p, s) = parse_partition("a/b=x").unwrap();
        assert_eq!((p.as_str(), s.dims().len()), ("a/b", 1));
        assert!(parse_partition("nothing").is_err());
    }

    #[test]
    fn meshes() {
        let m = parse_mesh("x=64,y=1", 8).unwrap();
        assert_eq!((m.device_count(), m.process_count()), (64, 8));
        assert!(parse_mesh("x=6", 4).is_err());
        assert!(parse_axes("x").is_err());
    }

    #[test]
    fn table_aligns() {
        let t = table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\nxyz  1\n");
    }
}

use std::fmt;

use crate::ir::Shape;

use super::ShardingError;

/// Multi-dimensional device grid: `dims[d]` tiles along tensor dim `d`,
/// `device_ids` lists the device occupying each tile in row-major tile order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DeviceAssignment {
    pub dims: Vec<usize>,
    pub device_ids: Vec<usize>,
}

impl DeviceAssignment {
    pub fn new(dims: Vec<usize>, device_ids: Vec<usize>) -> Result<Self, ShardingError> {
        let a = DeviceAssignment { dims, device_ids };
        a.check()?;
        Ok(a)
    }

    /// Natural device order over the given tile grid.
    pub fn natural(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        DeviceAssignment { dims, device_ids: (0..n).collect() }
    }

    pub fn check(&self) -> Result<(), ShardingError> {
        let n: usize = self.dims.iter().product();
        if n != self.device_ids.len() || self.dims.contains(&0) {
            return Err(ShardingError::InvalidAssignment(format!(
                "tile grid {:?} holds {} tiles but {} device ids were given",
                self.dims,
                n,
                self.device_ids.len()
            )));
        }
        let mut seen = vec![false; n];
        for &id in &self.device_ids {
            if id >= n || seen[id] {
                return Err(ShardingError::InvalidAssignment(format!("device ids {:?} are not a permutation of 0..{n}", self.device_ids)));
            }
            seen[id] = true;
        }
        Ok(())
    }

    pub fn num_tiles(&self) -> usize {
        self.device_ids.len()
    }

    /// Tile coordinates held by `device`.
    pub fn tile_of(&self, device: usize) -> Option<Vec<usize>> {
        let pos = self.device_ids.iter().position(|&d| d == device)?;
        let mut coords = vec![0; self.dims.len()];
        let mut rem = pos;
        for d in (0..self.dims.len()).rev() {
            coords[d] = rem % self.dims[d];
            rem /= self.dims[d];
        }
        Some(coords)
    }

    pub fn device_at(&self, coords: &[usize]) -> usize {
        let mut pos = 0;
        for (c, d) in coords.iter().zip(&self.dims) {
            pos = pos * d + c;
        }
        self.device_ids[pos]
    }

    /// Devices grouped so that each group varies only along `dim`, ordered by
    /// tile coordinate along `dim`.
    pub fn groups_along(&self, dim: usize) -> Vec<Vec<usize>> {
        let mut other = self.dims.clone();
        other[dim] = 1;
        let mut groups = Vec::new();
        for coords in crate::ir::IndexIter::new(&Shape(other)) {
            let mut c = coords.clone();
            let g = (0..self.dims[dim])
                .map(|t| {
                    c[dim] = t;
                    self.device_at(&c)
                })
                .collect();
            groups.push(g);
        }
        groups
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Sharding {
    Replicated,
    Tiled(DeviceAssignment),
}

/// Per-device shape of a sharded tensor, including uneven-split padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionShape {
    pub per_device_dims: Shape,
    pub padded_full_dims: Shape,
    pub has_padding: Vec<bool>,
}

impl Sharding {
    /// Sharding tiled along a single dim with natural device order.
    pub fn split(rank: usize, dim: usize, parts: usize) -> Sharding {
        let mut dims = vec![1; rank];
        dims[dim] = parts;
        Sharding::Tiled(DeviceAssignment::natural(dims))
    }

    pub fn is_replicated(&self) -> bool {
        match self {
            Sharding::Replicated => true,
            Sharding::Tiled(a) => a.dims.iter().all(|&d| d == 1),
        }
    }

    pub fn assignment(&self) -> Option<&DeviceAssignment> {
        match self {
            Sharding::Tiled(a) => Some(a),
            Sharding::Replicated => None,
        }
    }

    pub fn tile_counts(&self, rank: usize) -> Vec<usize> {
        match self {
            Sharding::Replicated => vec![1; rank],
            Sharding::Tiled(a) => a.dims.clone(),
        }
    }

    pub fn tiles_along(&self, dim: usize) -> usize {
        match self {
            Sharding::Replicated => 1,
            Sharding::Tiled(a) => a.dims[dim],
        }
    }

    /// Dims partitioned more than one way.
    pub fn tiled_dims(&self) -> Vec<usize> {
        match self {
            Sharding::Replicated => vec![],
            Sharding::Tiled(a) => (0..a.dims.len()).filter(|&d| a.dims[d] > 1).collect(),
        }
    }

    /// The unique partitioned dim, when exactly one exists.
    pub fn single_tiled_dim(&self) -> Option<usize> {
        match self.tiled_dims().as_slice() {
            [d] => Some(*d),
            _ => None,
        }
    }

    pub fn validate_for(&self, shape: &Shape) -> Result<(), ShardingError> {
        if let Sharding::Tiled(a) = self {
            if a.dims.len() != shape.rank() {
                return Err(ShardingError::RankMismatch { sharding: a.dims.len(), tensor: shape.rank() });
            }
            a.check()?;
        }
        Ok(())
    }

    pub fn partition_shape(&self, full: &Shape) -> PartitionShape {
        let counts = self.tile_counts(full.rank());
        let per: Vec<usize> = full.dims().iter().zip(&counts).map(|(&n, &k)| n.div_ceil(k)).collect();
        let padded: Vec<usize> = per.iter().zip(&counts).map(|(p, k)| p * k).collect();
        let has_padding = padded.iter().zip(full.dims()).map(|(p, n)| p != n).collect();
        PartitionShape { per_device_dims: Shape(per), padded_full_dims: Shape(padded), has_padding }
    }

    pub fn per_device_shape(&self, full: &Shape) -> Shape {
        self.partition_shape(full).per_device_dims
    }

    /// Start of `device`'s slice in the padded full tensor.
    pub fn partition_offset(&self, full: &Shape, device: usize) -> Vec<usize> {
        match self {
            Sharding::Replicated => vec![0; full.rank()],
            Sharding::Tiled(a) => {
                let per = self.per_device_shape(full);
                let tile = a.tile_of(device).expect("device is not part of the assignment");
                tile.iter().zip(per.dims()).map(|(t, p)| t * p).collect()
            }
        }
    }

    /// Number of devices the sharding spans (1 for replicated).
    pub fn num_tiles(&self) -> usize {
        match self {
            Sharding::Replicated => 1,
            Sharding::Tiled(a) => a.num_tiles(),
        }
    }
}

impl fmt::Display for Sharding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sharding::Replicated => write!(f, "{{replicated}}"),
            Sharding::Tiled(a) => {
                let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                write!(f, "{{devices=[{}] ids=[{}]}}", list(&a.dims), list(&a.device_ids))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uneven_shape_example() {
        let s = Sharding::Tiled(DeviceAssignment::natural(vec![1, 2, 4]));
        assert_eq!(s.per_device_shape(&Shape::from([3, 16, 64])), Shape::from([3, 8, 16]));
    }

    #[test]
    fn uneven_split_pads_last_partition() {
        let s = Sharding::split(1, 0, 2);
        let ps = s.partition_shape(&Shape::from([15]));
        assert_eq!(ps.per_device_dims, Shape::from([8]));
        assert_eq!(ps.padded_full_dims, Shape::from([16]));
        assert_eq!(ps.has_padding, vec![true]);
        assert_eq!(s.partition_offset(&Shape::from([15]), 1), vec![8]);
    }

    #[test]
    fn grid_offsets() {
        // Grid (1,2) in a [2,4] natural grid is device 6.
        let s = Sharding::Tiled(DeviceAssignment::natural(vec![2, 4]));
        assert_eq!(s.partition_offset(&Shape::from([16, 16]), 6), vec![8, 8]);
        let a = DeviceAssignment::natural(vec![2, 4]);
        let dev = a.device_at(&[1, 2]);
        assert_eq!(s.partition_offset(&Shape::from([16, 16]), dev), vec![8, 8]);
        assert_eq!(Sharding::Replicated.partition_offset(&Shape::from([16, 16]), 3), vec![0, 0]);
    }

    #[test]
    fn grid_offsets_with_permuted_ids() {
        // Grid (1,2) holds device 3 here.
        let a = DeviceAssignment::new(vec![2, 4], vec![0, 1, 2, 4, 5, 6, 3, 7]).unwrap();
        assert_eq!(a.device_at(&[1, 2]), 3);
        let s = Sharding::Tiled(a);
        // dims [2,4] on [16,16]: per device [8,4], tile (1,2) -> [8, 8]
        assert_eq!(s.partition_offset(&Shape::from([16, 16]), 3), vec![8, 8]);
    }

    #[test]
    fn rejects_bad_assignments() {
        assert!(DeviceAssignment::new(vec![2, 2], vec![0, 1, 2]).is_err());
        assert!(DeviceAssignment::new(vec![2], vec![1, 1]).is_err());
    }

    #[test]
    fn groups_along_dim() {
        let a = DeviceAssignment::natural(vec![2, 3]);
        assert_eq!(a.groups_along(1), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert_eq!(a.groups_along(0), vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
    }
}

//! Spatial hash table addressing voxel blocks by integer block coordinate.

use super::{BlockCoord, VoxelBlock};

const P1: i64 = 73_856_093;
const P2: i64 = 19_349_669;
const P3: i64 = 83_492_791;

/// Bucket index of a block coordinate: XOR of prime-multiplied coordinates
/// modulo the bucket count. Panics if `buckets == 0`.
pub fn block_hash(coord: BlockCoord, buckets: usize) -> usize {
    assert!(buckets > 0, "hash table needs at least one bucket");
    let h = (coord.x as i64).wrapping_mul(P1)
        ^ (coord.y as i64).wrapping_mul(P2)
        ^ (coord.z as i64).wrapping_mul(P3);
    (h as u64 % buckets as u64) as usize
}

/// Open hash table with per-bucket collision lists.
#[derive(Debug, Clone)]
pub struct BlockHashMap {
    buckets: Vec<Vec<Box<VoxelBlock>>>,
    len: usize,
}

impl BlockHashMap {
    pub fn new(buckets: usize) -> Self {
        Self {
            buckets: (0..buckets.max(1)).map(|_| Vec::new()).collect(),
            len: 0,
        }
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn bucket(&self, coord: BlockCoord) -> usize {
        block_hash(coord, self.buckets.len())
    }

    pub fn contains(&self, coord: BlockCoord) -> bool {
        self.get(coord).is_some()
    }

    pub fn get(&self, coord: BlockCoord) -> Option<&VoxelBlock> {
        self.buckets[self.bucket(coord)]
            .iter()
            .find(|b| b.coord == coord)
            .map(|b| &**b)
    }

    pub fn get_mut(&mut self, coord: BlockCoord) -> Option<&mut VoxelBlock> {
        let i = self.bucket(coord);
        self.buckets[i]
            .iter_mut()
            .find(|b| b.coord == coord)
            .map(|b| &mut **b)
    }

    /// Inserts a block, replacing any block with the same coordinate.
    pub fn insert(&mut self, block: Box<VoxelBlock>) -> Option<Box<VoxelBlock>> {
        let i = self.bucket(block.coord);
        let list = &mut self.buckets[i];
        if let Some(slot) = list.iter_mut().find(|b| b.coord == block.coord) {
            return Some(std::mem::replace(slot, block));
        }
        list.push(block);
        self.len += 1;
        None
    }

    pub fn remove(&mut self, coord: BlockCoord) -> Option<Box<VoxelBlock>> {
        let i = self.bucket(coord);
        let list = &mut self.buckets[i];
        let pos = list.iter().position(|b| b.coord == coord)?;
        self.len -= 1;
        Some(list.swap_remove(pos))
    }

    /// Iterates in bucket order.
    pub fn iter(&self) -> impl Iterator<Item = &VoxelBlock> {
        self.buckets.iter().flatten().map(|b| &**b)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut VoxelBlock> {
        self.buckets.iter_mut().flatten().map(|b| &mut **b)
    }

    /// Removes and returns every block matching `pred`.
    pub fn drain_where(&mut self, mut pred: impl FnMut(&VoxelBlock) -> bool) -> Vec<Box<VoxelBlock>> {
        let mut out = Vec::new();
        for list in &mut self.buckets {
            let mut i = 0;
            while i < list.len() {
                if pred(&list[i]) {
                    out.push(list.swap_remove(i));
                } else {
                    i += 1;
                }
            }
        }
        self.len -= out.len();
        out
    }

    /// Largest collision-list length.
    pub fn max_bucket_load(&self) -> usize {
        self.buckets.iter().map(Vec::len).max().unwrap_or(0)
    }
}

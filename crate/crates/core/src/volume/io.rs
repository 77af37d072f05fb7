//! Binary snapshot of a volume: header, then blocks sorted by coordinate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BlockCoord, TwoTierStore, VolumeConfig, Voxel, VoxelBlock, BLOCK_VOXELS};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"SDFV1";

pub fn write_snapshot(store: &TwoTierStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let cfg = store.config();
    let blocks = store.blocks_sorted();
    w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
    w.write_all(&cfg.voxel_size.to_le_bytes()).map_err(io)?;
    w.write_all(&cfg.truncation.to_le_bytes()).map_err(io)?;
    w.write_all(&(blocks.len() as u64).to_le_bytes()).map_err(io)?;
    for b in blocks {
        for c in [b.coord.x, b.coord.y, b.coord.z] {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        for v in b.voxels.iter() {
            for x in [v.sdf, v.weight, v.color[0], v.color[1], v.color[2]] {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Restores a snapshot; all blocks land in the host tier. The stream radius
/// and bucket count come from `base`, voxel size and truncation from the file.
pub fn read_snapshot(path: &Path, base: &VolumeConfig) -> Result<TwoTierStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |_| Error::format(path, "truncated snapshot");
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::format(path, "bad snapshot magic"));
    }
    let mut b8 = [0u8; 8];
    let mut f64_le = |r: &mut BufReader<File>| -> Result<f64> {
        r.read_exact(&mut b8).map_err(truncated)?;
        Ok(f64::from_le_bytes(b8))
    };
    let voxel_size = f64_le(&mut r)?;
    let truncation = f64_le(&mut r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(truncated)?;
    let count = u64::from_le_bytes(b8);
    let cfg = VolumeConfig {
        voxel_size,
        truncation,
        ..*base
    };
    let mut store = TwoTierStore::new(cfg)?;
    let mut coord_buf = [0u8; 12];
    let mut voxel_buf = vec![0u8; BLOCK_VOXELS * 40];
    for _ in 0..count {
        r.read_exact(&mut coord_buf).map_err(truncated)?;
        let i = |k: usize| i32::from_le_bytes(coord_buf[4 * k..4 * k + 4].try_into().unwrap());
        let mut block = VoxelBlock::new(BlockCoord::new(i(0), i(1), i(2)));
        r.read_exact(&mut voxel_buf).map_err(truncated)?;
        for (v, chunk) in block.voxels.iter_mut().zip(voxel_buf.chunks_exact(40)) {
            let f = |k: usize| f64::from_le_bytes(chunk[8 * k..8 * k + 8].try_into().unwrap());
            *v = Voxel {
                sdf: f(0),
                weight: f(1),
                color: [f(2), f(3), f(4)],
            };
        }
        store.insert_host(Box::new(block));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;

    #[test]
    fn roundtrip_preserves_every_voxel() {
        let cfg = VolumeConfig {
            voxel_size: 0.02,
            truncation: 0.06,
            stream_radius: 3.0,
            hash_buckets: 1024,
        };
        let mut s = TwoTierStore::new(cfg).unwrap();
        s.fill_analytic(
            &Point3::new(-0.3, -0.3, -0.3),
            &Point3::new(0.3, 0.3, 0.3),
            |p| p.norm() - 0.2,
            [10.0, 20.0, 30.5],
        );
        s.stream(&Point3::new(0.1, 0.0, 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sdfv");
        write_snapshot(&s, &path).unwrap();
        let t = read_snapshot(&path, &cfg).unwrap();
        assert_eq!(t.block_count(), s.block_count());
        assert_eq!(t.active_len(), 0);
        for (a, b) in s.blocks_sorted().iter().zip(t.blocks_sorted()) {
            assert_eq!(**a, *b);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE!").unwrap();
        assert!(matches!(read_snapshot(&path, &VolumeConfig::default()), Err(Error::Format { .. })));
        std::fs::write(&path, b"SDFV1\0\0").unwrap();
        assert!(matches!(read_snapshot(&path, &VolumeConfig::default()), Err(Error::Format { .. })));
    }
}

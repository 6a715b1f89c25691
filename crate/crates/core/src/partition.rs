//! Non-overlapping patch partitions of an image, one per pixel shift.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// One patch of a partition: global pixel indices and their positions inside the full `p × p` patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub indices: Vec<usize>,
    pub local: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    width: usize,
    height: usize,
    patch_size: usize,
    shift: (usize, usize),
    blocks: Vec<Block>,
    owner: Vec<(u32, u32)>,
}

/// Column or row segments `(start, len, local_offset)` of a shifted tiling.
fn segments(extent: usize, patch: usize, shift: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    if shift > 0 {
        let len = shift.min(extent);
        out.push((0, len, patch - shift));
        start = len;
    }
    while start < extent {
        let len = patch.min(extent - start);
        out.push((start, len, 0));
        start += len;
    }
    out
}

impl Partition {
    /// Tiling whose patch grid is offset by `shift = (dx, dy)` pixels.
    pub fn new(width: usize, height: usize, patch_size: usize, shift: (usize, usize)) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if width < patch_size || height < patch_size {
            return Err(Error::invalid(format!(
                "image {width}x{height} is smaller than patch size {patch_size}"
            )));
        }
        if shift.0 >= patch_size || shift.1 >= patch_size {
            return Err(Error::invalid("shift must be smaller than the patch size"));
        }
        let cols = segments(width, patch_size, shift.0);
        let rows = segments(height, patch_size, shift.1);
        let mut blocks = Vec::with_capacity(cols.len() * rows.len());
        let mut owner = vec![(0u32, 0u32); width * height];
        for &(y0, h, ly) in &rows {
            for &(x0, w, lx) in &cols {
                let mut indices = Vec::with_capacity(w * h);
                let mut local = Vec::with_capacity(w * h);
                for dy in 0..h {
                    for dx in 0..w {
                        let g = (y0 + dy) * width + x0 + dx;
                        owner[g] = (blocks.len() as u32, indices.len() as u32);
                        indices.push(g);
                        local.push((ly + dy) * patch_size + lx + dx);
                    }
                }
                blocks.push(Block { indices, local });
            }
        }
        Ok(Self {
            width,
            height,
            patch_size,
            shift,
            blocks,
            owner,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn shift(&self) -> (usize, usize) {
        self.shift
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, j: usize) -> Result<&Block> {
        self.blocks.get(j).ok_or(Error::IndexOutOfRange {
            index: j,
            len: self.blocks.len(),
        })
    }

    /// Block index and position within that block for global pixel `n`.
    pub fn owner(&self, n: usize) -> (usize, usize) {
        let (b, p) = self.owner[n];
        (b as usize, p as usize)
    }

    pub fn gather(&self, v: &[f64], j: usize) -> Result<DVector<f64>> {
        Error::check_len(self.pixel_count(), v.len())?;
        let b = self.block(j)?;
        Ok(DVector::from_iterator(b.len(), b.indices.iter().map(|&i| v[i])))
    }

    pub fn scatter(&self, values: &[f64], j: usize, v: &mut [f64]) -> Result<()> {
        Error::check_len(self.pixel_count(), v.len())?;
        let b = self.block(j)?;
        Error::check_len(b.len(), values.len())?;
        for (&i, &x) in b.indices.iter().zip(values) {
            v[i] = x;
        }
        Ok(())
    }
}

/// All `patch_size²` shifted partitions; partition `i` has shift `(i % p, i / p)`.
pub fn build_shifted_partitions(width: usize, height: usize, patch_size: usize) -> Result<Vec<Partition>> {
    if patch_size < 2 {
        return Err(Error::invalid("patch size must be at least 2"));
    }
    (0..patch_size * patch_size)
        .map(|i| Partition::new(width, height, patch_size, (i % patch_size, i / patch_size)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_image() {
        let parts = build_shifted_partitions(8, 8, 8).unwrap();
        assert_eq!(parts.len(), 64);
        assert_eq!(parts[0].num_blocks(), 1);
        assert_eq!(parts[0].blocks()[0].indices, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn nine_by_nine_unshifted_blocks() {
        let p = Partition::new(9, 9, 8, (0, 0)).unwrap();
        let sizes: Vec<_> = p.blocks().iter().map(Block::len).collect();
        assert_eq!(sizes, vec![64, 8, 8, 1]);
    }

    #[test]
    fn truncated_block_local_positions() {
        let p = Partition::new(4, 4, 2, (1, 0)).unwrap();
        // first column strip is the right half of a patch
        assert_eq!(p.blocks()[0].indices, vec![0, 4]);
        assert_eq!(p.blocks()[0].local, vec![1, 3]);
        assert_eq!(p.blocks()[1].local, vec![0, 1, 2, 3]);
    }

    #[test]
    fn small_images_rejected() {
        assert!(build_shifted_partitions(3, 8, 4).is_err());
        assert!(build_shifted_partitions(8, 8, 1).is_err());
    }

    #[test]
    fn owner_map_is_consistent() {
        let p = Partition::new(7, 5, 3, (2, 1)).unwrap();
        for n in 0..35 {
            let (b, k) = p.owner(n);
            assert_eq!(p.blocks()[b].indices[k], n);
        }
    }
}

//! Slice embedders feeding the Fréchet distance.
//!
//! The distance itself is embedder-agnostic: any per-slice feature
//! extractor can plug in, either through the [`SliceEmbedder`] trait or by
//! supplying precomputed vectors in the binary interchange format read by
//! [`read_embeddings`] (little-endian `count: u64`, `dim: u64`, then
//! `count·dim` float32 values row-major). The built-in embedder is a
//! deterministic grid-of-block-means downsampler, sufficient for
//! self-contained testing.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::metrics::frechet::EmbeddingSet;

/// Maps a 2D slice to a fixed-length feature vector.
pub trait SliceEmbedder: Sync {
    /// Identifier stored in the embedding set (`block-mean-8x8`, ...).
    fn id(&self) -> String;
    /// Output dimension.
    fn dim(&self) -> usize;
    fn embed(&self, pixels: ArrayView2<'_, f64>) -> Result<Vec<f64>>;
}

/// Downsamples a slice to a `grid x grid` raster of block means and
/// flattens it row-major. Block edges at index `floor(i·extent/grid)`.
#[derive(Debug, Clone, Copy)]
pub struct BlockMeanEmbedder {
    grid: usize,
}

impl BlockMeanEmbedder {
    pub fn new(grid: usize) -> Result<Self> {
        if grid < 2 {
            return Err(Error::Precondition(format!(
                "block grid must be at least 2, got {grid}"
            )));
        }
        Ok(BlockMeanEmbedder { grid })
    }
}

impl Default for BlockMeanEmbedder {
    fn default() -> Self {
        BlockMeanEmbedder { grid: 8 }
    }
}

impl SliceEmbedder for BlockMeanEmbedder {
    fn id(&self) -> String {
        format!("block-mean-{0}x{0}", self.grid)
    }

    fn dim(&self) -> usize {
        self.grid * self.grid
    }

    fn embed(&self, pixels: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let (h, w) = pixels.dim();
        if h < self.grid || w < self.grid {
            return Err(Error::DegenerateInput(format!(
                "slice {h}x{w} is smaller than the {0}x{0} block grid",
                self.grid
            )));
        }
        let mut out = Vec::with_capacity(self.dim());
        for bi in 0..self.grid {
            let r0 = bi * h / self.grid;
            let r1 = (bi + 1) * h / self.grid;
            for bj in 0..self.grid {
                let c0 = bj * w / self.grid;
                let c1 = (bj + 1) * w / self.grid;
                let mut acc = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        acc += pixels[[i, j]];
                    }
                }
                out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
        Ok(out)
    }
}

/// Embeds each slice, propagating embedder failures with the slice index.
pub fn embed_slices<'a>(
    slices: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    embedder: &dyn SliceEmbedder,
) -> Result<EmbeddingSet> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (index, slice) in slices.into_iter().enumerate() {
        let vec = embedder.embed(slice).map_err(|e| Error::Embedding {
            index,
            reason: e.to_string(),
        })?;
        if vec.len() != embedder.dim() {
            return Err(Error::Embedding {
                index,
                reason: format!(
                    "embedder returned {} values, declared {}",
                    vec.len(),
                    embedder.dim()
                ),
            });
        }
        rows.push(vec);
    }
    if rows.is_empty() {
        return Err(Error::DegenerateInput("no slices to embed".into()));
    }
    let dim = embedder.dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let vectors =
        Array2::from_shape_vec((flat.len() / dim, dim), flat).expect("row length checked");
    EmbeddingSet::new(vectors, embedder.id())
}

/// Reads an embedding file in the binary interchange format.
pub fn read_embeddings(path: impl AsRef<Path>, embedder_id: &str) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(&bytes);
    let count = cursor
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    let dim = cursor
        .read_u64::<LittleEndian>()
        .map_err(|e| Error::io(path, e))? as usize;
    let expected = 16
        + count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "embedding size overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "embedding payload is {} bytes, header promises {expected} (count={count}, dim={dim})",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(count * dim);
    for _ in 0..count * dim {
        let v = cursor
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::io(path, e))?;
        values.push(f64::from(v));
    }
    let vectors = Array2::from_shape_vec((count, dim), values).expect("length checked");
    EmbeddingSet::new(vectors, embedder_id)
}

/// Writes an embedding set in the binary interchange format (float32).
pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writer
        .write_u64::<LittleEndian>(set.count() as u64)
        .map_err(io_err)?;
    writer
        .write_u64::<LittleEndian>(set.dim() as u64)
        .map_err(io_err)?;
    for &v in set.vectors.iter() {
        writer.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

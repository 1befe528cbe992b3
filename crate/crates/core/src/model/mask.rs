use std::sync::Arc;

use rand::Rng;

/// Chunk attention mask at subsampled resolution: frame `t` sees frame `s`
/// iff `s / C <= t / C`, i.e. its own chunk and every earlier one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMask {
    pub len: usize,
    pub chunk: usize,
}

pub fn make_chunk_mask(t_prime: usize, chunk: usize) -> ChunkMask {
    assert!(t_prime >= 1 && chunk >= 1, "chunk mask needs T' >= 1 and C >= 1");
    ChunkMask { len: t_prime, chunk }
}

impl ChunkMask {
    pub fn full(len: usize) -> Self {
        make_chunk_mask(len, len)
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        s / self.chunk <= t / self.chunk
    }

    pub fn is_full(&self) -> bool {
        self.chunk >= self.len
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.len)
            .map(|t| (0..self.len).map(|s| self.allows(t, s)).collect())
            .collect()
    }

    /// Row-major boolean mask for attention, `None` when every entry is
    /// true so full-context runs take the unmasked path.
    pub fn attention_mask(&self) -> Option<Arc<Vec<bool>>> {
        if self.is_full() {
            return None;
        }
        Some(Arc::new(self.to_rows().concat()))
    }
}

/// How the chunk size is chosen for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChunkPolicy {
    Full,
    Fixed(usize),
    Dynamic { p_full: f64, cap: usize },
}

impl ChunkPolicy {
    pub fn resolve(&self, t_prime: usize, rng: &mut impl Rng) -> ChunkMask {
        match *self {
            Self::Full => ChunkMask::full(t_prime),
            Self::Fixed(c) => make_chunk_mask(t_prime, c),
            Self::Dynamic { p_full, cap } => make_chunk_mask(t_prime, sample_dynamic_chunk(t_prime, p_full, cap, rng)),
        }
    }
}

/// With probability `p_full` the whole utterance (`C = T'`), otherwise
/// `C ~ U[1, min(T', cap)]`.
pub fn sample_dynamic_chunk(t_prime: usize, p_full: f64, cap: usize, rng: &mut impl Rng) -> usize {
    assert!(t_prime >= 1);
    if rng.gen_bool(p_full) {
        t_prime
    } else {
        rng.gen_range(1..=t_prime.min(cap.max(1)))
    }
}

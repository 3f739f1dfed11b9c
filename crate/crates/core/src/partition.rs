//! Key partitioning shared by the shuffle and by structure/state placement.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the key bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// `partition_of(k) = fnv1a64(k) mod n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partitioner {
    n: usize,
}

impl Partitioner {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "partition count must be at least 1");
        Partitioner { n }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn partition_of(&self, key: &[u8]) -> usize {
        (fnv1a64(key) % self.n as u64) as usize
    }
}

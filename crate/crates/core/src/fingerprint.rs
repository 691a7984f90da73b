//! Stable 64-bit fingerprints (FNV-1a) for tagging results with their inputs.

use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub u64);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Default)]
pub struct FingerprintBuilder(FnvHasher);

impl FingerprintBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn str(mut self, s: &str) -> Self {
        self.0.write(s.as_bytes());
        self.0.write_u8(0xff);
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.write_u64(v);
        self
    }

    pub fn floats<'a>(mut self, values: impl IntoIterator<Item = &'a f64>) -> Self {
        for v in values {
            self.0.write_u64(v.to_bits());
        }
        self
    }

    pub fn finish(self) -> Fingerprint {
        Fingerprint(self.0.finish())
    }
}

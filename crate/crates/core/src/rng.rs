//! Reproducible random streams.
//!
//! Every random decision in the system draws from an [`RngStream`] whose
//! state is a pure function of `(root seed, session id, purpose tag)`. Two
//! streams with the same identity produce the same sequence on every
//! platform: the generator is ChaCha8 and uniforms are built from the top 53
//! bits of each 64-bit output.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// A source of uniform variates in `[0, 1)`.
///
/// Verification and sampling take `&mut dyn UniformSource` so tests can
/// script the exact draws they want to exercise.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;

    /// Called by consumers before the draws belonging to the `offset`-th
    /// position of a block. Sequential sources ignore it.
    fn at_position(&mut self, _offset: usize) {}
}

/// Identity of a stream: which session it belongs to and what it is for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub session: u64,
    pub purpose: String,
}

/// Deterministic random stream keyed by seed and identity.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64, session: u64, purpose: &str) -> Self {
        let key = derive_key(seed, session, purpose);
        Self {
            seed,
            id: StreamId {
                session,
                purpose: purpose.to_owned(),
            },
            rng: ChaCha8Rng::from_seed(key),
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> &StreamId {
        &self.id
    }

    /// Number of 64-bit words consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Rejection sampling keeps the draw unbiased for any n.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Derives a child seed, used to fan a root seed out to components.
    pub fn child_seed(&self, label: &str) -> u64 {
        let key = derive_key(
            self.seed,
            self.id.session,
            &format!("{}/{}", self.id.purpose, label),
        );
        u64::from_be_bytes(key[..8].try_into().expect("8 bytes"))
    }
}

impl UniformSource for RngStream {
    fn next_uniform(&mut self) -> f64 {
        self.uniform()
    }
}

/// Replays a fixed list of uniforms, then panics if asked for more.
///
/// Used to pin the exact draws consumed by verification in tests and in
/// worked examples.
#[derive(Debug, Clone)]
pub struct ScriptedUniforms {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedUniforms {
    pub fn new(values: impl Into<Vec<f64>>) -> Self {
        Self {
            values: values.into(),
            pos: 0,
        }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformSource for ScriptedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let v = *self
            .values
            .get(self.pos)
            .unwrap_or_else(|| panic!("scripted uniforms exhausted after {} draws", self.pos));
        self.pos += 1;
        v
    }
}

/// Draws keyed by absolute sequence position instead of stream order.
///
/// The `slot`-th draw at position `p` is a hash of `(seed, session, purpose,
/// p, slot)`. A committed sequence therefore does not depend on how it was
/// split into blocks, or on how many speculative drafts were thrown away.
#[derive(Debug, Clone)]
pub struct PositionalUniforms {
    key: u64,
    base: u64,
    pos: u64,
    slot: u64,
}

impl PositionalUniforms {
    pub fn new(seed: u64, session: u64, purpose: &str) -> Self {
        let key = derive_key(seed, session, purpose);
        Self {
            key: u64::from_be_bytes(key[..8].try_into().expect("8 bytes")),
            base: 0,
            pos: 0,
            slot: 0,
        }
    }

    /// Absolute position of offset 0.
    pub fn set_base(&mut self, base: u64) {
        self.base = base;
        self.pos = base;
        self.slot = 0;
    }

    pub fn position(&self) -> u64 {
        self.pos
    }
}

impl UniformSource for PositionalUniforms {
    fn next_uniform(&mut self) -> f64 {
        let h = mix64(
            mix64(self.key ^ mix64(self.pos)) ^ self.slot.wrapping_mul(0xD6E8_FEB8_6659_FD93),
        );
        self.slot += 1;
        unit_f64(h)
    }

    fn at_position(&mut self, offset: usize) {
        self.pos = self.base + offset as u64;
        self.slot = 0;
    }
}

/// Derives a 64-bit seed for `(component, index)` from a root seed.
pub fn derive_seed(root: u64, component: &str, index: u64) -> u64 {
    let key = derive_key(root, index, component);
    u64::from_be_bytes(key[..8].try_into().expect("8 bytes"))
}

fn derive_key(seed: u64, session: u64, purpose: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"sled-rng-v1");
    h.update(seed.to_be_bytes());
    h.update(session.to_be_bytes());
    h.update((purpose.len() as u64).to_be_bytes());
    h.update(purpose.as_bytes());
    h.finalize().into()
}

pub(crate) fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// SplitMix64 finalizer; a cheap, well-mixed hash step for model tables.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

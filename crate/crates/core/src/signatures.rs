//! Parallel Bloom-filter signatures used to summarize read and write sets.
//!
//! A signature of `N` bits is split into `M` equal segments. Every segment has
//! its own H3 hash function that maps a cache-line address to exactly one bit
//! of that segment. Membership requires all `M` bits to be set, so there are
//! no false negatives. Two signatures are disjoint for certain when at least
//! one segment of their bitwise AND is empty.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// log2 of the cache-line size. Addresses are hashed at line granularity.
pub const LINE_SHIFT: u32 = 6;

/// Number of line-number bits fed into the hash (48-bit physical addresses).
pub const DEFAULT_ADDRESS_BITS: u32 = 48 - LINE_SHIFT;

/// splitmix64 step. Used only to derive H3 matrices from a seed.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shape of a signature: width, segment count, insertion capacity and hash seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureParams {
    pub bits: usize,
    pub segments: usize,
    pub capacity: u32,
    pub seed: u64,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self { bits: 2048, segments: 4, capacity: 250, seed: 0x1a2b_3c4d }
    }
}

impl SignatureParams {
    pub fn segment_bits(&self) -> usize {
        self.bits / self.segments
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 || self.bits == 0 {
            return Err(Error::param("signature bits and segments must be non-zero"));
        }
        if !self.bits.is_multiple_of(self.segments) {
            return Err(Error::param(format!(
                "signature width {} is not divisible by segment count {}",
                self.bits, self.segments
            )));
        }
        let seg = self.segment_bits();
        if !seg.is_power_of_two() || seg > 1 << 31 {
            return Err(Error::param(format!("segment width {seg} must be a power of two")));
        }
        Ok(())
    }
}

/// H3 hash family: one random binary matrix per segment.
///
/// Row `i` of a segment matrix holds the output bits toggled by address bit
/// `i`, so the hash of an address is the XOR of the rows selected by its set
/// bits. Equivalently, output bit `j` is the parity of the address ANDed with
/// column `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct H3HashFamily {
    seed: u64,
    address_bits: u32,
    index_bits: u32,
    matrices: Vec<Vec<u32>>,
}

impl fmt::Debug for H3HashFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("H3HashFamily")
            .field("seed", &self.seed)
            .field("segments", &self.matrices.len())
            .field("address_bits", &self.address_bits)
            .field("index_bits", &self.index_bits)
            .finish()
    }
}

impl H3HashFamily {
    pub fn new(seed: u64, segments: usize, segment_bits: usize, address_bits: u32) -> Result<Self> {
        if segments == 0 || !segment_bits.is_power_of_two() || segment_bits > 1 << 31 {
            return Err(Error::param("H3 family needs segments >= 1 and a power-of-two segment width"));
        }
        if address_bits == 0 || address_bits > 64 {
            return Err(Error::param("H3 address width must be in 1..=64"));
        }
        let index_bits = segment_bits.trailing_zeros();
        let mask: u32 = if index_bits == 0 { 0 } else { (((1u64) << index_bits) - 1) as u32 };
        let mut state = seed;
        let mut matrices: Vec<Vec<u32>> = Vec::with_capacity(segments);
        while matrices.len() < segments {
            let m: Vec<u32> = (0..address_bits).map(|_| (splitmix64(&mut state) as u32) & mask).collect();
            // A repeated matrix would make two segments redundant.
            if index_bits == 0 || !matrices.contains(&m) {
                matrices.push(m);
            }
        }
        Ok(Self { seed, address_bits, index_bits, matrices })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn segments(&self) -> usize {
        self.matrices.len()
    }

    pub fn address_bits(&self) -> u32 {
        self.address_bits
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    /// Row view of one segment's matrix.
    pub fn matrix(&self, segment: usize) -> Option<&[u32]> {
        self.matrices.get(segment).map(Vec::as_slice)
    }

    /// Hash a byte address to a bit index within `segment`.
    pub fn index(&self, segment: usize, address: u64) -> Result<usize> {
        let rows = self
            .matrices
            .get(segment)
            .ok_or_else(|| Error::param(format!("segment {segment} out of range")))?;
        Ok(Self::fold(rows, self.line_key(address)))
    }

    #[inline]
    fn line_key(&self, address: u64) -> u64 {
        let line = address >> LINE_SHIFT;
        if self.address_bits >= 64 {
            line
        } else {
            line & ((1u64 << self.address_bits) - 1)
        }
    }

    #[inline]
    fn fold(rows: &[u32], mut key: u64) -> usize {
        let mut acc = 0u32;
        while key != 0 {
            let bit = key.trailing_zeros() as usize;
            acc ^= rows[bit];
            key &= key - 1;
        }
        acc as usize
    }

    fn indices(&self, address: u64) -> impl Iterator<Item = usize> + '_ {
        let key = self.line_key(address);
        self.matrices.iter().map(move |rows| Self::fold(rows, key))
    }
}

/// Fixed-width parallel Bloom filter over cache-line addresses.
#[derive(Clone, PartialEq, Eq)]
pub struct ParallelBloomSignature {
    params: SignatureParams,
    family: Arc<H3HashFamily>,
    words: Vec<u64>,
    insert_count: u32,
}

impl fmt::Debug for ParallelBloomSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParallelBloomSignature")
            .field("bits", &self.params.bits)
            .field("segments", &self.params.segments)
            .field("insert_count", &self.insert_count)
            .field("popcount", &self.popcount())
            .finish()
    }
}

impl ParallelBloomSignature {
    pub fn new(params: SignatureParams) -> Result<Self> {
        params.validate()?;
        let family = H3HashFamily::new(params.seed, params.segments, params.segment_bits(), DEFAULT_ADDRESS_BITS)?;
        Ok(Self::with_family(params, Arc::new(family)))
    }

    /// Build a signature sharing an existing hash family. The family must
    /// match `params`.
    pub fn with_family(params: SignatureParams, family: Arc<H3HashFamily>) -> Self {
        debug_assert_eq!(family.segments(), params.segments);
        debug_assert_eq!(1usize << family.index_bits(), params.segment_bits());
        Self { params, family, words: vec![0; params.bits.div_ceil(64)], insert_count: 0 }
    }

    pub fn params(&self) -> &SignatureParams {
        &self.params
    }

    pub fn family(&self) -> &Arc<H3HashFamily> {
        &self.family
    }

    pub fn insert_count(&self) -> u32 {
        self.insert_count
    }

    pub fn capacity_reached(&self) -> bool {
        self.insert_count >= self.params.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    #[inline]
    fn bit_position(&self, segment: usize, index: usize) -> usize {
        segment * self.params.segment_bits() + index
    }

    #[inline]
    fn test_bit(&self, pos: usize) -> bool {
        self.words[pos / 64] >> (pos % 64) & 1 == 1
    }

    /// Insert the line containing `address`. Fails once the capacity is reached.
    pub fn insert(&mut self, address: u64) -> Result<()> {
        if self.capacity_reached() {
            return Err(Error::Capacity { capacity: self.params.capacity });
        }
        self.set_bits(address);
        self.insert_count += 1;
        Ok(())
    }

    /// Insert regardless of capacity. Used by the CPU-side bank, which cannot
    /// stop the processor when a register fills up.
    pub(crate) fn insert_unchecked(&mut self, address: u64) {
        self.set_bits(address);
        self.insert_count = self.insert_count.saturating_add(1);
    }

    fn set_bits(&mut self, address: u64) {
        let seg_bits = self.params.segment_bits();
        for (segment, index) in self.family.indices(address).enumerate() {
            let pos = segment * seg_bits + index;
            self.words[pos / 64] |= 1u64 << (pos % 64);
        }
    }

    pub fn may_contain(&self, address: u64) -> bool {
        self.family.indices(address).enumerate().all(|(segment, index)| self.test_bit(self.bit_position(segment, index)))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        let (a, b) = (&self.params, &other.params);
        if a.bits != b.bits || a.segments != b.segments || a.seed != b.seed {
            return Err(Error::param("signature parameter mismatch"));
        }
        Ok(())
    }

    /// Bitwise AND of two signatures. The result has `insert_count == 0`.
    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let words = self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect();
        Ok(Self { params: self.params, family: Arc::clone(&self.family), words, insert_count: 0 })
    }

    /// False iff some segment of the AND is all zero, which proves the two
    /// inserted sets are disjoint.
    pub fn intersection_nonempty(&self, other: &Self) -> Result<bool> {
        self.check_compatible(other)?;
        Ok(self.intersects_unchecked(other))
    }

    pub(crate) fn intersects_unchecked(&self, other: &Self) -> bool {
        let seg_bits = self.params.segment_bits();
        (0..self.params.segments).all(|segment| {
            let start = segment * seg_bits;
            let end = start + seg_bits;
            let mut pos = start;
            while pos < end {
                let word = pos / 64;
                let lo = pos % 64;
                let take = (64 - lo).min(end - pos);
                let mask = if take == 64 { u64::MAX } else { ((1u64 << take) - 1) << lo };
                if self.words[word] & other.words[word] & mask != 0 {
                    return true;
                }
                pos += take;
            }
            false
        })
    }

    /// OR `other` into `self`. Used to accumulate write sets of remote commits.
    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        self.insert_count = self.insert_count.saturating_add(other.insert_count);
        Ok(())
    }

    pub fn segment_popcount(&self, segment: usize) -> u32 {
        let seg_bits = self.params.segment_bits();
        (segment * seg_bits..(segment + 1) * seg_bits).filter(|&p| self.test_bit(p)).count() as u32
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Raw bit array, little-endian within each 64-bit word.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Hex dump of the bit array for trace-level debugging.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).take(self.params.bits.div_ceil(8)).collect();
        hex::encode(bytes)
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
        self.insert_count = 0;
    }

    /// Size of the signature on the wire, in bytes.
    pub fn byte_len(&self) -> usize {
        self.params.bits.div_ceil(8)
    }
}

/// A bank of K signature registers filled round-robin (the CPUWriteSet).
#[derive(Clone, Debug)]
pub struct SignatureBank {
    registers: Vec<ParallelBloomSignature>,
    cursor: usize,
    saturated: bool,
}

impl SignatureBank {
    pub fn new(params: SignatureParams, registers: usize) -> Result<Self> {
        if registers == 0 {
            return Err(Error::param("signature bank needs at least one register"));
        }
        let first = ParallelBloomSignature::new(params)?;
        let family = Arc::clone(first.family());
        Ok(Self::with_family(params, family, registers))
    }

    pub fn with_family(params: SignatureParams, family: Arc<H3HashFamily>, registers: usize) -> Self {
        let registers = (0..registers.max(1))
            .map(|_| ParallelBloomSignature::with_family(params, Arc::clone(&family)))
            .collect();
        Self { registers, cursor: 0, saturated: false }
    }

    pub fn registers(&self) -> &[ParallelBloomSignature] {
        &self.registers
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// True once any insert landed in a register that was already full.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    pub fn insert(&mut self, address: u64) {
        let reg = &mut self.registers[self.cursor];
        if reg.capacity_reached() {
            self.saturated = true;
        }
        reg.insert_unchecked(address);
        self.cursor = (self.cursor + 1) % self.registers.len();
    }

    pub fn may_contain(&self, address: u64) -> bool {
        self.registers.iter().any(|r| r.may_contain(address))
    }

    /// Intersection test of `sig` against every register. A saturated bank
    /// reports a conflict conservatively.
    pub fn conflicts_with(&self, sig: &ParallelBloomSignature) -> Result<bool> {
        if let Some(first) = self.registers.first() {
            first.check_compatible(sig)?;
        }
        Ok(self.saturated || self.registers.iter().any(|r| r.intersects_unchecked(sig)))
    }

    pub fn insert_count(&self) -> u32 {
        self.registers.iter().map(|r| r.insert_count()).sum()
    }

    pub fn clear(&mut self) {
        self.registers.iter_mut().for_each(ParallelBloomSignature::clear);
        self.cursor = 0;
        self.saturated = false;
    }
}

/// Per-query false-positive probability of a one-bit-per-segment parallel
/// Bloom filter holding `n` inserts: `(1 - (1 - 1/b)^n)^m`.
pub fn analytic_fp_rate(n: u64, segment_bits: u64, m: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let b = segment_bits.max(1) as f64;
    let fill = 1.0 - (1.0 - 1.0 / b).powf(n as f64);
    fill.powi(m as i32)
}

/// Probability that every segment of the AND of two independently filled
/// signatures (with `n_a` and `n_b` inserts, no common address) is non-empty.
pub fn analytic_intersection_rate(n_a: u64, n_b: u64, segment_bits: u64, m: u32) -> f64 {
    let b = segment_bits.max(1) as f64;
    // Expected per-bit occupancy of each side; bits are treated as independent.
    let pa = 1.0 - (1.0 - 1.0 / b).powf(n_a as f64);
    let pb = 1.0 - (1.0 - 1.0 / b).powf(n_b as f64);
    let seg_empty = (1.0 - pa * pb).powf(b);
    (1.0 - seg_empty).powi(m as i32)
}

/// Monte-Carlo false-positive estimate for one signature configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpMeasurement {
    pub bits: usize,
    pub segments: usize,
    pub inserts: u64,
    pub queries: u64,
    pub membership_rate: f64,
    pub analytic_membership: f64,
    pub pair_trials: u64,
    /// Fraction of disjoint signature pairs whose AND is non-empty in every segment.
    pub intersection_rate: f64,
    pub analytic_intersection: f64,
}

/// Fill signatures with `inserts` random lines and probe them with
/// `queries` lines that were never inserted, spread over `trials` fresh
/// signatures; separately test `trials` disjoint pairs for intersection.
pub fn measure_fp(params: SignatureParams, inserts: u64, queries: u64, trials: u64, seed: u64) -> Result<FpMeasurement> {
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    let params = SignatureParams { capacity: params.capacity.max(u32::try_from(inserts).unwrap_or(u32::MAX)), ..params };
    params.validate()?;
    if trials == 0 {
        return Err(Error::param("fp measurement needs at least one trial"));
    }
    let family = Arc::new(H3HashFamily::new(params.seed, params.segments, params.segment_bits(), DEFAULT_ADDRESS_BITS)?);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let line_mask = (1u64 << DEFAULT_ADDRESS_BITS) - 1;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, taken: &mut HashSet<u64>| loop {
        let a = (rng.gen::<u64>() & line_mask) << LINE_SHIFT;
        if taken.insert(a) {
            return a;
        }
    };

    let per_trial = queries.div_ceil(trials);
    let (mut asked, mut hits) = (0u64, 0u64);
    for _ in 0..trials {
        let mut taken = HashSet::new();
        let mut sig = ParallelBloomSignature::with_family(params, Arc::clone(&family));
        for _ in 0..inserts {
            sig.insert(draw(&mut rng, &mut taken))?;
        }
        for _ in 0..per_trial.min(queries - asked) {
            hits += u64::from(sig.may_contain(draw(&mut rng, &mut taken)));
            asked += 1;
        }
    }

    let mut overlaps = 0u64;
    for _ in 0..trials {
        let mut taken = HashSet::new();
        let mut a = ParallelBloomSignature::with_family(params, Arc::clone(&family));
        let mut b = ParallelBloomSignature::with_family(params, Arc::clone(&family));
        for _ in 0..inserts {
            a.insert(draw(&mut rng, &mut taken))?;
            b.insert(draw(&mut rng, &mut taken))?;
        }
        overlaps += u64::from(a.intersection_nonempty(&b)?);
    }

    let seg = params.segment_bits() as u64;
    let m = params.segments as u32;
    let rate = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(FpMeasurement {
        bits: params.bits,
        segments: params.segments,
        inserts,
        queries: asked,
        membership_rate: rate(hits, asked),
        analytic_membership: analytic_fp_rate(inserts, seg, m),
        pair_trials: trials,
        intersection_rate: rate(overlaps, trials),
        analytic_intersection: analytic_intersection_rate(inserts, inserts, seg, m),
    })
}

//! 48-bit watermark keys and decoded bit logits.
//!
//! A key's canonical text form is 12 lowercase hex characters. Bit 0 is the
//! most significant bit of the first hex digit, so the packed `u64`
//! representation places bit `i` at position `47 - i`.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Fixed message length; matches the pretrained-extractor setting.
pub const KEY_BITS: usize = 48;

const KEY_MASK: u64 = (1u64 << KEY_BITS) - 1;

/// A 48-bit watermark message, the unit of identity for users.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WatermarkKey(u64);

impl WatermarkKey {
    /// Parses the canonical 12-hex-character form.
    pub fn from_hex(text: &str) -> Result<Self> {
        if text.len() != 12 {
            return Err(Error::KeyFormat {
                text: text.to_string(),
                reason: format!("expected 12 hex characters, got {}", text.len()),
            });
        }
        if let Some(bad) = text.chars().find(|c| !c.is_ascii_hexdigit()) {
            return Err(Error::KeyFormat {
                text: text.to_string(),
                reason: format!("invalid hex character {bad:?}"),
            });
        }
        let packed = u64::from_str_radix(text, 16).map_err(|e| Error::KeyFormat {
            text: text.to_string(),
            reason: e.to_string(),
        })?;
        Ok(Self(packed))
    }

    /// Canonical 12-character lowercase hex form.
    pub fn to_hex(self) -> String {
        format!("{:012x}", self.0)
    }

    /// Packed representation: bit `i` of the message at position `47 - i`.
    pub fn packed(self) -> u64 {
        self.0
    }

    pub fn from_packed(packed: u64) -> Self {
        Self(packed & KEY_MASK)
    }

    pub fn bit(self, i: usize) -> bool {
        assert!(i < KEY_BITS);
        (self.0 >> (KEY_BITS - 1 - i)) & 1 == 1
    }

    pub fn bits(self) -> [bool; KEY_BITS] {
        std::array::from_fn(|i| self.bit(i))
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        if bits.len() != KEY_BITS {
            return Err(Error::KeyFormat {
                text: format!("<{} bits>", bits.len()),
                reason: format!("expected {KEY_BITS} bits"),
            });
        }
        let mut packed = 0u64;
        for &b in bits {
            packed = (packed << 1) | b as u64;
        }
        Ok(Self(packed))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.gen::<u64>() & KEY_MASK)
    }

    pub fn hamming(self, other: Self) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Bits mapped {0,1} -> {-1,+1}, the network-input convention.
    pub fn to_signed(self) -> [f32; KEY_BITS] {
        std::array::from_fn(|i| if self.bit(i) { 1.0 } else { -1.0 })
    }

    /// Bits as 0/1 floats, the BCE-target convention.
    pub fn to_targets(self) -> [f32; KEY_BITS] {
        std::array::from_fn(|i| if self.bit(i) { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WatermarkKey({})", self.to_hex())
    }
}

/// Uniform key, deterministic in the seed.
pub fn random_key(seed: u64) -> WatermarkKey {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    WatermarkKey::random(&mut rng)
}

/// Batch of signed {-1,+1} key rows, shape `(n, 48)`.
pub fn keys_to_tensor(keys: &[WatermarkKey], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(keys.len() * KEY_BITS);
    for k in keys {
        data.extend_from_slice(&k.to_signed());
    }
    let t = Tensor::from_vec(data, (keys.len(), KEY_BITS), device)?.to_dtype(dtype)?;
    Ok(t)
}

/// Batch of 0/1 target rows, shape `(n, 48)`.
pub fn keys_to_targets(keys: &[WatermarkKey], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(keys.len() * KEY_BITS);
    for k in keys {
        data.extend_from_slice(&k.to_targets());
    }
    let t = Tensor::from_vec(data, (keys.len(), KEY_BITS), device)?.to_dtype(dtype)?;
    Ok(t)
}

/// 48 real values; the decoded message is `value > 0` per bit.
#[derive(Clone, Debug)]
pub struct BitLogits {
    values: [f32; KEY_BITS],
}

impl BitLogits {
    pub fn new(values: [f32; KEY_BITS]) -> Self {
        Self { values }
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        if values.len() != KEY_BITS {
            return Err(Error::Shape {
                context: "BitLogits::from_slice".to_string(),
                expected: format!("{KEY_BITS}"),
                actual: format!("{}", values.len()),
            });
        }
        Ok(Self {
            values: std::array::from_fn(|i| values[i]),
        })
    }

    /// Splits an `(n, 48)` logit tensor into per-sample logits.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let (n, bits) = t.dims2()?;
        if bits != KEY_BITS {
            return Err(Error::Shape {
                context: "BitLogits::from_tensor".to_string(),
                expected: format!("(_, {KEY_BITS})"),
                actual: format!("{:?}", t.shape()),
            });
        }
        let rows = t.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let mut out = Vec::with_capacity(n);
        for row in rows {
            out.push(Self::from_slice(&row)?);
        }
        Ok(out)
    }

    pub fn values(&self) -> &[f32; KEY_BITS] {
        &self.values
    }

    /// Thresholding at 0 is the only decode rule.
    pub fn decode(&self) -> WatermarkKey {
        let mut packed = 0u64;
        for v in self.values {
            packed = (packed << 1) | (v > 0.0) as u64;
        }
        WatermarkKey(packed)
    }

    /// Logits with perfect confidence for `key` (+/-20).
    pub fn perfect(key: WatermarkKey) -> Self {
        Self {
            values: std::array::from_fn(|i| if key.bit(i) { 20.0 } else { -20.0 }),
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            values: std::array::from_fn(|i| -self.values[i]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_and_saturated_keys() {
        let zero = WatermarkKey::from_hex("000000000000").unwrap();
        assert!(zero.bits().iter().all(|b| !b));
        let ones = WatermarkKey::from_hex("ffffffffffff").unwrap();
        assert!(ones.bits().iter().all(|b| *b));
    }

    #[test]
    fn hex_nibble_expansion() {
        // "8" = 1000 so bit 0 set; trailing "1" = 0001 so bit 47 set.
        let k = WatermarkKey::from_hex("800000000001").unwrap();
        assert!(k.bit(0));
        assert!((1..47).all(|i| !k.bit(i)));
        assert!(k.bit(47));
    }

    #[test]
    fn malformed_keys_name_offender() {
        let err = WatermarkKey::from_hex("00000000000g").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'g'"), "message should name the character: {msg}");
        assert!(WatermarkKey::from_hex("123").is_err());
        assert!(WatermarkKey::from_hex("0000000000000").is_err());
    }

    #[test]
    fn uppercase_accepted_canonicalized_lowercase() {
        let k = WatermarkKey::from_hex("ABCDEF012345").unwrap();
        assert_eq!(k.to_hex(), "abcdef012345");
    }

    #[test]
    fn random_key_deterministic_in_seed() {
        assert_eq!(random_key(7), random_key(7));
        // Fixed seed pair, evaluated once: distinct with overwhelming probability.
        assert_ne!(random_key(1), random_key(2));
    }

    #[test]
    fn random_key_bit_balance() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut ones = 0u64;
        let draws = 10_000;
        for _ in 0..draws {
            ones += WatermarkKey::random(&mut rng).packed().count_ones() as u64;
        }
        let mean = ones as f64 / (draws * KEY_BITS as u64) as f64;
        assert!((0.48..=0.52).contains(&mean), "mean bit value {mean}");
    }

    #[test]
    fn decode_thresholds_at_zero() {
        let logits = BitLogits::from_slice(
            &(0..KEY_BITS)
                .map(|i| if i % 3 == 0 { 0.5 } else { -0.25 })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let key = logits.decode();
        for i in 0..KEY_BITS {
            assert_eq!(key.bit(i), i % 3 == 0);
        }
        // Negating logits flips exactly the bits whose logits cross zero.
        let flipped = logits.negated().decode();
        assert_eq!(key.hamming(flipped), KEY_BITS as u32);
    }

    #[test]
    fn zero_logit_decodes_to_zero_bit() {
        let mut vals = [1.0f32; KEY_BITS];
        vals[5] = 0.0;
        let key = BitLogits::new(vals).decode();
        assert!(!key.bit(5));
    }

    proptest! {
        #[test]
        fn hex_roundtrip_bijective(raw in 0u64..(1u64 << 48)) {
            let key = WatermarkKey::from_packed(raw);
            let hex = key.to_hex();
            prop_assert_eq!(WatermarkKey::from_hex(&hex).unwrap(), key);
            prop_assert_eq!(hex.len(), 12);
        }

        #[test]
        fn bits_roundtrip(raw in 0u64..(1u64 << 48)) {
            let key = WatermarkKey::from_packed(raw);
            let back = WatermarkKey::from_bits(&key.bits()).unwrap();
            prop_assert_eq!(back, key);
        }
    }
}

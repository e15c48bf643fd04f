use rand::Rng;

use crate::error::{Error, Result};

/// Validation pattern; prefixes of it are used for shorter pattern lengths
/// and it repeats cyclically for longer ones.
pub const PATTERN: [u8; 8] = [1, 0, 1, 1, 0, 0, 1, 0];

pub fn pattern(k: usize) -> Vec<u8> {
    (0..k).map(|i| PATTERN[i % PATTERN.len()]).collect()
}

/// An n-bit watermark whose first `pattern_len` bits are the fixed pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
    pattern_len: usize,
}

impl Message {
    /// Takes the bits verbatim; the leading pattern is not enforced here so
    /// that decoded messages with a broken pattern can still be represented.
    pub fn new(bits: Vec<u8>, pattern_len: usize) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Contract(format!("message bit {b} is not binary")));
        }
        if pattern_len > bits.len() {
            return Err(Error::Contract(format!(
                "pattern of {pattern_len} bits does not fit a {}-bit message",
                bits.len()
            )));
        }
        Ok(Self { bits, pattern_len })
    }

    /// Pattern followed by `payload`.
    pub fn with_payload(payload: &[u8], pattern_len: usize) -> Result<Self> {
        let mut bits = pattern(pattern_len);
        bits.extend_from_slice(payload);
        Self::new(bits, pattern_len)
    }

    /// Pattern followed by a uniformly random payload.
    pub fn random<R: Rng + ?Sized>(n_bits: usize, pattern_len: usize, rng: &mut R) -> Self {
        assert!(pattern_len <= n_bits);
        let payload: Vec<u8> = (pattern_len..n_bits).map(|_| rng.gen_range(0..=1)).collect();
        Self::with_payload(&payload, pattern_len).expect("bits are binary")
    }

    /// Parses a bit string (`0`/`1`, optional `0b` prefix) or a hex string
    /// with a `0x` prefix. Without `raw`, input of `n_bits - pattern_len`
    /// bits is taken as the payload and the pattern is prefixed.
    pub fn parse(text: &str, n_bits: usize, pattern_len: usize, raw: bool) -> Result<Self> {
        let text = text.trim();
        let bits: Vec<u8> = if let Some(hex_str) = text.strip_prefix("0x") {
            let bytes = hex::decode(if hex_str.len() % 2 == 1 {
                format!("0{hex_str}")
            } else {
                hex_str.to_string()
            })
            .map_err(|e| Error::Parameter(format!("bad hex message: {e}")))?;
            let all: Vec<u8> = bytes
                .iter()
                .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
                .collect();
            let want = if raw { n_bits } else { n_bits - pattern_len };
            let lead = hex_str.len() * 4;
            if lead < want || lead >= want + 4 {
                return Err(Error::Parameter(format!(
                    "hex message has {lead} bits, expected {want}"
                )));
            }
            let skip = all.len() - want;
            if all[..skip].iter().any(|&b| b != 0) {
                return Err(Error::Parameter(format!("hex message exceeds {want} bits")));
            }
            all[skip..].to_vec()
        } else {
            let body = text.strip_prefix("0b").unwrap_or(text);
            body.chars()
                .filter(|c| *c != '_')
                .map(|c| match c {
                    '0' => Ok(0),
                    '1' => Ok(1),
                    other => Err(Error::Parameter(format!("bad bit '{other}' in message"))),
                })
                .collect::<Result<_>>()?
        };
        if raw || bits.len() == n_bits {
            if bits.len() != n_bits {
                return Err(Error::Parameter(format!(
                    "message has {} bits, expected {n_bits}",
                    bits.len()
                )));
            }
            Self::new(bits, pattern_len)
        } else if bits.len() == n_bits - pattern_len {
            Self::with_payload(&bits, pattern_len)
        } else {
            Err(Error::Parameter(format!(
                "message has {} bits, expected {} payload bits or {n_bits} total",
                bits.len(),
                n_bits - pattern_len
            )))
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn pattern_len(&self) -> usize {
        self.pattern_len
    }

    pub fn payload(&self) -> &[u8] {
        &self.bits[self.pattern_len..]
    }

    /// Whether the leading bits equal the fixed pattern.
    pub fn pattern_ok(&self) -> bool {
        self.bits[..self.pattern_len] == pattern(self.pattern_len)[..]
    }

    /// Bits mapped to `2b - 1`.
    pub fn signed(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| 2.0 * b as f32 - 1.0).collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    /// Every bit flipped; the pattern length is kept.
    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
            pattern_len: self.pattern_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pattern_prefix() {
        assert_eq!(pattern(4), vec![1, 0, 1, 1]);
        assert_eq!(pattern(10), vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 0]);
        let m = Message::random(16, 4, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert!(m.pattern_ok());
        assert_eq!(m.len(), 16);
    }

    #[test]
    fn parse_forms() {
        let raw = Message::parse("1011000011110000", 16, 4, true).unwrap();
        assert_eq!(raw.to_bit_string(), "1011000011110000");
        let auto = Message::parse("000011110000", 16, 4, false).unwrap();
        assert_eq!(auto, raw);
        let full = Message::parse("0b1011_0000_1111_0000", 16, 4, false).unwrap();
        assert_eq!(full, raw);
        let hex = Message::parse("0xb0f0", 16, 4, true).unwrap();
        assert_eq!(hex, raw);
        let hex_payload = Message::parse("0x0f0", 16, 4, false).unwrap();
        assert_eq!(hex_payload, raw);
        assert!(Message::parse("0xb0f0", 16, 4, false).is_err());
        assert!(Message::parse("10112", 16, 4, false).is_err());
        assert!(Message::parse("101", 16, 4, false).is_err());
        assert!(Message::parse("101", 16, 4, true).is_err());
    }

    #[test]
    fn invariants() {
        assert!(Message::new(vec![0, 2], 0).is_err());
        assert!(Message::new(vec![0, 1], 3).is_err());
        let m = Message::new(vec![0, 1, 1], 1).unwrap();
        assert!(!m.pattern_ok());
        assert_eq!(m.signed(), vec![-1.0, 1.0, 1.0]);
        assert_eq!(m.complement().bits(), &[1, 0, 0]);
    }
}

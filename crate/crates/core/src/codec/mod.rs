//! Message representation and error correction.
//!
//! A payload travels as bit planes shaped like the secret-view image: depth D
//! planes of H×W bits, filled plane-major. The stream begins with a 32-bit
//! big-endian count of payload bits, then the payload MSB-first, then zero
//! padding. Reed-Solomon coding over GF(2^8) is layered underneath for
//! robustness; long messages span consecutive codewords with a shortened
//! final block.

mod gf;
mod rs;

pub use rs::ReedSolomon;

const HEADER_BITS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("message needs {needed_bits} bits but planes hold {capacity_bits} (max {max_message_bytes} bytes)")]
    CapacityExceeded {
        capacity_bits: usize,
        needed_bits: usize,
        max_message_bytes: usize,
    },
    #[error("corrupted payload: {0}")]
    Corrupted(String),
    #[error("bit sequences differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("invalid code parameters n={n} k={k} (need 0 < k < n <= 255)")]
    BadCodeParams { n: usize, k: usize },
    #[error("block length {got}, expected {expected}")]
    BadBlockLen { expected: usize, got: usize },
    #[error("more errors than the code can correct")]
    TooManyErrors,
}

/// D×H×W bits carrying a framed message, plane-major: plane, then row, then
/// column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlanes {
    depth: usize,
    height: usize,
    width: usize,
    bits: Vec<u8>,
    payload_len_bits: usize,
}

impl BitPlanes {
    /// Frames a message into planes: 32-bit big-endian payload bit count,
    /// payload bits MSB-first, zero padding to capacity.
    pub fn from_message(
        message: &[u8],
        depth: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, CodecError> {
        let capacity = check_dims(depth, height, width)?;
        let needed = HEADER_BITS + 8 * message.len();
        if needed > capacity {
            return Err(CodecError::CapacityExceeded {
                capacity_bits: capacity,
                needed_bits: needed,
                max_message_bytes: capacity.saturating_sub(HEADER_BITS) / 8,
            });
        }
        let mut bits = Vec::with_capacity(capacity);
        let len = (8 * message.len()) as u32;
        for i in (0..HEADER_BITS).rev() {
            bits.push(((len >> i) & 1) as u8);
        }
        for &byte in message {
            for i in (0..8).rev() {
                bits.push((byte >> i) & 1);
            }
        }
        bits.resize(capacity, 0);
        Ok(Self {
            depth,
            height,
            width,
            bits,
            payload_len_bits: needed,
        })
    }

    /// Wraps already-extracted bits; the meaningful prefix is unknown until
    /// the header is parsed, so the whole capacity counts as payload.
    pub fn from_raw_bits(
        bits: Vec<u8>,
        depth: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, CodecError> {
        let capacity = check_dims(depth, height, width)?;
        if bits.len() != capacity {
            return Err(CodecError::Corrupted(format!(
                "expected {} bits, got {}",
                capacity,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CodecError::Corrupted("bit values outside {0,1}".into()));
        }
        Ok(Self {
            depth,
            height,
            width,
            bits,
            payload_len_bits: capacity,
        })
    }

    /// Parses the header and returns the message bytes. Off-key extractions
    /// land here as corruption errors: a header that does not fit the
    /// capacity or a bit count that is not a whole number of bytes.
    pub fn to_message(&self) -> Result<Vec<u8>, CodecError> {
        let capacity = self.bits.len();
        let mut len: u64 = 0;
        for &b in &self.bits[..HEADER_BITS] {
            len = (len << 1) | b as u64;
        }
        let len = len as usize;
        if len > capacity - HEADER_BITS {
            return Err(CodecError::Corrupted(format!(
                "header claims {} payload bits, capacity is {}",
                len,
                capacity - HEADER_BITS
            )));
        }
        if len % 8 != 0 {
            return Err(CodecError::Corrupted(format!(
                "header claims {len} payload bits, not a whole number of bytes"
            )));
        }
        let mut out = Vec::with_capacity(len / 8);
        for chunk in self.bits[HEADER_BITS..HEADER_BITS + len].chunks(8) {
            out.push(chunk.iter().fold(0u8, |acc, &b| (acc << 1) | b));
        }
        Ok(out)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity_bits(&self) -> usize {
        self.bits.len()
    }

    pub fn payload_len_bits(&self) -> usize {
        self.payload_len_bits
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit(&self, d: usize, row: usize, col: usize) -> u8 {
        self.bits[d * self.height * self.width + row * self.width + col]
    }

    /// Extractor training targets: the same bits as 0.0/1.0.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }
}

fn check_dims(depth: usize, height: usize, width: usize) -> Result<usize, CodecError> {
    if depth == 0 || height == 0 || width == 0 {
        return Err(CodecError::Corrupted(format!(
            "degenerate plane dims {depth}x{height}x{width}"
        )));
    }
    Ok(depth * height * width)
}

/// Splits a message into k-byte chunks, Reed-Solomon encodes each, and
/// concatenates the codewords. A final chunk shorter than k becomes a
/// shortened codeword: the code sees zero bytes prepended, the wire carries
/// only the real data plus parity.
pub fn rs_encode_stream(message: &[u8], rs: &ReedSolomon) -> Vec<u8> {
    let k = rs.k();
    let mut out = Vec::with_capacity(message.len() + message.len().div_ceil(k) * rs.parity_len());
    for chunk in message.chunks(k) {
        if chunk.len() == k {
            out.extend(rs.encode(chunk).expect("chunk length is k"));
        } else {
            let mut padded = vec![0u8; k - chunk.len()];
            padded.extend_from_slice(chunk);
            let code = rs.encode(&padded).expect("padded to k");
            out.extend_from_slice(&code[k - chunk.len()..]);
        }
    }
    out
}

/// Inverse of [`rs_encode_stream`]; corrects up to (n−k)/2 byte errors per
/// block.
pub fn rs_decode_stream(coded: &[u8], rs: &ReedSolomon) -> Result<Vec<u8>, CodecError> {
    let n = rs.n();
    let k = rs.k();
    let parity = rs.parity_len();
    let mut out = Vec::new();
    let mut rest = coded;
    while !rest.is_empty() {
        if rest.len() >= n {
            out.extend(rs.decode(&rest[..n])?);
            rest = &rest[n..];
        } else {
            if rest.len() <= parity {
                return Err(CodecError::Corrupted(format!(
                    "trailing block of {} bytes cannot hold data plus {} parity",
                    rest.len(),
                    parity
                )));
            }
            let data_len = rest.len() - parity;
            let mut padded = vec![0u8; k - data_len];
            padded.extend_from_slice(rest);
            let decoded = rs.decode(&padded)?;
            out.extend_from_slice(&decoded[k - data_len..]);
            rest = &[];
        }
    }
    Ok(out)
}

/// Effective hidden bits per pixel for depth D at bit error rate p:
/// D·max(0, 1−2p).
pub fn rs_bpp(depth: usize, p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "bit error rate {p} outside [0,1]");
    depth as f64 * (1.0 - 2.0 * p).max(0.0)
}

/// Fraction of positions where the bit sequences agree: 1 − BER.
pub fn decoding_accuracy(m: &[u8], m_prime: &[u8]) -> Result<f64, CodecError> {
    if m.len() != m_prime.len() || m.is_empty() {
        return Err(CodecError::LengthMismatch {
            a: m.len(),
            b: m_prime.len(),
        });
    }
    let errors = m
        .iter()
        .zip(m_prime)
        .filter(|(&a, &b)| (a ^ b) & 1 == 1)
        .count();
    Ok(1.0 - errors as f64 / m.len() as f64)
}

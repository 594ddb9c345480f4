//! Systematic Reed-Solomon codes over GF(2^8).
//!
//! An (n, k) code carries k data bytes in an n-byte codeword and corrects up
//! to (n−k)/2 corrupted bytes at unknown positions. Decoding runs
//! Berlekamp-Massey for the error locator, a Chien search for the error
//! positions, and Forney's formula for the magnitudes.
//!
//! Polynomials use the wire convention: byte i of a codeword is the
//! coefficient of x^(n−1−i), so data bytes lead and parity trails.

use super::gf;
use super::CodecError;

#[derive(Clone, Debug)]
pub struct ReedSolomon {
    n: usize,
    k: usize,
    /// Generator polynomial Π (x − α^i), low degree first, monic.
    generator: Vec<u8>,
}

impl ReedSolomon {
    pub fn new(n: usize, k: usize) -> Result<Self, CodecError> {
        if !(1..=255).contains(&n) || k == 0 || k >= n {
            return Err(CodecError::BadCodeParams { n, k });
        }
        let parity = n - k;
        let mut generator = vec![0u8; parity + 1];
        generator[0] = 1;
        let mut degree = 0;
        for i in 0..parity {
            // generator *= (x + α^i)
            let root = gf::alpha_pow(i);
            degree += 1;
            for j in (1..=degree).rev() {
                generator[j] = gf::add(generator[j - 1], gf::mul(generator[j], root));
            }
            generator[0] = gf::mul(generator[0], root);
        }
        Ok(Self { n, k, generator })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn parity_len(&self) -> usize {
        self.n - self.k
    }

    pub fn correctable_errors(&self) -> usize {
        (self.n - self.k) / 2
    }

    /// Encodes exactly k data bytes into an n-byte systematic codeword.
    pub fn encode(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        if data.len() != self.k {
            return Err(CodecError::BadBlockLen {
                expected: self.k,
                got: data.len(),
            });
        }
        let parity = self.remainder(data);
        let mut out = Vec::with_capacity(self.n);
        out.extend_from_slice(data);
        out.extend_from_slice(&parity);
        Ok(out)
    }

    /// Remainder of data(x)·x^(n−k) divided by the generator, as wire bytes.
    fn remainder(&self, data: &[u8]) -> Vec<u8> {
        let parity = self.n - self.k;
        let mut rem = vec![0u8; parity];
        for &byte in data {
            let factor = gf::add(byte, rem[0]);
            rem.rotate_left(1);
            rem[parity - 1] = 0;
            if factor != 0 {
                for (r, &g) in rem.iter_mut().zip(self.generator[..parity].iter().rev()) {
                    *r = gf::add(*r, gf::mul(factor, g));
                }
            }
        }
        rem
    }

    /// Corrects up to (n−k)/2 byte errors and returns the k data bytes.
    pub fn decode(&self, received: &[u8]) -> Result<Vec<u8>, CodecError> {
        if received.len() != self.n {
            return Err(CodecError::BadBlockLen {
                expected: self.n,
                got: received.len(),
            });
        }
        let syndromes = self.syndromes(received);
        if syndromes.iter().all(|&s| s == 0) {
            return Ok(received[..self.k].to_vec());
        }
        let locator = berlekamp_massey(&syndromes);
        let errors = locator.len() - 1;
        if errors == 0 || errors > self.correctable_errors() {
            return Err(CodecError::TooManyErrors);
        }
        let positions = self.chien_search(&locator);
        if positions.len() != errors {
            return Err(CodecError::TooManyErrors);
        }
        let magnitudes = self.forney(&syndromes, &locator, &positions);
        let mut fixed = received.to_vec();
        for (&pos, &mag) in positions.iter().zip(&magnitudes) {
            fixed[pos] = gf::add(fixed[pos], mag);
        }
        if self.syndromes(&fixed).iter().any(|&s| s != 0) {
            return Err(CodecError::TooManyErrors);
        }
        Ok(fixed[..self.k].to_vec())
    }

    /// S_j = r(α^j) for j in 0..n−k.
    fn syndromes(&self, received: &[u8]) -> Vec<u8> {
        (0..self.n - self.k)
            .map(|j| {
                let a = gf::alpha_pow(j);
                received
                    .iter()
                    .fold(0u8, |acc, &byte| gf::add(gf::mul(acc, a), byte))
            })
            .collect()
    }

    /// Byte positions i whose locator X_i = α^(n−1−i) has Λ(X_i^(−1)) = 0.
    fn chien_search(&self, locator: &[u8]) -> Vec<usize> {
        let mut positions = Vec::new();
        for i in 0..self.n {
            let x_inv = gf::alpha_pow(255 - (self.n - 1 - i) % 255);
            if poly_eval(locator, x_inv) == 0 {
                positions.push(i);
            }
        }
        positions
    }

    fn forney(&self, syndromes: &[u8], locator: &[u8], positions: &[usize]) -> Vec<u8> {
        // Ω(x) = S(x)·Λ(x) mod x^(n−k)
        let mut omega = vec![0u8; self.n - self.k];
        for (i, &s) in syndromes.iter().enumerate() {
            for (j, &l) in locator.iter().enumerate() {
                if i + j < omega.len() {
                    omega[i + j] = gf::add(omega[i + j], gf::mul(s, l));
                }
            }
        }
        // Formal derivative of Λ: in characteristic 2 only odd terms survive,
        // and each drops one power, so deriv[j] pairs with y^j.
        let deriv: Vec<u8> = locator
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| if i % 2 == 1 { c } else { 0 })
            .collect();
        positions
            .iter()
            .map(|&pos| {
                let exp = (self.n - 1 - pos) % 255;
                let x = gf::alpha_pow(exp);
                let x_inv = gf::alpha_pow(255 - exp);
                let num = gf::mul(x, poly_eval(&omega, x_inv));
                let den = deriv
                    .iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &c)| {
                        gf::add(acc, gf::mul(c, gf::alpha_pow((255 - exp) * i % 255)))
                    });
                gf::div(num, den)
            })
            .collect()
    }
}

/// Λ(x) coefficients, low degree first, λ_0 = 1.
fn berlekamp_massey(syndromes: &[u8]) -> Vec<u8> {
    let mut lambda = vec![1u8];
    let mut prev = vec![1u8];
    let mut l = 0usize;
    let mut m = 1usize;
    let mut b = 1u8;
    for (nn, _) in syndromes.iter().enumerate() {
        let mut delta = syndromes[nn];
        for i in 1..=l.min(lambda.len() - 1) {
            delta = gf::add(delta, gf::mul(lambda[i], syndromes[nn - i]));
        }
        if delta == 0 {
            m += 1;
        } else if 2 * l <= nn {
            let snapshot = lambda.clone();
            let coef = gf::div(delta, b);
            lambda = poly_sub_shifted(&lambda, &prev, coef, m);
            l = nn + 1 - l;
            prev = snapshot;
            b = delta;
            m = 1;
        } else {
            let coef = gf::div(delta, b);
            lambda = poly_sub_shifted(&lambda, &prev, coef, m);
            m += 1;
        }
    }
    // Trim trailing zero coefficients so degree reflects the locator.
    while lambda.len() > 1 && *lambda.last().unwrap() == 0 {
        lambda.pop();
    }
    lambda
}

/// a(x) − coef·x^shift·b(x); subtraction is xor here.
fn poly_sub_shifted(a: &[u8], b: &[u8], coef: u8, shift: usize) -> Vec<u8> {
    let mut out = a.to_vec();
    if out.len() < b.len() + shift {
        out.resize(b.len() + shift, 0);
    }
    for (i, &bc) in b.iter().enumerate() {
        out[i + shift] = gf::add(out[i + shift], gf::mul(coef, bc));
    }
    out
}

/// Evaluates a low-first coefficient polynomial by Horner from the top.
fn poly_eval(poly: &[u8], x: u8) -> u8 {
    poly.iter()
        .rev()
        .fold(0u8, |acc, &c| gf::add(gf::mul(acc, x), c))
}

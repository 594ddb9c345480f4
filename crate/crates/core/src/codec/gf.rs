//! Arithmetic in GF(2^8) modulo x^8 + x^4 + x^3 + x^2 + 1, generator 2.

const POLY: u16 = 0x11d;

const fn build_tables() -> ([u8; 512], [u8; 256]) {
    let mut exp = [0u8; 512];
    let mut log = [0u8; 256];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        x <<= 1;
        if x & 0x100 != 0 {
            x ^= POLY;
        }
        i += 1;
    }
    // Doubled so mul can index log[a] + log[b] without a modulo.
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    (exp, log)
}

const TABLES: ([u8; 512], [u8; 256]) = build_tables();
const EXP: [u8; 512] = TABLES.0;
const LOG: [u8; 256] = TABLES.1;

#[inline]
pub(crate) fn add(a: u8, b: u8) -> u8 {
    a ^ b
}

#[inline]
pub(crate) fn mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        0
    } else {
        EXP[LOG[a as usize] as usize + LOG[b as usize] as usize]
    }
}

/// Division by zero is a caller bug, not a data condition.
#[inline]
pub(crate) fn div(a: u8, b: u8) -> u8 {
    assert_ne!(b, 0, "division by zero in GF(256)");
    if a == 0 {
        0
    } else {
        EXP[LOG[a as usize] as usize + 255 - LOG[b as usize] as usize]
    }
}

/// α^e for any non-negative exponent.
#[inline]
pub(crate) fn alpha_pow(e: usize) -> u8 {
    EXP[e % 255]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_cycles_through_all_nonzero_elements() {
        let mut seen = [false; 256];
        for e in 0..255 {
            let v = alpha_pow(e);
            assert_ne!(v, 0);
            assert!(!seen[v as usize], "alpha^{e} repeats");
            seen[v as usize] = true;
        }
        assert_eq!(alpha_pow(255), 1);
    }

    #[test]
    fn field_axioms_hold_exhaustively() {
        for a in 0..=255u8 {
            assert_eq!(mul(a, 1), a);
            assert_eq!(mul(a, 0), 0);
            assert_eq!(add(a, a), 0);
            if a != 0 {
                assert_eq!(mul(a, div(1, a)), 1);
            }
            for b in 0..=255u8 {
                assert_eq!(mul(a, b), mul(b, a));
                if b != 0 {
                    assert_eq!(mul(div(a, b), b), a);
                }
            }
        }
    }

    #[test]
    fn known_products() {
        // 2·128 wraps around the reduction polynomial: x^8 ≡ x^4+x^3+x^2+1.
        assert_eq!(mul(2, 128), 0x1d);
        assert_eq!(alpha_pow(8), 0x1d);
    }

    #[test]
    fn distributivity_spot_checks() {
        for a in [3u8, 29, 64, 255] {
            for b in [7u8, 100, 200] {
                for c in [1u8, 90, 254] {
                    assert_eq!(mul(a, add(b, c)), add(mul(a, b), mul(a, c)));
                }
            }
        }
    }
}

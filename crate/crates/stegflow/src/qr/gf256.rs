//! GF(2^8) arithmetic and Reed-Solomon codec for the QR symbology
//! (field polynomial 0x11D, generator element 2, code roots at α^0..).

const POLY: u16 = 0x11D;

/// exp/log tables built at first use.
struct Tables {
    exp: [u8; 512],
    log: [u8; 256],
}

fn tables() -> &'static Tables {
    use std::sync::OnceLock;
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        for i in 0..255 {
            exp[i] = x as u8;
            log[x as usize] = i as u8;
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= POLY;
            }
        }
        for i in 255..512 {
            exp[i] = exp[i - 255];
        }
        Tables { exp, log }
    })
}

pub fn gf_mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    let t = tables();
    t.exp[t.log[a as usize] as usize + t.log[b as usize] as usize]
}

pub fn gf_div(a: u8, b: u8) -> u8 {
    assert!(b != 0, "division by zero in GF(256)");
    if a == 0 {
        return 0;
    }
    let t = tables();
    t.exp[t.log[a as usize] as usize + 255 - t.log[b as usize] as usize]
}

pub fn gf_pow(base: u8, e: usize) -> u8 {
    if base == 0 {
        return if e == 0 { 1 } else { 0 };
    }
    let t = tables();
    t.exp[(t.log[base as usize] as usize * e) % 255]
}

pub fn gf_inv(a: u8) -> u8 {
    gf_div(1, a)
}

/// Evaluate a polynomial (index 0 = highest-degree coefficient) at x.
fn poly_eval(p: &[u8], x: u8) -> u8 {
    let mut y = 0u8;
    for &c in p {
        y = gf_mul(y, x) ^ c;
    }
    y
}

fn poly_mul(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] ^= gf_mul(ai, bj);
        }
    }
    out
}

/// Generator polynomial with roots α^0 .. α^(degree-1).
fn generator_poly(degree: usize) -> Vec<u8> {
    let mut g = vec![1u8];
    for d in 0..degree {
        g = poly_mul(&g, &[1, gf_pow(2, d)]);
    }
    g
}

/// Reed-Solomon parity bytes for `data`.
pub fn rs_encode(data: &[u8], ecc_len: usize) -> Vec<u8> {
    let gen = generator_poly(ecc_len);
    let mut rem = vec![0u8; ecc_len];
    for &d in data {
        let factor = d ^ rem[0];
        rem.rotate_left(1);
        rem[ecc_len - 1] = 0;
        for (r, &g) in rem.iter_mut().zip(gen[1..].iter()) {
            *r ^= gf_mul(g, factor);
        }
    }
    rem
}

/// Correct up to `ecc_len/2` byte errors in a full codeword
/// (data followed by parity). Returns the corrected codeword, or `None` when
/// the error pattern is uncorrectable.
pub fn rs_correct(codeword: &[u8], ecc_len: usize) -> Option<Vec<u8>> {
    let n = codeword.len();
    // Syndromes.
    let mut synd = vec![0u8; ecc_len];
    let mut has_error = false;
    for (j, s) in synd.iter_mut().enumerate() {
        *s = poly_eval(codeword, gf_pow(2, j));
        has_error |= *s != 0;
    }
    if !has_error {
        return Some(codeword.to_vec());
    }

    // Berlekamp-Massey (ascending-degree coefficients, sigma[0] = 1).
    let mut sigma = vec![1u8];
    let mut b_poly = vec![1u8];
    let mut l = 0usize;
    let mut m = 1usize;
    let mut b = 1u8;
    for i in 0..ecc_len {
        let mut delta = synd[i];
        for j in 1..=l.min(sigma.len() - 1) {
            delta ^= gf_mul(sigma[j], synd[i - j]);
        }
        if delta == 0 {
            m += 1;
        } else {
            // sigma -= (delta/b) * x^m * B
            let coef = gf_div(delta, b);
            let mut t = sigma.clone();
            if t.len() < b_poly.len() + m {
                t.resize(b_poly.len() + m, 0);
            }
            for (k, &c) in b_poly.iter().enumerate() {
                t[k + m] ^= gf_mul(coef, c);
            }
            if 2 * l <= i {
                b_poly = sigma;
                l = i + 1 - l;
                b = delta;
                m = 1;
            } else {
                m += 1;
            }
            sigma = t;
        }
    }
    while sigma.last() == Some(&0) {
        sigma.pop();
    }
    let n_errors = sigma.len() - 1;
    if n_errors != l || n_errors == 0 || n_errors * 2 > ecc_len {
        return None;
    }

    // Chien search: roots of sigma give error positions.
    let mut err_pos = Vec::new();
    for i in 0..n {
        // position i (0 = first byte) corresponds to power n-1-i
        let xi_inv = gf_pow(2, (255 - ((n - 1 - i) % 255)) % 255);
        let mut v = 0u8;
        for (k, &c) in sigma.iter().enumerate() {
            v ^= gf_mul(c, gf_pow(xi_inv, k));
        }
        if v == 0 {
            err_pos.push(i);
        }
    }
    if err_pos.len() != n_errors {
        return None;
    }

    // Forney: error magnitudes from the evaluator omega = (synd * sigma) mod x^ecc.
    let mut omega = vec![0u8; ecc_len];
    for (i, &s) in synd.iter().enumerate() {
        for (j, &c) in sigma.iter().enumerate() {
            if i + j < ecc_len {
                omega[i + j] ^= gf_mul(s, c);
            }
        }
    }
    let mut out = codeword.to_vec();
    for &pos in &err_pos {
        let x = gf_pow(2, (n - 1 - pos) % 255); // X_k
        let x_inv = gf_inv(x);
        // omega(X^-1)
        let mut num = 0u8;
        for (k, &c) in omega.iter().enumerate() {
            num ^= gf_mul(c, gf_pow(x_inv, k));
        }
        // sigma'(X^-1): formal derivative keeps odd-degree terms.
        let mut den = 0u8;
        for (k, &c) in sigma.iter().enumerate() {
            if k % 2 == 1 {
                den ^= gf_mul(c, gf_pow(x_inv, k - 1));
            }
        }
        if den == 0 {
            return None;
        }
        let mag = gf_mul(x, gf_div(num, den));
        out[pos] ^= mag;
    }

    // Verify: all syndromes of the corrected word must vanish.
    for j in 0..ecc_len {
        if poly_eval(&out, gf_pow(2, j)) != 0 {
            return None;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_axioms() {
        for a in 1..=255u8 {
            assert_eq!(gf_mul(a, gf_inv(a)), 1);
            assert_eq!(gf_div(a, a), 1);
        }
        assert_eq!(gf_mul(0, 7), 0);
        assert_eq!(gf_pow(2, 8), 0x1D ^ 0x00); // 2^8 = poly remainder 0x11D - 0x100
    }

    #[test]
    fn encode_then_zero_syndromes() {
        let data = b"hello reed solomon";
        let ecc = rs_encode(data, 22);
        let mut cw = data.to_vec();
        cw.extend_from_slice(&ecc);
        for j in 0..22 {
            assert_eq!(poly_eval(&cw, gf_pow(2, j)), 0, "syndrome {j} non-zero");
        }
    }

    #[test]
    fn corrects_up_to_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let data: Vec<u8> = (0..24).map(|_| rng.gen()).collect();
            let ecc_len = 22;
            let ecc = rs_encode(&data, ecc_len);
            let mut cw = data.clone();
            cw.extend_from_slice(&ecc);
            let n_err = rng.gen_range(0..=ecc_len / 2);
            let mut corrupted = cw.clone();
            let mut positions: Vec<usize> = (0..cw.len()).collect();
            for k in 0..n_err {
                let pick = rng.gen_range(k..positions.len());
                positions.swap(k, pick);
                let flip: u8 = rng.gen_range(1..=255);
                corrupted[positions[k]] ^= flip;
            }
            let fixed = rs_correct(&corrupted, ecc_len);
            assert_eq!(fixed.as_deref(), Some(cw.as_slice()), "trial {trial}");
        }
    }

    #[test]
    fn detects_overload() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<u8> = (0..24).map(|_| rng.gen()).collect();
        let ecc_len = 22;
        let ecc = rs_encode(&data, ecc_len);
        let mut cw = data;
        cw.extend_from_slice(&ecc);
        let mut wrecked = cw.clone();
        for b in wrecked.iter_mut().take(20) {
            *b ^= 0xA5;
        }
        // More errors than capacity: either failure or a different codeword,
        // but never a silent return of the original with wrong content.
        if let Some(out) = rs_correct(&wrecked, ecc_len) {
            assert_ne!(out, cw);
        }
    }
}

//! Separable floating-point 8x8 DCT-II / DCT-III.

use std::sync::OnceLock;

/// basis[u][x] = C(u)/2 * cos((2x+1) u pi / 16)
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let c = if u == 0 {
                std::f64::consts::FRAC_1_SQRT_2
            } else {
                1.0
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Forward transform of a level-shifted block (natural order, in place).
pub fn forward(block: &mut [f64; 64]) {
    let m = basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = sum_x m[u][x] * block[y][x]
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                s += m[u][x] * block[y * 8 + x];
            }
            tmp[y * 8 + u] = s;
        }
    }
    for u in 0..8 {
        for v in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                s += m[v][y] * tmp[y * 8 + u];
            }
            block[v * 8 + u] = s;
        }
    }
}

/// Inverse transform (natural order, in place).
pub fn inverse(block: &mut [f64; 64]) {
    let m = basis();
    let mut tmp = [0.0; 64];
    // columns: tmp[y][u] = sum_v m[v][y] * block[v][u]
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for v in 0..8 {
                s += m[v][y] * block[v * 8 + u];
            }
            tmp[y * 8 + u] = s;
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                s += m[u][x] * tmp[y * 8 + u];
            }
            block[y * 8 + x] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut b = [0.0; 64];
        for (i, v) in b.iter_mut().enumerate() {
            *v = ((i * 37) % 255) as f64 - 128.0;
        }
        let orig = b;
        forward(&mut b);
        inverse(&mut b);
        for (a, o) in b.iter().zip(orig.iter()) {
            assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_block_has_only_dc() {
        let mut b = [10.0; 64];
        forward(&mut b);
        assert!((b[0] - 80.0).abs() < 1e-9);
        assert!(b[1..].iter().all(|v| v.abs() < 1e-9));
    }
}

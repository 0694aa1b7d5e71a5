//! sRGB <-> CIE L*a*b* (D65) conversion in f64.

use std::sync::OnceLock;

const XN: f64 = 0.950_47;
const YN: f64 = 1.0;
const ZN: f64 = 1.088_83;
const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f_lab(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn f_lab_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPS {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| {
        let m = RGB_TO_XYZ;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // cofactor of (j, i)
                let (r0, r1) = match j {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let (c0, c1) = match i {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                *v = sign * minor / det;
            }
        }
        inv
    })
}

fn mul3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = mul3(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let (fx, fy, fz) = (f_lab(x / XN), f_lab(y / YN), f_lab(z / ZN));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (f_lab_inv(fx) * XN, f_lab_inv(fy) * YN, f_lab_inv(fz) * ZN);
    mul3(xyz_to_rgb_matrix(), [x, y, z]).map(|c| linear_to_srgb(c.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_tight() {
        for i in 0..=10 {
            for j in 0..=10 {
                for k in 0..=10 {
                    let rgb = [i as f64 / 10.0, j as f64 / 10.0, k as f64 / 10.0];
                    let back = lab_to_rgb(rgb_to_lab(rgb));
                    for c in 0..3 {
                        assert!((back[c] - rgb[c]).abs() < 1e-9, "{rgb:?} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn white_is_l100() {
        let lab = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-3);
        assert!(lab[1].abs() < 1e-2 && lab[2].abs() < 1e-2);
    }
}

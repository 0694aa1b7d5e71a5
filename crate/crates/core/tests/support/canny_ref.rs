//! Brute-force Canny: a direct, unoptimized transcription of the classic
//! algorithm, used as an oracle for the library implementation.

use mop_core::canny::{quantize, EdgeMap, CANNY_SIGMA, SOBEL_NORM};
use mop_core::image::ImagePatch;

fn clamp(i: i64, n: usize) -> usize {
    i.max(0).min(n as i64 - 1) as usize
}

pub fn reference_canny(image: &ImagePatch, low: f64, high: f64) -> EdgeMap {
    let (h, w) = image.dims();
    let mut gray = vec![vec![0.0f64; w]; h];
    for y in 0..h {
        for x in 0..w {
            let r = image.get(y, x, 0) as f64;
            let g = image.get(y, x, 1) as f64;
            let b = image.get(y, x, 2) as f64;
            gray[y][x] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
    }

    // full 2-D Gaussian kernel
    let radius = (3.0 * CANNY_SIGMA).ceil() as i64;
    let mut kernel = vec![];
    let mut total = 0.0;
    for i in -radius..=radius {
        let mut row = vec![];
        for j in -radius..=radius {
            let v = (-((i * i + j * j) as f64) / (2.0 * CANNY_SIGMA * CANNY_SIGMA)).exp();
            total += v;
            row.push(v);
        }
        kernel.push(row);
    }
    let mut smooth = vec![vec![0.0f64; w]; h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for i in -radius..=radius {
                for j in -radius..=radius {
                    let k = kernel[(i + radius) as usize][(j + radius) as usize] / total;
                    acc += k * gray[clamp(y + i, h)][clamp(x + j, w)];
                }
            }
            smooth[y as usize][x as usize] = acc;
        }
    }

    let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let sobel_y = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut mag = vec![vec![0.0f64; w]; h];
    let mut angle = vec![vec![0.0f64; w]; h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..3i64 {
                for j in 0..3i64 {
                    let v = smooth[clamp(y + i - 1, h)][clamp(x + j - 1, w)];
                    gx += sobel_x[i as usize][j as usize] * v;
                    gy += sobel_y[i as usize][j as usize] * v;
                }
            }
            mag[y as usize][x as usize] = quantize((gx * gx + gy * gy).sqrt() / SOBEL_NORM);
            let mut a = gy.atan2(gx).to_degrees();
            if a < 0.0 {
                a += 180.0;
            }
            if a >= 180.0 {
                a -= 180.0;
            }
            angle[y as usize][x as usize] = a;
        }
    }

    let mut thin = vec![vec![0.0f64; w]; h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let a = angle[y][x];
            // neighbor along the gradient (dy, dx); image rows grow downwards
            let (dy, dx): (i64, i64) = if a < 22.5 || a >= 157.5 {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let ahead = mag[(y as i64 + dy) as usize][(x as i64 + dx) as usize];
            let behind = mag[(y as i64 - dy) as usize][(x as i64 - dx) as usize];
            let m = mag[y][x];
            if m > 0.0 && m > behind && m >= ahead {
                thin[y][x] = m;
            }
        }
    }

    // hysteresis by repeated sweeps until nothing changes
    let mut edge = vec![vec![0u8; w]; h];
    for y in 0..h {
        for x in 0..w {
            if thin[y][x] >= high {
                edge[y][x] = 1;
            }
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if edge[y][x] == 1 || thin[y][x] < low {
                    continue;
                }
                let mut linked = false;
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if edge[ny][nx] == 1 {
                            linked = true;
                        }
                    }
                }
                if linked {
                    edge[y][x] = 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    EdgeMap {
        height: h,
        width: w,
        mask: edge.into_iter().flatten().collect(),
    }
}

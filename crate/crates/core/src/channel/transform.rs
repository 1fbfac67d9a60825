use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::ComplexMatrix;

/// Angular-delay representation `F_d · Ĥ · F_aᴴ` with unitary DFT matrices:
/// a forward DFT down each antenna column (subcarriers → delay) and an inverse
/// DFT along each row (antennas → angle), both scaled by `1/√len`.
pub fn to_angular_delay(h: &ComplexMatrix) -> ComplexMatrix {
    let mut out = h.clone();
    transform_columns(&mut out, FftDirection::Forward);
    transform_rows(&mut out, FftDirection::Inverse);
    out
}

/// Inverse of [`to_angular_delay`]: `F_dᴴ · H · F_a`.
pub fn from_angular_delay(h: &ComplexMatrix) -> ComplexMatrix {
    let mut out = h.clone();
    transform_columns(&mut out, FftDirection::Inverse);
    transform_rows(&mut out, FftDirection::Forward);
    out
}

fn transform_columns(m: &mut ComplexMatrix, dir: FftDirection) {
    let (rows, cols) = (m.rows, m.cols);
    let fft = FftPlanner::new().plan_fft(rows, dir);
    let scale = 1.0 / (rows as f64).sqrt();
    let mut buf = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            buf[r] = m.data[r * cols + c];
        }
        fft.process(&mut buf);
        for r in 0..rows {
            m.data[r * cols + c] = buf[r] * scale;
        }
    }
}

fn transform_rows(m: &mut ComplexMatrix, dir: FftDirection) {
    let cols = m.cols;
    let fft = FftPlanner::new().plan_fft(cols, dir);
    let scale = 1.0 / (cols as f64).sqrt();
    for row in m.data.chunks_exact_mut(cols) {
        fft.process(row);
        for z in row.iter_mut() {
            *z *= scale;
        }
    }
}

//! Separable 2-D FFT over row-major planes, backed by `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place 2-D transform of an `h × w` plane. The inverse is normalized by
/// `1 / (h·w)` so `ifft2(fft2(x)) == x`.
pub fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let mut planner = FftPlanner::<f64>::new();
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    row.process(buf);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

pub fn real_to_complex(plane: &[f64]) -> Vec<Complex64> {
    plane.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

//! Fidelity metrics: PSNR, windowed SSIM, per-channel histogram matching
//! and measurement residuals.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::operators::DegradationOperator;
use crate::tensor::Tensor;

pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.expect_dims(reference.dims(), "mse")?;
    let s: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / x.len() as f64)
}

/// `10·log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::param(format!("peak must be positive, got {peak}")));
    }
    let m = mse(x, reference)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 8,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Mean SSIM over every `w × w` window position (stride 1) of every
/// channel, with uniform weights and population statistics.
pub fn ssim(x: &Tensor, reference: &Tensor, p: SsimParams) -> Result<f64> {
    x.expect_dims(reference.dims(), "ssim")?;
    let (c, h, w) = x.chw()?;
    let ws = p.window_size;
    if ws == 0 || ws > h || ws > w {
        return Err(Error::param(format!("window {ws} does not fit a {h}×{w} image")));
    }
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let n = (ws * ws) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a = x.channel(ch);
        let b = reference.channel(ch);
        for y0 in 0..=h - ws {
            for x0 in 0..=w - ws {
                let (mut sa, mut sb) = (0.0, 0.0);
                for yy in y0..y0 + ws {
                    for xx in x0..x0 + ws {
                        sa += a[yy * w + xx];
                        sb += b[yy * w + xx];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
                for yy in y0..y0 + ws {
                    for xx in x0..x0 + ws {
                        let da = a[yy * w + xx] - ma;
                        let db = b[yy * w + xx] - mb;
                        vaa += da * da;
                        vbb += db * db;
                        vab += da * db;
                    }
                }
                let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
                let s = ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                    / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-channel rank mapping: the k-th smallest value of `x` (ties in
/// original order) becomes the k-th smallest value of `reference`.
pub fn histogram_match(x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    x.expect_dims(reference.dims(), "histogram_match")?;
    let (c, _, _) = x.chw()?;
    let mut out = Tensor::zeros(x.dims());
    for ch in 0..c {
        let src = x.channel(ch);
        let mut order: Vec<usize> = (0..src.len()).collect();
        order.sort_by(|&i, &j| src[i].total_cmp(&src[j]));
        let mut target = reference.channel(ch).to_vec();
        target.sort_by(f64::total_cmp);
        let dst = out.channel_mut(ch);
        for (rank, &idx) in order.iter().enumerate() {
            dst[idx] = target[rank];
        }
    }
    Ok(out)
}

/// `(‖A x̂ − y‖₂, ‖A x̂ − y‖∞)`.
pub fn measurement_residual(op: &DegradationOperator, x_hat: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let r = op.apply(x_hat)?.sub(y)?;
    Ok((r.norm_l2(), r.norm_linf()))
}

/// Metrics for one restored image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub operator: String,
    pub schedule: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub residual_l2: f64,
    pub residual_linf: f64,
    pub histogram_matched: bool,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "task,operator,schedule,seed,psnr,ssim,mse,residual_l2,residual_linf,histogram_matched";

    /// Scores `x_hat` against `truth`. Colorization results are histogram
    /// matched to the ground truth before PSNR/SSIM/MSE; the residual is
    /// always taken on the raw output.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        task: &str,
        schedule: &str,
        seed: u64,
        op: &DegradationOperator,
        x_hat: &Tensor,
        truth: &Tensor,
        y: &Tensor,
        ssim_params: SsimParams,
    ) -> Result<Self> {
        let matched = op.name() == "colorization";
        let scored = if matched {
            histogram_match(x_hat, truth)?
        } else {
            x_hat.clone()
        };
        let m = mse(&scored, truth)?;
        let (residual_l2, residual_linf) = measurement_residual(op, x_hat, y)?;
        Ok(Self {
            task: task.to_string(),
            operator: op.name().to_string(),
            schedule: schedule.to_string(),
            seed,
            psnr: psnr_from_mse(m, ssim_params.peak),
            ssim: ssim(&scored, truth, ssim_params)?,
            mse: m,
            residual_l2,
            residual_linf,
            histogram_matched: matched,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.operator,
            self.schedule,
            self.seed,
            fmt_sig6(self.psnr),
            fmt_sig6(self.ssim),
            fmt_sig6(self.mse),
            fmt_sig6(self.residual_l2),
            fmt_sig6(self.residual_linf),
            self.histogram_matched
        )
    }
}

/// Six significant digits, fixed notation for moderate magnitudes and
/// scientific otherwise; `inf`, `-inf` and `nan` spelled out.
pub fn fmt_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // Rounding can carry into a new digit (e.g. 9.999996 -> 10.00000).
        if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 6 && decimals > 0 {
            let d = decimals - 1;
            return format!("{v:.d$}");
        }
        s
    } else {
        format!("{v:.5e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_values() {
        let a = Tensor::full(&[1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::rand_uniform(&[3, 12, 12], 0.0, 1.0, &mut r);
        assert_eq!(ssim(&a, &a, SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_shift_luminance_term() {
        let a = Tensor::full(&[1, 8, 8], 0.4);
        let b = Tensor::full(&[1, 8, 8], 0.6);
        let p = SsimParams::default();
        let c1 = (0.01_f64).powi(2);
        let expect = (2.0 * 0.4 * 0.6 + c1) / (0.16 + 0.36 + c1);
        let got = ssim(&a, &b, p).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_anti_correlated_is_negative() {
        // Zero-mean 2×2 patterns with covariance −d² against variances d².
        let d = 0.3;
        let a2 = Tensor::new(vec![1, 2, 2], vec![d, -d, -d, d]).unwrap();
        let b2 = Tensor::new(vec![1, 2, 2], vec![-d, d, d, -d]).unwrap();
        let p2 = SsimParams {
            window_size: 2,
            ..SsimParams::default()
        };
        let c1 = 1e-4;
        let c2 = 9e-4;
        let expect = (c1 * (-2.0 * d * d + c2)) / (c1 * (2.0 * d * d + c2));
        let got = ssim(&a2, &b2, p2).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(got < 0.0);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Tensor::zeros(&[1, 4, 4]);
        assert!(ssim(&a, &a, SsimParams::default()).is_err());
    }

    #[test]
    fn histogram_match_rank_map() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let r = Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, 0.4, 0.2]).unwrap();
        let m = histogram_match(&x, &r).unwrap();
        // All ties: ranks follow original order.
        assert_eq!(m.data(), &[0.1, 0.2, 0.4, 0.9]);
        let x2 = Tensor::new(vec![1, 2, 2], vec![3.0, 1.0, 2.0, 0.0]).unwrap();
        let m2 = histogram_match(&x2, &r).unwrap();
        assert_eq!(m2.data(), &[0.9, 0.2, 0.4, 0.1]);
        assert_eq!(histogram_match(&r, &r).unwrap(), r);
    }

    #[test]
    fn histogram_match_gray_against_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gray_plane = Tensor::rand_uniform(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let gray = Tensor::new(vec![3, 4, 4], gray_plane.data().repeat(3)).unwrap();
        let color = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let m = histogram_match(&gray, &color).unwrap();
        for c in 0..3 {
            let mut a = m.channel(c).to_vec();
            let mut b = color.channel(c).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert_eq!(histogram_match(&m, &color).unwrap(), m);
    }

    #[test]
    fn residual_of_null_space_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = DegradationOperator::super_res4(&[3, 8, 8]).unwrap();
        let x = Tensor::randn(&[3, 8, 8], &mut rng);
        let y = op.apply(&x).unwrap();
        let p = Tensor::randn(&[3, 8, 8], &mut rng);
        let null = p.sub(&op.apply_pinv(&op.apply(&p).unwrap()).unwrap()).unwrap();
        let (l2, linf) = measurement_residual(&op, &x.add(&null).unwrap(), &y).unwrap();
        assert!(l2 < 1e-6 && linf < 1e-6);
        assert_eq!(measurement_residual(&op, &x, &y).unwrap(), (0.0, 0.0));

        let dn = DegradationOperator::denoise(&[3, 8, 8], 0.1).unwrap();
        let (l2, linf) = measurement_residual(&dn, &x, &p).unwrap();
        let diff = x.sub(&p).unwrap();
        assert_eq!((l2, linf), (diff.norm_l2(), diff.norm_linf()));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(20.0), "20.0000");
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(1.5e-7), "1.50000e-7");
        assert_eq!(fmt_sig6(f64::INFINITY), "inf");
        assert_eq!(fmt_sig6(9.9999996), "10.0000");
        assert_eq!(fmt_sig6(-3.0), "-3.00000");
    }

    #[test]
    fn report_psnr_consistent_with_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = Tensor::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let x = truth.map(|v| v + 0.05);
        let op = DegradationOperator::super_res4(&[3, 8, 8]).unwrap();
        let y = op.apply(&truth).unwrap();
        let rep = MetricReport::evaluate("t", "general", 0, &op, &x, &truth, &y, SsimParams::default()).unwrap();
        assert!(!rep.histogram_matched);
        assert!((rep.mse - 0.0025).abs() < 1e-12);
        assert!((rep.psnr - 10.0 * (1.0 / rep.mse).log10()).abs() < 1e-9);
        assert_eq!(rep.csv_row().split(',').count(), 10);

        // A global shift is undone by the rank map before scoring.
        let op = DegradationOperator::colorization(&[3, 8, 8]).unwrap();
        let y = op.apply(&truth).unwrap();
        let rep = MetricReport::evaluate("t", "general", 0, &op, &x, &truth, &y, SsimParams::default()).unwrap();
        assert!(rep.histogram_matched);
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.psnr, f64::INFINITY);
        assert!(rep.residual_l2 > 0.0);
    }
}

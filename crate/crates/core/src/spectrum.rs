//! Amplitude spectra for granularity analysis.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Magnitudes of the one-sided DFT, `⌊T/2⌋ + 1` bins.
pub fn fft_spectrum(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::invalid("a spectrum needs at least two points"));
    }
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf[..series.len() / 2 + 1].iter().map(|c| c.norm()).collect())
}

/// Magnitude ratio `smoothed/original` at each requested bin.
pub fn attenuation(original: &[f64], smoothed: &[f64], bins: &[usize]) -> Result<Vec<f64>> {
    if original.len() != smoothed.len() {
        return Err(Error::shape("spectra differ in length"));
    }
    let a = fft_spectrum(original)?;
    let b = fft_spectrum(smoothed)?;
    bins.iter()
        .map(|&k| {
            if k >= a.len() {
                Err(Error::invalid(format!("bin {k} beyond the spectrum")))
            } else {
                Ok(b[k] / a[k])
            }
        })
        .collect()
}

//! Mel-cepstral distortion between two feature sequences, with
//! optional dynamic time warping when the sequences run at different
//! speeds.

use vconv_core::Tensor;

use crate::{Error, Result};

/// Cepstral order used throughout evaluation: c1..c13, energy excluded.
pub const MCD_COEFFS: usize = 13;

/// 10/ln(10) · √2: converts a mean euclidean distance between
/// natural-log cepstra into the conventional decibel figure.
pub fn mcd_scale() -> f64 {
    10.0 / core::f64::consts::LN_10 * core::f64::consts::SQRT_2
}

/// Plain DCT-II over the mel axis of natural-log features, keeping
/// coefficients 1..=n. One vector per frame.
pub fn mel_cepstra(mel_log: &Tensor<f64>, n: usize) -> Vec<Vec<f64>> {
    let mels = mel_log.shape()[0];
    let frames = mel_log.shape()[1];
    (0..frames)
        .map(|t| {
            (1..=n)
                .map(|k| {
                    (0..mels)
                        .map(|m| {
                            let x = mel_log.data()[m * frames + t];
                            x * (core::f64::consts::PI * k as f64 * (m as f64 + 0.5)
                                / mels as f64)
                                .cos()
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean frame distance along the best monotone alignment, found by
/// dynamic programming over the full distance matrix.
fn dtw_mean_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let inf = f64::INFINITY;
    let mut cost = vec![vec![inf; m + 1]; n + 1];
    let mut hops = vec![vec![0usize; m + 1]; n + 1];
    cost[0][0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let d = dist(&a[i - 1], &b[j - 1]);
            // Diagonal preferred on ties so the identity alignment of
            // equal sequences has length max(n, m).
            let (prev, steps) = [(i - 1, j - 1), (i - 1, j), (i, j - 1)]
                .into_iter()
                .map(|(pi, pj)| (cost[pi][pj], hops[pi][pj]))
                .fold((inf, 0), |best, c| if c.0 < best.0 { c } else { best });
            cost[i][j] = prev + d;
            hops[i][j] = steps + 1;
        }
    }
    cost[n][m] / hops[n][m] as f64
}

/// Distortion from precomputed cepstra. Without warping the frames
/// pair up index by index over the shared prefix.
pub fn mcd_from_cepstra(reference: &[Vec<f64>], converted: &[Vec<f64>], dtw: bool) -> Result<f64> {
    if reference.is_empty() || converted.is_empty() {
        return Err(Error::Format("cannot score an empty sequence".into()));
    }
    let dim = reference[0].len();
    if converted[0].len() != dim {
        return Err(Error::Format(format!(
            "cepstral orders differ: {} vs {}",
            dim,
            converted[0].len()
        )));
    }
    let mean = if dtw {
        dtw_mean_distance(reference, converted)
    } else {
        let n = reference.len().min(converted.len());
        (0..n).map(|t| dist(&reference[t], &converted[t])).sum::<f64>() / n as f64
    };
    Ok(mcd_scale() * mean)
}

/// End-to-end distortion between two natural-log mel matrices.
pub fn mcd(reference: &Tensor<f64>, converted: &Tensor<f64>, dtw: bool) -> Result<f64> {
    if reference.shape()[0] != converted.shape()[0] {
        return Err(Error::Format(format!(
            "mel dimensions differ: {} vs {}",
            reference.shape()[0],
            converted.shape()[0]
        )));
    }
    mcd_from_cepstra(
        &mel_cepstra(reference, MCD_COEFFS),
        &mel_cepstra(converted, MCD_COEFFS),
        dtw,
    )
}

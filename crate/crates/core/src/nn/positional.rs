use ndarray::Array2;

/// Sinusoidal positional encodings for the given absolute positions:
/// even dimensions carry `sin(pos / 10000^(2i/d))`, odd dimensions the
/// matching cosine.
pub fn sinusoidal_pe(positions: &[usize], d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions.len(), d));
    for (row, pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = *pos as f64 * rate;
            pe[[row, 2 * i]] = angle.sin();
            pe[[row, 2 * i + 1]] = angle.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[row, d - 1]] = (*pos as f64 * rate).sin();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_zeros_and_ones() {
        let pe = sinusoidal_pe(&[0], 8);
        for i in 0..4 {
            assert_eq!(pe[[0, 2 * i]], 0.0);
            assert_eq!(pe[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn encodings_distinguish_positions() {
        let pe = sinusoidal_pe(&[0, 1, 2, 50], 16);
        for a in 0..4 {
            for b in (a + 1)..4 {
                let diff: f64 = (&pe.row(a) - &pe.row(b)).mapv(f64::abs).sum();
                assert!(diff > 1e-3, "rows {a} and {b} collide");
            }
        }
    }
}

use seqhtr_tensor::Tensor;

/// Sinusoidal table `[positions, d]`: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoid_table(positions: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions, d], data).expect("table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_and_one() {
        let t = sinusoid_table(2, 4);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in t.data()[4..].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

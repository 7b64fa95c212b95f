//! Binary 8-bit greyscale PGM (P5).

/// `values` row-major `(height, width)`, mapped linearly from their
/// `[min, max]` onto `0..=255`. A constant field maps to 0.
pub fn encode(values: &[f32], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm: {} values for {width}x{height}", values.len());
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo) as f64;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) as f64 / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_linear_map() {
        let img = encode(&[-1.0, 0.0, 1.0, 0.5, 0.25, -0.5], 3, 2);
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[0, 128, 255, 191, 159, 64]);
        assert!(encode(&[0.3; 4], 2, 2)[11..].iter().all(|&b| b == 0));
    }
}

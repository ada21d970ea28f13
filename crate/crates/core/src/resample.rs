//! Half-pixel linear resampling taps shared by image preprocessing and the
//! network's bilinear upsampling.

/// One output sample along an axis: `out = (1 - w) * in[lo] + w * in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

/// Taps for resizing an axis of length `input` to `output` using pixel-center
/// alignment (`src = (dst + 0.5) * input / output - 0.5`), clamped at the edges.
pub fn linear_taps(input: usize, output: usize) -> Vec<Tap> {
    assert!(input > 0 && output > 0);
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                w: src - lo as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_lengths_match() {
        for t in linear_taps(7, 7).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.w, 0.0);
        }
    }

    #[test]
    fn doubling_interleaves_quarter_weights() {
        let taps = linear_taps(2, 4);
        assert_eq!(taps[0], Tap { lo: 0, hi: 1, w: 0.0 });
        assert_eq!(taps[1], Tap { lo: 0, hi: 1, w: 0.25 });
        assert_eq!(taps[2], Tap { lo: 0, hi: 1, w: 0.75 });
        assert_eq!(taps[3], Tap { lo: 1, hi: 1, w: 0.0 });
    }
}

//! Waveforms, the 256-level linear quantizer, WAV files and clip padding.

mod wav;

pub use wav::{decode_pcm16, encode_pcm16, from_pcm16, read_pcm16, read_wav, to_pcm16, write_pcm16, write_wav, Pcm16};

use crate::error::{Error, Result};

/// Number of quantization levels.
pub const LEVELS: usize = 256;
/// Code of the bin whose midpoint is closest to zero amplitude from above;
/// used as the silent warm-up context.
pub const SILENCE_CODE: u8 = 128;

/// Real-valued samples in `[-1, 1]` at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Clamps every sample into `[-1, 1]`. Rejects empty input, a zero rate
    /// and non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample {i} is not finite")));
        }
        let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Waveform as integer codes in `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedClip {
    codes: Vec<u8>,
    sample_rate: u32,
}

impl QuantizedClip {
    pub fn new(codes: Vec<u8>, sample_rate: u32) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Contract("clip has no samples".into()));
        }
        Ok(QuantizedClip { codes, sample_rate })
    }

    /// Builds a clip from wide integers, rejecting anything outside `[0, 255]`.
    pub fn from_values(values: &[i64], sample_rate: u32) -> Result<Self> {
        let codes = values
            .iter()
            .enumerate()
            .map(|(i, &v)| u8::try_from(v).map_err(|_| Error::Data(format!("code {v} at index {i} is outside [0, 255]"))))
            .collect::<Result<Vec<_>>>()?;
        QuantizedClip::new(codes, sample_rate)
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// `floor((x + 1) / 2 · 256)`, with `x = 1` folded into the top bin.
pub fn quantize_sample(x: f64) -> u8 {
    let bin = ((x + 1.0) * 0.5 * LEVELS as f64).floor();
    bin.clamp(0.0, (LEVELS - 1) as f64) as u8
}

/// Midpoint of the code's bin: `(code + 0.5) / 256 · 2 − 1`.
pub fn dequantize_sample(code: u8) -> f64 {
    (code as f64 + 0.5) / LEVELS as f64 * 2.0 - 1.0
}

pub fn quantize(w: &Waveform) -> QuantizedClip {
    QuantizedClip { codes: w.samples.iter().map(|&x| quantize_sample(x)).collect(), sample_rate: w.sample_rate }
}

pub fn dequantize(q: &QuantizedClip) -> Waveform {
    Waveform { samples: q.codes.iter().map(|&c| dequantize_sample(c)).collect(), sample_rate: q.sample_rate }
}

/// Repeats the clip end to end and truncates to exactly `target` samples.
pub fn pad_to_length(q: &QuantizedClip, target: usize) -> Result<QuantizedClip> {
    if q.is_empty() {
        return Err(Error::Contract("cannot pad an empty clip".into()));
    }
    if target == 0 {
        return Err(Error::Contract("padding target must be at least 1".into()));
    }
    let codes = q.codes.iter().copied().cycle().take(target).collect();
    Ok(QuantizedClip { codes, sample_rate: q.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantizer_fixed_points() {
        assert_eq!(quantize_sample(-1.0), 0);
        assert_eq!(quantize_sample(1.0), 255);
        assert_eq!(quantize_sample(0.0), 128);
        assert_eq!(dequantize_sample(0), -0.99609375);
        assert_eq!(dequantize_sample(255), 0.99609375);
    }

    #[test]
    fn sweep_round_trip_error_within_one_bin() {
        let n = 10_001;
        let max_err = (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .map(|x| (x - dequantize_sample(quantize_sample(x))).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 256.0, "{max_err}");
    }

    #[test]
    fn codes_are_fixed_points() {
        for c in 0..=255u8 {
            assert_eq!(quantize_sample(dequantize_sample(c)), c);
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(matches!(QuantizedClip::from_values(&[0, 256], 8000), Err(Error::Data(_))));
        assert!(matches!(QuantizedClip::from_values(&[-1], 8000), Err(Error::Data(_))));
        assert!(QuantizedClip::from_values(&[0, 255], 8000).is_ok());
    }

    #[test]
    fn empty_waveform_is_rejected() {
        assert!(matches!(Waveform::new(vec![], 16000), Err(Error::Contract(_))));
        let w = Waveform::new(vec![1.5, -3.0], 16000).unwrap();
        assert_eq!(w.samples(), &[1.0, -1.0]);
    }

    #[test]
    fn padding_repeats_and_truncates() {
        let q = QuantizedClip::new(vec![1, 2, 3], 16000).unwrap();
        assert_eq!(pad_to_length(&q, 7).unwrap().codes(), &[1, 2, 3, 1, 2, 3, 1]);
        assert_eq!(pad_to_length(&q, 3).unwrap(), q);
        assert_eq!(pad_to_length(&q, 2).unwrap().codes(), &[1, 2]);
    }

    #[test]
    fn ten_second_clip_is_unchanged() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let codes: Vec<u8> = (0..159_744).map(|_| rng.gen()).collect();
        let q = QuantizedClip::new(codes, 16000).unwrap();
        let p = pad_to_length(&q, 159_744).unwrap();
        assert_eq!(p.len(), 159_744);
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_sample(lo) <= quantize_sample(hi));
        }

        #[test]
        fn reconstruction_within_half_bin_below_top(x in -1.0f64..1.0) {
            let err = (x - dequantize_sample(quantize_sample(x))).abs();
            prop_assert!(err <= 0.5 / 128.0 + 1e-15);
        }

        #[test]
        fn padding_is_periodic(codes in prop::collection::vec(any::<u8>(), 1..40), target in 1usize..200) {
            let q = QuantizedClip::new(codes.clone(), 4000).unwrap();
            let p = pad_to_length(&q, target).unwrap();
            prop_assert_eq!(p.len(), target);
            for (i, &c) in p.codes().iter().enumerate() {
                prop_assert_eq!(c, codes[i % codes.len()]);
            }
        }
    }
}

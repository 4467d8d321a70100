use super::Waveform;

/// A fixed-length training window and how many of its samples are real audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub audio: Waveform,
    pub valid_len: usize,
}

/// Splits `w` into consecutive windows of `seconds * sample_rate` samples.
/// The final partial window is zero-padded; an exact multiple gets no
/// padded window.
pub fn segment(w: &Waveform, seconds: f64) -> Vec<Segment> {
    assert!(seconds > 0.0, "segment length must be positive");
    let sr = w.sample_rate();
    let len = ((seconds * sr as f64).round() as usize).max(1);
    w.samples()
        .chunks(len)
        .map(|chunk| {
            let mut s = chunk.to_vec();
            s.resize(len, 0.0);
            Segment {
                audio: Waveform::new(s, sr).expect("chunks of a valid waveform are valid"),
                valid_len: chunk.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_multiple_yields_one_unpadded_window() {
        let w = Waveform::new(vec![0.1; 64_000], 16_000).unwrap();
        let s = segment(&w, 4.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].audio.len(), 64_000);
        assert_eq!(s[0].valid_len, 64_000);
    }

    #[test]
    fn remainder_is_zero_padded() {
        let w = Waveform::new(vec![0.1; 96_000], 16_000).unwrap();
        let s = segment(&w, 4.0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].audio.len(), 64_000);
        assert_eq!(s[1].valid_len, 32_000);
        assert!(s[1].audio.samples()[32_000..].iter().all(|&v| v == 0.0));
        assert!(s[1].audio.samples()[..32_000].iter().all(|&v| v == 0.1));
    }
}

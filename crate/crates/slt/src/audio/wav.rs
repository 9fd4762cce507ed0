//! Minimal RIFF/WAVE reader and writer for 16-bit little-endian PCM mono.

use std::path::Path;

use super::PcmSignal;
use crate::bytesio::{Reader, Writer};
use crate::error::{Error, Result};

/// Parse a 16-bit PCM mono WAV from raw bytes. Samples are scaled to
/// [-1, 1) by 1/32768.
pub fn parse_wav(bytes: &[u8]) -> Result<PcmSignal> {
    let mut r = Reader::new(bytes, "wav");
    r.magic(b"RIFF")?;
    let _riff_size = r.u32()?;
    r.magic(b"WAVE")?;

    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while r.remaining() >= 8 {
        let id: [u8; 4] = r.bytes(4)?.try_into().unwrap();
        let size = r.u32()? as usize;
        let body = r.bytes(size.min(r.remaining()))?;
        if body.len() < size && &id != b"data" {
            return Err(Error::Format(format!(
                "wav: chunk {:?} declares {size} bytes, only {} present",
                String::from_utf8_lossy(&id),
                body.len()
            )));
        }
        match &id {
            b"fmt " => {
                let mut fr = Reader::new(body, "wav fmt chunk");
                let audio_format = fr.u16()?;
                let channels = fr.u16()?;
                let sample_rate = fr.u32()?;
                let _byte_rate = fr.u32()?;
                let _block_align = fr.u16()?;
                let bits = fr.u16()?;
                format = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => {
                data = Some(body);
            }
            _ => {}
        }
        if size % 2 == 1 && r.remaining() > 0 {
            r.bytes(1)?; // RIFF chunks are word-aligned
        }
    }

    let (audio_format, channels, sample_rate, bits) =
        format.ok_or_else(|| Error::Format("wav: missing fmt chunk".into()))?;
    if audio_format != 1 {
        return Err(Error::Format(format!(
            "wav: unsupported codec {audio_format}, only uncompressed PCM (1) is readable"
        )));
    }
    if channels != 1 {
        return Err(Error::Format(format!(
            "wav: {channels} channels, only mono is readable"
        )));
    }
    if bits != 16 {
        return Err(Error::Format(format!(
            "wav: {bits}-bit samples, only 16-bit PCM is readable"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::Format("wav: sample rate is zero".into()));
    }
    let data = data.ok_or_else(|| Error::Format("wav: missing data chunk".into()))?;

    let mut samples = Vec::with_capacity(data.len() / 2);
    for pair in data.chunks_exact(2) {
        let v = i16::from_le_bytes([pair[0], pair[1]]);
        samples.push(v as f32 / 32768.0);
    }
    Ok(PcmSignal { samples, sample_rate })
}

pub fn read_wav(path: &Path) -> Result<PcmSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Serialize mono samples as canonical 16-bit PCM. Values are clamped to
/// [-1, 1] before quantization.
pub fn wav_bytes(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut w = Writer::new();
    w.bytes(b"RIFF");
    w.u32(36 + data_len as u32);
    w.bytes(b"WAVE");
    w.bytes(b"fmt ");
    w.u32(16);
    w.u16(1); // PCM
    w.u16(1); // mono
    w.u32(sample_rate);
    w.u32(sample_rate * 2);
    w.u16(2);
    w.u16(16);
    w.bytes(b"data");
    w.u32(data_len as u32);
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.u16(q as u16);
    }
    w.into_bytes()
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    std::fs::write(path, wav_bytes(samples, sample_rate)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_quantized_samples() {
        let samples: Vec<f32> = (0..100).map(|i| ((i as f32) * 0.13).sin() * 0.5).collect();
        let bytes = wav_bytes(&samples, 16000);
        let sig = parse_wav(&bytes).unwrap();
        assert_eq!(sig.sample_rate, 16000);
        assert_eq!(sig.samples.len(), 100);
        for (a, b) in samples.iter().zip(&sig.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn stereo_is_rejected_with_named_violation() {
        let mut bytes = wav_bytes(&[0.0; 8], 16000);
        // channel count lives at offset 22
        bytes[22] = 2;
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn non_pcm_codec_is_rejected() {
        let mut bytes = wav_bytes(&[0.0; 8], 16000);
        bytes[20] = 3; // IEEE float codec tag
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("codec"), "{err}");
    }

    #[test]
    fn eight_bit_depth_is_rejected() {
        let mut bytes = wav_bytes(&[0.0; 8], 16000);
        bytes[34] = 8;
        let err = parse_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("8-bit"), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(parse_wav(b"not a wav at all").is_err());
        assert!(parse_wav(b"").is_err());
    }
}

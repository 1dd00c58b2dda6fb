//! Encodes a synthetic clip with the analytic encoder at both temporal strides.

use vap::latents::{encode_clip, EncoderConfig, TemporalStride};
use vap::synthworld::{generate_video, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let video = generate_video(&WorldConfig::default(), "demo")?;
    for stride in [TemporalStride::One, TemporalStride::Four] {
        let cfg = EncoderConfig::with_temporal_stride(stride);
        let seq = encode_clip(&video.clip, &cfg)?;
        println!(
            "stride {}: {} latents of shape {:?}, fingerprint {}",
            stride.frames(),
            seq.len(),
            seq.shape().unwrap(),
            seq.encoder_fingerprint
        );
    }
    Ok(())
}

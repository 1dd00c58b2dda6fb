//! Caches encoded latents on disk and reads them back.

use vap::bank::{CacheKey, LatentBank};
use vap::latents::{encode_clip, EncoderConfig};
use vap::synthworld::{generate_video, WorldConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let bank = LatentBank::new(dir.path());
    let cfg = EncoderConfig::default();
    let video = generate_video(&WorldConfig::default(), "demo")?;
    let key = CacheKey::real("demo", &cfg.fingerprint());

    assert!(bank.get(&key).is_none());
    bank.put(&key, &encode_clip(&video.clip, &cfg)?)?;
    let back = bank.get(&key).expect("just stored");
    println!(
        "read back {} latents from {}",
        back.len(),
        bank.path_for(&key).display()
    );
    let s = bank.stat()?;
    println!(
        "{} videos, {} real entries, {} bytes; hits {} misses {}",
        s.videos,
        s.real_entries,
        s.bytes,
        bank.hits(),
        bank.misses()
    );
    Ok(())
}

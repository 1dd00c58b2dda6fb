//! Anchor sampling: uniform, shifted and fixed-rate.

use image::RgbImage;
use vap::ingest::{fps_sample, shift_sample, uniform_sample, ShiftDirection, VideoClip};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "uniform T=128 k=16: {:?}",
        uniform_sample(128, 16)?.indices()
    );
    for dir in [
        ShiftDirection::Left,
        ShiftDirection::Middle,
        ShiftDirection::Right,
    ] {
        println!("{dir:?}: {:?}", shift_sample(128, 16, dir)?.indices());
    }
    // 5 s at 30 fps sampled at 1 fps
    let frames = (0..150).map(|_| RgbImage::new(8, 8)).collect();
    let clip = VideoClip::from_images("clip", 30.0, frames)?;
    println!("1 fps over 5 s: {:?}", fps_sample(&clip, 1.0)?.indices());
    Ok(())
}

//! 8-bit PGM dumps for human inspection: one grayscale file per frame,
//! luma = channel mean mapped from [-1,1] to [0,255].

use std::fs;
use std::io::Write;
use std::path::Path;

use ti2v_core::Tensor;

use crate::error::{Error, Result};

fn frame_to_gray(frame: &[f32], c: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let mut acc = 0.0f32;
        for ch in 0..c {
            acc += frame[ch * h * w + p];
        }
        let v = (acc / c as f32 + 1.0) * 0.5 * 255.0;
        out.push(v.clamp(0.0, 255.0) as u8);
    }
    out
}

/// Write `frame_000.pgm`, `frame_001.pgm`, ... for a [T,C,H,W] video.
pub fn dump_video(video: &Tensor<f32>, dir: &Path) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::data(format!("pgm dump expects [T,C,H,W], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    fs::create_dir_all(dir)?;
    for ti in 0..t {
        let gray = frame_to_gray(&video.data()[ti * c * h * w..(ti + 1) * c * h * w], c, h, w);
        let mut f = fs::File::create(dir.join(format!("frame_{ti:03}.pgm")))?;
        write!(f, "P5\n{w} {h}\n255\n")?;
        f.write_all(&gray)?;
    }
    Ok(())
}

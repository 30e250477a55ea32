//! Desk-scale evaluation metrics.
//!
//! - frame consistency: mean Pearson correlation between adjacent frames;
//! - motion agreement: does the intensity-weighted centroid move the way the
//!   motion prompt says;
//! - flow endpoint error over shape pixels.
//!
//! All metrics are pure f64 functions of their inputs. The centroid uses
//! |frame − background| weights with the background estimated as the
//! per-pixel median frame, which is robust at 16x16 without any detector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab;

const VAR_EPS: f64 = 1e-12;

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub frame_consistency: f64,
    /// 1.0 when the centroid displacement matches the prompt direction.
    pub motion_match: f64,
    pub flow_epe: Option<f64>,
}

/// Aggregate report; written out as CSV by the companion crate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frame_consistency: f64,
    pub motion_agreement: f64,
    pub flow_epe: Option<f64>,
    pub rows: Vec<EvalRow>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config_fingerprint: String) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty evaluation".into()));
        }
        let n = rows.len() as f64;
        let fc = rows.iter().map(|r| r.frame_consistency).sum::<f64>() / n;
        let ma = rows.iter().map(|r| r.motion_match).sum::<f64>() / n;
        let epes: Vec<f64> = rows.iter().filter_map(|r| r.flow_epe).collect();
        let epe = if epes.is_empty() {
            None
        } else {
            Some(epes.iter().sum::<f64>() / epes.len() as f64)
        };
        Ok(EvalReport {
            frame_consistency: fc,
            motion_agreement: ma,
            flow_epe: epe,
            rows,
            config_fingerprint,
        })
    }
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let (mut ma, mut mb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        ma += x as f64;
        mb += y as f64;
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    let mut max_diff = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
        max_diff = max_diff.max((x as f64 - y as f64).abs());
    }
    va /= n;
    vb /= n;
    cov /= n;
    if va < VAR_EPS || vb < VAR_EPS {
        // constant frame(s): correlation 1 iff both constant and equal
        if va < VAR_EPS && vb < VAR_EPS && max_diff < 1e-9 {
            return 1.0;
        }
        return 0.0;
    }
    cov / libm::sqrt(va * vb)
}

/// Mean adjacent-frame Pearson correlation of a [T,C,H,W] video.
pub fn frame_consistency(video: &Tensor<f32>) -> Result<f64> {
    let s = video.shape();
    if s.len() != 4 || s[0] < 2 {
        return Err(Error::Contract(format!(
            "frame consistency needs [T>=2,C,H,W], got {s:?}"
        )));
    }
    let t = s[0];
    let fsz: usize = s[1..].iter().product();
    let mut acc = 0.0;
    for i in 0..t - 1 {
        acc += pearson(
            &video.data()[i * fsz..(i + 1) * fsz],
            &video.data()[(i + 1) * fsz..(i + 2) * fsz],
        );
    }
    Ok(acc / (t - 1) as f64)
}

/// Per-pixel median frame of a [T,C,H,W] video.
pub fn median_background(video: &Tensor<f32>) -> Tensor<f32> {
    let s = video.shape();
    let (t, fsz) = (s[0], s[1..].iter().product::<usize>());
    let mut out = Tensor::zeros(&s[1..]);
    let mut column: Vec<f32> = Vec::with_capacity(t);
    for i in 0..fsz {
        column.clear();
        for ti in 0..t {
            column.push(video.data()[ti * fsz + i]);
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
        let m = if t % 2 == 1 {
            column[t / 2]
        } else {
            0.5 * (column[t / 2 - 1] + column[t / 2])
        };
        out.data_mut()[i] = m;
    }
    out
}

/// Intensity-weighted centroid of |frame − background| summed over channels;
/// `None` when the frame carries no mass above the background.
pub fn centroid(frame: &[f32], background: &[f32], c: usize, h: usize, w: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut wgt = 0.0f64;
            for ch in 0..c {
                let idx = (ch * h + y) * w + x;
                wgt += (frame[idx] as f64 - background[idx] as f64).abs();
            }
            sx += wgt * x as f64;
            sy += wgt * y as f64;
            sw += wgt;
        }
    }
    if sw <= 0.0 {
        None
    } else {
        Some((sx / sw, sy / sw))
    }
}

/// Centroid displacement from the first to the last frame.
pub fn centroid_displacement(video: &Tensor<f32>) -> Option<(f64, f64)> {
    let s = video.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let fsz = c * h * w;
    let bg = median_background(video);
    let first = centroid(&video.data()[..fsz], bg.data(), c, h, w)?;
    let last = centroid(&video.data()[(t - 1) * fsz..], bg.data(), c, h, w)?;
    Some((last.0 - first.0, last.1 - first.1))
}

/// Direction word of a motion-token prompt, if any.
pub fn prompt_direction(motion_tokens: &[u32]) -> Option<&'static str> {
    motion_tokens.iter().find_map(|&t| match vocab::word(t) {
        w @ ("left" | "right" | "up" | "down") => Some(w),
        _ => None,
    })
}

/// Does the video's centroid displacement match the prompt's direction word?
pub fn direction_matches(video: &Tensor<f32>, direction: &str) -> Result<bool> {
    let (dx, dy) = match centroid_displacement(video) {
        Some(d) => d,
        None => return Ok(false),
    };
    Ok(match direction {
        "right" => dx > 0.0,
        "left" => dx < 0.0,
        "down" => dy > 0.0,
        "up" => dy < 0.0,
        other => {
            return Err(Error::Contract(format!(
                "`{other}` is not a direction word"
            )))
        }
    })
}

/// Fraction of videos whose centroid displacement matches their prompt.
pub fn motion_agreement(videos: &[Tensor<f32>], motion_prompts: &[Vec<u32>]) -> Result<f64> {
    if videos.len() != motion_prompts.len() || videos.is_empty() {
        return Err(Error::Contract("videos/prompts length mismatch".into()));
    }
    let mut matched = 0usize;
    for (video, prompt) in videos.iter().zip(motion_prompts.iter()) {
        let dir = prompt_direction(prompt).ok_or_else(|| {
            Error::Contract(format!(
                "prompt `{}` has no direction word",
                vocab::decode(prompt)
            ))
        })?;
        if direction_matches(video, dir)? {
            matched += 1;
        }
    }
    Ok(matched as f64 / videos.len() as f64)
}

/// Mean endpoint error ‖f̂ − f‖₂ over pixels where the reference flow is
/// nonzero (shape pixels); 0 when the reference is empty.
pub fn flow_epe(predicted: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    if predicted.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "flow_epe",
            lhs: predicted.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        });
    }
    let s = reference.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::Contract(format!(
            "flow_epe expects [T-1,2,H,W], got {s:?}"
        )));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let (mut acc, mut count) = (0.0f64, 0usize);
    for ti in 0..t {
        for p in 0..hw {
            let rx = reference.data()[(ti * 2) * hw + p] as f64;
            let ry = reference.data()[(ti * 2 + 1) * hw + p] as f64;
            if rx == 0.0 && ry == 0.0 {
                continue;
            }
            let px = predicted.data()[(ti * 2) * hw + p] as f64;
            let py = predicted.data()[(ti * 2 + 1) * hw + p] as f64;
            acc += libm::sqrt((px - rx) * (px - rx) + (py - ry) * (py - ry));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Ablation variants: schedule, conditioning, and supervision toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    NoShift,
    NoRescale,
    DirectT2V,
    SingleEncoder,
    NoPredictNet,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::NoShift,
        AblationVariant::NoRescale,
        AblationVariant::DirectT2V,
        AblationVariant::SingleEncoder,
        AblationVariant::NoPredictNet,
        AblationVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoShift => "no-shift",
            AblationVariant::NoRescale => "no-rescale",
            AblationVariant::DirectT2V => "direct-t2v",
            AblationVariant::SingleEncoder => "single-encoder",
            AblationVariant::NoPredictNet => "no-predictnet",
            AblationVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scenegen;
    use alloc::vec;

    fn static_video() -> Tensor<f32> {
        let spec = scenegen::plan_dataset(1, 1, 8, 16, 16).unwrap()[0].clone();
        let mut s = spec;
        s.velocity = (0.0, 0.0);
        scenegen::render(&s, 6, 16, 16).unwrap().frames
    }

    #[test]
    fn static_video_scores_one() {
        let fc = frame_consistency(&static_video()).unwrap();
        assert!((fc - 1.0).abs() < 1e-6, "fc = {fc}");
    }

    #[test]
    fn alternating_sign_scores_minus_one() {
        // frames alternate x and −x with zero-mean x
        let mut rng = Rng::new(2);
        let base = Tensor::<f32>::randn(&mut rng, &[3 * 4 * 4]);
        let mean = base.data().iter().copied().sum::<f32>() / base.numel() as f32;
        let zm: Vec<f32> = base.data().iter().map(|v| v - mean).collect();
        let mut data = Vec::new();
        for t in 0..4 {
            let sign = if t % 2 == 0 { 1.0f32 } else { -1.0 };
            data.extend(zm.iter().map(|&v| sign * v));
        }
        let video = Tensor::new(vec![4, 3, 4, 4], data).unwrap();
        let fc = frame_consistency(&video).unwrap();
        assert!((fc + 1.0).abs() < 1e-6, "fc = {fc}");
    }

    #[test]
    fn matches_bruteforce_recomputation() {
        let mut rng = Rng::new(3);
        let video = Tensor::<f32>::randn(&mut rng, &[5, 2, 6, 6]);
        let got = frame_consistency(&video).unwrap();

        // independent recomputation
        let fsz = 2 * 6 * 6;
        let mut acc = 0.0f64;
        for t in 0..4 {
            let a = &video.data()[t * fsz..(t + 1) * fsz];
            let b = &video.data()[(t + 1) * fsz..(t + 2) * fsz];
            let n = fsz as f64;
            let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
            let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
            let cov = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb))
                .sum::<f64>()
                / n;
            let va = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum::<f64>() / n;
            let vb = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum::<f64>() / n;
            acc += cov / (va.sqrt() * vb.sqrt());
        }
        let want = acc / 4.0;
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }

    #[test]
    fn affine_intensity_change_is_invariant() {
        let mut rng = Rng::new(4);
        for seed in 0..20u64 {
            let mut r2 = Rng::new(100 + seed);
            let video = Tensor::<f32>::randn(&mut r2, &[4, 1, 5, 5]);
            let a = 0.1 + 5.0 * rng.next_f64();
            let b = rng.next_range_f64(-2.0, 2.0);
            let scaled = video.map(|v| (a as f32) * v + b as f32);
            let f1 = frame_consistency(&video).unwrap();
            let f2 = frame_consistency(&scaled).unwrap();
            assert!((f1 - f2).abs() < 1e-5, "affine broke fc: {f1} vs {f2}");
        }
    }

    #[test]
    fn one_constant_frame_gives_zero_pair_correlation() {
        let mut rng = Rng::new(5);
        let moving = Tensor::<f32>::randn(&mut rng, &[1 * 3 * 3]);
        let mut data = alloc::vec![0.5f32; 9];
        data.extend_from_slice(moving.data());
        let video = Tensor::new(vec![2, 1, 3, 3], data).unwrap();
        assert_eq!(frame_consistency(&video).unwrap(), 0.0);
    }

    #[test]
    fn ground_truth_renders_agree_with_their_prompts() {
        let specs = scenegen::plan_dataset(12, 11, 8, 16, 16).unwrap();
        let mut videos = Vec::new();
        let mut prompts = Vec::new();
        for spec in &specs {
            let s = scenegen::render(spec, 8, 16, 16).unwrap();
            videos.push(s.frames);
            prompts.push(s.motion_tokens);
        }
        let agreement = motion_agreement(&videos, &prompts).unwrap();
        assert_eq!(agreement, 1.0);
    }

    #[test]
    fn prompt_without_direction_is_error() {
        let video = static_video();
        let (tokens, _) = vocab::encode("static");
        assert!(motion_agreement(&[video], &[tokens]).is_err());
    }

    #[test]
    fn epe_identities() {
        let mut rng = Rng::new(6);
        let spec = scenegen::plan_dataset(1, 12, 8, 16, 16).unwrap()[0].clone();
        let flow = scenegen::render(&spec, 8, 16, 16).unwrap().flow;
        assert_eq!(flow_epe(&flow, &flow).unwrap(), 0.0);

        // f̂ = f + (3,4) everywhere → EPE exactly 5 on shape pixels
        let s = flow.shape().to_vec();
        let hw = s[2] * s[3];
        let mut shifted = flow.clone();
        for t in 0..s[0] {
            for p in 0..hw {
                shifted.data_mut()[(t * 2) * hw + p] += 3.0;
                shifted.data_mut()[(t * 2 + 1) * hw + p] += 4.0;
            }
        }
        let epe = flow_epe(&shifted, &flow).unwrap();
        assert!((epe - 5.0).abs() < 1e-6, "epe = {epe}");

        // empty reference → 0 by definition
        let zero = Tensor::<f32>::zeros(&s);
        let noisy = Tensor::<f32>::randn(&mut rng, &s);
        assert_eq!(flow_epe(&noisy, &zero).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_rows() {
        let rows = vec![
            EvalRow {
                index: 0,
                frame_consistency: 0.9,
                motion_match: 1.0,
                flow_epe: Some(0.5),
            },
            EvalRow {
                index: 1,
                frame_consistency: 0.7,
                motion_match: 0.0,
                flow_epe: None,
            },
        ];
        let report = EvalReport::from_rows(rows, "abc".into()).unwrap();
        assert!((report.frame_consistency - 0.8).abs() < 1e-12);
        assert!((report.motion_agreement - 0.5).abs() < 1e-12);
        assert_eq!(report.flow_epe, Some(0.5));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.name()).unwrap(), v);
        }
        assert!(AblationVariant::parse("bogus").is_err());
    }
}

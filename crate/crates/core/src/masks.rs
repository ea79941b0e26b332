//! Per-sub-frame object masks: loading, background-subtraction fallback and
//! temporal direction synchronization.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formation::VideoSequence;
use crate::image::{load_gray, save_gray16, Image};

/// Width of the linear ramp above the threshold in background subtraction.
pub const MASK_RAMP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    External,
    BackgroundSubtraction,
    SyntheticGroundTruth,
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskSource::External => "external",
            MaskSource::BackgroundSubtraction => "background-subtraction",
            MaskSource::SyntheticGroundTruth => "synthetic-ground-truth",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTrack {
    /// `masks[n][s]`: single-channel mask of sub-frame `s` of frame `n`.
    pub masks: Vec<Vec<Image>>,
    pub source: MaskSource,
}

pub fn mask_file_name(frame: usize, sub: usize) -> String {
    format!("frame_{frame}_sub_{sub}.png")
}

impl MaskTrack {
    pub fn new(masks: Vec<Vec<Image>>, source: MaskSource) -> Result<Self> {
        let track = MaskTrack { masks, source };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .masks
            .first()
            .and_then(|f| f.first())
            .ok_or_else(|| Error::InvalidArgument("mask track is empty".into()))?;
        let s = self.masks[0].len();
        for (n, frame) in self.masks.iter().enumerate() {
            if frame.len() != s {
                return Err(Error::DimensionMismatch(format!(
                    "frame {} has {} masks, expected {s}",
                    n + 1,
                    frame.len()
                )));
            }
            for m in frame {
                if m.channels != 1 {
                    return Err(Error::DimensionMismatch(
                        "masks must be single-channel".into(),
                    ));
                }
                m.ensure_same_shape(first, "mask track")?;
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    pub fn sub_frame_count(&self) -> usize {
        self.masks[0].len()
    }

    pub fn width(&self) -> usize {
        self.masks[0][0].width
    }

    pub fn height(&self) -> usize {
        self.masks[0][0].height
    }

    /// Check that the track matches a video's frame count and size.
    pub fn ensure_matches(&self, video: &VideoSequence) -> Result<()> {
        if self.frame_count() != video.frame_count() {
            return Err(Error::DimensionMismatch(format!(
                "mask track has {} frames, video has {}",
                self.frame_count(),
                video.frame_count()
            )));
        }
        if self.width() != video.width() || self.height() != video.height() {
            return Err(Error::DimensionMismatch(format!(
                "masks are {}x{}, video is {}x{}",
                self.width(),
                self.height(),
                video.width(),
                video.height()
            )));
        }
        Ok(())
    }

    pub fn window(&self, start: usize, len: usize) -> MaskTrack {
        MaskTrack {
            masks: self.masks[start..start + len].to_vec(),
            source: self.source,
        }
    }

    pub fn downscale(&self, factor: usize) -> MaskTrack {
        MaskTrack {
            masks: self
                .masks
                .iter()
                .map(|f| f.iter().map(|m| m.downscale(factor)).collect())
                .collect(),
            source: self.source,
        }
    }

    /// Write `frame_{n}_sub_{s}.png` (1-indexed, 16-bit) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (n, frame) in self.masks.iter().enumerate() {
            for (s, m) in frame.iter().enumerate() {
                let path = dir.join(mask_file_name(n + 1, s + 1));
                save_gray16(m, &path)?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

fn parse_mask_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    let (n, s) = rest.split_once("_sub_")?;
    Some((n.parse().ok()?, s.parse().ok()?))
}

/// Load a directory of `frame_{n}_sub_{s}.png` masks. The frame and
/// sub-frame counts are the largest indices present; every combination
/// must exist.
pub fn load_mask_track(dir: &Path) -> Result<MaskTrack> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let (mut frames, mut subs) = (0, 0);
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some((n, s)) = entry.file_name().to_str().and_then(parse_mask_name) {
            if n == 0 || s == 0 {
                return Err(Error::malformed("mask file name", "indices are 1-based"));
            }
            frames = frames.max(n);
            subs = subs.max(s);
        }
    }
    if frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "no masks found in {}",
            dir.display()
        )));
    }
    let mut masks = Vec::with_capacity(frames);
    for n in 1..=frames {
        let mut frame = Vec::with_capacity(subs);
        for s in 1..=subs {
            let path = dir.join(mask_file_name(n, s));
            if !path.is_file() {
                return Err(Error::MissingFile(path));
            }
            frame.push(load_gray(&path)?);
        }
        masks.push(frame);
    }
    MaskTrack::new(masks, MaskSource::External)
}

/// One blurred mask per frame: a linear ramp from `threshold` to
/// `threshold + MASK_RAMP` over the max-channel absolute difference to the
/// background.
pub fn background_subtraction_masks(video: &VideoSequence, threshold: f64) -> MaskTrack {
    let bg = &video.background;
    let masks = video
        .frames
        .iter()
        .map(|f| {
            let mut m = Image::new(f.width, f.height, 1);
            for pi in 0..m.data.len() {
                let diff = (0..3)
                    .map(|c| (f.data[pi * 3 + c] - bg.data[pi * 3 + c]).abs())
                    .fold(0.0, f64::max);
                m.data[pi] = ((diff - threshold) / MASK_RAMP).clamp(0.0, 1.0);
            }
            vec![m]
        })
        .collect();
    MaskTrack {
        masks,
        source: MaskSource::BackgroundSubtraction,
    }
}

fn l1(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum()
}

/// Greedy left-to-right orientation: keep frame 1, then reverse any frame
/// whose reversed sequence starts closer (L1) to the previous frame's last
/// mask. Ties keep the current orientation.
pub fn synchronize_direction(track: &MaskTrack) -> MaskTrack {
    let mut out = track.clone();
    for n in 1..out.masks.len() {
        let prev_last = out.masks[n - 1].last().expect("nonempty frame").clone();
        let frame = &out.masks[n];
        let keep = l1(&prev_last, &frame[0]);
        let flip = l1(&prev_last, frame.last().expect("nonempty frame"));
        if flip < keep {
            out.masks[n].reverse();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_mask(w: usize, cx: f64, cy: f64, r: f64) -> Image {
        Image::from_fn(w, w, 1, |x, y, _| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Disk moving left to right across `frames * subs` samples.
    fn moving_track(frames: usize, subs: usize) -> MaskTrack {
        let total = (frames * subs) as f64;
        let masks = (0..frames)
            .map(|n| {
                (0..subs)
                    .map(|s| {
                        let t = (n * subs + s) as f64 / total;
                        disk_mask(48, 6.0 + 36.0 * t, 24.0, 4.0)
                    })
                    .collect()
            })
            .collect();
        MaskTrack::new(masks, MaskSource::SyntheticGroundTruth).unwrap()
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let track = moving_track(3, 8);
        let paths = track.save(dir.path()).unwrap();
        assert_eq!(paths.len(), 24);
        let back = load_mask_track(dir.path()).unwrap();
        assert_eq!(back.frame_count(), 3);
        assert_eq!(back.sub_frame_count(), 8);
        assert_eq!(back.source, MaskSource::External);
        assert_eq!(back.masks, track.masks);
    }

    #[test]
    fn missing_mask_is_named() {
        let dir = tempfile::tempdir().unwrap();
        moving_track(3, 8).save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_2_sub_5.png")).unwrap();
        let err = load_mask_track(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_2_sub_5.png"), "{err}");
    }

    #[test]
    fn sixteen_bit_masks_scale_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame_1_sub_1.png");
        let raw: Vec<u16> = vec![0, 1, 32768, 65535];
        let img = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(2, 2, raw.clone())
            .unwrap();
        img.save(&path).unwrap();
        let track = load_mask_track(dir.path()).unwrap();
        for (v, r) in track.masks[0][0].data.iter().zip(raw) {
            assert_eq!(*v, r as f64 / 65535.0);
        }
    }

    #[test]
    fn background_subtraction_examples() {
        let bg = Image::from_fn(16, 16, 3, |x, y, c| ((x + y + c) % 7) as f64 / 7.0);
        let video =
            VideoSequence::with_background(vec![bg.clone(), bg.clone()], bg.clone()).unwrap();
        let track = background_subtraction_masks(&video, 0.05);
        assert_eq!(track.sub_frame_count(), 1);
        assert!(track
            .masks
            .iter()
            .all(|f| f[0].data.iter().all(|&v| v == 0.0)));

        let mut frame = bg.clone();
        for x in 4..8 {
            for y in 4..8 {
                frame.set(x, y, 1, 1.0 - bg.get(x, y, 1));
            }
        }
        let video = VideoSequence::with_background(vec![frame], bg).unwrap();
        let m = &background_subtraction_masks(&video, 0.05).masks[0][0];
        assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(background_subtraction_masks(&video, 1.0).masks[0][0]
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn consistent_track_is_unchanged() {
        let track = moving_track(4, 6);
        assert_eq!(synchronize_direction(&track), track);
    }

    #[test]
    fn reversed_frame_is_restored() {
        let track = moving_track(4, 6);
        let mut broken = track.clone();
        broken.masks[1].reverse();
        assert_eq!(synchronize_direction(&broken), track);
        let mut first_flipped = track.clone();
        first_flipped.masks[2].reverse();
        first_flipped.masks[3].reverse();
        assert_eq!(synchronize_direction(&first_flipped), track);
    }

    #[test]
    fn single_frame_is_identity_and_sync_is_idempotent() {
        let one = moving_track(1, 8);
        assert_eq!(synchronize_direction(&one), one);
        let mut broken = moving_track(5, 4);
        broken.masks[3].reverse();
        let once = synchronize_direction(&broken);
        assert_eq!(synchronize_direction(&once), once);
    }

    #[test]
    fn sync_never_increases_boundary_distance() {
        let mut broken = moving_track(5, 4);
        broken.masks[1].reverse();
        broken.masks[4].reverse();
        let fixed = synchronize_direction(&broken);
        for n in 1..5 {
            let before = l1(broken.masks[n - 1].last().unwrap(), &broken.masks[n][0]);
            let after = l1(fixed.masks[n - 1].last().unwrap(), &fixed.masks[n][0]);
            assert!(after <= before);
        }
    }

    #[test]
    fn rejects_inconsistent_tracks() {
        let a = Image::new(8, 8, 1);
        let b = Image::new(9, 8, 1);
        assert!(MaskTrack::new(vec![vec![a.clone(), b]], MaskSource::External).is_err());
        assert!(MaskTrack::new(
            vec![vec![a.clone(), a.clone()], vec![a]],
            MaskSource::External
        )
        .is_err());
    }
}

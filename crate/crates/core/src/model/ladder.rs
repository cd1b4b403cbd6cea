use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels of every group-normalized activation must be a multiple of this.
pub const NORM_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Shape of one level of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
}

impl LatentSpec {
    pub fn hidden_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.height, self.width, self.hidden_channels]
    }

    pub fn latent_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.height, self.width, self.latent_channels]
    }

    pub fn latent_numel(&self) -> usize {
        self.height * self.width * self.latent_channels
    }
}

/// A validated sequence of levels below an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    pub image: ImageSpec,
    pub levels: Vec<LatentSpec>,
}

impl Ladder {
    /// Build a ladder from per-level `(hidden, latent)` channel counts, halving
    /// the spatial extents at every level.
    pub fn from_channels(image: ImageSpec, channels: &[(usize, usize)]) -> Result<Self> {
        let mut levels = Vec::with_capacity(channels.len());
        let (mut h, mut w) = (image.height, image.width);
        for (i, &(hidden, latent)) in channels.iter().enumerate() {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidLadder(format!(
                    "level {} cannot halve odd extents {h}x{w}",
                    i + 1
                )));
            }
            h /= 2;
            w /= 2;
            levels.push(LatentSpec {
                level: i + 1,
                height: h,
                width: w,
                hidden_channels: hidden,
                latent_channels: latent,
            });
        }
        let ladder = Ladder { image, levels };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let img = self.image;
        if img.height == 0 || img.width == 0 || img.channels == 0 {
            return Err(Error::InvalidLadder(format!(
                "image extents must be positive, got {}x{}x{}",
                img.height, img.width, img.channels
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidLadder("a ladder needs at least one level".into()));
        }
        let (mut h, mut w) = (img.height, img.width);
        let mut prev_hidden = None;
        for (i, s) in self.levels.iter().enumerate() {
            let k = i + 1;
            let bad = |msg: String| Err(Error::InvalidLadder(format!("level {k}: {msg}")));
            if s.level != k {
                return bad(format!("declared as level {}", s.level));
            }
            if h % 2 != 0 || w % 2 != 0 || s.height != h / 2 || s.width != w / 2 {
                return bad(format!(
                    "extents {}x{} must halve the level below ({h}x{w})",
                    s.height, s.width
                ));
            }
            if s.height == 0 || s.width == 0 {
                return bad("extents must be at least 1".into());
            }
            if s.latent_channels == 0 {
                return bad("latent channels must be at least 1".into());
            }
            if s.latent_channels >= s.hidden_channels {
                return bad(format!(
                    "latent channels {} must be below hidden channels {}",
                    s.latent_channels, s.hidden_channels
                ));
            }
            if let Some(p) = prev_hidden {
                if s.hidden_channels <= p {
                    return bad(format!(
                        "hidden channels {} must exceed the level below ({p})",
                        s.hidden_channels
                    ));
                }
            }
            if s.hidden_channels % NORM_GROUPS != 0 {
                return bad(format!(
                    "hidden channels {} must be a multiple of {NORM_GROUPS}",
                    s.hidden_channels
                ));
            }
            prev_hidden = Some(s.hidden_channels);
            h = s.height;
            w = s.width;
        }
        Ok(())
    }

    /// Channels entering the encoder of level `k` (1-based).
    pub fn encoder_input_channels(&self, k: usize) -> usize {
        if k == 1 {
            self.image.channels
        } else {
            self.levels[k - 2].hidden_channels
        }
    }

    /// Channels the decoder of level `k` emits: pixels for level 1, the latent
    /// width of level `k - 1` otherwise.
    pub fn decoder_output_channels(&self, k: usize) -> usize {
        if k == 1 {
            self.image.channels
        } else {
            self.levels[k - 2].latent_channels
        }
    }

    /// The first `k` levels.
    pub fn truncated(&self, k: usize) -> Ladder {
        Ladder {
            image: self.image,
            levels: self.levels[..k].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb32() -> ImageSpec {
        ImageSpec {
            height: 32,
            width: 32,
            channels: 3,
        }
    }

    #[test]
    fn extents_halve_per_level() {
        let l = Ladder::from_channels(rgb32(), &[(32, 8), (64, 16)]).unwrap();
        assert_eq!((l.levels[0].height, l.levels[0].hidden_channels), (16, 32));
        assert_eq!((l.levels[1].height, l.levels[1].hidden_channels), (8, 64));
        assert_eq!(l.encoder_input_channels(2), 32);
        assert_eq!(l.decoder_output_channels(1), 3);
        assert_eq!(l.decoder_output_channels(2), 8);
    }

    #[test]
    fn invalid_ladders_are_rejected() {
        let err = |c: &[(usize, usize)]| Ladder::from_channels(rgb32(), c).unwrap_err().to_string();
        assert!(err(&[(32, 8), (32, 8)]).contains("must exceed"));
        assert!(err(&[(8, 8)]).contains("below hidden"));
        assert!(err(&[(6, 2)]).contains("multiple"));
        assert!(err(&[]).contains("at least one"));
        assert!(err(&[(8, 2), (16, 4), (32, 8), (64, 8), (128, 8), (256, 8)]).contains("odd"));
    }

    #[test]
    fn tampered_extents_fail_validation() {
        let mut l = Ladder::from_channels(rgb32(), &[(8, 4), (16, 8)]).unwrap();
        l.levels[1].height = 4;
        assert!(l.validate().unwrap_err().to_string().contains("level 2"));
    }
}

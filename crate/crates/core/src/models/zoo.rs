use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Residual block of two 3×3 convs.
    Basic,
    /// Single 3×3 conv + BN + ReLU.
    Plain,
}

/// A backbone stage after the stem. The first block carries the stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    /// Width of the stem, which is stage 1.
    pub stem: usize,
    pub stages: Vec<StageSpec>,
    pub block: BlockKind,
    pub classes: usize,
}

/// Every architecture name [`ArchSpec::named`] resolves.
pub const ZOO: [&str; 7] = [
    "tiny-resnet-T",
    "tiny-resnet-S",
    "tiny-vgg-T",
    "tiny-vgg-S",
    "resnet8x4",
    "resnet14x4",
    "resnet32x4",
];

const fn st(width: usize, blocks: usize, stride: usize) -> StageSpec {
    StageSpec { width, blocks, stride }
}

impl ArchSpec {
    /// Resolves a zoo name with three input channels.
    pub fn named(name: &str, classes: usize) -> Result<Self> {
        let cifar = |n: usize| (32, alloc::vec![st(64, n, 1), st(128, n, 2), st(256, n, 2)], BlockKind::Basic);
        let (stem, stages, block) = match name {
            "tiny-resnet-T" => (32, alloc::vec![st(64, 1, 2), st(128, 1, 2)], BlockKind::Basic),
            "tiny-resnet-S" => (16, alloc::vec![st(24, 1, 2), st(48, 1, 2)], BlockKind::Basic),
            "tiny-vgg-T" => (32, alloc::vec![st(64, 2, 2), st(128, 2, 2)], BlockKind::Plain),
            "tiny-vgg-S" => (16, alloc::vec![st(32, 1, 2), st(64, 2, 2)], BlockKind::Plain),
            "resnet8x4" => cifar(1),
            "resnet14x4" => cifar(2),
            "resnet32x4" => cifar(5),
            other => return Err(Error::UnknownArch(other.to_string())),
        };
        let spec = Self {
            name: name.to_string(),
            in_channels: 3,
            stem,
            stages,
            block,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn num_stages(&self) -> usize {
        1 + self.stages.len()
    }

    /// Output channel counts `C_1..C_N`.
    pub fn stage_channels(&self) -> Vec<usize> {
        core::iter::once(self.stem).chain(self.stages.iter().map(|s| s.width)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(alloc::format!("arch {}: {msg}", self.name)));
        if self.stages.is_empty() {
            return bad("at least two stages required");
        }
        if self.in_channels == 0 || self.stem == 0 || self.classes < 2 {
            return bad("zero channels or fewer than two classes");
        }
        if self.stages.iter().any(|s| s.width == 0 || s.blocks == 0 || s.stride == 0) {
            return bad("stage with zero width, blocks or stride");
        }
        Ok(())
    }

    /// Closed-form parameter count, buffers excluded.
    pub fn analytic_params(&self) -> usize {
        let conv3 = |i: usize, o: usize| 9 * i * o;
        let bn = |c: usize| 2 * c;
        let mut total = conv3(self.in_channels, self.stem) + bn(self.stem);
        let mut c = self.stem;
        for s in &self.stages {
            for b in 0..s.blocks {
                let (cin, stride) = if b == 0 { (c, s.stride) } else { (s.width, 1) };
                total += match self.block {
                    BlockKind::Plain => conv3(cin, s.width) + bn(s.width),
                    BlockKind::Basic => {
                        let proj = if stride != 1 || cin != s.width {
                            cin * s.width + bn(s.width)
                        } else {
                            0
                        };
                        conv3(cin, s.width) + conv3(s.width, s.width) + 2 * bn(s.width) + proj
                    }
                };
            }
            c = s.width;
        }
        total + c * self.classes + self.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::StagedModel;
    use crate::nn::{Group, Module};

    #[test]
    fn analytic_matches_enumeration_for_zoo() {
        for name in ZOO {
            let spec = ArchSpec::named(name, 100).unwrap();
            let m = StagedModel::<f32>::build(&spec, 0, "m", Group::Psi).unwrap();
            assert_eq!(spec.analytic_params(), m.param_count(), "{name}");
        }
    }

    #[test]
    fn tiny_teacher_hand_count() {
        // stem 3→32; block 32→64 s2 with projection; block 64→128 s2 with projection; fc 128→10.
        let stem = 864 + 64;
        let b2 = 32 * 64 * 9 + 64 * 64 * 9 + 2 * 128 + 32 * 64 + 128;
        let b3 = 64 * 128 * 9 + 128 * 128 * 9 + 2 * 256 + 64 * 128 + 256;
        let head = 128 * 10 + 10;
        let spec = ArchSpec::named("tiny-resnet-T", 10).unwrap();
        assert_eq!(spec.analytic_params(), stem + b2 + b3 + head);
    }

    #[test]
    fn student_is_four_to_eight_times_smaller() {
        for (t, s) in [("tiny-resnet-T", "tiny-resnet-S"), ("tiny-vgg-T", "tiny-vgg-S")] {
            let t = ArchSpec::named(t, 10).unwrap().analytic_params() as f64;
            let s = ArchSpec::named(s, 10).unwrap().analytic_params() as f64;
            let ratio = t / s;
            assert!((4.0..=8.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn resnet14x4_is_about_2_78m() {
        let p = ArchSpec::named("resnet14x4", 100).unwrap().analytic_params() as f64;
        assert!((p / 2.78e6 - 1.0).abs() < 0.01, "{p}");
    }
}

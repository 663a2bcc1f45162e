use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Architectural alternatives for the learning block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Question shortcut, one embedding per modality.
    A,
    /// Question shortcut, two-layer visual embedding. The reference model.
    B,
    /// Question shortcut, two-layer embeddings for both modalities.
    C,
    /// Like (b) but identity shortcuts after the first block.
    D,
    /// Like (b) plus a visual shortcut.
    E,
    /// (b) with every shortcut removed.
    Mn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shortcut {
    /// Learned linear map in every block.
    Linear,
    /// Linear map in the first block, identity afterwards.
    IdentityAfterFirst,
    /// No shortcut at all: the block output is the joint residual.
    Absent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    /// Nonlinear layers on the question side of the joint residual.
    pub question_depth: usize,
    /// Nonlinear layers on the visual side of the joint residual.
    pub visual_depth: usize,
    pub shortcut: Shortcut,
    /// Adds a projection of `v` to the first block's output and carries it
    /// through identity shortcuts in the following blocks.
    pub visual_shortcut: bool,
}

impl VariantSpec {
    pub fn has_shortcut(&self) -> bool {
        self.shortcut != Shortcut::Absent
    }

    /// Every registered variant's joint residual is mask ⊙ visual-embedding.
    pub fn has_factorable_residual(&self) -> bool {
        self.question_depth >= 1 && self.visual_depth >= 1
    }
}

impl Variant {
    pub const FIGURE: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::Mn];

    pub fn spec(self) -> VariantSpec {
        let b = VariantSpec {
            question_depth: 1,
            visual_depth: 2,
            shortcut: Shortcut::Linear,
            visual_shortcut: false,
        };
        match self {
            Variant::A => VariantSpec { visual_depth: 1, ..b },
            Variant::B => b,
            Variant::C => VariantSpec { question_depth: 2, ..b },
            Variant::D => VariantSpec {
                shortcut: Shortcut::IdentityAfterFirst,
                ..b
            },
            Variant::E => VariantSpec {
                visual_shortcut: true,
                ..b
            },
            Variant::Mn => VariantSpec {
                shortcut: Shortcut::Absent,
                ..b
            },
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::Mn => "mn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected a..e or mn)")))
    }
}

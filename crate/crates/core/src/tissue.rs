//! Tissue class codes used in label volumes.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// One of the eight label codes. Background is always code 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    /// Cerebellum.
    Cb = 1,
    /// Basal ganglia and thalami.
    Bgt = 2,
    /// Ventricular cerebrospinal fluid.
    Vcsf = 3,
    /// White matter.
    Wm = 4,
    /// Brain stem.
    Bs = 5,
    /// Cortical gray matter.
    Cgm = 6,
    /// Extracerebral cerebrospinal fluid.
    Ecsf = 7,
}

pub const NUM_CLASSES: usize = 8;

impl TissueClass {
    pub const ALL: [TissueClass; NUM_CLASSES] = [
        TissueClass::Background,
        TissueClass::Cb,
        TissueClass::Bgt,
        TissueClass::Vcsf,
        TissueClass::Wm,
        TissueClass::Bs,
        TissueClass::Cgm,
        TissueClass::Ecsf,
    ];

    pub const FOREGROUND: [TissueClass; NUM_CLASSES - 1] = [
        TissueClass::Cb,
        TissueClass::Bgt,
        TissueClass::Vcsf,
        TissueClass::Wm,
        TissueClass::Bs,
        TissueClass::Cgm,
        TissueClass::Ecsf,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, Error> {
        Self::ALL.get(code as usize).copied().ok_or(Error::InvalidLabel(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::Cb => "CB",
            TissueClass::Bgt => "BGT",
            TissueClass::Vcsf => "vCSF",
            TissueClass::Wm => "WM",
            TissueClass::Bs => "BS",
            TissueClass::Cgm => "cGM",
            TissueClass::Ecsf => "eCSF",
        }
    }

    /// Preview palette entry (RGB) used for label PPM export.
    pub fn color(self) -> [u8; 3] {
        match self {
            TissueClass::Background => [0, 0, 0],
            TissueClass::Cb => [230, 159, 0],
            TissueClass::Bgt => [86, 180, 233],
            TissueClass::Vcsf => [0, 114, 178],
            TissueClass::Wm => [240, 228, 66],
            TissueClass::Bs => [204, 121, 167],
            TissueClass::Cgm => [0, 158, 115],
            TissueClass::Ecsf => [213, 94, 0],
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TissueClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tissue class `{s}`")))
    }
}

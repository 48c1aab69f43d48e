//! Runtime classification of kernels into the three epoch-suitability
//! categories, driven by simulated profiles.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelClass {
    /// Short-running kernel.
    S,
    /// Long-running kernel with short-running CTAs.
    LS,
    /// Long-running kernel with long-running CTAs.
    LL,
}

impl fmt::Display for KernelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelClass::S => "S",
            KernelClass::LS => "LS",
            KernelClass::LL => "LL",
        })
    }
}

/// Cycle profile of an uninstrumented run.
#[derive(Debug, Clone, Copy, Default)]
pub struct KernelProfile {
    pub kernel_cycles: u64,
    pub mean_cta_cycles: u64,
    pub ctas: u64,
}

/// Threshold-based classification. Kernels below the threshold are short;
/// long kernels split on their mean per-CTA time. A kernel that launched
/// no CTAs is short by convention.
pub fn classify_kernel(profile: &KernelProfile, threshold_cycles: u64) -> KernelClass {
    if profile.ctas == 0 || profile.kernel_cycles < threshold_cycles {
        return KernelClass::S;
    }
    if profile.mean_cta_cycles < threshold_cycles {
        KernelClass::LS
    } else {
        KernelClass::LL
    }
}

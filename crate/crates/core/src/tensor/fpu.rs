//! Scoped flush-to-zero for training loops.
//!
//! Products of near-zero gradients underflow into subnormals, which are
//! orders of magnitude slower on x86. While a [`FlushDenormals`] guard lives,
//! subnormal results and inputs are treated as zero on the current thread.
//! On other architectures the guard does nothing.

/// Restores the previous floating-point control state when dropped.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod mxcsr {
    use std::arch::asm;

    /// Flush-to-zero (bit 15) and denormals-are-zero (bit 6).
    pub const FTZ_DAZ: u32 = 0x8040;

    pub fn read() -> u32 {
        let mut value: u32 = 0;
        // SAFETY: stores the 32-bit control register into a live local.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut value, options(nostack, preserves_flags)) };
        value
    }

    pub fn write(value: u32) {
        // SAFETY: `value` comes from `read` with only the FTZ/DAZ bits changed,
        // so no reserved bit is set and no exception is unmasked.
        unsafe {
            asm!("ldmxcsr [{}]", in(reg) &value, options(nostack, readonly, preserves_flags))
        };
    }
}

impl FlushDenormals {
    pub fn enter() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = mxcsr::read();
            mxcsr::write(saved | mxcsr::FTZ_DAZ);
            Self { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        mxcsr::write(self.saved);
    }
}

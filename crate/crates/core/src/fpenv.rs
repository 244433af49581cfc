//! Scoped flush-to-zero for the hot numerical paths.
//!
//! Training drives some activations and gradients into the subnormal range,
//! where x86 arithmetic slows down by two orders of magnitude. Inside a
//! [`FlushDenormals`] scope subnormal inputs and results are treated as zero.
//! The previous control state is restored on drop.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    fn read() -> u32 {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr writes four bytes to a valid, aligned u32.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags)) };
        csr
    }

    fn write(csr: u32) {
        // SAFETY: only the FTZ/DAZ bits differ from a value read from the
        // register; both are defined on every SSE2 processor.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly, preserves_flags)) };
    }

    pub struct FlushDenormals {
        saved: u32,
    }

    impl FlushDenormals {
        pub fn new() -> Self {
            let saved = read();
            write(saved | FTZ | DAZ);
            Self { saved }
        }
    }

    impl Drop for FlushDenormals {
        fn drop(&mut self) {
            write(self.saved);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub struct FlushDenormals;

    impl FlushDenormals {
        pub fn new() -> Self {
            FlushDenormals
        }
    }
}

pub use imp::FlushDenormals;

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[inline(never)]
    fn halve(x: f32) -> f32 {
        std::hint::black_box(x) * std::hint::black_box(0.5)
    }

    #[test]
    fn subnormals_flush_inside_the_scope_only() {
        {
            let _g = FlushDenormals::new();
            if cfg!(target_arch = "x86_64") {
                assert_eq!(halve(f32::MIN_POSITIVE), 0.0);
            }
        }
        assert!(halve(f32::MIN_POSITIVE) > 0.0);
    }
}

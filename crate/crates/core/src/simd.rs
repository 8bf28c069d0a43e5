//! Runtime CPU feature dispatch for the matvec kernels.
//!
//! Kernel bodies are plain loops; this compiles a second copy with AVX2
//! enabled so LLVM can widen them. FMA stays off, so both copies perform the
//! same operations in the same order and produce identical results.

/// Defines `fn $name(..)` that runs `$body` from an AVX2-enabled copy when the
/// CPU supports it. Helpers called from `$body` should be `#[inline(always)]`.
macro_rules! avx2_dispatch {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) {
            #[inline(always)]
            fn imp($($arg: $ty),*) $body

            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) {
                    imp($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: AVX2 support was checked on this CPU.
                    return unsafe { avx2($($arg),*) };
                }
            }
            imp($($arg),*)
        }
    };
}

pub(crate) use avx2_dispatch;

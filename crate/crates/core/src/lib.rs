pub mod autodiff;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod geometry;
pub mod gpc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stage1;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Stops glibc from handing the heap top back to the OS after every graph
/// is dropped; training otherwise spends about a third of its time in page
/// faults. Idempotent, and a no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            extern "C" {
                fn mallopt(param: i32, value: i32) -> i32;
            }
            const M_TRIM_THRESHOLD: i32 = -1;
            // SAFETY: mallopt only adjusts allocator tunables.
            unsafe {
                mallopt(M_TRIM_THRESHOLD, 256 << 20);
            }
        });
    }
}

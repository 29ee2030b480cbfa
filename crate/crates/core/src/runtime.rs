//! Process-level settings for long training runs.

/// Largest mmap threshold glibc accepts on 64-bit targets.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
const MMAP_THRESHOLD_MAX: i32 = 32 << 20;

/// Keep large freed blocks in the heap instead of returning them to the OS.
///
/// A training step allocates and frees the same multi-megabyte buffers over
/// and over. Under glibc's defaults each of them becomes a fresh mapping
/// whose pages fault in on first touch. Call once at start-up; a no-op on
/// other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, MMAP_THRESHOLD_MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

//! Reverse-mode automatic differentiation on an eagerly evaluated tape.
//!
//! Backward passes are themselves recorded, so a gradient can be fed back into
//! the graph and differentiated again (Hessian-vector products through an SGD
//! step, for example).

mod check;
mod conv;
mod graph;
mod ops;
mod tensor;

pub use check::{finite_diff_grad, relative_error};
pub use conv::Conv2d;
pub use graph::{Graph, Var, PAD};
pub use ops::{OpAttrs, OpKind};
pub use tensor::Tensor;


/// Keeps freed tape buffers in the process heap so the next step reuses them
/// instead of faulting in fresh pages. Idempotent; a no-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator thresholds.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            }
        });
    }
}

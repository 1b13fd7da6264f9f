//! Alignment objectives: hard DTW with exact gradient and brute-force
//! oracle, CTC forward-backward with its own oracle, and cross-entropy.

mod ctc;
mod dtw;
mod xent;

pub use ctc::{ctc_backward, ctc_bruteforce, ctc_forward, ctc_min_frames, CtcSetup};
pub use dtw::{dtw_backward, dtw_bruteforce, dtw_forward, DtwResult, WarpingPath};
pub use xent::cross_entropy;

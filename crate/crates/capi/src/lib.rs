//! C ABI surface. Populated after the core library stabilizes.

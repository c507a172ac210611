//! Float math routed through `libm` so the crate builds without `std`.
//!
//! Using one implementation everywhere also keeps results bit-identical
//! across platforms, which the determinism guarantees rely on.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}
